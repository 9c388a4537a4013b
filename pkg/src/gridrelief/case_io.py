"""MATPOWER case ingestion, run configuration and report output."""

from __future__ import annotations

import csv
import json
import math
import re
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .network import DEMAND_Q_RANGES, MACHINE_PMIN_MODES, Branch, Bus, Demand, Machine, Network, NetworkError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

FORMULATIONS = ("convex-taylor", "convex-robust", "linear-taylor", "linear-robust")

# minimum column counts of the version 2 tables
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}


class CaseParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CaseFormatError(CaseParseError):
    """Malformed table or unsupported dialect."""


class CaseReferenceError(CaseParseError):
    """A row references a bus that does not exist."""


class ConfigError(ValueError):
    pass


def bundled_case(name: str = "case24_ieee_rts") -> Path:
    """Path of a case file shipped with the package."""
    ref = resources.files("gridrelief") / "data" / f"{name}.m"
    return Path(str(ref))


def resolve_case_path(case: str | Path, base_dir: Path | None = None) -> Path:
    p = Path(case)
    if not p.is_absolute() and base_dir is not None and (base_dir / p).exists():
        return base_dir / p
    if p.exists():
        return p
    if p.suffix in ("", ".m") and bundled_case(p.stem).exists():
        return bundled_case(p.stem)
    raise FileNotFoundError(f"case file not found: {case}")


# --------------------------------------------------------------------------
# MATPOWER parsing

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)


def _strip_comment(line: str) -> str:
    # '%' starts a comment outside of quoted strings
    out = []
    quoted = False
    for ch in line:
        if ch == "'":
            quoted = not quoted
        if ch == "%" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _parse_tables(text: str) -> tuple[dict, dict]:
    """Return ({name: [(line, [floats])]}, {scalar_name: (line, raw)})."""
    clean = "\n".join(_strip_comment(ln) for ln in text.splitlines())
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    for m in _MATRIX_RE.finditer(clean):
        name = m.group(1)
        start_line = clean.count("\n", 0, m.start(2)) + 1
        rows = []
        body = m.group(2)
        offset = 0
        for chunk in re.split(r"(;|\n)", body):
            if chunk == "\n":
                offset += 1
                continue
            if chunk == ";" or not chunk.strip():
                continue
            try:
                vals = [float(tok) for tok in chunk.replace(",", " ").split()]
            except ValueError:
                raise CaseFormatError(f"non-numeric entry in mpc.{name}", start_line + offset) from None
            rows.append((start_line + offset, vals))
        tables[name] = rows
    scalars = {}
    for m in re.finditer(r"mpc\.(\w+)\s*=\s*([^\[\n;]+);", clean):
        scalars[m.group(1)] = (clean.count("\n", 0, m.start()) + 1, m.group(2).strip())
    return tables, scalars


@dataclass(frozen=True)
class CaseDocument:
    base_mva: float
    version: str
    bus: list
    gen: list
    branch: list
    gencost: list = field(default_factory=list)


def read_case_document(text: str) -> CaseDocument:
    tables, scalars = _parse_tables(text)
    if "version" not in scalars:
        raise CaseFormatError("missing mpc.version")
    vline, vraw = scalars["version"]
    version = vraw.strip("'\"")
    if version != "2":
        raise CaseFormatError(f"unsupported case format version {version!r}", vline)
    if "baseMVA" not in scalars:
        raise CaseFormatError("missing mpc.baseMVA")
    bline, braw = scalars["baseMVA"]
    try:
        base = float(braw)
    except ValueError:
        raise CaseFormatError("baseMVA is not a number", bline) from None
    for name in ("bus", "gen", "branch"):
        if name not in tables:
            raise CaseFormatError(f"missing mpc.{name} table")
        for line, row in tables[name]:
            if len(row) < _MIN_COLS[name]:
                raise CaseFormatError(
                    f"mpc.{name} row has {len(row)} columns, expected at least {_MIN_COLS[name]}", line
                )
    return CaseDocument(base, version, tables["bus"], tables["gen"], tables["branch"], tables.get("gencost", []))


def _aggregate_machines(base: float, rows: list[tuple[int, list[float]]]) -> Machine:
    # sum in MW and convert once, so written cases parse back to identical values
    raw = [r for _, r in rows]
    tot = lambda col: sum(r[col] for r in raw)  # noqa: E731
    return Machine(
        bus=int(raw[0][0]), pmin=tot(9) / base, pmax=tot(8) / base, qmin=tot(4) / base,
        qmax=tot(3) / base, p0=tot(1) / base, q0=tot(2) / base, vset=raw[0][5],
    )


def network_from_document(doc: CaseDocument, name: str = "") -> Network:
    base = doc.base_mva
    buses, demands = [], []
    bus_ids = set()
    for line, row in doc.bus:
        bid, btype = int(row[0]), int(row[1])
        if bid in bus_ids:
            raise CaseFormatError(f"duplicate bus {bid}", line)
        bus_ids.add(bid)
        try:
            buses.append(Bus(bid, vmin=row[12], vmax=row[11], is_slack=btype == 3,
                             gs=row[4], bs=row[5]))
        except NetworkError as exc:
            raise CaseFormatError(str(exc), line) from None
        if row[2] != 0.0 or row[3] != 0.0:
            demands.append(Demand(bid, row[2] / base, row[3] / base))

    by_bus: dict[int, list] = {}
    for line, row in doc.gen:
        bid = int(row[0])
        if bid not in bus_ids:
            raise CaseReferenceError(f"generator at unknown bus {bid}", line)
        if row[7] <= 0:
            continue
        by_bus.setdefault(bid, []).append((line, row))
    machines = []
    for _, rows in sorted(by_bus.items()):
        try:
            machines.append(_aggregate_machines(base, rows))
        except NetworkError as exc:
            raise CaseFormatError(str(exc), rows[0][0]) from None

    branches = []
    for k, (line, row) in enumerate(doc.branch):
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in bus_ids:
                raise CaseReferenceError(f"branch references unknown bus {end}", line)
        rate = row[5]
        try:
            branches.append(Branch(
                id=k + 1, from_bus=f, to_bus=t, r=row[2], x=row[3], b_shunt=row[4],
                tap=row[8] if row[8] != 0.0 else 1.0, shift=math.radians(row[9]),
                imax=rate / base if rate > 0 else math.inf, in_service=row[10] > 0,
            ))
        except NetworkError as exc:
            raise CaseFormatError(str(exc), line) from None
    try:
        return Network(tuple(buses), tuple(branches), tuple(machines), tuple(demands), base, name=name)
    except NetworkError as exc:
        raise CaseReferenceError(str(exc)) from None


def parse_matpower_case(text: str, name: str = "") -> Network:
    return network_from_document(read_case_document(text), name=name)


def load_case(path: str | Path) -> Network:
    path = Path(path)
    return parse_matpower_case(path.read_text(), name=path.stem)


def _scaled(x: float, base: float) -> str:
    """Text for x*base that parses and divides back to exactly x."""
    if math.isinf(x):
        return "0"
    y = x * base
    for _ in range(64):
        if float(repr(y)) / base == x:
            return repr(y)
        y = math.nextafter(y, math.inf if y / base < x else -math.inf)
    return repr(x * base)


def write_matpower_case(network: Network) -> str:
    base = network.base_mva
    lines = [f"function mpc = {network.name or 'case'}", "mpc.version = '2';", f"mpc.baseMVA = {base!r};", "",
             "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin", "mpc.bus = ["]
    for b in network.buses:
        d = network.demand_at.get(b.id)
        btype = 3 if b.is_slack else (2 if b.id in network.machine_at else 1)
        pd = _scaled(d.p0, base) if d else "0"
        qd = _scaled(d.q0, base) if d else "0"
        lines.append(f"\t{b.id}\t{btype}\t{pd}\t{qd}\t{b.gs!r}\t{b.bs!r}\t1\t1\t0\t0\t1\t{b.vmax!r}\t{b.vmin!r};")
    lines += ["];", "", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin", "mpc.gen = ["]
    for m in network.machines:
        vals = [str(m.bus), _scaled(m.p0, base), _scaled(m.q0, base), _scaled(m.qmax, base),
                _scaled(m.qmin, base), repr(m.vset), repr(base), "1", _scaled(m.pmax, base), _scaled(m.pmin, base)]
        lines.append("\t" + "\t".join(vals) + ";")
    lines += ["];", "", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus", "mpc.branch = ["]
    for br in network.branches:
        shift = math.degrees(br.shift)
        for _ in range(64):
            if math.radians(shift) == br.shift:
                break
            shift = math.nextafter(shift, math.inf if math.radians(shift) < br.shift else -math.inf)
        vals = [str(br.from_bus), str(br.to_bus), repr(br.r), repr(br.x), repr(br.b_shunt),
                _scaled(br.imax, base), "0", "0", repr(br.tap), repr(shift), "1" if br.in_service else "0"]
        lines.append("\t" + "\t".join(vals) + ";")
    lines += ["];", ""]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# run configuration

@dataclass(frozen=True)
class Costs:
    shed_p: float = 1000.0
    shed_q: float = 100.0
    gen_p: float = 10.0
    gen_q: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    case_path: str
    formulation: str = "linear-taylor"
    load_scale: float = 1.0
    contingency_bus: int | None = None
    contingency_branches: tuple[int, ...] = ()
    reference: str = "post"
    m_i: int = 32
    m_v: int = 32
    n_i: int = 32
    objective: str = "deviation"
    robust_form: str = "facets"
    costs: Costs = Costs()
    solver_tol: float = 1e-12
    pf_tol: float = 1e-10
    pf_max_iter: int = 20
    violation_tol: float = 1e-6
    output_dir: str | None = None
    machine_pmin: str = "zero"
    demand_q: str = "symmetric"
    balance_dispatch: bool = True

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ConfigError(f"unknown formulation {self.formulation!r}; expected one of {FORMULATIONS}")
        if self.reference not in ("pre", "post"):
            raise ConfigError(f"reference must be 'pre' or 'post', got {self.reference!r}")
        if self.objective not in ("deviation", "literal"):
            raise ConfigError(f"objective must be 'deviation' or 'literal', got {self.objective!r}")
        if self.robust_form not in ("facets", "corners"):
            raise ConfigError(f"robust_form must be 'facets' or 'corners', got {self.robust_form!r}")
        if self.m_i < 3 or self.n_i < 3 or self.m_v < 1:
            raise ConfigError("polygon sides need m_i >= 3, n_i >= 3, m_v >= 1")
        if not self.load_scale > 0:
            raise ConfigError("load_scale must be positive")
        if self.machine_pmin not in MACHINE_PMIN_MODES:
            raise ConfigError(f"limits.machine_pmin must be one of {MACHINE_PMIN_MODES}")
        if self.demand_q not in DEMAND_Q_RANGES:
            raise ConfigError(f"limits.demand_q must be one of {DEMAND_Q_RANGES}")
        if not (self.solver_tol > 0 and self.pf_tol > 0 and self.violation_tol > 0):
            raise ConfigError("tolerances must be positive")

    @property
    def scenario_key(self) -> tuple:
        """Everything except the formulation kind."""
        return (self.case_path, self.load_scale, self.contingency_bus, self.contingency_branches,
                self.reference, self.machine_pmin, self.demand_q, self.balance_dispatch)


_CONFIG_KEYS = {
    "case", "formulation", "formulations", "load_scale", "contingency", "contingency_bus",
    "contingency_branches", "reference", "m_i", "m_v", "n_i", "sides", "objective", "robust_form",
    "costs", "solver", "powerflow", "output", "violation_tol", "limits", "balance_dispatch",
}


def load_run_configs(text: str, base_dir: str | Path | None = None) -> list[RunConfig]:
    """Parse a TOML run configuration; one RunConfig per listed formulation."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "case" not in doc:
        raise ConfigError("config must name a case file ('case = ...')")
    case = str(doc["case"])
    if base_dir is not None and not Path(case).is_absolute() and (Path(base_dir) / case).exists():
        case = str(Path(base_dir) / case)

    kinds = doc.get("formulations", doc.get("formulation", "linear-taylor"))
    if isinstance(kinds, str):
        kinds = [kinds]
    if kinds == ["all"]:
        kinds = list(FORMULATIONS)

    cont = doc.get("contingency", {})
    if not isinstance(cont, dict):
        cont = {"bus": cont}
    cbus = doc.get("contingency_bus", cont.get("bus"))
    cbranches = tuple(doc.get("contingency_branches", cont.get("branches", ())))

    sides = doc.get("sides")
    solver = doc.get("solver", {})
    pf = doc.get("powerflow", {})
    out = doc.get("output", {})
    limits = doc.get("limits", {})
    try:
        costs = Costs(**doc.get("costs", {}))
    except TypeError as exc:
        raise ConfigError(f"bad [costs] table: {exc}") from None
    common = dict(
        case_path=case,
        load_scale=float(doc.get("load_scale", 1.0)),
        contingency_bus=int(cbus) if cbus is not None else None,
        contingency_branches=cbranches,
        reference=doc.get("reference", "post"),
        m_i=int(doc.get("m_i", sides or 32)),
        m_v=int(doc.get("m_v", sides or 32)),
        n_i=int(doc.get("n_i", sides or 32)),
        objective=doc.get("objective", "deviation"),
        robust_form=doc.get("robust_form", "facets"),
        costs=costs,
        solver_tol=float(solver.get("tol", 1e-12)),
        pf_tol=float(pf.get("tol", 1e-10)),
        pf_max_iter=int(pf.get("max_iter", 20)),
        violation_tol=float(doc.get("violation_tol", 1e-6)),
        output_dir=out.get("dir"),
        machine_pmin=limits.get("machine_pmin", "zero"),
        demand_q=limits.get("demand_q", "symmetric"),
        balance_dispatch=bool(doc.get("balance_dispatch", True)),
    )
    return [RunConfig(formulation=k, **common) for k in kinds]


def load_run_config(text: str, base_dir: str | Path | None = None) -> RunConfig:
    configs = load_run_configs(text, base_dir)
    if len(configs) != 1:
        raise ConfigError(f"config names {len(configs)} formulations; use load_run_configs")
    return configs[0]


# --------------------------------------------------------------------------
# reports

def report_json(report) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_state_report(report, path: str | Path) -> tuple[Path, Path, Path]:
    """Write ``<path>.json`` plus per-bus and per-machine CSV companions."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".json" else path
    stem.parent.mkdir(parents=True, exist_ok=True)
    jpath = stem.with_suffix(".json")
    jpath.write_text(report_json(report))
    bpath = stem.parent / f"{stem.name}_buses.csv"
    mpath = stem.parent / f"{stem.name}_machines.csv"
    for p, rows in ((bpath, report.bus_rows()), (mpath, report.machine_rows())):
        with p.open("w", newline="") as fh:
            if rows:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
    return jpath, bpath, mpath


def with_costs(network: Network, costs: Costs) -> Network:
    """Stamp the emergency-control cost coefficients onto machines and demands."""
    machines = tuple(replace(m, cost_p=costs.gen_p, cost_q=costs.gen_q) for m in network.machines)
    demands = tuple(replace(d, cost_shed_p=costs.shed_p, cost_shed_q=costs.shed_q) for d in network.demands)
    return replace(network, machines=machines, demands=demands)
