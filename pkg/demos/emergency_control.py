"""Solve the bus-24 emergency on RTS-24 at 115 % load with all four formulations.

    python demos/emergency_control.py [--sides 32]
"""

import argparse
from dataclasses import replace

from gridrelief import FORMULATIONS, RunConfig, bundled_case, compare_formulations

parser = argparse.ArgumentParser()
parser.add_argument("--sides", type=int, default=32)
args = parser.parse_args()

base = RunConfig(str(bundled_case()), FORMULATIONS[0], load_scale=1.15, contingency_bus=24,
                 m_i=args.sides, m_v=args.sides, n_i=args.sides)
table = compare_formulations([replace(base, formulation=k) for k in FORMULATIONS], write=False)

print(f"{'formulation':15s}{'objective':>12s}{'shed P %':>10s}{'redisp P %':>12s}{'violations':>12s}{'time s':>8s}")
for r in table.reports:
    m = r.metrics
    print(f"{r.kind:15s}{r.objective:12.2f}{m.total_shed_p_percent:10.2f}{m.total_redispatch_p_percent:12.2f}"
          f"{len(r.violations):12d}{r.wall_time:8.3f}")

# where the robust kinds shed
robust = next(r for r in table.reports if r.kind == "linear-robust")
worst = sorted(robust.metrics.bus_shed_percent.items(), key=lambda kv: -kv[1])[:5]
print("\nlinear-robust, largest per-bus shed:", ", ".join(f"bus {b}: {p:.1f}%" for b, p in worst))
