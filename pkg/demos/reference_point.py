"""Linear-Taylor dispatch around the pre- and post-contingency operating points.

Prints each machine's exact output as a percentage of its limit; values past
100 % are upper-limit violations hidden by the first-order power rows.
"""

from gridrelief import RunConfig, bundled_case, run_scenario

reports = {}
for ref in ("pre", "post"):
    cfg = RunConfig(str(bundled_case()), "linear-taylor", load_scale=1.15, contingency_bus=24, reference=ref)
    reports[ref] = run_scenario(cfg, write=False)

print(f"{'bus':>4s}{'pre %':>9s}{'post %':>9s}")
pre, post = (reports[r].metrics.machine_output_percent for r in ("pre", "post"))
for bus in pre:
    flag = "  <- over" if max(pre[bus], post[bus]) > 100 + 1e-4 else ""
    print(f"{bus:4d}{pre[bus]:9.2f}{post[bus]:9.2f}{flag}")
for ref, r in reports.items():
    over = [v.element for v in r.violations.of_kind("p-upper") if v.element.startswith("machine")]
    print(f"{ref}: machine p-upper violations at {over or 'none'}, shed {r.metrics.total_shed_p_percent:.2f}%")
