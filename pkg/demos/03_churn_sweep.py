"""What happens when a chunk of the network vanishes at once.

Crash a growing fraction of peers, let MPO run its recovery, and query the
survivors. The square-root graph has no repair step, so it is a useful
contrast.

Run:  python3 demos/03_churn_sweep.py
"""
from mposim.harness import ExperimentConfig, churn_experiment, emit_report

cfg = ExperimentConfig(n=300, seeds=[1, 2], topologies=["mpo", "squareroot"],
                       churn_fractions=[0.0, 0.2, 0.4, 0.6], churn_queries=1500)
report = churn_experiment(cfg)

print(f"{'topology':<11}{'crashed':>8}{'success':>9}{'msgs/query':>12}{'violations':>11}")
for name, by_f in report["churn"].items():
    for f in sorted(by_f, key=float):
        row = by_f[f]
        print(f"{name:<11}{float(f):>8.1f}{row['success_rate']['mean']:>9.3f}"
              f"{row['mean_messages']['mean']:>12.2f}{row['violations']:>11}")

# the same numbers as CSV (fig9_churn.csv) plus the full JSON report
for p in emit_report(report, "demo_out"):
    print("wrote", p)
