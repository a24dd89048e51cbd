"""Compare the four topologies under three search strategies at a glance.

A desk-sized run: 300 peers, two seeds, 2000 queries. Success rate and
messages per query are printed side by side for ttl 1..4.

Run:  python3 demos/02_search_comparison.py
"""
from mposim.harness import ExperimentConfig, run_experiment

cfg = ExperimentConfig(n=300, seeds=[1, 2], ttls=[1, 2, 3, 4], n_queries=2000)
report = run_experiment(cfg, include_churn=False)

for alg in cfg.algorithms:
    print(f"\n{alg}")
    print(f"{'topology':<11}" + "".join(f"   ttl{t} succ   msgs" for t in cfg.ttls))
    for name, t in report["topologies"].items():
        cells = t["search"][alg]
        row = "".join(f"  {cells[str(k)]['success_rate']['mean']:10.3f} {cells[str(k)]['mean_messages']['mean']:6.1f}"
                      for k in cfg.ttls)
        print(f"{name:<11}{row}")

print("\nlargest degree per topology:")
for name, t in report["topologies"].items():
    print(f"  {name:<11} {max(t['max_degree']['values'])}")
