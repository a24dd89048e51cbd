"""Build a small overlay, look inside one AS, then knock out its whole IC trio.

Run:  python3 demos/01_overlay_lifecycle.py
"""
from mposim.harness import ExperimentConfig, build_mpo, make_catalog

cfg = ExperimentConfig(n=300, seeds=[7])
catalog = make_catalog(cfg, seed=7)
ov = build_mpo(cfg, 7, catalog)

rep = ov.check_structure()
print(f"{len(ov.peers)} peers in {rep.as_count} ASs over {rep.layers} layers")
print(f"max degree {rep.max_degree}, bound d+4 = {cfg.mpo_d + 4}, violations: {rep.violations}")

# pick the biggest AS that sits below another one, so a level backup exists
a = max((x for x in ov.ordered_ases() if ov.upper_level(x) is not None),
        key=lambda x: (len(x.members), -x.slot))
print(f"\nAS {a.uid} at lattice slot {ov.position(a.slot)} has {len(a.members)} members")
for role, key in a.ics.items():
    print(f"  {role:<6} -> peer {key}  (SR {ov.peers[key].sr:.2f})")
print(f"  plain members: {a.nns()}")

# crash every IC at once; the level backup held upstairs brings the index back
before = dict(a.index)
report = ov.crash(set(a.ics.values()))
print("\nafter crashing the three ICs:")
for act in report.actions:
    print(f"  AS {act['as']}: lost {act['roles_lost']}, index restored from {act['restored_from'][0]}")
print(f"  new ICs: {a.ics}")
lost = set(before) - set(a.index)
print(f"  index entries kept: {len(a.index)} (lost only the crashed peers: {sorted(lost)})")
print(f"  structure ok: {ov.check_structure().ok}")
