"""
The five control regimes, side by side
======================================

Reference training, extended reference, random-subset pretraining, and the
two facilitated recipes (random vs replicated head), all on one seeded
synthetic dataset. At this scale a single run per regime is noisy; the
acceptance suite repeats the comparison over five seeds and compares
medians.
"""

from hiercurric import benchmark as bm
from hiercurric import curriculum as cu

data, bundle = bm.make_bundle(seed=5)

# two non-basic leaf categories serve as the disjoint pretrain subset
pretrain = tuple(sorted(bundle.graph.leaf_set)[:2])
regimes = bm.all_regimes(seed=5, pretrain_categories=pretrain)

print(f"{'regime':28s} {'phase A top-1':>14s} {'phase B top-1':>14s}")
for name, regime in regimes.items():
    _, report = cu.run_regime(regime, bundle)
    a = report.final.get("phase_a.top1")
    b = report.final["phase_b.top1"]
    a_str = f"{a:.3f}" if a is not None else "-"
    print(f"{name:28s} {a_str:>14s} {b:>14.3f}")
