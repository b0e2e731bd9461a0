"""Walkthrough: the evaluation toolkit on data you can verify by hand.

Covers the confusion-matrix IoU family, the two-class mean identity, the
proxy domain-distance estimator on synthetic feature clouds, its triangle
inequality against a reference distribution, and the error-bound fragment.

Run:  python demos/04_metrics_and_gap.py
"""

import numpy as np

from adaseg.evalkit import (bound_report, confusion, domain_gap_estimate, iou_per_class,
                            miou)

rng = np.random.default_rng(1)

print("== IoU from a confusion matrix ==")
gt = np.zeros((8, 8), dtype=int)
gt[2:6, 2:6] = 1
pred = np.zeros((8, 8), dtype=int)
pred[3:7, 3:7] = 1   # overlaps 9 of 16 lesion pixels
cm = confusion(pred, gt, 2)
print("counts:\n", cm.counts)
ious = iou_per_class(cm)
print(f"background IoU={ious[0]:.4f}  lesion IoU={ious[1]:.4f}  mIoU={miou(cm):.4f}")
print("two-class mean identity:", np.isclose(miou(cm), ious.mean()))

print("\n== published-style row: mean of per-class IoUs ==")
print(f"miou([0.7447, 0.3265]) = {miou([0.7447, 0.3265]) * 100:.2f}")
print(f"miou([0.8548, 0.4367]) = {miou([0.8548, 0.4367]) * 100:.2f}")

print("\n== proxy distance between feature clouds ==")
same = rng.normal(size=(60, 8))
gap_same = domain_gap_estimate(same, same.copy())
print(f"identical clouds:      d_hat={gap_same.d_hat:.3f} (chance-level classifier)")
near = rng.normal(size=(60, 8)) + 0.4
gap_near = domain_gap_estimate(rng.normal(size=(60, 8)), near)
print(f"slightly shifted:      d_hat={gap_near.d_hat:.3f}")
far_s = rng.normal(size=(60, 8)); far_s[:, 0] += 2
far_t = rng.normal(size=(60, 8)); far_t[:, 0] -= 2
gap_far = domain_gap_estimate(far_s, far_t)
print(f"4-sigma separated:     d_hat={gap_far.d_hat:.3f} (near the maximum of 2)")

print("\n== triangle inequality against a reference cloud ==")
g = rng.normal(size=(60, 8))
d_st = domain_gap_estimate(far_s, far_t).d_hat
d_sg = domain_gap_estimate(far_s, g).d_hat
d_tg = domain_gap_estimate(far_t, g).d_hat
print(f"d(s,t)={d_st:.3f} <= d(s,g)+d(t,g)={d_sg + d_tg:.3f} -> {d_st <= d_sg + d_tg + 0.15}")

print("\n== target-error bound fragment ==")
report = bound_report(source_error=0.04, gap=gap_far)
for key, value in report.items():
    print(f"  {key}: {value}")
