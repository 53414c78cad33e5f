#!/usr/bin/env python3
"""The evaluation stack: label volumes, the three nested regions, overlap
metrics, and the 95th-percentile surface distance."""

import numpy as np

from voxseg import (
    LabelVolume,
    dice,
    evaluate_case,
    hausdorff95,
    region_mask,
    sensitivity,
    specificity,
)

truth = np.zeros((12, 12, 12), dtype=np.int64)
truth[3:9, 3:9, 3:9] = 2          # edema shell
truth[4:8, 4:8, 4:8] = 4          # enhancing ring
truth[5:7, 5:7, 5:7] = 1          # necrotic core

# a prediction that misses one edema face and fattens the necrotic core
# by one layer at the expense of the enhancing ring
pred = truth.copy()
pred[3, 3:9, 3:9] = 0
pred[4:7, 4:7, 4:7] = np.where(pred[4:7, 4:7, 4:7] == 4, 1, pred[4:7, 4:7, 4:7])

t = LabelVolume(truth, spacing=(1.0, 1.0, 1.0))
p = LabelVolume(pred, spacing=(1.0, 1.0, 1.0))

print(f"{'region':>6} {'dice':>8} {'sens':>8} {'spec':>8} {'hd95':>8}")
for region in ("ET", "WT", "TC"):
    pm, tm = region_mask(p, region), region_mask(t, region)
    print(f"{region:>6} {dice(pm, tm):>8.4f} {sensitivity(pm, tm):>8.4f} "
          f"{specificity(pm, tm):>8.4f} {hausdorff95(pm, tm, t.spacing):>8.4f}")

# evaluate_case bundles the same numbers into report rows
rows = evaluate_case(p, t, case_id="demo")
for row in rows:
    print(row.case_id, row.region, f"dice={row.dice:.4f}",
          f"p1={row.p1}", f"t1={row.t1}")

# anisotropic spacing stretches surface distances along that axis
wide = (2.5, 1.0, 1.0)
print("hd95 with 2.5mm slices:",
      hausdorff95(region_mask(p, "WT"), region_mask(t, "WT"), wide))
