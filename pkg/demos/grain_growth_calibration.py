"""Recover the temperature of a grain-growth microstructure.

A target is grown at kBTs = 0.70 on a 256x256 lattice.  The calibration
only sees its grain-area distribution and searches kBTs in [0.25, 0.95],
starting from the three points 0.45, 0.25 and 0.95.

    python demos/grain_growth_calibration.py [out_dir]
"""

import sys

import numpy as np

from microcal import campaign

out_dir = sys.argv[1] if len(sys.argv) > 1 else "gg_run"
config = campaign.CampaignConfig.defaults("grain_growth")
result = campaign.run_campaign(config, out_dir=out_dir)

done = [t for t in result.trials if t.status == "completed"]
best_so_far = np.minimum.accumulate([t.y_scalar for t in done])
print("trial  kBTs     KL(area)  best")
for t, b in zip(done, best_so_far):
    print(f"{t.completion_index:5d}  {t.x[0]:.4f}  {t.y_scalar:.5f}  {b:.5f}")
print(f"\nrecovered kBTs = {result.best.x[0]:.4f} (target 0.70), artifacts in {out_dir}/")
