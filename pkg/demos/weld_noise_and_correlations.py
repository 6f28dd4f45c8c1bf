"""Noise floor of the weld objectives and how they co-vary.

Runs the target parameters with fresh seeds to measure the aleatory floor
of each KL objective, then a short calibration whose trials feed the
pairwise R^2 matrix between the eleven objectives.

    python demos/weld_noise_and_correlations.py [out_dir] [replicates] [trials]
"""

import dataclasses
import sys

import numpy as np

from microcal import campaign, descriptors

out_dir = sys.argv[1] if len(sys.argv) > 1 else "weld_run"
reps = int(sys.argv[2]) if len(sys.argv) > 2 else 10
trials = int(sys.argv[3]) if len(sys.argv) > 3 else 40

config = dataclasses.replace(campaign.CampaignConfig.defaults("weld"), max_trials=trials,
                             replicates_for_noise=reps)
result = campaign.run_campaign(config, out_dir=out_dir, noise=True)

print("objective          mean       variance")
for d, m, v in zip(result.noise.descriptor_ids, result.noise.mean, result.noise.variance):
    print(f"y{d:<2d} {descriptors.DESCRIPTOR_NAMES[d]:14s} {m:.5f}  {v:.3e}")
print(f"total              {result.noise.total_mean:.5f}  {result.noise.total_variance:.3e}")

np.set_printoptions(precision=2, suppress=True, linewidth=120)
print("\nR^2 between objectives:")
print(result.correlations)
print(f"\nbest {result.summary['bestX']} y={result.summary['bestYScalar']:.4f}")
