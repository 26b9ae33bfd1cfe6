"""Two-pass pseudo-label mining on one pair, printing the inlier ratio after each stage.

    python3 demos/mining_walkthrough.py [seed]
"""

from __future__ import annotations

import sys

from anchorreg.features import ProjectionHead, extract_descriptors
from anchorreg.fgcm import MiningConfig, run_mining
from anchorreg.geometry import SyntheticPairSpec, make_synthetic_pair, voxel_downsample
from anchorreg.metrics import inlier_ratio, rre, rte
from anchorreg.scenes import synthetic_scan


def main(seed: int = 0) -> None:
    spec = SyntheticPairSpec(overlap_target=0.5, noise_sigma=0.01, pose_magnitude=(30.0, 10.0))
    P0, Q0, T = make_synthetic_pair(synthetic_scan(seed), spec, seed)
    P, Q = voxel_downsample(P0, 0.3), voxel_downsample(Q0, 0.3)
    res = run_mining(P, Q, extract_descriptors(P), extract_descriptors(Q), ProjectionHead.initial(33, 16, seed), MiningConfig())

    def ir(c):
        return inlier_ratio(c, P, Q, T)

    if res.pass1 is not None:
        print(f"seed proposals  {len(res.seeds_pass1):5d}  IR {ir(res.seeds_pass1):.3f}")
        print(f"pass 1          {len(res.pass1.correspondences):5d}  IR {ir(res.pass1.correspondences):.3f}"
              f"  ({len(res.pass1.history)} rounds, {len(res.hard)} hard samples)")
    print(f"pass 2          {len(res.label.dense):5d}  IR {ir(res.label.dense):.3f}")
    print(f"sparse label    {len(res.label.sparse):5d}  on {len(res.sparse_P)} / {len(res.sparse_Q)} points")
    print(f"mined pose      RRE {rre(res.label.pose, T):.3f} deg, RTE {rte(res.label.pose, T):.3f} m")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
