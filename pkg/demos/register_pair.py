"""Register one synthetic pair and report the pose error.

    python3 demos/register_pair.py [seed]
"""

from __future__ import annotations

import sys

from anchorreg.config import RunConfig
from anchorreg.geometry import SyntheticPairSpec, make_synthetic_pair
from anchorreg.metrics import rre, rte
from anchorreg.pipeline import initial_head, register_clouds
from anchorreg.scenes import synthetic_scan


def main(seed: int = 0) -> None:
    cfg = RunConfig(seed=seed)
    P, Q, T_gt = make_synthetic_pair(synthetic_scan(seed), SyntheticPairSpec(), seed)
    res = register_clouds(P, Q, initial_head(cfg), cfg)
    n_in = int((res.correspondences.labels == 1).sum())
    print(f"{len(P)} / {len(Q)} points, {len(res.correspondences)} matches, {n_in} kept")
    print(f"RRE {rre(res.pose, T_gt):.3f} deg, RTE {rte(res.pose, T_gt):.3f} m")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
