"""Finite-difference check of the reduced network's backward pass, per tensor.

Coordinates whose +-h perturbation flips a PReLU, ReLU or max-pool decision are
skipped and counted, since the central difference is not a derivative there.
"""
import argparse

import numpy as np

from voxscene.network import build_ms_dvs
from voxscene.network.gradcheck import check_gradients
from voxscene.trainer import cross_entropy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=float, default=1e-3)
    ap.add_argument("--per-tensor", type=int, default=8)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--eval", action="store_true", help="use BN running statistics")
    args = ap.parse_args()

    net, store = build_ms_dvs(n_scales=3, grid_n=8, n_classes=3, deltas=(0.05, 0.1, 0.2),
                              channels=(4, 4, 8, 8), fc_width=32, padding=1)
    store = store.astype(np.float64)
    rng = np.random.default_rng(args.seed)
    x = (rng.random((args.batch, 3, 8, 8, 8)) < 0.3).astype(np.float64)
    y = rng.integers(0, 3, args.batch)
    r = check_gradients(net, store, x, y, cross_entropy, h=args.h, per_tensor=args.per_tensor,
                        train=not args.eval, seed=args.seed)
    for k, v in r.per_tensor.items():
        print(f"{k:<32} {v:.2e}")
    print(f"max relative error {r.max_rel_error:.2e} at {r.worst}; "
          f"{r.n_checked} checked, {r.n_skipped} skipped")


if __name__ == "__main__":
    main()
