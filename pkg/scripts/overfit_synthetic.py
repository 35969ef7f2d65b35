"""Train a reduced MS-3 network on the synthetic scene, then label every point.

Prints the per-epoch history, the metrics table of the whole-cloud prediction and
the wall time of both phases.
"""
import argparse
import logging
import time

from voxscene.evaluation import classify_cloud, confusion, metrics, report_table
from voxscene.synthetic import three_class_scene
from voxscene.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n-per-class", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--cell", type=float, default=0.1)
    ap.add_argument("--target", type=float, default=None,
                    help="stop once balanced training accuracy reaches this value")
    ap.add_argument("--checkpoint-dir")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    scene = three_class_scene(args.seed)
    cfg = TrainConfig(n_per_class=args.n_per_class, batch_size=32, epochs=args.epochs,
                      seed=args.seed, grid_n=16, deltas=(0.05, 0.1, 0.2), channels=(4, 4, 8, 8),
                      fc_width=32, workers=args.workers, checkpoint_dir=args.checkpoint_dir)
    stop = None if args.target is None else (lambda r: r.balanced_accuracy >= args.target)
    t0 = time.perf_counter()
    res = train(scene, cfg, on_epoch=stop)
    t1 = time.perf_counter()
    pred = classify_cloud(res.network, res.store, scene, args.cell, workers=args.workers)
    t2 = time.perf_counter()
    print(report_table(metrics(confusion(pred, scene.labels, 3)), scene.class_table))
    print(f"train {t1 - t0:.1f} s for {len(res.history)} epochs, classify {t2 - t1:.1f} s")


if __name__ == "__main__":
    main()
