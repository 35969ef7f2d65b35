"""Write the three-class synthetic scene as PLY (input for configs/synthetic.json)."""
import argparse
from pathlib import Path

import numpy as np

from voxscene.cloud import save_ply
from voxscene.synthetic import three_class_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/synthetic_scene.ply")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=float, default=6.0)
    args = ap.parse_args()
    scene = three_class_scene(args.seed, size=args.size)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_ply(scene, args.out)
    counts = np.bincount(scene.labels)
    print(f"{args.out}: {len(scene)} points, per class "
          + ", ".join(f"{scene.class_table[c]}={n}" for c, n in enumerate(counts)))


if __name__ == "__main__":
    main()
