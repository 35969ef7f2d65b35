"""Small labeled scenes for smoke tests: ground plane, vertical poles, floating spheres."""
from __future__ import annotations

import numpy as np

from .cloud import LabeledCloud

SCENE_CLASSES = {0: "plane", 1: "pole", 2: "sphere"}


def three_class_scene(seed: int = 0, size: float = 6.0, spacing: float = 0.05,
                      n_poles: int = 4, n_spheres: int = 4, jitter: float = 0.005) -> LabeledCloud:
    """Plane z=0 over [0, size]^2, poles on a grid, spheres floating between them.

    Objects are placed on alternating cells of a coarse lattice so no two touch.
    """
    rng = np.random.default_rng(seed)
    g = np.arange(0.0, size, spacing)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    plane = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])

    # lattice of object sites, poles and spheres alternate
    m = int(np.ceil(np.sqrt(n_poles + n_spheres)))
    step = size / m
    sites = [((i + 0.5) * step, (j + 0.5) * step) for i in range(m) for j in range(m)]
    rng.shuffle(sites)
    poles, spheres = [], []
    for k, (cx, cy) in enumerate(sites[: n_poles + n_spheres]):
        if k < n_poles:
            r, h = 0.1, 2.5
            n_ring = max(int(2 * np.pi * r / spacing), 6)
            zs = np.arange(0.3, h, spacing)
            t = np.linspace(0, 2 * np.pi, n_ring, endpoint=False)
            tt, zz = np.meshgrid(t, zs, indexing="ij")
            poles.append(np.column_stack([cx + r * np.cos(tt.ravel()), cy + r * np.sin(tt.ravel()),
                                          zz.ravel()]))
        else:
            r, cz = 0.5, 1.5
            n = int(4 * np.pi * r * r / spacing ** 2)
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            spheres.append(np.array([cx, cy, cz]) + r * v)
    parts = [plane, np.concatenate(poles) if poles else np.zeros((0, 3)),
             np.concatenate(spheres) if spheres else np.zeros((0, 3))]
    pts = np.concatenate(parts)
    pts = pts + rng.normal(0, jitter, size=pts.shape)
    labels = np.concatenate([np.full(len(p), c) for c, p in enumerate(parts)])
    return LabeledCloud(pts, labels, SCENE_CLASSES)
