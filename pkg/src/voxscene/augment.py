"""Random geometric perturbations applied to a neighborhood before voxelization."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    rotate: bool = True
    scale_range: tuple[float, float] = (0.95, 1.05)
    max_occlusion: float = 0.05
    max_artefacts: float = 0.05
    noise_sigma: float = 0.01

    def __post_init__(self):
        lo, hi = self.scale_range
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < low <= high")
        if not (0 <= self.max_occlusion <= 1 and 0 <= self.max_artefacts <= 1):
            raise ValueError("occlusion/artefact fractions must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(enabled=False)

    @classmethod
    def only(cls, **kw) -> "AugmentConfig":
        """Config with every transform disabled except the given ones."""
        base = dict(flip_prob=0.0, rotate=False, scale_range=(1.0, 1.0),
                    max_occlusion=0.0, max_artefacts=0.0, noise_sigma=0.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(d["scale_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


def augment(points: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
            half_extent: float = 1.0) -> np.ndarray:
    """Perturb points expressed relative to the sample center.

    Order: flips, z rotation, uniform scale, occlusion, artefacts, Gaussian noise.
    Artefacts are drawn uniformly in the cube [-half_extent, half_extent)^3, which
    should be the coarsest grid's cube.
    """
    pts = np.array(points, dtype=np.float64).reshape(-1, 3)
    if not config.enabled:
        return pts
    p0 = len(pts)

    if rng.random() < config.flip_prob:
        pts[:, 0] = -pts[:, 0]
    if rng.random() < config.flip_prob:
        pts[:, 1] = -pts[:, 1]

    if config.rotate:
        theta = rng.uniform(0.0, 2 * np.pi)
        c, s = np.cos(theta), np.sin(theta)
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0] = c * x - s * y
        pts[:, 1] = s * x + c * y

    lo, hi = config.scale_range
    if hi > lo or lo != 1.0:
        pts *= rng.uniform(lo, hi)

    if config.max_occlusion > 0 and p0:
        n_drop = int(np.floor(rng.uniform(0.0, config.max_occlusion) * p0))
        if n_drop:
            drop = rng.choice(p0, size=n_drop, replace=False)
            pts = np.delete(pts, drop, axis=0)

    if config.max_artefacts > 0 and p0:
        n_add = int(np.floor(rng.uniform(0.0, config.max_artefacts) * p0))
        if n_add:
            extra = rng.uniform(-half_extent, half_extent, size=(n_add, 3))
            pts = np.concatenate([pts, extra])

    if config.noise_sigma > 0:
        pts += rng.normal(0.0, config.noise_sigma, size=pts.shape)
    return pts


def sample_rng(seed: int, epoch: int, sample: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample); independent of worker scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, sample]))
