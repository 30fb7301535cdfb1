"""Synthetic multivariate spatial count data with known ground truth.

Two benchmark generators on square grids: "ggblocks" places four disjoint
shape templates (square, cross, diagonal bar, L) on a 30x30 grid;
"quilt" places four overlapping bands/blocks on a 36x36 grid. Each of
the J features is assigned one spatial pattern (intensity 11 inside,
0.1 outside) plus one of three Bernoulli(0.2) nonspatial patterns
(intensity 9 when active). Counts are negative binomial with shape 10,
drawn as a gamma-Poisson mixture so results are platform-stable.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import ParameterError

GGBLOCKS_SIDE = 30
QUILT_SIDE = 36


@dataclass(frozen=True)
class SimConfig:
    """Generator settings; side defaults to the template grid per kind."""

    side: int | None = None
    J: int = 500
    spatial_intensity: float = 11.0
    background: float = 0.1
    nonspatial_intensity: float = 9.0
    n_nonspatial: int = 3
    bernoulli_p: float = 0.2
    nb_shape: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if min(self.spatial_intensity, self.background, self.nonspatial_intensity) <= 0:
            raise ParameterError("intensities must be positive")
        if self.nb_shape <= 0:
            raise ParameterError("nb_shape must be positive")
        if self.J < 1 or self.n_nonspatial < 1:
            raise ParameterError("J and n_nonspatial must be >= 1")
        if not 0 < self.bernoulli_p < 1:
            raise ParameterError("bernoulli_p must lie in (0, 1)")


@dataclass
class SimDataset:
    """Counts plus the ground truth that produced them.

    spatial_patterns is (4, N) boolean over flattened grid cells (row-major,
    X columns are x=grid column, y=grid row); assignments give each
    feature's pattern indices.
    """

    Y: np.ndarray
    X: np.ndarray
    spatial_patterns: np.ndarray
    nonspatial_patterns: np.ndarray
    spatial_assignments: np.ndarray
    nonspatial_assignments: np.ndarray
    kind: str
    feature_names: list = field(default_factory=list)


def _ggblocks_masks(side):
    m = np.zeros((4, side, side), dtype=bool)
    m[0, 4:12, 4:12] = True
    m[1, 17:27, 6:9] = True
    m[1, 20:23, 2:13] = True
    for k in range(10):
        m[2, 2 + k, 17 + k] = True
        m[2, 3 + k, 17 + k] = True
    m[3, 17:27, 18:21] = True
    m[3, 24:27, 18:27] = True
    return m


def _quilt_masks(side):
    m = np.zeros((4, side, side), dtype=bool)
    m[0, 6:18, :] = True
    m[1, :, 6:18] = True
    m[2, 12:28, 12:28] = True
    m[3, :, 22:32] = True
    return m


def _grid_coords(side):
    idx = np.arange(side * side)
    return np.column_stack([idx % side, idx // side]).astype(np.float64)


def _simulate(cfg, seed, kind, template_side, masks_fn):
    cfg = cfg or SimConfig()
    side = template_side if cfg.side is None else cfg.side
    if side != template_side:
        raise ParameterError(
            f"{kind} templates are defined on a {template_side}x{template_side} grid"
        )
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    N, J = side * side, cfg.J
    spatial = masks_fn(side).reshape(4, N)
    assign_sp = rng.integers(0, 4, size=J)
    nonspatial = rng.random((cfg.n_nonspatial, N)) < cfg.bernoulli_p
    assign_ns = rng.integers(0, cfg.n_nonspatial, size=J)
    M1 = np.where(spatial[assign_sp].T, cfg.spatial_intensity, cfg.background)
    M2 = np.where(nonspatial[assign_ns].T, cfg.nonspatial_intensity, cfg.background)
    mean = M1 + M2
    lam = rng.gamma(shape=cfg.nb_shape, scale=mean / cfg.nb_shape)
    Y = rng.poisson(lam).astype(np.int64)
    width = max(4, len(str(J)))
    names = [f"f{j + 1:0{width}d}" for j in range(J)]
    return SimDataset(
        Y=Y,
        X=_grid_coords(side),
        spatial_patterns=spatial,
        nonspatial_patterns=nonspatial,
        spatial_assignments=assign_sp,
        nonspatial_assignments=assign_ns,
        kind=kind,
        feature_names=names,
    )


def simulate_ggblocks(cfg=None, seed=None):
    """Four disjoint shapes on a 30x30 grid; returns a SimDataset."""
    return _simulate(cfg, seed, "ggblocks", GGBLOCKS_SIDE, _ggblocks_masks)


def simulate_quilt(cfg=None, seed=None):
    """Four overlapping bands/blocks on a 36x36 grid; returns a SimDataset."""
    return _simulate(cfg, seed, "quilt", QUILT_SIDE, _quilt_masks)


def score_against_truth(factors, masks):
    """Optimal one-to-one match of factor maps to ground-truth patterns.

    Returns (correlations, factor_indices, pattern_indices) where entry p
    is the Pearson correlation of matched pair p, maximized over
    assignments by the Hungarian method. Zero-variance columns get
    correlation 0.
    """
    F = np.asarray(factors, dtype=np.float64)
    M = np.asarray(masks, dtype=np.float64).T
    if F.shape[0] != M.shape[0]:
        raise ParameterError("factors and masks must cover the same observations")
    Fc = F - F.mean(axis=0)
    Mc = M - M.mean(axis=0)
    fn = np.linalg.norm(Fc, axis=0)
    mn = np.linalg.norm(Mc, axis=0)
    corr = (Fc / np.where(fn == 0, 1.0, fn)).T @ (Mc / np.where(mn == 0, 1.0, mn))
    corr[fn == 0, :] = 0.0
    corr[:, mn == 0] = 0.0
    rows, cols = linear_sum_assignment(-corr)
    return corr[rows, cols], rows, cols
