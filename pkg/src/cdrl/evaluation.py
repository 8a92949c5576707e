"""Toy datasets, density grids, OOD scores and AUROC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import stream
from .sampler import SampleBatch

TOYS = ("checkerboard", "gaussian", "ring", "mixture-of-8")


class DimensionError(ValueError):
    """Operation needs a different data dimension than the model has."""


@dataclass(frozen=True)
class ToySpec:
    """A named 2-D (or d-D for ``gaussian``) toy density.

    The checkerboard is a 4x4 board on ``[-extent, extent]^2`` whose "on"
    cells are those with even ``row + col``; ``shift`` translates every
    sample afterwards.
    """

    name: str
    extent: float = 2.0
    seed: int = 0
    dim: int = 2
    shift: tuple[float, ...] = ()


def square_index(points: np.ndarray, extent: float = 2.0) -> np.ndarray:
    """Index 0..7 of the "on" checkerboard cell containing each point, else -1."""
    p = np.asarray(points, dtype=np.float64)
    cell = extent / 2.0
    ij = np.floor((p + extent) / cell).astype(np.int64)
    inside = np.all((ij >= 0) & (ij <= 3), axis=1)
    on = inside & ((ij[:, 0] + ij[:, 1]) % 2 == 0)
    # on-cells enumerated row-major: each row has two
    idx = ij[:, 1] * 2 + ij[:, 0] // 2
    return np.where(on, idx, -1)


def on_checkerboard(points: np.ndarray, extent: float = 2.0) -> np.ndarray:
    return square_index(points, extent) >= 0


def gen_toy(spec: ToySpec, n: int) -> SampleBatch:
    """Draw ``n`` i.i.d. samples; deterministic in ``spec.seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = stream(spec.seed, 7)
    e = spec.extent
    labels = None
    if spec.name == "checkerboard":
        labels = rng.integers(0, 8, n)
        row, half = labels // 2, labels % 2
        col = 2 * half + row % 2
        cell = e / 2.0
        u = rng.random((n, 2))
        x = np.stack([(col + u[:, 0]) * cell - e, (row + u[:, 1]) * cell - e], axis=1)
    elif spec.name == "gaussian":
        x = rng.standard_normal((n, spec.dim))
    elif spec.name == "ring":
        theta = rng.uniform(0, 2 * np.pi, n)
        r = 0.75 * e + 0.05 * e * rng.standard_normal(n)
        x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    elif spec.name == "mixture-of-8":
        labels = rng.integers(0, 8, n)
        theta = labels * (2 * np.pi / 8)
        centers = 0.75 * e * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        x = centers + 0.05 * e * rng.standard_normal((n, 2))
    else:
        raise ValueError(f"unknown toy {spec.name!r}; choose from {TOYS}")
    if spec.shift:
        x = x + np.asarray(spec.shift, dtype=np.float64)
    return SampleBatch(0, x, labels)


@dataclass
class DensityGrid:
    level: int
    bounds: tuple[float, float, float, float]
    resolution: int
    xs: np.ndarray
    ys: np.ndarray
    log_density: np.ndarray  # [iy, ix]
    prob: np.ndarray

    def points(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def argmax_point(self) -> np.ndarray:
        iy, ix = np.unravel_index(np.argmax(self.log_density), self.log_density.shape)
        return np.array([self.xs[ix], self.ys[iy]])


def density_grid(model, t: int, bounds=(-2.0, 2.0, -2.0, 2.0), resolution: int = 100, c=None) -> DensityGrid:
    """Unnormalized log-density ``f(.; t)`` at cell centers plus a grid softmax."""
    if getattr(model, "dim", 2) != 2:
        raise DimensionError("density grids need a 2-D model")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    x0, x1, y0, y1 = map(float, bounds)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("empty grid bounds")
    dx, dy = (x1 - x0) / resolution, (y1 - y0) / resolution
    xs = x0 + dx * (np.arange(resolution) + 0.5)
    ys = y0 + dy * (np.arange(resolution) + 0.5)
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    logd = np.asarray(model.energy(pts, t, c), dtype=np.float64).reshape(resolution, resolution)
    if not np.all(np.isfinite(logd)):
        raise FloatingPointError("non-finite log-density on grid")
    z = logd - logd.max()
    p = np.exp(z)
    p /= p.sum()
    return DensityGrid(t, (x0, x1, y0, y1), resolution, xs, ys, logd, p)


def grid_mass_on_squares(grid: DensityGrid, extent: float = 2.0) -> float:
    on = on_checkerboard(grid.points(), extent)
    return float(grid.prob.ravel()[on].sum())


def ood_score(model, batch: SampleBatch, c=None) -> np.ndarray:
    """Negative energy at the lowest noise level; higher means more in-distribution."""
    if batch.level != 0:
        raise ValueError("OOD scoring uses level-0 samples")
    return np.asarray(model.energy(batch.data, 0, c), dtype=np.float64)


def auroc(pos_scores, neg_scores) -> float:
    """Exact Mann-Whitney AUROC, ties counted as one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64).ravel())
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUROC needs non-empty pools")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    u = below.sum() + 0.5 * (upto - below).sum()
    return float(u / (pos.size * neg.size))


def on_square_fraction(points: np.ndarray, extent: float = 2.0) -> float:
    return float(on_checkerboard(points, extent).mean())


def mode_fractions(points: np.ndarray, extent: float = 2.0) -> np.ndarray:
    idx = square_index(points, extent)
    return np.bincount(idx[idx >= 0], minlength=8) / len(points)
