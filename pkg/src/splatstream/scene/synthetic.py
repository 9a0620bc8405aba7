"""City-like synthetic scenes: one building block per ground cell, splats on its surfaces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import GaussianSet, sh_coeff_count
from ..exceptions import ContractViolation

# façade palette (linear RGB); buildings pick one, jitter is small
PALETTE = np.array(
    [
        [0.62, 0.58, 0.52],
        [0.45, 0.30, 0.25],
        [0.75, 0.72, 0.65],
        [0.30, 0.33, 0.38],
        [0.55, 0.42, 0.30],
        [0.80, 0.78, 0.74],
        [0.36, 0.40, 0.30],
        [0.25, 0.26, 0.28],
    ]
)
GROUND = np.array([0.35, 0.35, 0.33])


@dataclass(frozen=True)
class SceneSpec:
    cells_x: int = 10
    cells_y: int = 10
    per_cell: int = 50
    cell_size: float = 10.0
    max_height: float = 18.0
    sh_degree: int = 1
    seed: int = 0

    @property
    def count(self) -> int:
        return self.cells_x * self.cells_y * self.per_cell


def generate_synthetic_scene(spec: SceneSpec) -> GaussianSet:
    """Deterministic scene with ``cells_x * cells_y * per_cell`` Gaussians (z is up)."""
    if spec.cells_x <= 0 or spec.cells_y <= 0 or spec.per_cell <= 0 or spec.cell_size <= 0:
        raise ContractViolation("scene extents and per-cell count must be positive")
    rng = np.random.default_rng(spec.seed)
    ncell = spec.cells_x * spec.cells_y
    n = spec.count
    cs = spec.cell_size

    gx, gy = np.meshgrid(np.arange(spec.cells_x), np.arange(spec.cells_y), indexing="ij")
    origin = np.stack([gx.ravel(), gy.ravel()], axis=1) * cs
    # building footprint inside each cell, leaving a street margin
    half = rng.uniform(0.2, 0.38, size=(ncell, 2)) * cs
    center = origin + cs / 2 + rng.uniform(-0.05, 0.05, size=(ncell, 2)) * cs
    height = rng.uniform(0.15, 1.0, size=ncell) * spec.max_height
    colour = PALETTE[rng.integers(0, len(PALETTE), size=ncell)]

    cell = np.repeat(np.arange(ncell), spec.per_cell)
    kind = rng.uniform(size=n)  # <0.2 ground, <0.35 roof, else wall
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pos = np.empty((n, 3))
    c = center[cell]
    h = half[cell]

    ground = kind < 0.2
    pos[ground, 0] = origin[cell[ground], 0] + rng.uniform(0, cs, ground.sum())
    pos[ground, 1] = origin[cell[ground], 1] + rng.uniform(0, cs, ground.sum())
    pos[ground, 2] = 0.0

    roof = (kind >= 0.2) & (kind < 0.35)
    pos[roof, :2] = c[roof] + u[roof] * h[roof]
    pos[roof, 2] = height[cell[roof]]

    wall = kind >= 0.35
    side = rng.integers(0, 4, size=n)
    along = u[:, 0]
    wx = np.where(side < 2, along * h[:, 0], np.where(side == 2, -h[:, 0], h[:, 0]))
    wy = np.where(side < 2, np.where(side == 0, -h[:, 1], h[:, 1]), along * h[:, 1])
    pos[wall, 0] = c[wall, 0] + wx[wall]
    pos[wall, 1] = c[wall, 1] + wy[wall]
    pos[wall, 2] = rng.uniform(0, 1, wall.sum()) * height[cell[wall]]

    # flat splats: one thin axis, two in-plane axes
    base = cs * 0.03 * np.exp(rng.uniform(-0.4, 0.6, size=(n, 1)))
    scales = base * np.exp(rng.uniform(-0.3, 0.3, size=(n, 3)))
    scales[:, 2] *= 0.2
    normal_axis = np.where(ground | roof, 2, np.where(side < 2, 1, 0))
    rot = _axis_quaternions(normal_axis)
    jitter = rng.normal(size=(n, 4)) * 0.05
    jitter[:, 0] = 0
    rot = rot + jitter
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)

    opacity = rng.uniform(0.55, 0.95, size=n)

    k = sh_coeff_count(spec.sh_degree)
    base_rgb = np.where(ground[:, None], GROUND, colour[cell])
    base_rgb = np.clip(base_rgb + rng.normal(scale=0.04, size=(n, 3)), 0.02, 0.98)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (base_rgb - 0.5) / 0.28209479177387814
    if k > 1:
        sh[:, 1:, :] = rng.normal(scale=0.03, size=(n, k - 1, 3))
    return GaussianSet(np.arange(n), pos, scales, rot, opacity, sh)


def _axis_quaternions(normal_axis: np.ndarray) -> np.ndarray:
    """Quaternions turning the local z (thin) axis onto world x, y or z."""
    q = np.zeros((len(normal_axis), 4))
    s = np.sqrt(0.5)
    q[normal_axis == 2] = [1.0, 0.0, 0.0, 0.0]
    q[normal_axis == 0] = [s, 0.0, s, 0.0]   # z -> x
    q[normal_axis == 1] = [s, -s, 0.0, 0.0]  # z -> y
    return q


def random_gaussians(n: int, seed: int = 0, *, extent: float = 1.0, sh_degree: int = 1,
                     scale_range=(0.01, 0.1)) -> GaussianSet:
    """Unstructured uniformly scattered Gaussians; handy for codec and tree tests."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-extent, extent, size=(n, 3))
    lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
    scales = np.exp(rng.uniform(lo, hi, size=(n, 3)))
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    opacity = rng.uniform(0.05, 1.0, size=n)
    sh = rng.normal(scale=0.3, size=(n, sh_coeff_count(sh_degree), 3))
    return GaussianSet(np.arange(n), pos, scales, rot, opacity, sh)
