"""Small builders shared by the test modules."""

import numpy as np

from splatstream.core import Camera, GaussianSet, StereoRig, sh_coeff_count

INTRINSICS = dict(focal=300.0, principal=(160.0, 120.0), width=320, height=240, near=1.5)


def make_gaussians(positions, scales=0.05, opacity=0.8, rgb=(0.5, 0.5, 0.5), degree=0, ids=None):
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n = len(pos)
    sc = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3)).copy()
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    op = np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,)).copy()
    sh = np.zeros((n, sh_coeff_count(degree), 3))
    sh[:, 0, :] = (np.asarray(rgb, dtype=np.float64) - 0.5) / 0.28209479177387814
    return GaussianSet(np.arange(n) if ids is None else ids, pos, sc, rot, op, sh)


def planar_scene(seed, n=800):
    """Splats in one fronto-parallel plane: every splat has the same integer disparity."""
    rng = np.random.default_rng(seed)
    pos = np.c_[rng.uniform(-0.6, 0.6, n), np.zeros(n), rng.uniform(-0.4, 0.4, n)]
    sc = np.exp(rng.uniform(np.log(0.005), np.log(0.04), (n, 3)))
    sc[:, 1] = 1e-4
    rot = np.tile([1.0, 0, 0, 0], (n, 1))
    gs = GaussianSet(np.arange(n), pos, sc, rot, rng.uniform(0.1, 1, n), rng.normal(0, 0.3, (n, 4, 3)))
    cam = Camera.look_at([0, -1.5, 0], [0, 0, 0], focal=100.0, principal=(32.0, 32.0), width=64, height=64,
                         near=0.5)
    return gs, StereoRig(cam, 0.06)


# acceptance verdict lines, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
