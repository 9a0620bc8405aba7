"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np

from .exceptions import ContractViolation, DataError


def check_gaussian_arrays(gs) -> None:
    n = len(gs.ids)
    if gs.sh.ndim != 3 or gs.sh.shape[0] != n or gs.sh.shape[2] != 3:
        raise ContractViolation(f"SH array has shape {gs.sh.shape}, expected ({n}, K, 3)")
    if n == 0:
        return
    for name in ("positions", "scales", "rotations", "opacities", "sh"):
        arr = getattr(gs, name)
        bad = ~np.isfinite(arr.reshape(n, -1)).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"non-finite {name} in record {i}", index=i)
    if np.any((gs.opacities < 0) | (gs.opacities > 1)):
        raise ContractViolation("opacity outside [0, 1]")
    if np.any(gs.scales <= 0):
        raise ContractViolation("scale components must be positive")
    norms = np.linalg.norm(gs.rotations, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractViolation("rotation quaternions must be unit norm")
    if np.unique(gs.ids).shape[0] != n:
        raise ContractViolation("Gaussian ids must be unique")


def as_gaussian_set(gaussians):
    """Accept a GaussianSet or any sequence of Gaussian objects."""
    from .core import GaussianSet

    if isinstance(gaussians, GaussianSet):
        return gaussians
    return GaussianSet.from_gaussians(list(gaussians))


def check_sorted_pairs(keys: list, what: str = "list") -> None:
    for a, b in zip(keys, keys[1:]):
        if b < a:
            raise ContractViolation(f"{what} is not sorted: {b!r} follows {a!r}")


def check_image_pair(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ContractViolation(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if int(value) != value or value < minimum:
        raise ContractViolation(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
