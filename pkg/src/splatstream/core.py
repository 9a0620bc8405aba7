"""Shared vocabulary: Gaussians, cameras, stereo rigs, render settings, SH colour."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .exceptions import ContractViolation

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_for(count: int) -> int:
    degree = int(round(math.sqrt(count))) - 1
    if degree < 0 or degree > 3 or sh_coeff_count(degree) != count:
        raise ContractViolation(f"{count} SH coefficients do not form a degree 0..3 set")
    return degree


# ---------------------------------------------------------------------------
# Gaussians


@dataclass(frozen=True)
class Gaussian:
    """A single splat. ``scale`` holds per-axis standard deviations in metres."""

    id: int
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh: np.ndarray

    def __post_init__(self):
        for name, shape in (("position", (3,)), ("scale", (3,)), ("rotation", (4,))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ContractViolation(f"Gaussian.{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)
        sh_degree_for(sh.shape[0])
        object.__setattr__(self, "sh", sh)
        object.__setattr__(self, "opacity", float(self.opacity))
        if not 0.0 <= self.opacity <= 1.0:
            raise ContractViolation(f"opacity {self.opacity} outside [0, 1]")
        if np.any(self.scale <= 0):
            raise ContractViolation("scale components must be positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ContractViolation("rotation quaternion is not unit norm")

    @property
    def sh_degree(self) -> int:
        return sh_degree_for(self.sh.shape[0])


class GaussianSet:
    """Struct-of-arrays container behaving like a sequence of :class:`Gaussian`.

    Everything numeric in the pipeline works on the arrays; indexing with an
    integer materialises a single :class:`Gaussian`.
    """

    __slots__ = ("ids", "positions", "scales", "rotations", "opacities", "sh")

    def __init__(self, ids, positions, scales, rotations, opacities, sh, *, validate=True):
        self.ids = np.ascontiguousarray(ids, dtype=np.int64).reshape(-1)
        n = self.ids.shape[0]
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(n, 3)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64).reshape(n)
        sh = np.ascontiguousarray(sh, dtype=np.float64)
        if n:
            self.sh = sh.reshape(n, -1, 3)
        else:
            self.sh = sh.reshape(0, sh.shape[-2] if sh.ndim == 3 else 1, 3)
        if validate:
            self.validate()

    def validate(self) -> None:
        from .validation import check_gaussian_arrays

        check_gaussian_arrays(self)

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianSet":
        k = sh_coeff_count(sh_degree)
        return cls(
            np.zeros(0), np.zeros((0, 3)), np.ones((0, 3)), np.zeros((0, 4)),
            np.zeros(0), np.zeros((0, k, 3)), validate=False,
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianSet":
        if len(gaussians) == 0:
            return cls.empty()
        return cls(
            [g.id for g in gaussians],
            np.stack([g.position for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            [g.opacity for g in gaussians],
            np.stack([g.sh for g in gaussians]),
        )

    @property
    def sh_degree(self) -> int:
        return sh_degree_for(self.sh.shape[1])

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __iter__(self) -> Iterator[Gaussian]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            return Gaussian(
                int(self.ids[index]), self.positions[index], self.scales[index],
                self.rotations[index], float(self.opacities[index]), self.sh[index],
            )
        return self.take(index)

    def take(self, index) -> "GaussianSet":
        return GaussianSet(
            self.ids[index], self.positions[index], self.scales[index],
            self.rotations[index], self.opacities[index], self.sh[index], validate=False,
        )

    def copy(self) -> "GaussianSet":
        return self.take(slice(None))

    def equals(self, other: "GaussianSet") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in self.__slots__
        )

    def __repr__(self) -> str:
        return f"GaussianSet(n={len(self)}, sh_degree={self.sh_degree})"


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quaternion(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quaternion_to_matrix` for proper rotations; returns w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    r = m.reshape(-1, 3, 3)
    m00, m11, m22 = r[:, 0, 0], r[:, 1, 1], r[:, 2, 2]
    # Shepperd: pick the largest of (w, x, y, z) to divide by
    cand = np.stack([1 + m00 + m11 + m22, 1 + m00 - m11 - m22, 1 - m00 + m11 - m22, 1 - m00 - m11 + m22], 1)
    which = np.argmax(cand, axis=1)
    s = np.sqrt(np.maximum(cand[np.arange(len(r)), which], 1e-300)) * 2
    q = np.empty((len(r), 4))
    a = r[:, 2, 1] - r[:, 1, 2]
    b = r[:, 0, 2] - r[:, 2, 0]
    c = r[:, 1, 0] - r[:, 0, 1]
    xy = r[:, 0, 1] + r[:, 1, 0]
    xz = r[:, 0, 2] + r[:, 2, 0]
    yz = r[:, 1, 2] + r[:, 2, 1]
    rows = [
        (0.25 * s, a / s, b / s, c / s),
        (a / s, 0.25 * s, xy / s, xz / s),
        (b / s, xy / s, 0.25 * s, yz / s),
        (c / s, xz / s, yz / s, 0.25 * s),
    ]
    for k, row in enumerate(rows):
        sel = which == k
        q[sel] = np.stack([comp[sel] for comp in row], axis=1)
    q[q[:, 0] < 0] *= -1
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(m.shape[:-2] + (4,))


def covariances(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """World-space 3x3 covariances R S S^T R^T for (N,3) scales and (N,4) quaternions."""
    r = quaternion_to_matrix(rotations)
    rs = r * np.asarray(scales)[..., None, :]
    return rs @ np.swapaxes(rs, -1, -2)


# ---------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world points into camera space.

    Camera space is x right, y down, z forward. ``guard`` widens the culling
    rectangle by (left, right, top, bottom) pixels and never enters projection.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal: tuple[float, float]
    width: int
    height: int
    near: float = 0.2
    far: float = 1000.0
    guard: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    tile_size: int = 4

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal", (float(self.principal[0]), float(self.principal[1])))
        object.__setattr__(self, "guard", tuple(float(g) for g in self.guard))
        if not 0 < self.near < self.far:
            raise ContractViolation(f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.width <= 0 or self.height <= 0:
            raise ContractViolation("resolution must be positive")
        if self.width % self.tile_size or self.height % self.tile_size:
            raise ContractViolation(
                f"resolution {self.width}x{self.height} not divisible by tile size {self.tile_size}"
            )

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **kwargs) -> "Camera":
        """Camera at ``eye`` looking toward ``target``; ``up`` is the world up direction (image -y)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(rot, -rot @ eye, **kwargs)

    @classmethod
    def from_pose(cls, position, quaternion, **kwargs) -> "Camera":
        """Build from a camera-to-world pose: world position and orientation quaternion (w,x,y,z)."""
        c2w = quaternion_to_matrix(np.asarray(quaternion, dtype=np.float64))
        rot = c2w.T
        return cls(rot, -rot @ np.asarray(position, dtype=np.float64), **kwargs)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def tiles_x(self) -> int:
        return self.width // self.tile_size

    @property
    def tiles_y(self) -> int:
        return self.height // self.tile_size

    def with_pose(self, rotation, translation) -> "Camera":
        return replace(self, rotation=rotation, translation=translation)

    def pose(self) -> tuple[np.ndarray, np.ndarray]:
        """Inverse of :meth:`from_pose`: (world position, camera-to-world quaternion)."""
        return self.center, matrix_to_quaternion(self.rotation.T)

    def intrinsics(self) -> dict:
        return dict(focal=self.focal, principal=self.principal, width=self.width, height=self.height,
                    near=self.near, far=self.far, guard=self.guard, tile_size=self.tile_size)

    def same_intrinsics(self, other: "Camera") -> bool:
        return (
            self.focal == other.focal
            and self.principal == other.principal
            and self.width == other.width
            and self.height == other.height
            and self.near == other.near
            and self.far == other.far
        )


def camera_coords(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Camera-space x, y, z of (N,3) world points.

    Written elementwise (no BLAS) so a single point and a batch round identically.
    """
    p = np.asarray(points, dtype=np.float64)
    r = camera.rotation
    t = camera.translation
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    x = r[0, 0] * px + r[0, 1] * py + r[0, 2] * pz + t[0]
    y = r[1, 0] * px + r[1, 1] * py + r[1, 2] * pz + t[1]
    z = r[2, 0] * px + r[2, 1] * py + r[2, 2] * pz + t[2]
    return x, y, z


class Projection(NamedTuple):
    screen: np.ndarray
    depth: float
    behind: bool


def project_point(camera: Camera, p) -> Projection:
    """Pinhole projection. Points with depth <= 0 come back with ``behind=True``."""
    x, y, z = camera_coords(camera, np.asarray(p, dtype=np.float64))
    x, y, z = float(x), float(y), float(z)
    if z <= 0:
        return Projection(np.array([np.nan, np.nan]), z, True)
    cx, cy = camera.principal
    screen = np.array([camera.focal * x / z + cx, camera.focal * y / z + cy])
    return Projection(screen, z, False)


def back_project(camera: Camera, screen, depth: float) -> np.ndarray:
    cx, cy = camera.principal
    x = (screen[0] - cx) * depth / camera.focal
    y = (screen[1] - cy) * depth / camera.focal
    return camera.rotation.T @ (np.array([x, y, depth]) - camera.translation)


def frustum_test(camera: Camera, g, margin: float = 0.0) -> bool:
    """True iff the centre projects inside the (margin + guard)-expanded screen within [near, far]."""
    position = g.position if isinstance(g, Gaussian) else g
    proj = project_point(camera, position)
    if proj.behind or not camera.near <= proj.depth <= camera.far:
        return False
    gl, gr, gt, gb = camera.guard
    u, v = proj.screen
    return (
        -margin - gl <= u <= camera.width + margin + gr
        and -margin - gt <= v <= camera.height + margin + gb
    )


def frustum_mask(camera: Camera, positions: np.ndarray, margin: float = 0.0):
    """Vectorised :func:`frustum_test`; returns (mask, u, v, depth)."""
    x, y, z = camera_coords(camera, positions)
    ok = (z >= camera.near) & (z <= camera.far)
    safe = np.where(ok, z, 1.0)
    cx, cy = camera.principal
    u = camera.focal * x / safe + cx
    v = camera.focal * y / safe + cy
    gl, gr, gt, gb = camera.guard
    ok &= (u >= -margin - gl) & (u <= camera.width + margin + gr)
    ok &= (v >= -margin - gt) & (v <= camera.height + margin + gb)
    return ok, u, v, z


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair. The right eye is derived, never stored."""

    left: Camera
    baseline: float = 0.06

    def __post_init__(self):
        if self.baseline < 0:
            raise ContractViolation("baseline must be non-negative")

    @property
    def right(self) -> Camera:
        # right eye sits at +B along the left camera's x axis
        t = self.left.translation - np.array([self.baseline, 0.0, 0.0])
        return replace(self.left, translation=t)

    @property
    def mid_eye(self) -> np.ndarray:
        return self.left.center + 0.5 * self.baseline * self.left.rotation[0]

    def max_disparity(self) -> float:
        return self.baseline * self.left.focal / self.left.near


# ---------------------------------------------------------------------------
# Render / search settings


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 4
    tau_star: float = 2.0
    alpha_star: float = 1.0 / 255.0
    alpha_cap: float = 0.99
    transmittance_floor: float = 1e-4
    max_disparity_px: int = 16
    sh_degree: int = 1
    cov2d_floor: float = 0.3
    cull_margin_px: float = 0.0
    lod_margin_px: float = 64.0
    block_size: int = 4096

    def __post_init__(self):
        if self.max_disparity_px != 4 * self.tile_size:
            raise ContractViolation("max_disparity_px must equal 4 x tile_size")
        if not 0 < self.alpha_star < self.alpha_cap <= 1:
            raise ContractViolation("need 0 < alpha_star < alpha_cap <= 1")
        if not 0 <= self.sh_degree <= 3:
            raise ContractViolation("sh_degree must be in 0..3")
        if self.tau_star <= 0:
            raise ContractViolation("tau_star must be positive")
        if self.block_size < 1:
            raise ContractViolation("block_size must be >= 1")


def check_rig(rig: StereoRig, config: RenderConfig) -> None:
    """The disparity cap must hold for every depth the renderer accepts."""
    if rig.left.tile_size != config.tile_size:
        raise ContractViolation("camera tile size differs from render config")
    if rig.max_disparity() > config.max_disparity_px * (1 + 1e-12):
        raise ContractViolation(
            f"B*f/near = {rig.max_disparity():.3f}px exceeds max disparity "
            f"{config.max_disparity_px}px; raise near to >= {rig.baseline * rig.left.focal / config.max_disparity_px}"
        )


# ---------------------------------------------------------------------------
# Spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape (N, (degree+1)^2), for unit directions (N, 3)."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        out += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=1)


def evaluate_sh(sh, view_dir, degree: int) -> np.ndarray:
    """RGB for one Gaussian: 0.5 + sum_k basis_k(dir) * sh_k, clamped to [0, 1]."""
    sh = np.asarray(sh, dtype=np.float64).reshape(-1, 3)
    stored = sh_degree_for(sh.shape[0])
    if degree > stored:
        raise ContractViolation(f"degree {degree} exceeds stored SH degree {stored}")
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64).reshape(1, 3), degree)[0]
    rgb = 0.5 + basis @ sh[: sh_coeff_count(degree)]
    return np.clip(rgb, 0.0, 1.0)


def evaluate_sh_batch(sh: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Vectorised :func:`evaluate_sh` for (N, K, 3) coefficients and (N, 3) directions."""
    if degree > sh_degree_for(sh.shape[1]):
        raise ContractViolation("requested SH degree exceeds stored coefficients")
    k = sh_coeff_count(degree)
    basis = sh_basis(dirs, degree)
    rgb = 0.5 + np.einsum("nk,nkc->nc", basis, sh[:, :k, :])
    return np.clip(rgb, 0.0, 1.0)


# ---------------------------------------------------------------------------
# LoD sizing


@dataclass(frozen=True)
class LodView:
    """Camera-derived constants the LoD predicate needs; cheap to rebuild per pose."""

    camera: Camera
    tau_star: float
    margin_px: float
    planes: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        cam = self.camera
        m = self.margin_px
        cx, cy = cam.principal
        f = cam.focal
        # half-spaces n . p_cam >= 0 bounding the margin-expanded screen
        planes = np.array(
            [
                [f, 0.0, cx + m],
                [-f, 0.0, cam.width + m - cx],
                [0.0, f, cy + m],
                [0.0, -f, cam.height + m - cy],
            ]
        )
        planes /= np.linalg.norm(planes, axis=1, keepdims=True)
        planes.setflags(write=False)
        object.__setattr__(self, "planes", planes)


def lod_radius(scales: np.ndarray) -> np.ndarray:
    """Node extent used for LoD sizing: three standard deviations along the widest axis."""
    return 3.0 * np.max(np.asarray(scales, dtype=np.float64), axis=-1)


def lod_sizes(view: LodView, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Projected node size in pixels; 0 for nodes whose bounding sphere is not visible.

    size = f * r / max(near, z - r). Measuring depth to the front of the bounding
    sphere keeps parents at least as large as contained children for any pose.
    """
    cam = view.camera
    x, y, z = camera_coords(cam, centers)
    r = np.asarray(radii, dtype=np.float64)
    visible = (z + r > 0) & (z - r <= cam.far)
    pl = view.planes
    for k in range(4):
        visible &= pl[k, 0] * x + pl[k, 1] * y + pl[k, 2] * z >= -r
    depth = np.maximum(cam.near, z - r)
    size = cam.focal * r / depth
    return np.where(visible, size, 0.0)
