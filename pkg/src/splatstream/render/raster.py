"""Shared-FoV preprocessing, depth sorting, tile binning and front-to-back blending."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..core import (
    Camera, GaussianSet, RenderConfig, StereoRig, camera_coords, check_rig, covariances,
    evaluate_sh_batch, frustum_mask,
)
from ..exceptions import ContractViolation
from ..validation import as_gaussian_set

# relative and absolute padding on the alpha-threshold footprint radius
SPAN_PAD_REL = 1e-6
SPAN_PAD_ABS = 1e-6


def widened_fov(rig: StereoRig) -> Camera:
    """Left camera whose culling rectangle also covers everything the right eye can see.

    A point at depth z appears B*f/z pixels further left in the right eye, so
    extending the left screen's right edge by ceil(B*f/near) admits every
    Gaussian visible to either eye.
    """
    extra = math.ceil(rig.baseline * rig.left.focal / rig.left.near)
    if extra == 0:
        return rig.left
    gl, gr, gt, gb = rig.left.guard
    return replace(rig.left, guard=(gl, gr + extra, gt, gb))


@dataclass
class ProjectedGaussians:
    """Struct-of-arrays screen-space splats.

    ``conic`` holds (a, b, c) of the inverse 2D covariance; ``span`` is the
    inclusive tile rectangle (tx0, ty0, tx1, ty1), empty when tx0 > tx1.
    """

    ids: np.ndarray
    means: np.ndarray
    depths: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    rgb: np.ndarray
    opacities: np.ndarray
    radii: np.ndarray
    span: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index) -> "ProjectedGaussians":
        return ProjectedGaussians(*(getattr(self, f)[index] for f in self.__dataclass_fields__))

    def is_sorted(self) -> bool:
        d = self.depths
        if len(d) < 2:
            return True
        ok = (d[1:] > d[:-1]) | ((d[1:] == d[:-1]) & (self.ids[1:] > self.ids[:-1]))
        return bool(np.all(ok))


def footprint_radius(cov2d: np.ndarray, opacities: np.ndarray, alpha_star: float) -> np.ndarray:
    """Half-width of a square that contains every pixel where alpha >= alpha*.

    alpha >= alpha* needs d^T conic d <= 2 ln(o / alpha*), and
    d^T conic d >= |d|^2 / lambda_max, so |d| <= sqrt(2 ln(o/alpha*) lambda_max).
    """
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    with np.errstate(divide="ignore"):
        level = 2.0 * np.log(np.maximum(opacities, 1e-300) / alpha_star)
    r = np.sqrt(np.maximum(level, 0.0) * lam)
    return r * (1 + SPAN_PAD_REL) + SPAN_PAD_ABS


def tile_spans(means: np.ndarray, radii: np.ndarray, camera: Camera) -> np.ndarray:
    """Inclusive tile rectangle covering pixel centres within ``radius`` of the mean (square)."""
    t = camera.tile_size
    x0 = np.ceil(means[:, 0] - radii)
    x1 = np.floor(means[:, 0] + radii)
    y0 = np.ceil(means[:, 1] - radii)
    y1 = np.floor(means[:, 1] + radii)
    empty = (x1 < 0) | (x0 > camera.width - 1) | (y1 < 0) | (y0 > camera.height - 1) | (x0 > x1) | (y0 > y1)
    tx0 = np.clip(x0, 0, camera.width - 1) // t
    tx1 = np.clip(x1, 0, camera.width - 1) // t
    ty0 = np.clip(y0, 0, camera.height - 1) // t
    ty1 = np.clip(y1, 0, camera.height - 1) // t
    span = np.stack([tx0, ty0, tx1, ty1], axis=1).astype(np.int64)
    span[empty] = (0, 0, -1, -1)
    return span


def preprocess(gaussians, rig, config: RenderConfig) -> ProjectedGaussians:
    """Cull once for both eyes and project with the left camera.

    ``rig`` may be a plain Camera for mono rendering. Colours are evaluated
    toward the mid-eye point; Gaussians below alpha* opacity are dropped since
    they can never pass the alpha check.
    """
    gs = as_gaussian_set(gaussians)
    if isinstance(rig, Camera):
        rig = StereoRig(rig, 0.0)
    check_rig(rig, config)
    cam = rig.left
    cull = widened_fov(rig)
    ok, u, v, z = frustum_mask(cull, gs.positions, config.cull_margin_px)
    ok &= gs.opacities >= config.alpha_star
    idx = np.flatnonzero(ok)
    pos = gs.positions[idx]
    x, y, z = camera_coords(cam, pos)
    f = cam.focal
    cov3 = covariances(gs.scales[idx], gs.rotations[idx])
    # EWA: J W Sigma W^T J^T with the perspective Jacobian at the centre
    w = cam.rotation
    cam_cov = np.einsum("ij,njk,lk->nil", w, cov3, w)
    inv_z = 1.0 / z
    j = np.zeros((len(idx), 2, 3))
    j[:, 0, 0] = f * inv_z
    j[:, 0, 2] = -f * x * inv_z * inv_z
    j[:, 1, 1] = f * inv_z
    j[:, 1, 2] = -f * y * inv_z * inv_z
    s2 = np.einsum("nij,njk,nlk->nil", j, cam_cov, j)
    a = s2[:, 0, 0] + config.cov2d_floor
    b = 0.5 * (s2[:, 0, 1] + s2[:, 1, 0])
    c = s2[:, 1, 1] + config.cov2d_floor
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    cov2d = np.stack([a, b, c], axis=1)
    means = np.stack([u[idx], v[idx]], axis=1)

    dirs = pos - rig.mid_eye
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
    degree = min(config.sh_degree, gs.sh_degree)
    rgb = evaluate_sh_batch(gs.sh[idx], dirs, degree)
    opac = gs.opacities[idx]
    radii = footprint_radius(cov2d, opac, config.alpha_star)
    span = tile_spans(means, radii, cam)
    return ProjectedGaussians(gs.ids[idx], means, z, cov2d, conic, rgb, opac, radii, span)


def depth_sort(projected: ProjectedGaussians) -> ProjectedGaussians:
    """Stable ascending depth; equal depths fall back to ascending id."""
    order = np.lexsort((projected.ids, projected.depths))
    return projected.take(order)


# ---------------------------------------------------------------------------
# Tile lists


@dataclass
class TileLists:
    """CSR per-tile lists of indices into a depth-sorted projected array."""

    ptr: np.ndarray
    idx: np.ndarray
    tiles_x: int
    tiles_y: int

    def __len__(self) -> int:
        return self.tiles_x * self.tiles_y

    def get(self, tile: int) -> np.ndarray:
        return self.idx[self.ptr[tile]: self.ptr[tile + 1]]

    def lengths(self) -> np.ndarray:
        return np.diff(self.ptr)

    @classmethod
    def from_pairs(cls, tiles: np.ndarray, items: np.ndarray, tiles_x: int, tiles_y: int,
                   dedup: bool = False) -> "TileLists":
        """Group (tile, item) pairs; items within a tile end up ascending."""
        tiles = np.asarray(tiles, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        order = np.lexsort((items, tiles))
        tiles, items = tiles[order], items[order]
        if dedup and len(tiles):
            keep = np.ones(len(tiles), dtype=bool)
            keep[1:] = (tiles[1:] != tiles[:-1]) | (items[1:] != items[:-1])
            tiles, items = tiles[keep], items[keep]
        n = tiles_x * tiles_y
        counts = np.bincount(tiles, minlength=n)
        ptr = np.concatenate([[0], np.cumsum(counts)])
        return cls(ptr, items, tiles_x, tiles_y)


def bin_tiles(span: np.ndarray, camera: Camera) -> TileLists:
    """Every splat into every tile of its span, preserving the (sorted) input order."""
    ntx, nty = camera.tiles_x, camera.tiles_y
    w = np.maximum(span[:, 2] - span[:, 0] + 1, 0)
    h = np.maximum(span[:, 3] - span[:, 1] + 1, 0)
    counts = w * h
    g = np.repeat(np.arange(len(span)), counts)
    local = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
    wx = np.repeat(w, counts)
    tx = np.repeat(span[:, 0], counts) + local % np.maximum(wx, 1)
    ty = np.repeat(span[:, 1], counts) + local // np.maximum(wx, 1)
    return TileLists.from_pairs(ty * ntx + tx, g, ntx, nty)


# ---------------------------------------------------------------------------
# Blending


@dataclass
class Framebuffer:
    color: np.ndarray
    transmittance: np.ndarray
    alpha_evals: int = 0
    blended: int = 0

    @classmethod
    def blank(cls, camera: Camera) -> "Framebuffer":
        return cls(np.zeros((camera.height, camera.width, 3)), np.ones((camera.height, camera.width)))

    def to_u8(self) -> np.ndarray:
        return np.rint(np.clip(self.color, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class PassRecord:
    """Per (tile, splat) pair that passed the alpha check somewhere in the tile."""

    tiles: np.ndarray
    items: np.ndarray
    col_lo: np.ndarray
    col_hi: np.ndarray


def blend_tiles(lists: TileLists, tiles: np.ndarray, means: np.ndarray, proj: ProjectedGaussians,
                config: RenderConfig, fb: Framebuffer, record: bool = False) -> PassRecord | None:
    """Blend the given tiles into ``fb``, all tiles advancing one list rank per step.

    Per pixel this performs exactly the naive front-to-back loop: the alpha
    expression, skip rule, update order and early termination are the same,
    so results match the per-pixel reference bit for bit.
    """
    t = config.tile_size
    npx = t * t
    tiles = np.asarray(tiles, dtype=np.int64)
    lens = lists.ptr[tiles + 1] - lists.ptr[tiles]
    order = np.argsort(-lens, kind="stable")
    tiles, lens = tiles[order], lens[order]
    nt = len(tiles)
    tx = tiles % lists.tiles_x
    ty = tiles // lists.tiles_x
    lx = np.arange(npx) % t
    ly = np.arange(npx) // t
    px = (tx[:, None] * t + lx[None, :]).astype(np.float64)
    py = (ty[:, None] * t + ly[None, :]).astype(np.float64)
    acc = np.zeros((nt, npx, 3))
    trans = np.ones((nt, npx))
    done = np.zeros((nt, npx), dtype=bool)
    starts = lists.ptr[tiles]
    ca, cb, cc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    a_star, cap, floor = config.alpha_star, config.alpha_cap, config.transmittance_floor
    evals = 0
    blended = 0
    rec_t, rec_g, rec_lo, rec_hi = [], [], [], []
    maxlen = int(lens.max()) if nt else 0
    active = nt
    for k in range(maxlen):
        while active and lens[active - 1] <= k:
            active -= 1
        s = slice(0, active)
        g = lists.idx[starts[:active] + k]
        dx = px[s] - means[g, 0][:, None]
        dy = py[s] - means[g, 1][:, None]
        q = ca[g][:, None] * dx * dx + 2.0 * cb[g][:, None] * dx * dy + cc[g][:, None] * dy * dy
        alpha = np.minimum(cap, proj.opacities[g][:, None] * np.exp(-0.5 * q))
        live = ~done[s]
        evals += int(live.sum())
        upd = live & (alpha >= a_star)
        blended += int(upd.sum())
        wgt = np.where(upd, alpha * trans[s], 0.0)
        acc[s] += proj.rgb[g][:, None, :] * wgt[..., None]
        trans[s] = np.where(upd, trans[s] * (1.0 - alpha), trans[s])
        done[s] |= trans[s] < floor
        if record:
            cols = upd.reshape(active, t, t).any(axis=1)
            hit = np.flatnonzero(cols.any(axis=1))
            if len(hit):
                c = cols[hit]
                lo = np.argmax(c, axis=1)
                hi = t - 1 - np.argmax(c[:, ::-1], axis=1)
                rec_t.append(tiles[hit])
                rec_g.append(g[hit])
                rec_lo.append(tx[hit] * t + lo)
                rec_hi.append(tx[hit] * t + hi)
    # scatter tiles back into the image
    h_idx = (ty[:, None] * t + ly[None, :])
    w_idx = (tx[:, None] * t + lx[None, :])
    fb.color[h_idx, w_idx] = acc
    fb.transmittance[h_idx, w_idx] = trans
    fb.alpha_evals += evals
    fb.blended += blended
    if not record:
        return None
    cat = (lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64))
    return PassRecord(cat(rec_t), cat(rec_g), cat(rec_lo), cat(rec_hi))


def check_sorted(proj: ProjectedGaussians) -> None:
    if not proj.is_sorted():
        raise ContractViolation("projected Gaussians are not sorted by (depth, id)")


def rasterize_mono(projected: ProjectedGaussians, camera: Camera, config: RenderConfig,
                   lists: TileLists | None = None) -> Framebuffer:
    check_sorted(projected)
    if lists is None:
        lists = bin_tiles(projected.span, camera)
    fb = Framebuffer.blank(camera)
    blend_tiles(lists, np.arange(len(lists)), projected.means, projected, config, fb)
    return fb


def rasterize_naive(projected: ProjectedGaussians, camera: Camera, config: RenderConfig,
                    means: np.ndarray | None = None) -> Framebuffer:
    """Per-pixel loop over every splat in order; the bit-exactness oracle (small images only)."""
    check_sorted(projected)
    means = projected.means if means is None else means
    fb = Framebuffer.blank(camera)
    ca, cb, cc = (projected.conic[:, i].copy() for i in range(3))
    mx, my = means[:, 0].copy(), means[:, 1].copy()
    a_star, cap, floor = config.alpha_star, config.alpha_cap, config.transmittance_floor
    for yy in range(camera.height):
        for xx in range(camera.width):
            dx = float(xx) - mx
            dy = float(yy) - my
            q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
            alpha = np.minimum(cap, projected.opacities * np.exp(-0.5 * q))
            col = np.zeros(3)
            tr = 1.0
            for i in np.flatnonzero(alpha >= a_star):
                a = alpha[i]
                col = col + projected.rgb[i] * (a * tr)
                tr = tr * (1.0 - a)
                if tr < floor:
                    break
            fb.color[yy, xx] = col
            fb.transmittance[yy, xx] = tr
    return fb
