"""Right-eye rendering from left-eye tile lists.

The left pass records, for every (left tile, splat) pair that passed the
alpha check, the pixel columns where it passed. Each pair is shifted by the
splat's disparity into the right-eye tiles it can reach, giving four offset
lists per left tile (offset 0..3 tiles). A right tile merges the lists it
receives from its four source tiles and blends exactly like the mono path.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from ..core import RenderConfig, StereoRig, check_rig
from ..exceptions import ContractViolation
from .raster import (
    Framebuffer, PassRecord, ProjectedGaussians, TileLists, bin_tiles, blend_tiles, check_sorted,
    tile_spans,
)

OFFSETS = 4
REACH_MODES = ("tile", "span")


def disparity(depth, rig: StereoRig):
    """B*f/depth in pixels; scalar in, scalar out."""
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d < rig.left.near):
        raise ContractViolation("disparity is only defined for depth >= near")
    out = rig.baseline * rig.left.focal / d
    return float(out) if out.ndim == 0 else out


def merge_tile_lists(lists) -> list:
    """k-way merge of sorted lists, dropping repeated keys.

    Keys are anything totally ordered: indices into a depth-sorted array or
    (depth, id) tuples.
    """
    for lst in lists:
        for a, b in zip(lst, lst[1:]):
            if b < a:
                raise ContractViolation("merge input list is not sorted")
    out = []
    for key in heapq.merge(*lists):
        if not out or out[-1] != key:
            out.append(key)
    return out


@dataclass
class OffsetLists:
    """The stereo buffer: per left tile, four depth-ordered lists keyed by tile offset."""

    left_tile: np.ndarray
    offset: np.ndarray
    item: np.ndarray
    right_tile: np.ndarray
    dropped: int = 0

    def get(self, left_tile: int, k: int) -> np.ndarray:
        sel = (self.left_tile == left_tile) & (self.offset == k)
        return self.item[sel]

    def concat(self, other: "OffsetLists") -> "OffsetLists":
        return OffsetLists(
            np.concatenate([self.left_tile, other.left_tile]), np.concatenate([self.offset, other.offset]),
            np.concatenate([self.item, other.item]), np.concatenate([self.right_tile, other.right_tile]),
            self.dropped + other.dropped,
        )

    @classmethod
    def empty(cls) -> "OffsetLists":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, 0)


def reach_range(col: np.ndarray, d: np.ndarray, reach: str) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive right tile-column range fed by a survivor in left tile column ``col``.

    ``span``: all four offsets (clipped later to the splat's right span).
    ``tile``: right pixel p samples the splat at left position p + d, so right
    tile r is fed when (r*t + d - 1, r*t + t + d) meets the left tile, i.e.
    r strictly inside (col - 1 - d/t, col + 1 - d/t).
    """
    if reach == "span":
        return col - (OFFSETS - 1), col
    if reach == "tile":
        return (np.floor(col - 1 - d).astype(np.int64) + 1, np.ceil(col + 1 - d).astype(np.int64) - 1)
    raise ContractViolation(f"reach must be one of {REACH_MODES}")


def build_offset_lists(record: PassRecord, disp: np.ndarray, right_span: np.ndarray,
                       tiles_x: int, tile_size: int, reach: str = "tile") -> OffsetLists:
    """Shift each left survivor into the right tiles it can reach.

    Records are in depth order per tile, hence so is every offset list.
    Targets outside offsets 0..3 are dropped and counted.
    """
    g = record.items
    c = record.tiles % tiles_x
    row = record.tiles // tiles_x
    lo, hi = reach_range(c, disp[g] / tile_size, reach)
    r0 = np.maximum(lo, right_span[g, 0])
    r1 = np.minimum(hi, right_span[g, 2])
    in_rows = (row >= right_span[g, 1]) & (row <= right_span[g, 3])
    n = np.where(in_rows, np.maximum(r1 - r0 + 1, 0), 0)
    src = np.repeat(np.arange(len(g)), n)
    local = np.arange(int(n.sum())) - np.repeat(np.cumsum(n) - n, n)
    r = r0[src] + local
    k = c[src] - r
    keep = (k >= 0) & (k < OFFSETS)
    src, r, k = src[keep], r[keep], k[keep]
    return OffsetLists(record.tiles[src], k, g[src], row[src] * tiles_x + r, int((~keep).sum()))


def merged_right_lists(buffer: OffsetLists, tiles_x: int, tiles_y: int) -> TileLists:
    """Per right tile, the sorted union of the four incoming offset lists."""
    return TileLists.from_pairs(buffer.right_tile, buffer.item, tiles_x, tiles_y, dedup=True)


# ---------------------------------------------------------------------------
# Schedule


def border_columns(tiles_x: int) -> range:
    """Right-eye tile columns without a full set of four source columns."""
    return range(max(tiles_x - (OFFSETS - 1), 0), tiles_x)


def stereo_schedule(tiles_x: int) -> list[tuple[str, int]]:
    """Pipelined order: right column c follows left column c + 3; border columns go last."""
    order: list[tuple[str, int]] = []
    inner = tiles_x - (OFFSETS - 1)
    for c in range(tiles_x):
        order.append(("L", c))
        r = c - (OFFSETS - 1)
        if 0 <= r < inner:
            order.append(("R", r))
    order += [("R", c) for c in border_columns(tiles_x)]
    return order


def validate_schedule(schedule, tiles_x: int) -> None:
    seen_left: set[int] = set()
    seen_right: set[int] = set()
    border = set(border_columns(tiles_x))
    for eye, col in schedule:
        if not 0 <= col < tiles_x:
            raise ContractViolation(f"column {col} outside 0..{tiles_x - 1}")
        if eye == "L":
            if col in seen_left:
                raise ContractViolation(f"left column {col} scheduled twice")
            seen_left.add(col)
        elif eye == "R":
            if col in seen_right:
                raise ContractViolation(f"right column {col} scheduled twice")
            if col not in border:
                missing = [s for s in range(col, col + OFFSETS) if s not in seen_left]
                if missing:
                    raise ContractViolation(f"right column {col} scheduled before left columns {missing}")
            seen_right.add(col)
        else:
            raise ContractViolation(f"unknown eye {eye!r}")
    if len(seen_left) != tiles_x or len(seen_right) != tiles_x:
        raise ContractViolation("schedule does not cover every column of both eyes")


# ---------------------------------------------------------------------------
# Rendering


@dataclass
class StereoStats:
    left_alpha_evals: int = 0
    right_alpha_evals: int = 0
    offset_drops: int = 0
    via_lists: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    independent: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # filled only when the oracle comparison runs
    verified: bool = False
    mono_pair_alpha_evals: int = 0
    tiles_checked: int = 0
    tiles_equivalent: int = 0
    antecedent_violations: int = 0
    implication_failures: int = 0
    mismatch_pixels: int = 0
    pixels: int = 0

    @property
    def stereo_alpha_evals(self) -> int:
        return self.left_alpha_evals + self.right_alpha_evals

    @property
    def reuse_fraction(self) -> float:
        total = int(self.via_lists.sum() + self.independent.sum())
        return 1.0 if total == 0 else float(self.via_lists.sum()) / total

    @property
    def alpha_eval_ratio(self) -> float:
        return self.stereo_alpha_evals / self.mono_pair_alpha_evals if self.mono_pair_alpha_evals else 0.0

    @property
    def mismatch_rate(self) -> float:
        return self.mismatch_pixels / self.pixels if self.pixels else 0.0

    def as_dict(self) -> dict:
        return dict(
            left_alpha_evals=self.left_alpha_evals, right_alpha_evals=self.right_alpha_evals,
            mono_pair_alpha_evals=self.mono_pair_alpha_evals, offset_drops=self.offset_drops,
            reuse_fraction=self.reuse_fraction, tiles_checked=self.tiles_checked,
            tiles_equivalent=self.tiles_equivalent, antecedent_violations=self.antecedent_violations,
            implication_failures=self.implication_failures, mismatch_pixels=self.mismatch_pixels,
        )


def _pair_keys(tiles, items, n_items):
    return np.asarray(tiles, dtype=np.int64) * n_items + np.asarray(items, dtype=np.int64)


def _verify(stats, proj, left_rec, merged, oracle_lists, right_means, rig, config, right_fb, tiles_x,
            disp, reach):
    """Compare with an independent right-eye binning and render of the same splats.

    The antecedent for a (right tile, splat) pair of the oracle's contributing
    set is that the splat passed the left alpha check in a source tile that
    feeds this right tile under the chosen reach rule.
    """
    cam = rig.left
    oracle_fb = Framebuffer.blank(cam)
    n_tiles = len(oracle_lists)
    rec = blend_tiles(oracle_lists, np.arange(n_tiles), right_means, proj, config, oracle_fb, record=True)
    stats.mono_pair_alpha_evals = stats.left_alpha_evals + oracle_fb.alpha_evals
    n = max(len(proj), 1)
    border = np.isin(rec.tiles % tiles_x, np.asarray(border_columns(tiles_x)))
    o_tile, o_item = rec.tiles[~border], rec.items[~border]

    # survivors re-keyed by the right tiles they feed, ignoring the right span
    whole = np.tile(np.array([0, 0, tiles_x - 1, oracle_lists.tiles_y - 1]), (len(proj), 1))
    fed = build_offset_lists(left_rec, disp, whole, tiles_x, cam.tile_size, reach)
    surv = np.unique(_pair_keys(fed.right_tile, fed.item, n))

    m_tiles = np.repeat(np.arange(n_tiles), merged.lengths())
    m_keys = np.unique(_pair_keys(m_tiles, merged.idx, n))
    l_tiles = np.repeat(np.arange(n_tiles), oracle_lists.lengths())
    l_keys = np.unique(_pair_keys(l_tiles, oracle_lists.idx, n))

    o_keys = _pair_keys(o_tile, o_item, n)
    missing = ~np.isin(o_keys, m_keys)
    violated = ~np.isin(o_keys, surv)
    extra = ~np.isin(m_keys, l_keys)

    inner = np.flatnonzero(~np.isin(np.arange(n_tiles) % tiles_x, np.asarray(border_columns(tiles_x))))
    bad = np.zeros(n_tiles, dtype=bool)
    bad[o_tile[missing]] = True
    bad[m_keys[extra] // n] = True
    viol = np.zeros(n_tiles, dtype=bool)
    viol[o_tile[violated]] = True
    stats.tiles_checked = len(inner)
    stats.tiles_equivalent = int((~bad[inner]).sum())
    stats.antecedent_violations = int(viol[inner].sum())
    stats.implication_failures = int((bad[inner] & ~viol[inner]).sum())
    diff = np.any(right_fb.color != oracle_fb.color, axis=2) | (right_fb.transmittance != oracle_fb.transmittance)
    stats.mismatch_pixels = int(diff.sum())
    stats.pixels = int(diff.size)
    stats.verified = True
    return oracle_fb


@dataclass
class StereoResult:
    left: Framebuffer
    right: Framebuffer
    stats: StereoStats
    buffer: OffsetLists
    oracle_right: Framebuffer | None = None

    def __iter__(self):
        return iter((self.left, self.right, self.stats))


def rasterize_stereo(projected: ProjectedGaussians, rig: StereoRig, config: RenderConfig,
                     schedule=None, verify: bool = False, reach: str = "tile") -> StereoResult:
    """Render both eyes; the right eye reuses left-pass survivors through offset lists.

    ``schedule`` is a list of ("L"|"R", column) tasks (see :func:`stereo_schedule`);
    ``None`` renders each eye in one batch. Output is identical either way.
    With ``verify`` the right eye is also rendered from an independent binning
    and the list and pixel comparisons are filled into the stats.
    """
    check_sorted(projected)
    check_rig(rig, config)
    cam = rig.left
    tx, ty = cam.tiles_x, cam.tiles_y
    disp = disparity(projected.depths, rig) if len(projected) else np.zeros(0)
    right_means = projected.means.copy()
    right_means[:, 0] = right_means[:, 0] - disp
    right_span = tile_spans(right_means, projected.radii, cam)
    left_lists = bin_tiles(projected.span, cam)
    oracle_lists = bin_tiles(right_span, cam)

    if schedule is None:
        schedule = [("L", c) for c in range(tx)] + [("R", c) for c in range(tx)]
        batch = True
    else:
        batch = False
    validate_schedule(schedule, tx)

    left = Framebuffer.blank(cam)
    right = Framebuffer.blank(cam)
    stats = StereoStats()
    buffer = OffsetLists.empty()
    records: list[PassRecord] = []
    border = set(border_columns(tx))
    tiles_by_col = np.arange(tx * ty).reshape(ty, tx)

    def run_left(cols):
        nonlocal buffer
        rec = blend_tiles(left_lists, tiles_by_col[:, cols].ravel(), projected.means, projected,
                          config, left, record=True)
        records.append(rec)
        buffer = buffer.concat(build_offset_lists(rec, disp, right_span, tx, cam.tile_size, reach))

    def run_right(cols):
        inner = [c for c in cols if c not in border]
        edge = [c for c in cols if c in border]
        if inner:
            sel = np.isin(buffer.right_tile % tx, inner)
            part = OffsetLists(buffer.left_tile[sel], buffer.offset[sel], buffer.item[sel], buffer.right_tile[sel])
            lists = merged_right_lists(part, tx, ty)
            blend_tiles(lists, tiles_by_col[:, inner].ravel(), right_means, projected, config, right)
        if edge:
            blend_tiles(oracle_lists, tiles_by_col[:, edge].ravel(), right_means, projected, config, right)

    if batch:
        run_left(list(range(tx)))
        run_right(list(range(tx)))
    else:
        for eye, col in schedule:
            (run_left if eye == "L" else run_right)([col])

    merged = merged_right_lists(buffer, tx, ty)
    stats.left_alpha_evals = left.alpha_evals
    stats.right_alpha_evals = right.alpha_evals
    stats.offset_drops = buffer.dropped
    is_border = np.isin(np.arange(tx * ty) % tx, np.asarray(list(border), dtype=np.int64))
    stats.via_lists = np.where(is_border, 0, merged.lengths())
    stats.independent = np.where(is_border, oracle_lists.lengths(), 0)
    oracle_fb = None
    if verify:
        left_rec = _concat_records(records)
        oracle_fb = _verify(stats, projected, left_rec, merged, oracle_lists, right_means, rig, config, right, tx,
                            disp, reach)
    return StereoResult(left, right, stats, buffer, oracle_fb)


def _concat_records(records: list[PassRecord]) -> PassRecord:
    return PassRecord(*(np.concatenate([getattr(r, f) for r in records]) for f in ("tiles", "items", "col_lo", "col_hi")))
