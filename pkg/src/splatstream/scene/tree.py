"""Level-ordered LoD tree: construction, re-layout and the NLOD file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ..core import (
    Gaussian,
    GaussianSet,
    covariances,
    lod_radius,
    matrix_to_quaternion,
    sh_degree_for,
)
from ..exceptions import ContractViolation, DataError, FormatError
from ..validation import as_gaussian_set, check_positive_int

# relative slack added when a parent's extent is grown to contain a child
CONTAIN_SLACK = 1e-9


@dataclass(frozen=True)
class LodNode:
    gaussian: Gaussian
    parent: int | None
    first_child: int | None
    child_count: int
    subtree_id: int
    level: int


class LodTree:
    """Nodes stored in strict level order; node ``i`` carries Gaussian id ``i``.

    ``source_ids`` maps leaves back to the ids of the input Gaussians
    (-1 for merged interior nodes).
    """

    def __init__(self, gaussians: GaussianSet, parent, first_child, child_count, level,
                 source_ids=None, partition=None):
        self.gaussians = gaussians
        self.parent = np.asarray(parent, dtype=np.int64)
        self.first_child = np.asarray(first_child, dtype=np.int64)
        self.child_count = np.asarray(child_count, dtype=np.int64)
        self.level = np.asarray(level, dtype=np.int64)
        n = len(gaussians)
        self.source_ids = (
            np.full(n, -1, dtype=np.int64) if source_ids is None else np.asarray(source_ids, dtype=np.int64)
        )
        self.level_offsets = _level_offsets(self.level)
        self.partition = partition
        self._cache: dict = {}
        for arr in (self.parent, self.first_child, self.child_count, self.level, self.source_ids):
            arr.setflags(write=False)

    # -- basic queries -----------------------------------------------------
    def __len__(self) -> int:
        return self.parent.shape[0]

    @property
    def size(self) -> int:
        return len(self)

    @property
    def depth(self) -> int:
        return len(self.level_offsets) - 1

    @property
    def is_leaf(self) -> np.ndarray:
        return self.child_count == 0

    @property
    def radii(self) -> np.ndarray:
        if "radii" not in self._cache:
            self._cache["radii"] = lod_radius(self.gaussians.scales)
        return self._cache["radii"]

    @property
    def subtree_id(self) -> np.ndarray:
        if self.partition is None:
            return np.full(len(self), -1, dtype=np.int64)
        return self.partition.owner

    def children(self, i: int) -> range:
        fc = int(self.first_child[i])
        if fc < 0:
            return range(0)
        return range(fc, fc + int(self.child_count[i]))

    def node(self, i: int) -> LodNode:
        p = int(self.parent[i])
        fc = int(self.first_child[i])
        return LodNode(
            gaussian=self.gaussians[i],
            parent=None if p < 0 else p,
            first_child=None if fc < 0 else fc,
            child_count=int(self.child_count[i]),
            subtree_id=int(self.subtree_id[i]),
            level=int(self.level[i]),
        )

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.child_count == 0)

    def with_partition(self, partition) -> "LodTree":
        tree = LodTree(self.gaussians, self.parent, self.first_child, self.child_count,
                       self.level, self.source_ids, partition)
        return tree

    def with_gaussians(self, gaussians: GaussianSet) -> "LodTree":
        return LodTree(gaussians, self.parent, self.first_child, self.child_count,
                       self.level, self.source_ids, self.partition)

    def validate(self) -> None:
        n = len(self)
        if n == 0:
            raise ContractViolation("empty tree")
        if not np.array_equal(self.gaussians.ids, np.arange(n)):
            raise ContractViolation("node i must carry Gaussian id i")
        roots = np.flatnonzero(self.parent < 0)
        if roots.tolist() != [0]:
            raise ContractViolation(f"expected a single root at index 0, got {roots.tolist()}")
        idx = np.arange(n)
        if np.any(self.parent[1:] >= idx[1:]):
            raise ContractViolation("parent index must precede child index")
        if np.any(self.level[1:] != self.level[self.parent[1:]] + 1):
            raise ContractViolation("child level must be parent level + 1")
        if np.any(np.diff(self.level) < 0):
            raise ContractViolation("nodes are not in level order")
        has = self.child_count > 0
        if np.any(self.first_child[~has] != -1):
            raise ContractViolation("leaf with a first_child pointer")
        expected = np.zeros(n, dtype=np.int64)
        np.add.at(expected, self.parent[1:], 1)
        if not np.array_equal(expected, self.child_count):
            raise ContractViolation("child_count disagrees with parent pointers")
        for i in np.flatnonzero(has):
            kids = self.parent[self.first_child[i]: self.first_child[i] + self.child_count[i]]
            if np.any(kids != i):
                raise ContractViolation(f"children of node {i} are not contiguous")


def _level_offsets(level: np.ndarray) -> np.ndarray:
    if level.size == 0:
        return np.zeros(1, dtype=np.int64)
    depth = int(level.max()) + 1
    counts = np.bincount(level, minlength=depth)
    offsets = np.zeros(depth + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    offsets.setflags(write=False)
    return offsets


# ---------------------------------------------------------------------------
# Construction


def _morton_order(points: np.ndarray) -> np.ndarray:
    lo = points.min(axis=0)
    span = np.maximum(points.max(axis=0) - lo, 1e-12)
    q = np.minimum(((points - lo) / span * 2097151).astype(np.uint64), 2097151)

    def spread(v):
        v = v & np.uint64(0x1FFFFF)
        v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
        v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
        v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
        v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
        v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
        return v

    code = spread(q[:, 0]) | (spread(q[:, 1]) << np.uint64(1)) | (spread(q[:, 2]) << np.uint64(2))
    return np.argsort(code, kind="stable")


def merge_gaussians(positions, covs, opacities, sh, starts):
    """Moment-matched merge of consecutive groups beginning at ``starts``.

    Weights are opacity x ellipsoid volume. Returns (mu, cov, opacity, sh, weight).
    """
    det = np.maximum(np.linalg.det(covs), 0.0)
    w = opacities * np.sqrt(det)
    w = np.maximum(w, 1e-300)
    wsum = np.add.reduceat(w, starts)
    mu = np.add.reduceat(w[:, None] * positions, starts) / wsum[:, None]
    counts = np.diff(np.append(starts, len(w)))
    d = positions - np.repeat(mu, counts, axis=0)
    second = covs + d[:, :, None] * d[:, None, :]
    cov = np.add.reduceat(w[:, None, None] * second, starts) / wsum[:, None, None]
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    op = np.add.reduceat(w * opacities, starts) / wsum
    shm = np.add.reduceat(w[:, None, None] * sh, starts) / wsum[:, None, None]
    return mu, cov, np.clip(op, 0.0, 1.0), shm, wsum


def _decompose(cov: np.ndarray):
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 1e-18)
    flip = np.linalg.det(vecs) < 0
    vecs[flip, :, 0] *= -1
    return np.sqrt(vals), matrix_to_quaternion(vecs)


def build_lod_tree(gaussians, branching: int = 4) -> LodTree:
    """Agglomerate Gaussians bottom-up into an LoD tree laid out in level order.

    Each round sorts the current nodes along a Morton (octree) curve and merges
    runs of ``branching`` neighbours into a parent. Parents are moment-matched;
    a parent's widest axis is then grown if needed so its 3-sigma sphere
    contains every child's sphere, which makes projected size monotone in depth
    of the tree for any camera.
    """
    gs = as_gaussian_set(gaussians)
    branching = check_positive_int(branching, "branching", 2)
    n = len(gs)
    if n == 0:
        raise ContractViolation("need at least one Gaussian")

    pos = [gs.positions]
    scl = [gs.scales]
    rot = [gs.rotations]
    opa = [gs.opacities]
    shs = [gs.sh]
    cov_cur = covariances(gs.scales, gs.rotations)
    parent = np.full(2 * n, -1, dtype=np.int64)

    cur = np.arange(n)
    cur_pos, cur_scl, cur_opa, cur_sh = gs.positions, gs.scales, gs.opacities, gs.sh
    total = n
    while len(cur) > 1:
        order = _morton_order(cur_pos)
        m = len(order)
        starts = np.arange(0, m, branching)
        if m - starts[-1] == 1:
            starts = starts[:-1]
        mu, cov, op, shm, _ = merge_gaussians(
            cur_pos[order], cov_cur[order], cur_opa[order], cur_sh[order], starts
        )
        scale, quat = _decompose(cov)
        counts = np.diff(np.append(starts, m))
        # grow the widest axis until the parent sphere contains every child sphere
        child_r = lod_radius(cur_scl[order])
        dist = np.linalg.norm(cur_pos[order] - np.repeat(mu, counts, axis=0), axis=1)
        need = np.maximum.reduceat(dist + child_r, starts) * (1 + CONTAIN_SLACK)
        grow = need > lod_radius(scale)
        if grow.any():
            rows = np.flatnonzero(grow)
            scale[rows, np.argmax(scale[rows], axis=1)] = need[rows] / 3.0
        cov = covariances(scale, quat)

        new_ids = total + np.arange(len(starts))
        parent[cur[order]] = np.repeat(new_ids, counts)

        pos.append(mu)
        scl.append(scale)
        rot.append(quat)
        opa.append(op)
        shs.append(shm)
        total += len(starts)
        cur = new_ids
        cur_pos, cur_scl, cur_opa, cur_sh, cov_cur = mu, scale, op, shm, cov

    all_parent = parent[:total]
    raw = GaussianSet(
        np.arange(total), np.concatenate(pos), np.concatenate(scl), np.concatenate(rot),
        np.concatenate(opa), np.concatenate(shs), validate=False,
    )
    source = np.full(total, -1, dtype=np.int64)
    source[:n] = gs.ids
    return _layout_from_parents(raw, all_parent, source)


class LodTreeBuilder(BaseEstimator):
    """Estimator wrapper: ``fit(gaussians)`` builds ``tree_``, optionally partitioned."""

    def __init__(self, branching: int = 4, subtree_size: int | None = 64):
        self.branching = branching
        self.subtree_size = subtree_size

    def fit(self, X, y=None):
        from .partition import partition_subtrees

        tree = build_lod_tree(X, self.branching)
        if self.subtree_size:
            tree = tree.with_partition(partition_subtrees(tree, self.subtree_size))
        self.tree_ = tree
        self.n_nodes_ = len(tree)
        return self

    def transform(self, X=None):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "tree_")
        return self.tree_


# ---------------------------------------------------------------------------
# Layout


def _layout_from_parents(gaussians: GaussianSet, parent: np.ndarray, source_ids=None) -> LodTree:
    """Breadth-first re-indexing of an arbitrary parent array."""
    n = parent.shape[0]
    roots = np.flatnonzero(parent < 0)
    if len(roots) != 1:
        raise DataError(f"expected exactly one root, found {len(roots)}")
    if np.any(parent >= n):
        raise DataError("parent index out of range")
    # children grouped by parent, original order within a family
    kids_order = np.argsort(np.where(parent < 0, -1, parent), kind="stable")
    counts = np.bincount(parent[parent >= 0], minlength=n)
    kid_start = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=kid_start[1:])
    kids_sorted = kids_order[1:] if n > 1 else np.zeros(0, dtype=np.int64)

    order = np.empty(n, dtype=np.int64)
    level = np.empty(n, dtype=np.int64)
    order[0] = roots[0]
    level[0] = 0
    head, tail = 0, 1
    seen = np.zeros(n, dtype=bool)
    seen[roots[0]] = True
    while head < tail:
        frontier = order[head:tail]
        lv = level[head]
        parts = [kids_sorted[kid_start[v]: kid_start[v + 1]] for v in frontier]
        nxt = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        if seen[nxt].any():
            raise DataError("cycle detected in parent pointers")
        seen[nxt] = True
        head = tail
        order[tail: tail + len(nxt)] = nxt
        level[tail: tail + len(nxt)] = lv + 1
        tail += len(nxt)
    if tail != n:
        raise DataError("cycle detected: some nodes are unreachable from the root")

    new_index = np.empty(n, dtype=np.int64)
    new_index[order] = np.arange(n)
    new_parent = np.where(parent[order] < 0, -1, new_index[np.maximum(parent[order], 0)])
    new_counts = counts[order]
    first_child = np.full(n, -1, dtype=np.int64)
    has = new_counts > 0
    # children of consecutive parents are consecutive, so first_child is a prefix sum
    starts = 1 + np.concatenate([[0], np.cumsum(new_counts)[:-1]])
    first_child[has] = starts[has]
    g = gaussians.take(order)
    g = GaussianSet(np.arange(n), g.positions, g.scales, g.rotations, g.opacities, g.sh, validate=False)
    src = None if source_ids is None else np.asarray(source_ids)[order]
    return LodTree(g, new_parent, first_child, new_counts, level, src)


def level_order_layout(tree: LodTree) -> LodTree:
    """Re-index any tree so nodes sit in (level, parent order) with contiguous children."""
    out = _layout_from_parents(tree.gaussians, np.asarray(tree.parent), tree.source_ids)
    if tree.partition is not None:
        from .partition import partition_subtrees

        out = out.with_partition(partition_subtrees(out, tree.partition.target_size))
    return out


def tree_from_parents(gaussians, parent) -> LodTree:
    """Build a tree from explicit parent pointers (any order); -1 marks the root."""
    gs = as_gaussian_set(gaussians)
    return _layout_from_parents(gs, np.asarray(parent, dtype=np.int64), gs.ids)


# ---------------------------------------------------------------------------
# NLOD file format

MAGIC = b"NLOD"
VERSION = 1
_HEADER = struct.Struct("<4sIQBxxxI")


def _record_dtype(k: int) -> np.dtype:
    return np.dtype(
        [
            ("source_id", "<i8"),
            ("parent", "<i8"),
            ("first_child", "<i8"),
            ("child_count", "<u4"),
            ("level", "<u4"),
            ("subtree", "<i4"),
            ("pad", "<u4"),
            ("position", "<f8", (3,)),
            ("scale", "<f8", (3,)),
            ("rotation", "<f8", (4,)),
            ("opacity", "<f8"),
            ("sh", "<f8", (k, 3)),
        ]
    )


def save_tree(path, tree: LodTree) -> None:
    """Header: magic, version u32, node count u64, SH degree u8, 3 pad bytes,
    subtree target u32 (0 = unpartitioned); then fixed-width node records."""
    gs = tree.gaussians
    k = gs.sh.shape[1]
    rec = np.zeros(len(tree), dtype=_record_dtype(k))
    rec["source_id"] = tree.source_ids
    rec["parent"] = tree.parent
    rec["first_child"] = tree.first_child
    rec["child_count"] = tree.child_count
    rec["level"] = tree.level
    rec["subtree"] = tree.subtree_id
    rec["position"] = gs.positions
    rec["scale"] = gs.scales
    rec["rotation"] = gs.rotations
    rec["opacity"] = gs.opacities
    rec["sh"] = gs.sh
    target = tree.partition.target_size if tree.partition is not None else 0
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(tree), sh_degree_for(k), target))
        fh.write(rec.tobytes())


def load_tree(path) -> LodTree:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than NLOD header")
    magic, version, count, degree, target = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported NLOD version {version}")
    dtype = _record_dtype((degree + 1) ** 2)
    body = data[_HEADER.size:]
    if len(body) != dtype.itemsize * count:
        raise FormatError(f"expected {dtype.itemsize * count} record bytes, found {len(body)}")
    rec = np.frombuffer(body, dtype=dtype, count=count)
    gs = GaussianSet(
        np.arange(count), rec["position"], rec["scale"], rec["rotation"], rec["opacity"], rec["sh"],
        validate=False,
    )
    tree = LodTree(gs, rec["parent"], rec["first_child"], rec["child_count"],
                   rec["level"].astype(np.int64), rec["source_id"])
    tree.validate()
    if target:
        from .partition import partition_from_owner

        tree = tree.with_partition(partition_from_owner(tree, rec["subtree"].astype(np.int64), target))
    return tree
