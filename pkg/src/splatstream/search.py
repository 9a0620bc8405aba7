"""LoD cut search: block-streaming full traversal and temporal (subtree-reusing) search.

Both searches return the same cut as :func:`reference_cut`, the plain
depth-first traversal. A node is *expanded* when it is not a leaf and its
projected size exceeds tau*; the cut holds every node whose ancestors are all
expanded and which is not expanded itself.

The temporal search works on the regions of the tree's subtree partition.
Every classification input of a node is ``n . p_cam + const`` for one of five
camera-space unit normals (the depth axis and the four side planes of the
margin-expanded screen). A search leaves, per region and per normal, the
smallest distance by which the evaluated nodes' inputs clear their thresholds.
For a new pose the change of any input inside the region's bounding sphere is
bounded in closed form; regions whose margins all exceed their bounds keep
their previous local result, every other reached region is searched again
from its root.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, LodView, RenderConfig, camera_coords, lod_sizes
from .exceptions import ContractViolation
from .scene.partition import TOP

# absolute safety margin (metres) on top of the motion bound
CERT_EPS = 1e-7


class NodeClass(enum.Enum):
    TOO_COARSE = "too_coarse"
    SELECTED = "selected"
    BELOW_CUT = "below_cut"


@dataclass
class SearchStats:
    nodes_visited: int = 0
    blocks_dispatched: int = 0
    subtrees_searched: int = 0
    subtrees_reused: int = 0
    escalations: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RegionResult:
    view_id: int
    margin: np.ndarray
    cut: np.ndarray
    exits: np.ndarray


@dataclass
class SearchTrace:
    """Per-region certificates carried from one search to the next."""

    tree_key: tuple
    views: dict
    regions: dict


@dataclass(frozen=True)
class Cut:
    frame_id: int
    pose: Camera | None
    members: np.ndarray
    tree_key: tuple | None = None
    trace: SearchTrace | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        m = np.unique(np.asarray(self.members, dtype=np.int64))
        m.setflags(write=False)
        object.__setattr__(self, "members", m)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, node) -> bool:
        i = np.searchsorted(self.members, node)
        return bool(i < len(self.members) and self.members[i] == node)

    def as_set(self) -> set[int]:
        return set(self.members.tolist())

    def same_members(self, other: "Cut") -> bool:
        return np.array_equal(self.members, other.members)


# ---------------------------------------------------------------------------
# Helpers


def _tree_key(tree) -> tuple:
    key = tree._cache.get("key")
    if key is None:
        key = (len(tree), hash(tree.parent.tobytes()))
        tree._cache["key"] = key
    return key


def make_view(camera: Camera, config: RenderConfig) -> LodView:
    return LodView(camera, config.tau_star, config.lod_margin_px)


def node_size(tree, node: int, view: LodView) -> float:
    return float(lod_sizes(view, tree.gaussians.positions[node: node + 1], tree.radii[node: node + 1])[0])


def cut_predicate(tree, node: int, camera: Camera, tau_star: float, margin_px: float = 64.0) -> NodeClass:
    """Local classification of one node against tau*.

    Selected iff (size <= tau* or leaf) and (root or parent size > tau*).
    Leaves larger than tau* are selected so the frontier stays complete.
    """
    view = LodView(camera, tau_star, margin_px)
    size = node_size(tree, node, view)
    fine = size <= tau_star or tree.child_count[node] == 0
    if not fine:
        return NodeClass.TOO_COARSE
    p = int(tree.parent[node])
    if p < 0 or node_size(tree, p, view) > tau_star:
        return NodeClass.SELECTED
    return NodeClass.BELOW_CUT


def _regions(tree):
    """Region id per node (subtrees 0..S-1, top tree S) plus region roots and bounds."""
    cached = tree._cache.get("regions")
    if cached is not None:
        return cached
    part = tree.partition
    n = len(tree)
    if part is None:
        region = np.zeros(n, dtype=np.int64)
        roots = np.array([0])
    else:
        s = part.subtree_count
        region = np.where(part.owner == TOP, s, part.owner)
        roots = np.append(part.roots, 0) if len(part.top_tree) else np.asarray(part.roots)
    count = len(roots)
    pos = tree.gaussians.positions
    lo = np.full((count, 3), np.inf)
    hi = np.full((count, 3), -np.inf)
    np.minimum.at(lo, region, pos)
    np.maximum.at(hi, region, pos)
    centre = 0.5 * (lo + hi)
    rho = np.zeros(count)
    np.maximum.at(rho, region, np.linalg.norm(pos - centre[region], axis=1))
    cached = (region, roots, centre, rho)
    tree._cache["regions"] = cached
    return cached


def _normals(view: LodView) -> np.ndarray:
    """Camera-space unit normals of the certificate term groups: depth axis, then four side planes."""
    return np.vstack([[0.0, 0.0, 1.0], view.planes])


def _evaluate(tree, view: LodView, idx: np.ndarray):
    """Expanded flags and per-group certificate margins, shape (N, 5), for nodes ``idx``.

    Every classification input is ``n . p_cam + const`` for one of five unit
    normals ``n``. An expanded node needs all its inputs to keep their sign;
    a collapsed one only needs its most decisive failing input to, so it
    charges that input's group alone. Leaves never change class.
    """
    pos = tree.gaussians.positions[idx]
    r = tree.radii[idx]
    leaf = tree.child_count[idx] == 0
    size = lod_sizes(view, pos, r)
    expanded = (~leaf) & (size > view.tau_star)

    cam = view.camera
    x, y, z = camera_coords(cam, pos)
    pl = view.planes
    dstar = cam.focal * r / view.tau_star
    depth_live = dstar > cam.near
    # positive value = the condition favouring expansion holds
    t = np.stack([
        z + r,
        cam.far - (z - r),
        np.where(depth_live, dstar - (z - r), -np.inf),
        *[pl[k, 0] * x + pl[k, 1] * y + pl[k, 2] * z + r for k in range(4)],
    ])
    group = np.array([0, 0, 0, 1, 2, 3, 4])
    absval = np.abs(t)
    n = len(idx)
    margin = np.full((n, 5), np.inf)

    exp_rows = np.flatnonzero(expanded)
    if len(exp_rows):
        a = absval[:, exp_rows]
        margin[exp_rows, 0] = a[0:3].min(axis=0)
        margin[exp_rows, 1:] = a[3:].T

    col = np.flatnonzero(~expanded & ~leaf)
    if len(col):
        fail = np.where(t[:, col] > 0, -np.inf, absval[:, col])
        best = np.argmax(fail, axis=0)
        margin[col, group[best]] = fail[best, np.arange(len(col))]
    return expanded, margin


def _motion_bound(ref: LodView, cur: LodView, centre: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Per-region, per-group bound on how far any input can move between the two poses.

    For p in the sphere (s, rho): n.R'(p - c') - n.R(p - c)
    = u.(s - c) - v.(c' - c) + u.(p - s), with u = R'^T n - R^T n and v = R'^T n.
    """
    normals = _normals(ref)
    c_ref = ref.camera.center
    v = normals @ cur.camera.rotation
    u = v - normals @ ref.camera.rotation
    fixed = (centre - c_ref) @ u.T - (v @ (cur.camera.center - c_ref))[None, :]
    return np.abs(fixed) + rho[:, None] * np.linalg.norm(u, axis=1)[None, :]


def _compatible(a: LodView, b: LodView) -> bool:
    return (
        a.camera.same_intrinsics(b.camera)
        and a.tau_star == b.tau_star
        and a.margin_px == b.margin_px
    )


def _map(worker_count: int, fn, items):
    items = list(items)
    if worker_count <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=worker_count) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Oracle


def reference_cut(tree, camera: Camera, config: RenderConfig) -> np.ndarray:
    """Recursive depth-first traversal in plain Python; the equality oracle."""
    view = make_view(camera, config)
    r_ = camera.rotation.tolist()
    t_ = camera.translation.tolist()
    pl = view.planes.tolist()
    f, near, far, tau = camera.focal, camera.near, camera.far, config.tau_star
    lists = tree._cache.get("py_lists")
    if lists is None:
        lists = (tree.gaussians.positions.tolist(), tree.radii.tolist(), tree.first_child.tolist(),
                 tree.child_count.tolist())
        tree._cache["py_lists"] = lists
    pos, rad, first, count = lists
    out: list[int] = []

    def size(i):
        px, py, pz = pos[i]
        r = rad[i]
        x = r_[0][0] * px + r_[0][1] * py + r_[0][2] * pz + t_[0]
        y = r_[1][0] * px + r_[1][1] * py + r_[1][2] * pz + t_[1]
        z = r_[2][0] * px + r_[2][1] * py + r_[2][2] * pz + t_[2]
        if not (z + r > 0 and z - r <= far):
            return 0.0
        for a, b, c in pl:
            if not a * x + b * y + c * z >= -r:
                return 0.0
        return f * r / max(near, z - r)

    def visit(i):
        if count[i] == 0 or size(i) <= tau:
            out.append(i)
            return
        for c in range(first[i], first[i] + count[i]):
            visit(c)

    visit(0)
    return np.array(sorted(out), dtype=np.int64)


def validate_cut(tree, cut) -> bool:
    """True iff every root-to-leaf path contains exactly one cut member."""
    members = cut.members if isinstance(cut, Cut) else np.asarray(list(cut), dtype=np.int64)
    n = len(tree)
    if len(members) and (members.min() < 0 or members.max() >= n):
        return False
    hits = np.zeros(n, dtype=np.int64)
    hits[members] = 1
    if len(np.unique(members)) != len(members):
        return False
    off = tree.level_offsets
    for lv in range(1, len(off) - 1):
        lo, hi = off[lv], off[lv + 1]
        hits[lo:hi] += hits[tree.parent[lo:hi]]
    return bool(np.all(hits[tree.child_count == 0] == 1))


# ---------------------------------------------------------------------------
# Full search


def full_cut_search(tree, camera: Camera, config: RenderConfig, worker_count: int = 1,
                    frame_id: int = 0) -> tuple[Cut, SearchStats]:
    """Level-by-level streaming traversal over blocks of consecutive nodes.

    Only children of expanded nodes are examined; since siblings are contiguous
    in the level-ordered array, each level's work is a handful of index runs
    that are chopped into blocks of at most ``config.block_size`` nodes.
    """
    view = make_view(camera, config)
    stats = SearchStats()
    region, roots, _, _ = _regions(tree)
    active = np.zeros(1, dtype=np.int64)
    cut_parts, exp_parts, margin_parts = [], [], []
    while len(active):
        expanded, margins, nb = _evaluate_blocks(tree, view, active, config.block_size, worker_count)
        stats.blocks_dispatched += nb
        stats.nodes_visited += len(active)
        cut_parts.append(active[~expanded])
        exp_parts.append(active[expanded])
        margin_parts.append((active, margins))
        parents = active[expanded]
        fc = tree.first_child[parents]
        cc = tree.child_count[parents]
        active = _expand_runs(fc, cc)

    members = np.concatenate(cut_parts)
    expanded_nodes = np.concatenate(exp_parts) if exp_parts else np.zeros(0, dtype=np.int64)
    visited = np.concatenate([a for a, _ in margin_parts])
    margins = np.concatenate([m for _, m in margin_parts])
    trace = _trace_from_arrays(tree, view, region, members, expanded_nodes, visited, margins)
    cut = Cut(frame_id, camera, members, _tree_key(tree), trace)
    return cut, stats


def _expand_runs(first: np.ndarray, count: np.ndarray) -> np.ndarray:
    if len(first) == 0:
        return np.zeros(0, dtype=np.int64)
    total = int(count.sum())
    starts = np.repeat(first - np.concatenate([[0], np.cumsum(count)[:-1]]), count)
    return starts + np.arange(total)


def _trace_from_arrays(tree, view, region, members, expanded_nodes, visited, margins) -> SearchTrace:
    nreg = int(region.max()) + 1
    reg_margin = np.full((nreg, 5), np.inf)
    np.minimum.at(reg_margin, region[visited], margins)
    touched = np.zeros(nreg, dtype=bool)
    touched[region[visited]] = True
    cut_by = _group(members, region[members], nreg)
    kids = _expand_runs(tree.first_child[expanded_nodes], tree.child_count[expanded_nodes])
    par = tree.parent[kids]
    crossing = region[kids] != region[par]
    exit_by = _group(region[kids[crossing]], region[par[crossing]], nreg)
    regions = {
        int(q): RegionResult(0, reg_margin[q], cut_by.get(q, _EMPTY), np.unique(exit_by.get(q, _EMPTY)))
        for q in np.flatnonzero(touched)
    }
    return SearchTrace(_tree_key(tree), {0: view}, regions)


_EMPTY = np.zeros(0, dtype=np.int64)
_EMPTY.setflags(write=False)


def _group(values: np.ndarray, keys: np.ndarray, nkeys: int) -> dict:
    if len(values) == 0:
        return {}
    order = np.argsort(keys, kind="stable")
    k = keys[order]
    v = values[order]
    bounds = np.flatnonzero(np.diff(k)) + 1
    out = {}
    for chunk_k, chunk_v in zip(np.split(k, bounds), np.split(v, bounds)):
        out[int(chunk_k[0])] = np.sort(chunk_v)
    return out


# ---------------------------------------------------------------------------
# Temporal search


def _evaluate_blocks(tree, view, active, block_size: int, worker_count: int):
    blocks = [active[i: i + block_size] for i in range(0, len(active), block_size)]
    results = _map(worker_count, lambda blk: _evaluate(tree, view, blk), blocks)
    expanded = np.concatenate([r[0] for r in results])
    margins = np.concatenate([r[1] for r in results])
    return expanded, margins, len(blocks)


def _search_regions(tree, view, region, qs, roots, block_size: int, worker_count: int):
    """Level-synchronous search of several regions at once, each confined to itself.

    Returns {region: (cut, exits, margin)} plus visit and block counts.
    """
    active = np.asarray(roots[qs], dtype=np.int64)
    nodes, margins, cuts, ex_src, ex_dst = [], [], [], [], []
    visited = blocks = 0
    while len(active):
        expanded, m, nb = _evaluate_blocks(tree, view, active, block_size, worker_count)
        blocks += nb
        visited += len(active)
        nodes.append(active)
        margins.append(m)
        cuts.append(active[~expanded])
        parents = active[expanded]
        kids = _expand_runs(tree.first_child[parents], tree.child_count[parents])
        src = region[tree.parent[kids]]
        inside = region[kids] == src
        ex_src.append(src[~inside])
        ex_dst.append(region[kids[~inside]])
        active = kids[inside]
    nodes = np.concatenate(nodes)
    nreg = len(roots)
    reg_margin = np.full((nreg, 5), np.inf)
    np.minimum.at(reg_margin, region[nodes], np.concatenate(margins))
    cut = np.concatenate(cuts)
    cut_by = _group(cut, region[cut], nreg)
    exit_by = _group(np.concatenate(ex_dst), np.concatenate(ex_src), nreg)
    out = {
        int(q): (cut_by.get(int(q), _EMPTY), np.unique(exit_by.get(int(q), _EMPTY)), reg_margin[q])
        for q in qs
    }
    return out, visited, blocks


def temporal_cut_search(tree, camera: Camera, prev: Cut, config: RenderConfig,
                        worker_count: int = 1, frame_id: int | None = None) -> tuple[Cut, SearchStats]:
    """Incremental search seeded by the previous cut; always equals the full search.

    Regions are processed top-down from the root region. A region with a
    valid certificate reuses its previous cut members and exits without
    touching any node; every other reached region is searched locally from
    its root. Searching a region that held no member of ``prev`` counts as an
    escalation (the frontier moved into it from above or below).
    """
    key = _tree_key(tree)
    if prev.tree_key is not None and prev.tree_key != key:
        raise ContractViolation("previous cut was produced on a different tree")
    if len(prev.members) == 0:
        raise ContractViolation("previous cut is empty")
    if prev.members.max() >= len(tree):
        raise ContractViolation("previous cut references nodes outside this tree")

    view = make_view(camera, config)
    region, roots, centre, rho = _regions(tree)
    prev_owner = set(np.unique(region[prev.members]).tolist())
    old = prev.trace if prev.trace is not None and prev.trace.tree_key == key else None

    # certificate check for every region that carries one
    reusable: set[int] = set()
    if old is not None:
        by_view: dict[int, list[int]] = {}
        for q, res in old.regions.items():
            by_view.setdefault(res.view_id, []).append(q)
        for vid, qs in by_view.items():
            ref = old.views[vid]
            if not _compatible(ref, view):
                continue
            qs_arr = np.array(qs)
            bound = _motion_bound(ref, view, centre[qs_arr], rho[qs_arr])
            margins = np.stack([old.regions[q].margin for q in qs])
            scale = np.linalg.norm(centre[qs_arr], axis=1) + rho[qs_arr] + np.linalg.norm(ref.camera.center)
            ok = np.all(margins > bound + CERT_EPS * (1.0 + scale)[:, None], axis=1)
            reusable.update(int(q) for q in qs_arr[ok])

    stats = SearchStats()
    new_views = {0: view}
    view_remap: dict[int, int] = {}
    results: dict[int, RegionResult] = {}
    root_region = int(region[0])
    wave = [root_region]
    seen = {root_region}
    while wave:
        reuse = [q for q in wave if q in reusable]
        search = [q for q in wave if q not in reusable]
        for q in reuse:
            res = old.regions[q]
            if res.view_id not in view_remap:
                view_remap[res.view_id] = len(new_views)
                new_views[view_remap[res.view_id]] = old.views[res.view_id]
            results[q] = RegionResult(view_remap[res.view_id], res.margin, res.cut, res.exits)
            stats.subtrees_reused += 1

        if search:
            found, visited, blocks = _search_regions(
                tree, view, region, np.array(search), roots, config.block_size, worker_count
            )
            stats.nodes_visited += visited
            stats.blocks_dispatched += blocks
            for q in search:
                cut, exits, margin = found[q]
                results[q] = RegionResult(0, margin, cut, exits)
                stats.subtrees_searched += 1
                if q not in prev_owner:
                    stats.escalations += 1

        nxt = []
        for q in sorted(wave):
            for e in results[q].exits.tolist():
                if e not in seen:
                    seen.add(e)
                    nxt.append(e)
        wave = nxt

    members = np.concatenate([results[q].cut for q in sorted(results)]) if results else _EMPTY
    trace = SearchTrace(key, new_views, results)
    fid = prev.frame_id + 1 if frame_id is None else frame_id
    return Cut(fid, camera, members, key, trace), stats


def overlap_ratio(prev, curr) -> float:
    """|prev & curr| / |prev|; an empty ``prev`` counts as full overlap."""
    a = prev.members if isinstance(prev, Cut) else np.unique(np.asarray(list(prev), dtype=np.int64))
    b = curr.members if isinstance(curr, Cut) else np.unique(np.asarray(list(curr), dtype=np.int64))
    if len(a) == 0:
        return 1.0
    return float(len(np.intersect1d(a, b, assume_unique=True)) / len(a))


__all__ = [
    "Cut", "NodeClass", "SearchStats", "cut_predicate", "full_cut_search",
    "reference_cut", "temporal_cut_search", "validate_cut", "overlap_ratio",
]
