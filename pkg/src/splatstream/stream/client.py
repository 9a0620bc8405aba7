"""Client-side LoD subgraph: resident Gaussians, mirrored reuse windows, render queue."""

from __future__ import annotations

import numpy as np

from ..codec import Codebook, QuantParams, decode_payload
from ..core import Camera, GaussianSet, LodView, lod_radius, lod_sizes
from ..exceptions import ProtocolError
from .table import ManagementTable
from .wire import DeltaCut, WireMessage


class ClientSubgraph:
    """Resident Gaussians sorted by id, always equal to the mirrored table's keys.

    ``link_ids``/``link_parents`` remember the parent of every node the client
    has ever heard of, so ancestry survives evictions.
    """

    def __init__(self, params: QuantParams, codebook: Codebook, reuse_threshold: int = 32,
                 frame_interval: int = 4):
        self.params = params
        self.codebook = codebook
        self.table = ManagementTable(reuse_threshold, frame_interval)
        self.gaussians = GaussianSet.empty(codebook.sh_degree)
        self.leaf = np.zeros(0, dtype=bool)
        self.parents = np.zeros(0, dtype=np.int64)
        self.link_ids = np.zeros(0, dtype=np.int64)
        self.link_parents = np.zeros(0, dtype=np.int64)
        self.last_cut = np.zeros(0, dtype=np.int64)
        self.queue = np.zeros(0, dtype=np.int64)
        self.duplicate_inserts = 0
        self.rounds_applied = 0

    @property
    def stored_ids(self) -> np.ndarray:
        return self.gaussians.ids

    def __len__(self) -> int:
        return len(self.gaussians)

    def _add_links(self, ids, parents) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        parents = np.asarray(parents, dtype=np.int64)
        all_ids = np.concatenate([self.link_ids, ids])
        all_par = np.concatenate([self.link_parents, parents])
        # later entries win for repeated ids
        uniq, first = np.unique(all_ids[::-1], return_index=True)
        self.link_ids = uniq
        self.link_parents = all_par[::-1][first]

    def parent_of(self, ids: np.ndarray) -> np.ndarray:
        """Known parent per id; -1 for the root or an id without a link."""
        if len(self.link_ids) == 0:
            return np.full(len(ids), -1, dtype=np.int64)
        i = np.clip(np.searchsorted(self.link_ids, ids), 0, len(self.link_ids) - 1)
        hit = self.link_ids[i] == ids
        return np.where(hit, self.link_parents[i], -1)


def client_apply(subgraph: ClientSubgraph, message) -> ClientSubgraph:
    """Apply one DELTA_CUT round in place and return the subgraph.

    The carried full-cut list drives the same window update and eviction as
    the cloud; the decoded records must be exactly the ids that update marks
    as new (re-sent resident ids are overwritten and counted).
    """
    if isinstance(message, WireMessage):
        message = DeltaCut.parse(message.payload)
    elif isinstance(message, (bytes, bytearray, memoryview)):
        message = DeltaCut.parse(bytes(message))
    if message.round_id != subgraph.table.round:
        raise ProtocolError(f"expected round {subgraph.table.round}, got {message.round_id}", 0)
    decoded = decode_payload(message.codec_payload, subgraph.params, subgraph.codebook)
    delta, evictions = subgraph.table.update(message.cut_ids)

    new = decoded.gaussians
    dup = np.isin(new.ids, subgraph.gaussians.ids)
    subgraph.duplicate_inserts += int(dup.sum())
    if not np.array_equal(np.sort(new.ids[~dup]), delta):
        raise ProtocolError("DELTA_CUT records do not match the ids new to this round")

    old = subgraph.gaussians
    keep = ~np.isin(old.ids, np.concatenate([evictions, new.ids]))
    ids = np.concatenate([old.ids[keep], new.ids])
    order = np.argsort(ids, kind="stable")

    def cat(a, b):
        return np.concatenate([a, b])[order]

    subgraph.gaussians = GaussianSet(
        ids[order], cat(old.positions[keep], new.positions), cat(old.scales[keep], new.scales),
        cat(old.rotations[keep], new.rotations), cat(old.opacities[keep], new.opacities),
        cat(old.sh[keep], new.sh), validate=False,
    )
    subgraph.leaf = cat(subgraph.leaf[keep], decoded.leaf)
    subgraph.parents = cat(subgraph.parents[keep], decoded.parents)
    subgraph._add_links(
        np.concatenate([message.link_ids, new.ids]),
        np.concatenate([message.link_parents, decoded.parents]),
    )
    if not np.array_equal(subgraph.gaussians.ids, subgraph.table.keys):
        raise ProtocolError("resident set diverged from the mirrored table")
    subgraph.last_cut = np.asarray(message.cut_ids, dtype=np.int64)
    subgraph.rounds_applied += 1
    return subgraph


def client_select_queue(subgraph: ClientSubgraph, camera: Camera, tau_star: float,
                        margin_px: float = 64.0) -> np.ndarray:
    """Ids to render at ``camera``: the local mirror of the cut predicate.

    A resident node is queued when it is fine enough (size <= tau* or a leaf)
    and its nearest resident ancestor is missing or still too coarse. Walking
    to the nearest resident ancestor, rather than only the direct parent,
    keeps the queue a frontier when an intermediate node has been evicted.
    """
    gs = subgraph.gaussians
    if len(gs) == 0:
        subgraph.queue = np.zeros(0, dtype=np.int64)
        return subgraph.queue
    view = LodView(camera, tau_star, margin_px)
    size = lod_sizes(view, gs.positions, lod_radius(gs.scales))
    fine = (size <= tau_star) | subgraph.leaf

    ids = gs.ids
    anc = subgraph.parent_of(ids)
    pending = anc >= 0
    while True:
        pending &= ~np.isin(anc, ids)
        pending &= anc >= 0
        if not pending.any():
            break
        anc[pending] = subgraph.parent_of(anc[pending])
    has_anc = anc >= 0
    anc_size = np.zeros(len(ids))
    anc_size[has_anc] = size[np.searchsorted(ids, anc[has_anc])]
    coarse_above = ~has_anc | (anc_size > tau_star)
    subgraph.queue = ids[fine & coarse_above]
    return subgraph.queue
