"""Cloud and client actors exchanging wire messages."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from ..codec import Codebook, QuantParams, encode_payload, payload_size, session_params, snap_tree_geometry
from ..core import Camera, RenderConfig
from ..exceptions import ProtocolError
from ..search import Cut, SearchStats, full_cut_search, temporal_cut_search
from .client import ClientSubgraph, client_apply, client_select_queue
from .table import ManagementTable
from .wire import (
    DeltaCut, MessageType, SessionInfo, WireMessage, ack_message, hello, parse_ack, parse_hello,
    parse_pose, pose_message,
)


@dataclass
class RoundLog:
    round_id: int
    frame_id: int
    cut: Cut
    delta: np.ndarray
    evictions: np.ndarray
    message_bytes: int
    full_cut_bytes: int
    stats: SearchStats
    temporal: bool


def scene_hash(tree) -> int:
    h = zlib.crc32(tree.parent.tobytes())
    return zlib.crc32(tree.gaussians.positions.tobytes(), h)


def float32_pose(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """The pose as it survives a POSE message (7 x f32)."""
    pos, quat = camera.pose()
    return pos.astype(np.float32).astype(np.float64), quat.astype(np.float32).astype(np.float64)


class CloudSession:
    """Owns the snapped tree, the management table and the search state.

    ``round(camera)`` runs one LoD round: the first search is a full
    traversal, later ones are temporal and seeded by the previous cut.
    """

    def __init__(self, tree, codebook: Codebook, intrinsics: dict, config: RenderConfig | None = None,
                 frame_interval: int = 4, reuse_threshold: int = 32, worker_count: int = 1,
                 params: QuantParams | None = None, temporal: bool = True):
        self.config = config or RenderConfig()
        self.codebook = codebook
        self.params = params or session_params(tree)
        self.tree = snap_tree_geometry(tree, self.params, codebook)
        self.intrinsics = dict(intrinsics)
        self.table = ManagementTable(reuse_threshold, frame_interval)
        self.worker_count = worker_count
        self.temporal = temporal
        self.known = np.zeros(len(self.tree), dtype=bool)
        self.prev: Cut | None = None
        self.log: list[RoundLog] = []
        self.hash = scene_hash(self.tree)

    def session_info(self) -> SessionInfo:
        return SessionInfo(len(self.tree), self.params.to_bytes(), self.config.tau_star,
                           self.table.frame_interval, self.table.reuse_threshold)

    def search(self, camera: Camera, frame_id: int) -> tuple[Cut, SearchStats, bool]:
        if self.prev is None or not self.temporal:
            cut, stats = full_cut_search(self.tree, camera, self.config, self.worker_count, frame_id)
            return cut, stats, False
        cut, stats = temporal_cut_search(self.tree, camera, self.prev, self.config, self.worker_count, frame_id)
        return cut, stats, True

    def _missing_links(self, nodes: np.ndarray) -> np.ndarray:
        """Ancestors of ``nodes`` whose parent link the client has never received."""
        parent = self.tree.parent
        out = []
        frontier = np.unique(parent[nodes])
        while len(frontier):
            frontier = frontier[frontier >= 0]
            frontier = frontier[~self.known[frontier]]
            if not len(frontier):
                break
            out.append(frontier)
            self.known[frontier] = True
            frontier = np.unique(parent[frontier])
        return np.unique(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)

    def round(self, camera: Camera, frame_id: int = 0) -> tuple[WireMessage, RoundLog]:
        cut, stats, temporal = self.search(camera, frame_id)
        round_id = self.table.round
        delta, evictions = self.table.update(cut.members)
        self.known[delta] = True
        links = self._missing_links(delta)
        tree = self.tree
        payload = encode_payload(
            tree.gaussians.take(delta), self.params, self.codebook,
            parents=tree.parent[delta], leaf=tree.child_count[delta] == 0,
        )
        msg = DeltaCut(round_id, cut.members, links, tree.parent[links], payload).encode()
        full = payload_size(len(cut.members), self.codebook)
        entry = RoundLog(round_id, frame_id, cut, delta, evictions, msg.frame_size, full, stats, temporal)
        self.log.append(entry)
        self.prev = cut
        return msg, entry

    def handle(self, msg: WireMessage) -> list[WireMessage]:
        if msg.type == MessageType.HELLO:
            parse_hello(msg.payload)
            return [hello(self.hash, self.session_info()),
                    WireMessage(MessageType.CODEBOOK, self.codebook.to_bytes())]
        if msg.type == MessageType.POSE:
            pos, quat, frame_id = parse_pose(msg.payload)
            camera = Camera.from_pose(pos, quat, **self.intrinsics)
            out, _ = self.round(camera, frame_id)
            return [out]
        if msg.type == MessageType.ACK:
            parse_ack(msg.payload)
            return []
        raise ProtocolError(f"cloud cannot handle {msg.type.name}")


@dataclass
class ClientSession:
    """Mirror of the cloud's bookkeeping plus the local render queue."""

    intrinsics: dict
    config: RenderConfig = field(default_factory=RenderConfig)
    subgraph: ClientSubgraph | None = None
    info: SessionInfo | None = None
    scene_hash: int = 0
    rounds: int = 0
    _params: QuantParams | None = None

    def hello(self) -> WireMessage:
        return hello()

    def pose(self, camera: Camera, frame_id: int) -> WireMessage:
        pos, quat = camera.pose()
        return pose_message(pos, quat, frame_id)

    def handle(self, msg: WireMessage) -> list[WireMessage]:
        if msg.type == MessageType.HELLO:
            _, self.scene_hash, info = parse_hello(msg.payload)
            if info is None:
                raise ProtocolError("cloud HELLO must carry session constants")
            self.info = info
            self._params = QuantParams.from_bytes(info.quant)
            return []
        if msg.type == MessageType.CODEBOOK:
            if self.info is None:
                raise ProtocolError("CODEBOOK before HELLO")
            book = Codebook.from_bytes(msg.payload)
            self.subgraph = ClientSubgraph(self._params, book, self.info.reuse_threshold,
                                           self.info.frame_interval)
            return []
        if msg.type == MessageType.DELTA_CUT:
            if self.subgraph is None:
                raise ProtocolError("DELTA_CUT before the codebook was synced")
            dc = DeltaCut.parse(msg.payload)
            client_apply(self.subgraph, dc)
            self.rounds += 1
            return [ack_message(dc.round_id)]
        raise ProtocolError(f"client cannot handle {msg.type.name}")

    def select(self, camera: Camera) -> np.ndarray:
        tau = self.info.tau_star if self.info else self.config.tau_star
        return client_select_queue(self.subgraph, camera, tau, self.config.lod_margin_px)
