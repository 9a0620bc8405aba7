"""Cloud-client collaboration: reuse windows, delta cuts, wire protocol, channel accounting."""

from .channel import BandwidthReport, ChannelModel, Delivery, bandwidth_report, channel_send
from .client import ClientSubgraph, client_apply, client_select_queue
from .session import ClientSession, CloudSession, RoundLog, float32_pose, scene_hash
from .table import ManagementTable, cloud_update
from .transport import SimulatedLink, SocketTransport, connect, serve_once
from .wire import (
    DeltaCut, MessageType, SessionInfo, WireMessage, decode_frame, decode_frames, decode_varints,
    encode_varints,
)

__all__ = [
    "BandwidthReport", "ChannelModel", "Delivery", "bandwidth_report", "channel_send",
    "ClientSubgraph", "client_apply", "client_select_queue", "ClientSession", "CloudSession",
    "RoundLog", "float32_pose", "scene_hash", "ManagementTable", "cloud_update", "SimulatedLink",
    "SocketTransport", "connect", "serve_once", "DeltaCut", "MessageType", "SessionInfo",
    "WireMessage", "decode_frame", "decode_frames", "decode_varints", "encode_varints",
]
