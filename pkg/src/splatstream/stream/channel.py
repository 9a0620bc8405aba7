"""Link model with byte, energy and timing accounting, plus bandwidth reporting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ContractViolation
from .wire import WireMessage


@dataclass(frozen=True)
class Delivery:
    send_time: float
    arrival_time: float
    bytes: int
    energy: float


@dataclass
class ChannelModel:
    """One-directional link.

    Energy is kept in nJ/B and bytes as an integer count, so cumulative energy
    is a single product rather than a running float sum.
    """

    rate_bps: float = 100e6
    energy_nj_per_byte: float = 100.0
    latency_s: float = 10e-3
    bytes_sent: int = 0
    messages: int = 0
    transfer_times: list = field(default_factory=list)

    def __post_init__(self):
        if self.rate_bps <= 0 or self.energy_nj_per_byte < 0 or self.latency_s < 0:
            raise ContractViolation("channel rate must be positive; energy and latency non-negative")

    @property
    def energy_per_byte(self) -> float:
        return self.energy_nj_per_byte / 1e9

    def transfer_time(self, nbytes: int) -> float:
        return self.latency_s + 8 * nbytes / self.rate_bps

    def energy_for(self, nbytes: int) -> float:
        return nbytes * self.energy_nj_per_byte / 1e9

    @property
    def energy_spent(self) -> float:
        return self.energy_for(self.bytes_sent)


def channel_send(channel: ChannelModel, msg, send_time: float = 0.0) -> Delivery:
    """Account one message; ``msg`` is a WireMessage (framed size) or raw bytes / a byte count."""
    if isinstance(msg, WireMessage):
        nbytes = msg.frame_size
    elif isinstance(msg, (bytes, bytearray, memoryview)):
        nbytes = len(msg)
    else:
        nbytes = int(msg)
        if nbytes < 0:
            raise ContractViolation("byte count must be non-negative")
    t = channel.transfer_time(nbytes)
    channel.bytes_sent += nbytes
    channel.messages += 1
    channel.transfer_times.append(t)
    return Delivery(send_time, send_time + t, nbytes, channel.energy_for(nbytes))


@dataclass(frozen=True)
class BandwidthReport:
    frame_interval: int
    target_fps: float
    round_bytes: np.ndarray
    rates_bps: np.ndarray

    @property
    def mean_bps(self) -> float:
        return float(self.rates_bps.mean()) if len(self.rates_bps) else 0.0

    @property
    def p95_bps(self) -> float:
        return float(np.percentile(self.rates_bps, 95)) if len(self.rates_bps) else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "bytes", "required_bps"])
        for i, (b, r) in enumerate(zip(self.round_bytes.tolist(), self.rates_bps.tolist())):
            w.writerow([i, b, repr(float(r))])
        w.writerow(["mean", "", repr(self.mean_bps)])
        w.writerow(["p95", "", repr(self.p95_bps)])
        return buf.getvalue()


def bandwidth_report(round_bytes, frame_interval: int = 4, target_fps: float = 90.0) -> BandwidthReport:
    """Required rate per round = 8 * bytes / (w / fps): the round must arrive within w frames."""
    if frame_interval <= 0 or target_fps <= 0:
        raise ContractViolation("frame interval and fps must be positive")
    b = np.asarray([getattr(r, "bytes", r) for r in round_bytes], dtype=np.int64)
    rates = 8 * b / (frame_interval / target_fps)
    return BandwidthReport(frame_interval, target_fps, b, rates.astype(np.float64))
