"""Trajectory replay, metrics, benchmarks and the command line."""

from .metrics import SCHEMA_ID, MetricsRow, metrics_csv, overlap_ratio, psnr, read_metrics_csv
from .replay import BenchReport, BenchRow, ReplayOptions, ReplayResult, bench, render_pair, replay
from .trajectory import Pose, Trajectory, orbit, static

__all__ = [
    "SCHEMA_ID", "MetricsRow", "metrics_csv", "overlap_ratio", "psnr", "read_metrics_csv", "BenchReport",
    "BenchRow", "ReplayOptions", "ReplayResult", "bench", "render_pair", "replay", "Pose", "Trajectory",
    "orbit", "static",
]
