"""Image quality and the per-frame metrics CSV."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..exceptions import ContractViolation, FormatError
from ..search import overlap_ratio
from ..validation import check_image_pair

SCHEMA_ID = "splatstream-metrics/1"
PSNR_CAP = 100.0


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over RGB in [0, 1]; 8-bit input is rescaled. Identical images give the cap."""
    check_image_pair(a, b)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.dtype == np.uint8:
        a = a / 255.0
    if b.dtype == np.uint8:
        b = b / 255.0
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class MetricsRow:
    frame: int
    round: int
    cut_size: int
    queue_size: int
    delta_size: int
    delta_bytes: int
    overlap: float
    required_bps: float
    energy_j: float
    psnr_db: float
    nodes_visited: int
    alpha_evals: int
    search_s: float = 0.0
    stream_s: float = 0.0
    render_s: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "round" and isinstance(v, (int, float)) and v < 0:
                raise ContractViolation(f"metric {f.name} must be non-negative, got {v}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ContractViolation("overlap must lie in [0, 1]")


FIELDS = [f.name for f in fields(MetricsRow)]
TIMING_FIELDS = ("search_s", "stream_s", "render_s")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def metrics_csv(rows, timings: bool = False) -> str:
    """First line names the schema; timing columns only when asked (they are not reproducible)."""
    cols = FIELDS if timings else [f for f in FIELDS if f not in TIMING_FIELDS]
    buf = io.StringIO()
    buf.write(f"# schema={SCHEMA_ID}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in cols])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[MetricsRow]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# schema={SCHEMA_ID}":
        raise FormatError(f"missing or unknown schema line, expected '# schema={SCHEMA_ID}'")
    reader = csv.DictReader(lines[1:])
    types = {f.name: f.type for f in fields(MetricsRow)}
    out = []
    for rec in reader:
        kw = {k: (int(v) if types[k] == "int" else float(v)) for k, v in rec.items()}
        out.append(MetricsRow(**kw))
    return out


__all__ = ["MetricsRow", "SCHEMA_ID", "metrics_csv", "overlap_ratio", "psnr", "read_metrics_csv"]
