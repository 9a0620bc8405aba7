"""Attribute compression for transmitted Gaussians.

SH coefficients are vector-quantized against a per-scene codebook; position,
log-scale, rotation and opacity are stored as 16-bit fixed point. Records are
fixed width so payload sizes are known exactly from the record count.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import Gaussian, GaussianSet, lod_radius, sh_degree_for
from .exceptions import ContractViolation, FormatError, ProtocolError
from .validation import as_gaussian_set, check_positive_int

QMAX = 65535
NO_PARENT = 0xFFFFFFFF
LEAF_BIT = 0x80000000
PAYLOAD_HEADER = struct.Struct("<IIB")
CODEBOOK_MAGIC = b"NCBK"
CODEBOOK_FORMAT = 1
_NCBK_HEADER = struct.Struct("<4sIIII")


# ---------------------------------------------------------------------------
# Codebook


@dataclass(frozen=True)
class Codebook:
    """K float32-representable SH vectors; ``version`` is a CRC of the entries."""

    entries: np.ndarray
    version: int = None
    distortion_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float32)
        if e.ndim != 2 or e.shape[0] == 0:
            raise ContractViolation("codebook entries must be a non-empty (K, dim) array")
        if e.shape[0] > 65536:
            raise ContractViolation("codebook size must be at most 65536")
        if not np.all(np.isfinite(e)):
            raise ContractViolation("codebook entries must be finite")
        e64 = e.astype(np.float64)
        e64.setflags(write=False)
        object.__setattr__(self, "entries", e64)
        if self.version is None:
            object.__setattr__(self, "version", zlib.crc32(e.tobytes()))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def sh_degree(self) -> int:
        return sh_degree_for(self.dim // 3)

    @property
    def index_dtype(self):
        return np.uint8 if self.size <= 256 else np.uint16

    def nearest(self, vectors: np.ndarray) -> np.ndarray:
        return nearest_entry(self.entries, vectors)

    def to_bytes(self) -> bytes:
        head = _NCBK_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_FORMAT, self.version, self.size, self.dim)
        return head + self.entries.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        if len(data) < _NCBK_HEADER.size:
            raise FormatError("codebook file shorter than its header")
        magic, fmt, version, k, dim = _NCBK_HEADER.unpack_from(data)
        if magic != CODEBOOK_MAGIC:
            raise FormatError(f"bad codebook magic {magic!r}")
        if fmt != CODEBOOK_FORMAT:
            raise FormatError(f"unsupported codebook format version {fmt}")
        need = _NCBK_HEADER.size + 4 * k * dim
        if len(data) != need:
            raise FormatError(f"codebook file has {len(data)} bytes, expected {need}")
        entries = np.frombuffer(data, dtype="<f4", offset=_NCBK_HEADER.size).reshape(k, dim)
        book = cls(entries)
        if book.version != version:
            raise FormatError("codebook version does not match its entries")
        return book

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def nearest_entry(entries: np.ndarray, vectors: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Index of the closest entry by squared Euclidean distance; ties go to the lowest index."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != entries.shape[1]:
        raise ContractViolation(f"vectors must have shape (N, {entries.shape[1]})")
    out = np.empty(len(x), dtype=np.int64)
    e_sq = (entries ** 2).sum(axis=1)
    # keep the (rows x K) distance block near 2**24 elements
    step = max(1, min(chunk * 8, (1 << 24) // len(entries)))
    for lo in range(0, len(x), step):
        block = x[lo: lo + step]
        # fast expanded distances pick the winner; rows with a near tie are redone exactly
        d = e_sq[None, :] - 2.0 * block @ entries.T
        best = d.min(axis=1)
        scale = (block ** 2).sum(axis=1) + e_sq.max() + 1.0
        near = d <= (best + 1e-9 * scale)[:, None]
        res = np.argmin(d, axis=1)
        for r in np.flatnonzero(near.sum(axis=1) > 1):
            cand = np.flatnonzero(near[r])
            exact = ((block[r] - entries[cand]) ** 2).sum(axis=1)
            res[r] = cand[np.argmin(exact)]
        out[lo: lo + len(block)] = res
    return out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j:] = centers[0]
            break
        i = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
        i = min(i, len(x) - 1)
        centers[j] = x[i]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def train_codebook(vectors, k: int = 256, seed: int = 0, max_iter: int = 50, tol: float = 1e-6) -> Codebook:
    """Lloyd k-means with k-means++ seeding.

    With fewer distinct inputs than ``k`` the distinct vectors are repeated to
    fill the codebook. Iteration stops once no centroid moves more than ``tol``.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ContractViolation("train_codebook needs a non-empty (N, dim) array")
    k = check_positive_int(k, "k")
    if k > 65536:
        raise ContractViolation("k must be at most 65536")
    x = x.astype(np.float32).astype(np.float64)
    distinct = np.unique(x, axis=0)
    if len(distinct) <= k:
        reps = np.resize(np.arange(len(distinct)), k)
        return Codebook(distinct[reps], distortion_history=(0.0,))

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    history = []
    for _ in range(max_iter):
        labels = nearest_entry(centers, x)
        history.append(float(((x - centers[labels]) ** 2).sum(axis=1).mean()))
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    labels = nearest_entry(centers, x)
    history.append(float(((x - centers[labels]) ** 2).sum(axis=1).mean()))
    return Codebook(centers, distortion_history=tuple(history))


class VectorQuantizer(TransformerMixin, BaseEstimator):
    """Estimator face of the SH codebook: ``fit`` trains, ``transform`` yields indices."""

    def __init__(self, n_codes: int = 256, seed: int = 0, max_iter: int = 50, tol: float = 1e-6):
        self.n_codes = n_codes
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        self.codebook_ = train_codebook(X, self.n_codes, self.seed, self.max_iter, self.tol)
        self.cluster_centers_ = self.codebook_.entries
        return self

    def transform(self, X):
        check_is_fitted(self, "codebook_")
        return self.codebook_.nearest(X)

    def inverse_transform(self, indices):
        check_is_fitted(self, "codebook_")
        return self.codebook_.entries[np.asarray(indices, dtype=np.int64)]


def sh_vectors(gs: GaussianSet) -> np.ndarray:
    return gs.sh.reshape(len(gs), -1)


# ---------------------------------------------------------------------------
# Fixed point


@dataclass(frozen=True)
class QuantParams:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    log_scale_min: float
    log_scale_max: float
    bits: int = 16

    def __post_init__(self):
        lo = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise ContractViolation("bounding box max must exceed min on every axis")
        if not self.log_scale_max > self.log_scale_min:
            raise ContractViolation("log-scale range is empty")
        if self.bits != 16:
            raise ContractViolation("only 16-bit fixed point is supported")
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)
        object.__setattr__(self, "log_scale_min", float(self.log_scale_min))
        object.__setattr__(self, "log_scale_max", float(self.log_scale_max))

    @classmethod
    def from_gaussians(cls, gaussians, log_headroom: float = 0.0) -> "QuantParams":
        gs = as_gaussian_set(gaussians)
        lo = gs.positions.min(axis=0)
        hi = gs.positions.max(axis=0)
        hi = np.where(hi > lo, hi, lo + 1e-3)
        ls = np.log(gs.scales)
        lmin, lmax = float(ls.min()), float(ls.max()) + log_headroom
        if lmax <= lmin:
            lmax = lmin + 1e-3
        return cls(lo, hi, lmin, lmax)

    @property
    def position_step(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / QMAX

    def to_bytes(self) -> bytes:
        return struct.pack("<8d", *self.bbox_min, *self.bbox_max, self.log_scale_min, self.log_scale_max)

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantParams":
        if len(data) != 64:
            raise ProtocolError("quantization block must be 64 bytes", len(data))
        v = struct.unpack("<8d", data)
        return cls(v[0:3], v[3:6], v[6], v[7])


def _quantize(v, lo, hi):
    t = (np.asarray(v, dtype=np.float64) - lo) / (hi - lo)
    clamped = (t < 0) | (t > 1)
    q = np.rint(np.clip(t, 0.0, 1.0) * QMAX).astype(np.uint16)
    return q, clamped


def _dequantize(q, lo, hi):
    t = np.asarray(q, dtype=np.float64) / QMAX
    # lerp form hits both endpoints exactly
    return lo * (1.0 - t) + hi * t


def record_dtype(codebook: Codebook) -> np.dtype:
    return np.dtype([
        ("id", "<u4"), ("parent", "<u4"), ("position", "<u2", 3), ("scale", "<u2", 3),
        ("rotation", "<u2", 4), ("opacity", "<u2"),
        ("sh_index", "u1" if codebook.index_dtype == np.uint8 else "<u2"),
    ])


def record_width(codebook: Codebook) -> int:
    return record_dtype(codebook).itemsize


@dataclass
class EncodeStats:
    clamped_positions: int = 0
    clamped_scales: int = 0


@dataclass(frozen=True)
class EncodedGaussian:
    id: int
    parent: int
    position: tuple
    scale: tuple
    rotation: tuple
    opacity: int
    sh_index: int
    codebook_version: int
    leaf: bool = True


def encode_records(gaussians, params: QuantParams, codebook: Codebook, parents=None, leaf=None,
                   stats: EncodeStats | None = None) -> np.ndarray:
    """Batch encode to a structured array of fixed-width records."""
    gs = as_gaussian_set(gaussians)
    n = len(gs)
    if n and sh_vectors(gs).shape[1] != codebook.dim:
        raise ContractViolation(
            f"SH dimension {sh_vectors(gs).shape[1]} does not match codebook dimension {codebook.dim}"
        )
    if n and (gs.ids.min() < 0 or gs.ids.max() >= LEAF_BIT):
        raise ContractViolation("ids must fit in 31 bits")
    rec = np.zeros(n, dtype=record_dtype(codebook))
    leaf = np.ones(n, dtype=bool) if leaf is None else np.asarray(leaf, dtype=bool)
    rec["id"] = gs.ids.astype(np.uint32) | np.where(leaf, LEAF_BIT, 0).astype(np.uint32)
    if parents is None:
        rec["parent"] = NO_PARENT
    else:
        p = np.asarray(parents, dtype=np.int64)
        rec["parent"] = np.where(p < 0, NO_PARENT, p).astype(np.uint32)
    q, cp = _quantize(gs.positions, params.bbox_min, params.bbox_max)
    rec["position"] = q
    q, cs = _quantize(np.log(gs.scales), params.log_scale_min, params.log_scale_max)
    rec["scale"] = q
    rec["rotation"], _ = _quantize(gs.rotations, -1.0, 1.0)
    rec["opacity"], _ = _quantize(gs.opacities, 0.0, 1.0)
    if n:
        rec["sh_index"] = codebook.nearest(sh_vectors(gs))
    if stats is not None:
        stats.clamped_positions += int(cp.any(axis=1).sum())
        stats.clamped_scales += int(cs.any(axis=1).sum())
    return rec


def decode_records(rec: np.ndarray, params: QuantParams, codebook: Codebook):
    """Inverse of :func:`encode_records`: (GaussianSet, parent ids, leaf flags)."""
    raw_id = rec["id"].astype(np.int64)
    ids = raw_id & (LEAF_BIT - 1)
    leaf = (raw_id & LEAF_BIT) != 0
    parent = rec["parent"].astype(np.int64)
    parent = np.where(parent == NO_PARENT, -1, parent)
    pos = _dequantize(rec["position"], params.bbox_min, params.bbox_max)
    scale = np.exp(_dequantize(rec["scale"], params.log_scale_min, params.log_scale_max))
    rot = _dequantize(rec["rotation"], -1.0, 1.0)
    norm = np.linalg.norm(rot, axis=1, keepdims=True)
    rot = np.where(norm > 0, rot / np.where(norm > 0, norm, 1.0), np.array([1.0, 0.0, 0.0, 0.0]))
    opa = _dequantize(rec["opacity"], 0.0, 1.0)
    idx = rec["sh_index"].astype(np.int64)
    if len(idx) and idx.max() >= codebook.size:
        raise ProtocolError(f"sh index {int(idx.max())} outside codebook of size {codebook.size}")
    k = codebook.dim // 3
    sh = codebook.entries[idx].reshape(len(rec), k, 3)
    gs = GaussianSet(ids, pos, scale, rot, opa, sh, validate=False)
    return gs, parent, leaf


def encode_gaussian(g: Gaussian, params: QuantParams, codebook: Codebook, parent: int | None = None,
                    leaf: bool = True) -> EncodedGaussian:
    gs = GaussianSet.from_gaussians([g])
    r = encode_records(gs, params, codebook, None if parent is None else [parent], [leaf])[0]
    return EncodedGaussian(
        int(r["id"]) & (LEAF_BIT - 1), int(r["parent"]), tuple(int(v) for v in r["position"]),
        tuple(int(v) for v in r["scale"]), tuple(int(v) for v in r["rotation"]),
        int(r["opacity"]), int(r["sh_index"]), codebook.version, leaf,
    )


def decode_gaussian(e: EncodedGaussian, params: QuantParams, codebook: Codebook) -> Gaussian:
    if e.codebook_version != codebook.version:
        raise ProtocolError(f"record uses codebook version {e.codebook_version}, have {codebook.version}")
    rec = np.zeros(1, dtype=record_dtype(codebook))
    rec["id"] = e.id | (LEAF_BIT if e.leaf else 0)
    rec["parent"] = e.parent
    rec["position"] = e.position
    rec["scale"] = e.scale
    rec["rotation"] = e.rotation
    rec["opacity"] = e.opacity
    rec["sh_index"] = e.sh_index
    gs, _, _ = decode_records(rec, params, codebook)
    return gs[0]


# ---------------------------------------------------------------------------
# Payload


@dataclass(frozen=True)
class DecodedPayload:
    gaussians: GaussianSet
    parents: np.ndarray
    leaf: np.ndarray
    codebook_version: int
    sh_degree: int


def payload_size(count: int, codebook: Codebook) -> int:
    return PAYLOAD_HEADER.size + count * record_width(codebook)


def encode_payload(gaussians, params: QuantParams, codebook: Codebook, parents=None, leaf=None,
                   stats: EncodeStats | None = None) -> bytes:
    gs = as_gaussian_set(gaussians)
    rec = encode_records(gs, params, codebook, parents, leaf, stats)
    head = PAYLOAD_HEADER.pack(len(rec), codebook.version, codebook.sh_degree)
    return head + rec.tobytes()


def decode_payload(data, params: QuantParams, codebook: Codebook, offset: int = 0) -> DecodedPayload:
    buf = memoryview(data)
    if len(buf) < offset + PAYLOAD_HEADER.size:
        raise ProtocolError("truncated payload header", len(buf))
    count, version, degree = PAYLOAD_HEADER.unpack_from(buf, offset)
    if version != codebook.version:
        raise ProtocolError(f"payload uses codebook version {version}, have {codebook.version}", offset + 4)
    if degree != codebook.sh_degree:
        raise ProtocolError(f"payload SH degree {degree} does not match codebook", offset + 8)
    dt = record_dtype(codebook)
    start = offset + PAYLOAD_HEADER.size
    end = start + count * dt.itemsize
    if len(buf) < end:
        whole = (len(buf) - start) // dt.itemsize
        raise ProtocolError(f"payload truncated after {whole} of {count} records", start + whole * dt.itemsize)
    if len(buf) > end:
        raise ProtocolError(f"{len(buf) - end} trailing bytes after payload", end)
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=start)
    gs, parents, leaf = decode_records(rec, params, codebook)
    return DecodedPayload(gs, parents, leaf, version, degree)


def quantize(gaussians, params: QuantParams, codebook: Codebook) -> GaussianSet:
    """decode(encode(x)) without the byte detour."""
    gs, _, _ = decode_records(encode_records(gaussians, params, codebook), params, codebook)
    return gs


# ---------------------------------------------------------------------------
# Session geometry


def session_params(tree, log_headroom: float = 1.0) -> QuantParams:
    """Quantization range for streaming a tree; headroom lets parents grow a few codes."""
    return QuantParams.from_gaussians(tree.gaussians, log_headroom=log_headroom)


def snap_tree_geometry(tree, params: QuantParams, codebook: Codebook, max_bump: int = 64):
    """Replace every node's attributes by their decoded 16-bit values.

    Cloud and client then evaluate LoD sizes on bit-identical inputs. Rounding
    can break the parent-contains-child property the cut relies on, so a
    parent whose sphere no longer covers a child has its widest log-scale code
    raised until it does.
    """
    gs = tree.gaussians
    rec = encode_records(gs, params, codebook)
    snapped, _, _ = decode_records(rec, params, codebook)
    pos = snapped.positions
    scale_q = rec["scale"].astype(np.int64)
    scales = snapped.scales.copy()
    off = tree.level_offsets
    for lv in range(len(off) - 2, 0, -1):
        lo, hi = off[lv], off[lv + 1]
        kids = np.arange(lo, hi)
        par = tree.parent[kids]
        r_kid = lod_radius(scales[kids])
        need = np.zeros(len(tree))
        np.maximum.at(need, par, np.linalg.norm(pos[kids] - pos[par], axis=1) + r_kid)
        for _ in range(max_bump):
            cand = np.unique(par)
            short = cand[lod_radius(scales[cand]) <= need[cand] * (1 + 1e-12)]
            if len(short) == 0:
                break
            axis = np.argmax(scale_q[short], axis=1)
            if np.any(scale_q[short, axis] >= QMAX):
                raise ContractViolation("log-scale range too small to restore containment; raise headroom")
            # jump straight to the code that covers the requirement, then re-check
            target = np.log(need[short] * (1 + 1e-9) / 3.0)
            code, _ = _quantize(target, params.log_scale_min, params.log_scale_max)
            scale_q[short, axis] = np.maximum(scale_q[short, axis] + 1, code.astype(np.int64))
            scale_q = np.minimum(scale_q, QMAX)
            scales[short] = np.exp(_dequantize(scale_q[short], params.log_scale_min, params.log_scale_max))
        else:
            raise ContractViolation("could not restore containment after quantization")
    out = GaussianSet(snapped.ids, pos, scales, snapped.rotations, snapped.opacities, snapped.sh,
                      validate=False)
    return tree.with_gaussians(out)


__all__ = [
    "Codebook", "VectorQuantizer", "QuantParams", "EncodedGaussian", "DecodedPayload",
    "train_codebook", "nearest_entry", "encode_gaussian", "decode_gaussian",
    "encode_payload", "decode_payload", "encode_records", "decode_records", "quantize",
    "record_width", "payload_size", "snap_tree_geometry", "session_params",
]
