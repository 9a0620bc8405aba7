"""Reuse-window bookkeeping shared by the cloud table and its client mirror."""

from __future__ import annotations

import numpy as np

from ..validation import check_positive_int


def _ids(cut) -> np.ndarray:
    members = getattr(cut, "members", cut)
    return np.unique(np.asarray(list(members) if not isinstance(members, np.ndarray) else members,
                                dtype=np.int64))


class ManagementTable:
    """id -> reuse window w_r (frames since the id was last in a cut).

    Stored as a sorted key array plus a parallel window array so a round is a
    handful of vectorized set operations.
    """

    def __init__(self, reuse_threshold: int = 32, frame_interval: int = 4):
        self.reuse_threshold = check_positive_int(reuse_threshold, "reuse_threshold")
        self.frame_interval = check_positive_int(frame_interval, "frame_interval")
        self.round = 0
        self.keys = np.zeros(0, dtype=np.int64)
        self.windows = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, node) -> bool:
        i = np.searchsorted(self.keys, node)
        return bool(i < len(self.keys) and self.keys[i] == node)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.keys.tolist(), self.windows.tolist()))

    def id_set(self) -> set[int]:
        return set(self.keys.tolist())

    @classmethod
    def from_dict(cls, windows: dict, reuse_threshold: int = 32, frame_interval: int = 4) -> "ManagementTable":
        t = cls(reuse_threshold, frame_interval)
        items = sorted(windows.items())
        t.keys = np.array([k for k, _ in items], dtype=np.int64)
        t.windows = np.array([v for _, v in items], dtype=np.int64)
        return t

    def update(self, cut) -> tuple[np.ndarray, np.ndarray]:
        """One LoD round; returns (delta, evictions), both ascending."""
        ids = _ids(cut)
        in_cut = np.isin(self.keys, ids, assume_unique=True)
        windows = np.where(in_cut, 0, self.windows + self.frame_interval)
        delta = np.setdiff1d(ids, self.keys, assume_unique=True)
        keys = np.concatenate([self.keys, delta])
        windows = np.concatenate([windows, np.zeros(len(delta), dtype=np.int64)])
        order = np.argsort(keys, kind="stable")
        keys, windows = keys[order], windows[order]
        drop = windows > self.reuse_threshold
        evictions = keys[drop]
        self.keys, self.windows = keys[~drop], windows[~drop]
        self.round += 1
        return delta, evictions


def cloud_update(table: ManagementTable, new_cut) -> tuple[list[int], list[int]]:
    """Delta = cut minus resident ids; windows reset for cut ids, advanced by w otherwise."""
    delta, evictions = table.update(new_cut)
    return delta.tolist(), evictions.tolist()
