"""Offline subtree partitioning for temporal LoD search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import ContractViolation
from ..validation import check_positive_int

TOP = -1


@dataclass(frozen=True)
class SubtreePartition:
    """Disjoint connected regions of the tree plus the leftover top tree.

    ``owner[i]`` is the subtree id of node ``i`` or ``-1`` for the top tree.
    ``members[s]`` lists the nodes of subtree ``s`` in ascending (level) order.
    """

    owner: np.ndarray
    roots: np.ndarray
    members: tuple
    top_tree: np.ndarray
    target_size: int

    @property
    def subtree_count(self) -> int:
        return len(self.roots)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=np.int64)

    def region_of(self, node: int) -> int:
        return int(self.owner[node])

    def check(self, tree) -> None:
        """Raise if any SubtreePartition invariant fails."""
        n = len(tree)
        seen = np.zeros(n, dtype=np.int64)
        for s, mem in enumerate(self.members):
            seen[mem] += 1
            if np.any(self.owner[mem] != s):
                raise ContractViolation(f"owner table disagrees with members of subtree {s}")
            if len(mem) > 2 * self.target_size:
                raise ContractViolation(f"subtree {s} has {len(mem)} > 2 x {self.target_size} nodes")
            root = int(self.roots[s])
            if mem[0] != root:
                raise ContractViolation(f"subtree {s} root {root} is not its first member")
            # connectivity: walking down from the root inside the region reaches every member
            reached = {root}
            stack = [root]
            while stack:
                v = stack.pop()
                for c in tree.children(v):
                    if self.owner[c] == s and c not in reached:
                        reached.add(c)
                        stack.append(c)
            if len(reached) != len(mem):
                raise ContractViolation(f"subtree {s} is not connected")
        seen[self.top_tree] += 1
        if np.any(seen != 1):
            raise ContractViolation("every node must belong to exactly one subtree or the top tree")
        if len(self.top_tree) and self.top_tree[0] != 0:
            raise ContractViolation("top tree must contain the root")
        for v in self.top_tree[1:]:
            if self.owner[tree.parent[v]] != TOP:
                raise ContractViolation("top tree is not connected")


def partition_subtrees(tree, target_size: int) -> SubtreePartition:
    """Greedy bottom-up grouping into connected regions of at most 2 x target nodes.

    Walking nodes deepest-first, each node absorbs the still-open groups of
    its children. Oversized accumulations shed their largest open child groups
    as separate subtrees; a group reaching ``target_size`` closes at its root.
    Whatever stays open at the root becomes the top tree.
    """
    target = check_positive_int(target_size, "target_size")
    n = len(tree)
    parent = tree.parent
    first = tree.first_child
    count = tree.child_count
    pending = np.zeros(n, dtype=np.int64)
    closed = np.zeros(n, dtype=bool)
    for v in range(n - 1, -1, -1):
        size = 1
        fc = first[v]
        open_kids = []
        if fc >= 0:
            for c in range(fc, fc + count[v]):
                if not closed[c]:
                    size += pending[c]
                    open_kids.append(c)
        if size > 2 * target:
            open_kids.sort(key=lambda c: (-pending[c], c))
            for c in open_kids:
                if size <= 2 * target:
                    break
                closed[c] = True
                size -= pending[c]
        pending[v] = size
        if size >= target:
            closed[v] = True

    owner = np.full(n, TOP, dtype=np.int64)
    root_ids = np.flatnonzero(closed)
    region = np.full(n, -2, dtype=np.int64)
    region[root_ids] = np.arange(len(root_ids))
    # level order guarantees parents are labelled before children
    for v in range(n):
        if region[v] >= 0:
            owner[v] = region[v]
        elif v > 0:
            owner[v] = owner[parent[v]]
    return _from_owner(owner, root_ids, target)


def _from_owner(owner: np.ndarray, roots: np.ndarray, target: int) -> SubtreePartition:
    order = np.argsort(owner, kind="stable")
    sorted_owner = owner[order]
    members = []
    for s in range(len(roots)):
        lo = np.searchsorted(sorted_owner, s, "left")
        hi = np.searchsorted(sorted_owner, s, "right")
        members.append(order[lo:hi])
    top = np.flatnonzero(owner == TOP)
    owner = owner.copy()
    owner.setflags(write=False)
    return SubtreePartition(owner, np.asarray(roots, dtype=np.int64), tuple(members), top, int(target))


def partition_from_owner(tree, owner: np.ndarray, target: int) -> SubtreePartition:
    """Rebuild a partition from a stored owner column (roots are each region's first node)."""
    owner = np.asarray(owner, dtype=np.int64)
    count = int(owner.max()) + 1 if len(owner) and owner.max() >= 0 else 0
    roots = np.full(count, -1, dtype=np.int64)
    for v in range(len(owner) - 1, -1, -1):
        if owner[v] >= 0:
            roots[owner[v]] = v
    part = _from_owner(owner, roots, target)
    part.check(tree)
    return part
