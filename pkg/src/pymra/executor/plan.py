"""Work assignment across workers and the supervisor/worker merge plan."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from pymra.partition import PartitionTree

log = logging.getLogger(__name__)


def assign_static(q: int, p: int) -> list[range]:
    """Contiguous ranges: the first ``q mod p`` workers get one extra region."""
    if p < 1:
        raise ValueError(f"need at least one worker, got {p}")
    if q < p:
        log.warning("%d workers for %d finest regions; %d workers stay idle", p, q, p - q)
    base, extra = divmod(q, p)
    ranges, start = [], 0
    for w in range(p):
        size = base + (1 if w < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    return ranges


def assign_dynamic(counts, p: int) -> list[range]:
    """Contiguous ranges balancing the sum of squared observation counts.

    Greedy left to right: a worker keeps taking regions until its load reaches
    the remaining load divided by the remaining workers.
    """
    if p < 1:
        raise ValueError(f"need at least one worker, got {p}")
    w8 = np.asarray(counts, dtype=np.float64) ** 2
    q = len(w8)
    if q < p:
        log.warning("%d workers for %d finest regions; %d workers stay idle", p, q, p - q)
    remaining = float(w8.sum())
    ranges, i = [], 0
    for w in range(p - 1):
        target = remaining / (p - w)
        start, load = i, 0.0
        while i < q and load < target:
            load += w8[i]
            i += 1
        ranges.append(range(start, i))
        remaining -= load
    ranges.append(range(i, q))
    return ranges


def range_loads(ranges, counts) -> np.ndarray:
    w8 = np.asarray(counts, dtype=np.float64) ** 2
    return np.array([w8[list(rg)].sum() if len(rg) else 0.0 for rg in ranges])


def estimate_memory(J: int, M: int, r: int) -> float:
    """Upper bound (GiB) on resident moment blocks: J^(M-1) M (M-1) r^2 2^-28."""
    return J ** (M - 1) * M * (M - 1) * r**2 * 2.0**-28


def working_set(ranges, tree: PartitionTree) -> list[set]:
    """Per worker: its finest regions plus all their ancestors."""
    sets = []
    for rg in ranges:
        s: set = set()
        for k in rg:
            region = int(tree.finest[k])
            while region >= 0 and region not in s:
                s.add(region)
                region = int(tree.parent[region])
        sets.append(s)
    return sets


@dataclass
class WorkerAssignment:
    """Finest ranges, prior working sets and merge metadata for ``p`` workers.

    ``holder[i]`` is the worker that ends up computing region ``i``'s
    posterior quantities. For a non-finest region, ``supervisor[i]`` is the
    smallest worker holding any child and ``contributors[i]`` the other
    holders (empty tuple: local-only).
    """

    p: int
    ranges: list
    working: list
    holder: np.ndarray
    supervisor: np.ndarray
    contributors: dict

    def owner_of_finest(self, position: int) -> int:
        for w, rg in enumerate(self.ranges):
            if position in rg:
                return w
        raise IndexError(position)

    def is_merge(self, region: int) -> bool:
        return bool(self.contributors.get(region))

    def involved(self, w: int, tree: PartitionTree, level: int) -> list[int]:
        """Level-``level`` regions for which worker ``w`` holds at least one child."""
        out = []
        for i in tree.by_level[level]:
            i = int(i)
            if self.holder[i] == w or w in self.contributors.get(i, ()):
                out.append(i)
        return out

    def ascending_working(self, w: int, tree: PartitionTree, level: int) -> list[int]:
        """Regions at ``level`` still on worker ``w``'s list after that level's merges."""
        return [int(i) for i in tree.by_level[level] if self.holder[i] == w]

    def needers(self, region: int) -> list[int]:
        """Workers whose prior working set contains ``region``."""
        return [w for w in range(self.p) if region in self.working[w]]


def plan_merges(ranges, tree: PartitionTree) -> WorkerAssignment:
    holder = np.full(tree.n_regions, -1, dtype=np.int64)
    supervisor = np.full(tree.n_regions, -1, dtype=np.int64)
    contributors: dict = {}
    for w, rg in enumerate(ranges):
        for k in rg:
            holder[tree.finest[k]] = w
    for m in range(tree.M - 1, 0, -1):
        for i in tree.by_level[m]:
            owners = sorted({int(holder[c]) for c in tree.children[i]})
            supervisor[i] = owners[0]
            holder[i] = owners[0]
            contributors[int(i)] = tuple(owners[1:])
    return WorkerAssignment(
        p=len(ranges),
        ranges=list(ranges),
        working=working_set(ranges, tree),
        holder=holder,
        supervisor=supervisor,
        contributors=contributors,
    )


def make_assignment(tree: PartitionTree, p: int, dynamic: bool) -> WorkerAssignment:
    if dynamic:
        ranges = assign_dynamic(tree.finest_counts(), p)
    else:
        ranges = assign_static(tree.n_finest, p)
    return plan_merges(ranges, tree)
