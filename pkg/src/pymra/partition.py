"""Multi-resolution domain partitioning, knot placement and observation assignment.

Regions are half-open rectangles ``[x_min, x_max) x [y_min, y_max)``. The tree
is stored flat in depth-first preorder with children in split order, so the
finest regions appear in a canonical left-to-right order that the executor
uses for work assignment.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from pymra.errors import ConfigError, StructureError

DEFAULT_OFFSET = math.e / 100.0


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise StructureError(
                f"degenerate bounding box x=[{self.x_min}, {self.x_max}] y=[{self.y_min}, {self.y_max}]"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, x, y):
        """Half-open membership; works elementwise on arrays."""
        return (self.x_min <= x) & (x < self.x_max) & (self.y_min <= y) & (y < self.y_max)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    @classmethod
    def around(cls, lon: np.ndarray, lat: np.ndarray) -> "BoundingBox":
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        if lon.size == 0:
            raise StructureError("cannot take the bounding box of an empty location set")
        return cls(float(lon.min()), float(lon.max()), float(lat.min()), float(lat.max()))


@dataclass(frozen=True)
class RegionId:
    """Level ``m`` (1-based) and the path ``(j_2, ..., j_m)`` of 1-based child positions."""

    level: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.path) != self.level - 1:
            raise ValueError(f"path {self.path} does not match level {self.level}")

    def __str__(self) -> str:
        return "-".join(str(j) for j in (1,) + self.path)


def extend_domain(box: BoundingBox) -> BoundingBox:
    """Push the top and right boundaries out by 1% of the extent."""
    return BoundingBox(
        box.x_min,
        box.x_max + 0.01 * (box.x_max - box.x_min),
        box.y_min,
        box.y_max + 0.01 * (box.y_max - box.y_min),
    )


def _split_axis(box: BoundingBox) -> int:
    # 0 = split along x, 1 = along y; equal extents split along x
    return 1 if box.height > box.width else 0


def split_region(box: BoundingBox, J: int) -> list[BoundingBox]:
    """Split ``box`` into ``J`` equal children.

    ``J = 2`` halves the strictly longer dimension (x on ties) and orders the
    children by increasing coordinate. ``J = 4`` gives quadrants ordered by
    (y, x).
    """
    if J not in (2, 4):
        raise ConfigError(f"J must be 2 or 4, got {J}", key="NUM_PARTITIONS_J")
    xm = 0.5 * (box.x_min + box.x_max)
    ym = 0.5 * (box.y_min + box.y_max)
    if J == 4:
        return [
            BoundingBox(box.x_min, xm, box.y_min, ym),
            BoundingBox(xm, box.x_max, box.y_min, ym),
            BoundingBox(box.x_min, xm, ym, box.y_max),
            BoundingBox(xm, box.x_max, ym, box.y_max),
        ]
    if _split_axis(box) == 0:
        return [BoundingBox(box.x_min, xm, box.y_min, box.y_max), BoundingBox(xm, box.x_max, box.y_min, box.y_max)]
    return [BoundingBox(box.x_min, box.x_max, box.y_min, ym), BoundingBox(box.x_min, box.x_max, ym, box.y_max)]


def grid_shape(r: int) -> tuple[int, int]:
    """Number of x and y grid bars for a knot budget ``r``."""
    if r < 1:
        raise ConfigError(f"knot budget must be >= 1, got {r}", key="NUM_KNOTS_r")
    nx = math.isqrt(r - 1) + 1  # ceil(sqrt(r))
    return nx, r // nx


def actual_knots(r: int) -> int:
    nx, ny = grid_shape(r)
    return nx * ny


def _bars(lo: float, hi: float, n: int, offset: float) -> np.ndarray:
    ext = hi - lo
    if n == 1:
        return np.array([0.5 * (lo + hi)])
    step = ext * (1.0 - 2.0 * offset) / (n - 1)
    return lo + offset * ext + np.arange(n) * step


def place_knots(box: BoundingBox, r: int, offset: float) -> np.ndarray:
    """Knots on the ceil(sqrt r) x floor(r / ceil(sqrt r)) grid, shape (r_hat, 2), y-major."""
    if not 0.0 < offset < 0.5:
        raise ConfigError(f"offset must lie in (0, 0.5), got {offset}", key="OFFSET")
    nx, ny = grid_shape(r)
    xs = _bars(box.x_min, box.x_max, nx, offset)
    ys = _bars(box.y_min, box.y_max, ny, offset)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def default_levels(n: int, J: int, r: int) -> int:
    """Smallest M such that the mean finest-region count n / J^(M-1) is at most r."""
    if n < 1:
        raise ValueError("need at least one observation")
    M = 1
    while n > r * J ** (M - 1):
        M += 1
    return M


def region_count(J: int, M: int) -> int:
    return (J**M - 1) // (J - 1)


@dataclass
class PartitionTree:
    """Flat, immutable-by-convention multi-resolution structure.

    Region ``i`` has ``level[i]`` (1-based), ``parent[i]`` (-1 for the root),
    ``children[i]`` (row of J indices, -1 at the finest level) and
    ``boxes[i] = (x_min, x_max, y_min, y_max)``. ``finest`` lists the finest
    regions in canonical order; ``obs_index[k]`` holds the observation indices
    (into the source ObservationSet) inside ``finest[k]``.
    """

    J: int
    M: int
    r: int
    r_hat: int
    offset: float
    domain: BoundingBox
    boxes: np.ndarray
    level: np.ndarray
    parent: np.ndarray
    children: np.ndarray
    paths: list
    knots: list
    finest: np.ndarray
    obs_index: list
    eliminated: np.ndarray
    n_source: int
    _finest_pos: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        pos = np.full(len(self.level), -1, dtype=np.int64)
        pos[self.finest] = np.arange(len(self.finest))
        self._finest_pos = pos
        self.by_level = [None] + [np.flatnonzero(self.level == m) for m in range(1, self.M + 1)]

    @property
    def n_regions(self) -> int:
        return len(self.level)

    @property
    def n_finest(self) -> int:
        return len(self.finest)

    @property
    def n_obs(self) -> int:
        return int(sum(len(ix) for ix in self.obs_index))

    @property
    def retained_index(self) -> np.ndarray:
        """Observation indices in canonical finest-region order."""
        if not self.obs_index:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(self.obs_index)

    def finest_position(self, region: int) -> int:
        return int(self._finest_pos[region])

    def region_id(self, region: int) -> RegionId:
        return RegionId(int(self.level[region]), tuple(self.paths[region]))

    def box(self, region: int) -> BoundingBox:
        return BoundingBox(*map(float, self.boxes[region]))

    def ancestors(self, region: int) -> list[int]:
        """Chain from the root down to and including ``region``."""
        chain = []
        while region >= 0:
            chain.append(int(region))
            region = int(self.parent[region])
        return chain[::-1]

    def n_knots(self, region: int) -> int:
        return len(self.knots[region])

    def finest_counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.obs_index], dtype=np.int64)

    def locate(self, lon, lat) -> np.ndarray:
        """Finest-region position (index into ``finest``) for each point, -1 outside the domain."""
        lon = np.asarray(lon, dtype=np.float64).ravel()
        lat = np.asarray(lat, dtype=np.float64).ravel()
        out = np.full(lon.shape, -1, dtype=np.int64)
        inside = np.asarray(self.domain.contains(lon, lat))
        idx = np.flatnonzero(inside)
        region = np.zeros(idx.shape, dtype=np.int64)
        x = lon[idx]
        y = lat[idx]
        for _ in range(self.M - 1):
            b = self.boxes[region]
            xm = 0.5 * (b[:, 0] + b[:, 1])
            ym = 0.5 * (b[:, 2] + b[:, 3])
            if self.J == 4:
                slot = 2 * (y >= ym) + (x >= xm)
            else:
                along_y = (b[:, 3] - b[:, 2]) > (b[:, 1] - b[:, 0])
                slot = np.where(along_y, y >= ym, x >= xm).astype(np.int64)
            region = self.children[region, slot]
        out[idx] = self._finest_pos[region]
        return out

    def prefinest_knots(self) -> tuple[np.ndarray, np.ndarray]:
        """All knots of levels 1..M-1 with the region each belongs to."""
        regions = [i for i in range(self.n_regions) if self.level[i] < self.M]
        if not regions:
            return np.empty((0, 2)), np.empty(0, dtype=np.int64)
        pts = np.concatenate([self.knots[i] for i in regions])
        owner = np.concatenate([np.full(len(self.knots[i]), i) for i in regions])
        return pts, owner


def _build_regions(domain: BoundingBox, J: int, M: int):
    boxes, level, parent, paths = [], [], [], []
    children = []

    def visit(box, m, par, path):
        me = len(boxes)
        boxes.append(box.as_tuple())
        level.append(m)
        parent.append(par)
        paths.append(path)
        children.append([-1] * J)
        if m < M:
            for j, child in enumerate(split_region(box, J)):
                children[me][j] = visit(child, m + 1, me, path + (j + 1,))
        return me

    visit(domain, 1, -1, ())
    return (
        np.array(boxes, dtype=np.float64),
        np.array(level, dtype=np.int64),
        np.array(parent, dtype=np.int64),
        np.array(children, dtype=np.int64),
        paths,
    )


def build_tree(
    data,
    J: int,
    r: int,
    M: int | str = "default",
    offset: float | str = "default",
    domain: BoundingBox | None = None,
) -> PartitionTree:
    """Build the full multi-resolution structure for ``data``.

    Rows with NaN values are not knots. Observations located exactly on a
    pre-finest knot are eliminated. ``domain`` overrides the bounding box of
    all data locations (before the 1% extension).
    """
    if J not in (2, 4):
        raise ConfigError(f"NUM_PARTITIONS_J requires to be either 2 or 4, got {J}", key="NUM_PARTITIONS_J")
    if r < 1:
        raise ConfigError(f"NUM_KNOTS_r must be >= 1, got {r}", key="NUM_KNOTS_r")
    if isinstance(offset, str):
        if offset != "default":
            raise ConfigError(f"bad offset {offset!r}", key="OFFSET")
        offset = DEFAULT_OFFSET
    if not 0.0 < offset < 0.5:
        raise ConfigError(f"offset must lie in (0, 0.5), got {offset}", key="OFFSET")

    lon = np.asarray(data.lon, dtype=np.float64)
    lat = np.asarray(data.lat, dtype=np.float64)
    valid = np.flatnonzero(~np.isnan(np.asarray(data.value, dtype=np.float64)))
    if valid.size == 0:
        raise StructureError("no observations with valid values")
    if isinstance(M, str):
        if M != "default":
            raise ConfigError(f"bad number of levels {M!r}", key="NUM_LEVELS_M")
        M = default_levels(valid.size, J, r)
    if M < 1:
        raise ConfigError(f"NUM_LEVELS_M must be >= 1, got {M}", key="NUM_LEVELS_M")

    if domain is None:
        domain = BoundingBox.around(lon, lat)
    domain = extend_domain(domain)
    boxes, level, parent, children, paths = _build_regions(domain, J, M)

    knots: list = [None] * len(level)
    for i in np.flatnonzero(level < M):
        knots[i] = place_knots(BoundingBox(*boxes[i]), r, offset)

    pre = [knots[i] for i in np.flatnonzero(level < M)]
    if pre:
        allk = np.concatenate(pre)
        kc = allk[:, 0] + 1j * allk[:, 1]
        oc = lon[valid] + 1j * lat[valid]
        hit = np.isin(oc, kc)
        eliminated = valid[hit]
        retained = valid[~hit]
    else:
        eliminated = np.empty(0, dtype=np.int64)
        retained = valid
    if retained.size == 0:
        raise StructureError("all observations coincide with pre-finest knots and were eliminated")

    finest = np.flatnonzero(level == M)
    tree = PartitionTree(
        J=J,
        M=M,
        r=r,
        r_hat=actual_knots(r),
        offset=float(offset),
        domain=domain,
        boxes=boxes,
        level=level,
        parent=parent,
        children=children,
        paths=paths,
        knots=knots,
        finest=finest,
        obs_index=[],
        eliminated=eliminated,
        n_source=len(lon),
    )
    pos = tree.locate(lon[retained], lat[retained])
    if np.any(pos < 0):
        raise StructureError(f"{int(np.sum(pos < 0))} observations fall outside the domain")
    order = np.argsort(pos, kind="stable")
    bounds = np.searchsorted(pos[order], np.arange(len(finest) + 1))
    tree.obs_index = [retained[order[bounds[k] : bounds[k + 1]]] for k in range(len(finest))]
    for k, reg in enumerate(finest):
        ix = tree.obs_index[k]
        knots[reg] = np.column_stack([lon[ix], lat[ix]])
    return tree


def find_knot_collisions(tree: PartitionTree, rtol: float = 1e-12) -> list[tuple[int, int, tuple[float, float]]]:
    """Pairs of pre-finest knots (from distinct regions) closer than ``rtol`` times the domain size."""
    pts, owner = tree.prefinest_knots()
    if len(pts) < 2:
        return []
    scale = max(tree.domain.width, tree.domain.height)
    kd = cKDTree(pts)
    pairs = kd.query_pairs(rtol * scale, output_type="ndarray")
    return [(int(owner[a]), int(owner[b]), (float(pts[a, 0]), float(pts[a, 1]))) for a, b in pairs]


def min_knot_distance(tree: PartitionTree) -> float:
    """Smallest distance between any two pre-finest knots (inf if fewer than two)."""
    pts, _ = tree.prefinest_knots()
    if len(pts) < 2:
        return math.inf
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(d[:, 1].min())


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def structure_report(tree: PartitionTree, path: str | Path) -> Path:
    """Write ``structure_information.txt``-style text describing ``tree``."""
    path = Path(path)
    counts = tree.finest_counts()
    lines = [
        "# multi-resolution structure",
        f"J = {tree.J}",
        f"M = {tree.M}",
        f"r = {tree.r}",
        f"r_hat = {tree.r_hat}",
        f"offset = {_fmt(tree.offset)}",
        "domain = " + " ".join(_fmt(v) for v in tree.domain.as_tuple()),
        f"total_regions = {tree.n_regions}",
    ]
    for m in range(1, tree.M + 1):
        lines.append(f"regions_at_level_{m} = {len(tree.by_level[m])}")
    lines += [
        f"observations_retained = {tree.n_obs}",
        f"observations_eliminated = {len(tree.eliminated)}",
        f"empty_finest_regions = {int(np.sum(counts == 0))}",
        f"finest_count_min = {int(counts.min())}",
        f"finest_count_mean = {counts.mean():.6g}",
        f"finest_count_max = {int(counts.max())}",
        "# finest-level histogram: observations_per_region number_of_regions",
    ]
    for c, k in sorted(Counter(counts.tolist()).items()):
        lines.append(f"hist {c} {k}")
    lines.append("# level path x_min x_max y_min y_max knots observations")
    for i in range(tree.n_regions):
        rid = tree.region_id(i)
        nobs = str(len(tree.obs_index[tree.finest_position(i)])) if rid.level == tree.M else "-"
        lines.append(
            f"{rid.level} {rid} " + " ".join(_fmt(v) for v in tree.boxes[i]) + f" {tree.n_knots(i)} {nobs}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def parse_structure_report(path: str | Path) -> dict:
    """Read back the header keys and region lines of a structure report."""
    header: dict = {}
    regions = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        if " = " in line:
            k, v = line.split(" = ", 1)
            header[k] = v
        elif line.startswith("hist "):
            continue
        else:
            parts = line.split()
            regions.append(
                {
                    "level": int(parts[0]),
                    "path": parts[1],
                    "box": tuple(float(v) for v in parts[2:6]),
                    "knots": int(parts[6]),
                    "observations": None if parts[7] == "-" else int(parts[7]),
                }
            )
    header["regions"] = regions
    return header


def subtree_finest(tree: PartitionTree, region: int) -> Sequence[int]:
    """Finest positions below ``region`` (contiguous in canonical order)."""
    lo = hi = region
    while tree.level[lo] < tree.M:
        lo = int(tree.children[lo, 0])
        hi = int(tree.children[hi, tree.J - 1])
    return range(tree.finest_position(lo), tree.finest_position(hi) + 1)
