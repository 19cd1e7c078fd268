"""Overlapping chart covers via Mapper.

The pipeline: a 1-D PCA lens, an overlapping interval cover of the lens
range, single-linkage clustering of each interval preimage, and the nerve of
the resulting clusters.  Each cluster is one chart.  The refined partition
(group points by their exact chart-membership signature) carries the cell
probabilities used by the disintegration weights, and a hard-partition
baseline is derived from the same cover for comparison experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import CoverError, DegenerateLensError

COVER_FORMAT_VERSION = 1


@dataclass
class MapperConfig:
    n_cubes: int = 5
    perc_overlap: float = 0.45
    linkage_threshold: float = 1.0
    lens: str = "pca1"

    def __post_init__(self):
        if self.n_cubes < 1:
            raise ValueError("n_cubes must be >= 1")
        if not 0.0 <= self.perc_overlap < 1.0:
            raise ValueError("perc_overlap must lie in [0, 1)")
        if self.linkage_threshold <= 0:
            raise ValueError("linkage_threshold must be positive")
        if self.lens != "pca1":
            raise ValueError(f"unknown lens {self.lens!r}")


@dataclass
class ChartCover:
    """Charts as member index sets, plus nerve edges and per-point multiplicity."""

    n_points: int
    charts: list[np.ndarray]
    nerve_edges: set[tuple[int, int]] = field(default_factory=set)
    multiplicity: np.ndarray | None = None

    def __post_init__(self):
        self.charts = [np.asarray(c, dtype=int) for c in self.charts]
        if self.multiplicity is None:
            self.multiplicity = self._compute_multiplicity()
        else:
            self.multiplicity = np.asarray(self.multiplicity, dtype=int)

    def _compute_multiplicity(self) -> np.ndarray:
        m = np.zeros(self.n_points, dtype=int)
        for chart in self.charts:
            m[chart] += 1
        return m

    @property
    def n_charts(self) -> int:
        return len(self.charts)

    def membership_mask(self) -> np.ndarray:
        """(L, N) boolean membership matrix."""
        mask = np.zeros((self.n_charts, self.n_points), dtype=bool)
        for k, chart in enumerate(self.charts):
            mask[k, chart] = True
        return mask

    def validate(self) -> None:
        if self.n_charts == 0:
            raise CoverError("cover has no charts")
        m = self._compute_multiplicity()
        if np.any(m < 1):
            missing = int(np.flatnonzero(m < 1)[0])
            raise CoverError(f"point {missing} is not covered by any chart")
        if not np.array_equal(m, self.multiplicity):
            raise CoverError("stored multiplicity disagrees with charts")


@dataclass
class RefinedPartition:
    """Cells of the signature partition with their counts and probabilities.

    Each cell is the set of points lying in exactly one chart-membership
    signature; ``owners`` is that signature, ``n_owner = len(owners)`` and
    ``nu = |cell| / N``.
    """

    cells: list[tuple[np.ndarray, tuple[int, ...], int, float]]

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def nu_values(self) -> np.ndarray:
        return np.array([c[3] for c in self.cells])


def pca_lens(points: np.ndarray) -> np.ndarray:
    """Projection of centered points onto the top principal direction.

    The direction's sign is fixed so its largest-magnitude loading is
    positive, which keeps runs reproducible.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 2:
        raise ValueError("need at least two points for a PCA lens")
    centered = points - points.mean(axis=0)
    if not np.any(centered):
        raise DegenerateLensError("all points identical; PCA lens undefined")
    # top right-singular vector == top covariance eigenvector
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    pivot = np.argmax(np.abs(direction))
    if direction[pivot] < 0:
        direction = -direction
    return centered @ direction


def build_intervals(lens: np.ndarray, n_cubes: int, perc_overlap: float) -> list[tuple[float, float]]:
    """Overlapping intervals covering [min(lens), max(lens)].

    With step s = range / n_cubes, interval j is centered at lo + (j + 1/2) s
    with width s (1 + perc_overlap), so adjacent intervals overlap by exactly
    perc_overlap * s.
    """
    lens = np.asarray(lens, dtype=float)
    lo, hi = float(lens.min()), float(lens.max())
    if hi <= lo:
        raise DegenerateLensError("lens range is empty")
    s = (hi - lo) / n_cubes
    half = 0.5 * perc_overlap * s
    # one shared edge sequence, so at zero overlap adjacent intervals touch
    # exactly (no floating-point crack) and every lens value stays covered
    edges = [lo + j * s for j in range(n_cubes + 1)]
    edges[0] = lo
    edges[-1] = hi
    return [(edges[j] - half, edges[j + 1] + half) for j in range(n_cubes)]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def single_linkage(points: np.ndarray, threshold: float) -> list[np.ndarray]:
    """Connected components of the <=threshold pair graph (single-linkage cut).

    Clusters come back ordered by smallest member index, members sorted.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if n == 0:
        return []
    uf = _UnionFind(n)
    tree = cKDTree(points)
    for i, j in tree.query_pairs(r=threshold):
        uf.union(i, j)
    roots: dict[int, list[int]] = {}
    for i in range(n):
        roots.setdefault(uf.find(i), []).append(i)
    clusters = [np.array(sorted(v), dtype=int) for v in roots.values()]
    clusters.sort(key=lambda c: int(c[0]))
    return clusters


def _nerve_edges(charts: list[np.ndarray]) -> set[tuple[int, int]]:
    sets = [set(c.tolist()) for c in charts]
    edges = set()
    for i in range(len(charts)):
        for j in range(i + 1, len(charts)):
            if sets[i] & sets[j]:
                edges.add((i, j))
    return edges


def mapper_cover(points: np.ndarray, config: MapperConfig, n_latent: int = 2) -> ChartCover:
    """Run the full Mapper pipeline and return an overlapping chart cover.

    Charts smaller than ``n_latent + 2`` points cannot support a coordinate
    map and are merged into their nearest (by centroid) nerve-neighbor chart.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    lens = pca_lens(points)
    intervals = build_intervals(lens, config.n_cubes, config.perc_overlap)

    charts: list[np.ndarray] = []
    for lo, hi in intervals:
        members = np.flatnonzero((lens >= lo) & (lens <= hi))
        if members.size == 0:
            continue
        for cluster in single_linkage(points[members], config.linkage_threshold):
            charts.append(members[cluster])
    if not charts:
        raise CoverError("Mapper produced no charts")

    charts = _merge_small_charts(charts, points, min_size=n_latent + 2)
    cover = ChartCover(n_points=n, charts=charts, nerve_edges=_nerve_edges(charts))
    cover.validate()
    return cover


def _merge_small_charts(charts: list[np.ndarray], points: np.ndarray, min_size: int) -> list[np.ndarray]:
    charts = [np.array(sorted(set(c.tolist())), dtype=int) for c in charts]
    while len(charts) > 1:
        sizes = [c.size for c in charts]
        small = [k for k, sz in enumerate(sizes) if sz < min_size]
        if not small:
            break
        k = min(small, key=lambda i: (sizes[i], i))
        centroid = points[charts[k]].mean(axis=0)
        members = set(charts[k].tolist())
        neighbors = [j for j in range(len(charts)) if j != k and members & set(charts[j].tolist())]
        candidates = neighbors if neighbors else [j for j in range(len(charts)) if j != k]
        target = min(
            candidates,
            key=lambda j: (float(np.linalg.norm(points[charts[j]].mean(axis=0) - centroid)), j),
        )
        merged = np.array(sorted(members | set(charts[target].tolist())), dtype=int)
        charts[target] = merged
        del charts[k]
    return charts


def refine_partition(cover: ChartCover, n_points: int | None = None) -> RefinedPartition:
    """Group points by exact chart-membership signature.

    Each signature is one cell with nu = |cell| / N and n_owner the number
    of charts in the signature.
    """
    n = cover.n_points if n_points is None else n_points
    signatures: dict[tuple[int, ...], list[int]] = {}
    membership: list[list[int]] = [[] for _ in range(n)]
    for k, chart in enumerate(cover.charts):
        for i in chart:
            membership[i].append(k)
    for i, owners in enumerate(membership):
        if not owners:
            raise CoverError(f"point {i} is not covered by any chart")
        signatures.setdefault(tuple(owners), []).append(i)
    cells = []
    for sig in sorted(signatures):
        idx = np.array(signatures[sig], dtype=int)
        cells.append((idx, sig, len(sig), idx.size / n))
    return RefinedPartition(cells=cells)


def partition_from_cover(cover: ChartCover, points: np.ndarray) -> np.ndarray:
    """Hard chart assignment: unique membership wins, else nearest chart centroid.

    Ties break toward the lowest chart id.  The result partitions {0..N-1}.
    """
    points = np.asarray(points, dtype=float)
    centroids = np.stack([points[c].mean(axis=0) for c in cover.charts])
    labels = np.full(cover.n_points, -1, dtype=int)
    membership: list[list[int]] = [[] for _ in range(cover.n_points)]
    for k, chart in enumerate(cover.charts):
        for i in chart:
            membership[i].append(k)
    for i, owners in enumerate(membership):
        if not owners:
            raise CoverError(f"point {i} is not covered by any chart")
        if len(owners) == 1:
            labels[i] = owners[0]
        else:
            d = np.linalg.norm(centroids[owners] - points[i], axis=1)
            labels[i] = owners[int(np.argmin(d))]
    return labels


def partition_cover(cover: ChartCover, points: np.ndarray) -> ChartCover:
    """Disjoint cover induced by :func:`partition_from_cover` labels.

    Chart ids are preserved; charts whose points were all reassigned
    elsewhere keep an empty slot only if truly empty, which ``validate``
    rejects -- in practice every chart retains its exclusive points.
    """
    labels = partition_from_cover(cover, points)
    charts = [np.flatnonzero(labels == k) for k in range(cover.n_charts)]
    if any(c.size == 0 for c in charts):
        raise CoverError("partition baseline produced an empty chart")
    return ChartCover(n_points=cover.n_points, charts=charts, nerve_edges=set())


def save_cover(cover: ChartCover, path) -> None:
    partition = refine_partition(cover)
    payload = {
        "format_version": COVER_FORMAT_VERSION,
        "n_points": cover.n_points,
        "charts": [c.tolist() for c in cover.charts],
        "nerve_edges": sorted(list(e) for e in cover.nerve_edges),
        "multiplicity": cover.multiplicity.tolist(),
        "cells": [
            {"signature": list(sig), "indices": idx.tolist(), "nu": nu}
            for idx, sig, _, nu in partition.cells
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_cover(path) -> ChartCover:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != COVER_FORMAT_VERSION:
        raise CoverError(f"unsupported cover format_version {version!r}")
    cover = ChartCover(
        n_points=int(payload["n_points"]),
        charts=[np.asarray(c, dtype=int) for c in payload["charts"]],
        nerve_edges={tuple(e) for e in payload["nerve_edges"]},
        multiplicity=np.asarray(payload["multiplicity"], dtype=int),
    )
    cover.validate()
    return cover
