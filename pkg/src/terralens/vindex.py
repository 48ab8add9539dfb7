"""Inverted-file flat (IVF-Flat) approximate nearest-neighbor index over
embedding vectors, with an exact brute-force oracle and a geographic
nearest-record grid.

Vectors are stored float32; all distances are squared Euclidean computed by
one shared elementwise routine so approximate and exact search are
bit-consistent. Ties break toward the lower record id.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import EMBEDDING_DIM

_MAGIC = b"TLIX"
_VERSION = 1

#: Production default cluster count for the ~12.1M-vector deployment
#: (approximately sqrt(N)).
PRODUCTION_NLIST = 3500
DEFAULT_NPROBE = 64


class IndexFormatError(ValueError):
    """Raised when a serialized index cannot be read."""


def default_nlist(n_vectors: int) -> int:
    """sqrt(N) rule for the coarse quantizer size."""
    return max(1, math.isqrt(max(0, n_vectors - 1)) + 1) if n_vectors else 1


@dataclass(frozen=True)
class IndexConfig:
    nlist: int
    nprobe: int = DEFAULT_NPROBE
    kmeans_iters: int = 15
    seed: int = 0
    kmeans_sample: int | None = None  # None = min(n, 256 * nlist)

    def __post_init__(self) -> None:
        if self.nlist < 1:
            raise ValueError("nlist must be >= 1")
        if not 1 <= self.nprobe <= self.nlist:
            raise ValueError(f"nprobe must be in [1, nlist], got {self.nprobe} with nlist {self.nlist}")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be >= 1")


def _sq_dists(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance of every row of X to q.

    This is the single distance routine shared by approximate search, exact
    search, and centroid assignment so results are mutually consistent.
    """
    diff = X - q
    return np.einsum("ij,ij->i", diff, diff)


def nearest_centroids(X: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the nearest centroid per row (ties toward the lower index)."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    c_norms = np.einsum("ij,ij->i", centroids, centroids)
    for start in range(0, n, chunk):
        block = X[start:start + chunk]
        d = c_norms[None, :] - 2.0 * (block @ centroids.T)
        out[start:start + chunk] = np.argmin(d, axis=1)
    return out


def kmeans_train(vectors, nlist: int, iters: int = 15, seed: int = 0
                 ) -> tuple[np.ndarray, list[float]]:
    """Lloyd's k-means from k-means++ seeding; returns (centroids, distortion
    history). Empty clusters are re-seeded from the farthest points.
    Deterministic for a fixed seed."""
    X = np.ascontiguousarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if n < nlist:
        raise ValueError(f"sample size {n} is smaller than nlist {nlist}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((nlist, X.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = X[first]
    min_d = _sq_dists(X, centroids[0])
    for c in range(1, nlist):
        total = float(min_d.sum())
        if total <= 0.0:
            pick = int(rng.integers(0, n))
        else:
            pick = int(rng.choice(n, p=min_d / total))
        centroids[c] = X[pick]
        np.minimum(min_d, _sq_dists(X, centroids[c]), out=min_d)

    history: list[float] = []
    for _ in range(iters):
        assign = nearest_centroids(X, centroids)
        counts = np.bincount(assign, minlength=nlist)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, X)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            # move empty centroids onto the points currently farthest from
            # their assigned centroid
            d_own = np.einsum("ij,ij->i", X - centroids[assign], X - centroids[assign])
            farthest = np.argsort(-d_own, kind="stable")[: empty.size]
            centroids[empty] = X[farthest]
            assign = nearest_centroids(X, centroids)
        d_final = np.einsum("ij,ij->i", X - centroids[assign], X - centroids[assign])
        history.append(float(d_final.mean()))
    return centroids, history


@dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    distances: np.ndarray
    requested_k: int
    n_probed: int = 0

    @property
    def short(self) -> bool:
        """True when fewer than the requested k hits were available."""
        return self.ids.shape[0] < self.requested_k

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.distances)]


class IvfIndex:
    """k-means coarse quantizer plus per-centroid inverted lists.

    Immutable after build; searches allocate no shared state and may run
    concurrently.
    """

    def __init__(self, centroids: np.ndarray, list_ids: list[np.ndarray],
                 list_vecs: list[np.ndarray], config: IndexConfig) -> None:
        # quantize through f32 (the on-disk precision) so that a save/load
        # round trip probes exactly the same lists as the in-memory index
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32).astype(np.float64)
        self.list_ids = [np.ascontiguousarray(i, dtype=np.uint64) for i in list_ids]
        self.list_vecs = [np.ascontiguousarray(v, dtype=np.float32) for v in list_vecs]
        self.config = config
        if len(self.list_ids) != self.centroids.shape[0] or len(self.list_vecs) != len(self.list_ids):
            raise ValueError("list count must equal nlist")

    @property
    def count(self) -> int:
        return int(sum(i.shape[0] for i in self.list_ids))

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


def build(vectors, ids, config: IndexConfig) -> IvfIndex:
    """Build an IVF index: train the quantizer on a sample, then assign
    every vector to its nearest centroid's list. Duplicate ids are an error."""
    X = np.ascontiguousarray(vectors, dtype=np.float32)
    ids = np.asarray(ids, dtype=np.uint64)
    if X.ndim != 2:
        raise ValueError("vectors must be 2-D")
    n = X.shape[0]
    if ids.shape != (n,):
        raise ValueError("ids must align with vectors")
    if np.unique(ids).shape[0] != n:
        raise ValueError("duplicate ids")
    if config.nlist > n:
        raise ValueError(f"nlist {config.nlist} exceeds vector count {n}")

    sample_cap = config.kmeans_sample if config.kmeans_sample is not None else min(n, 256 * config.nlist)
    sample_cap = max(sample_cap, config.nlist)
    if sample_cap < n:
        rng = np.random.default_rng(config.seed)
        sample = X[rng.permutation(n)[:sample_cap]].astype(np.float64)
    else:
        sample = X.astype(np.float64)
    centroids, _ = kmeans_train(sample, config.nlist, config.kmeans_iters, config.seed)
    # quantize before assignment so list membership is exact w.r.t. the
    # stored (f32) centroids
    centroids = centroids.astype(np.float32).astype(np.float64)

    assign = nearest_centroids(X.astype(np.float64), centroids)
    order = np.argsort(assign, kind="stable")
    sorted_assign = assign[order]
    boundaries = np.searchsorted(sorted_assign, np.arange(config.nlist + 1))
    list_ids = []
    list_vecs = []
    for c in range(config.nlist):
        rows = order[boundaries[c]:boundaries[c + 1]]
        list_ids.append(ids[rows])
        list_vecs.append(X[rows])
    return IvfIndex(centroids, list_ids, list_vecs, config)


def _rank_hits(ids: np.ndarray, dists: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((ids, dists))[:k]
    return ids[order], dists[order]


def search(index: IvfIndex, query, k: int, nprobe: int | None = None) -> SearchResult:
    """Scan the nprobe nearest centroid lists exhaustively; return up to k
    hits ascending by squared distance, ties by id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.count == 0:
        return SearchResult(ids=np.empty(0, np.uint64), distances=np.empty(0), requested_k=k)
    nprobe = index.config.nprobe if nprobe is None else nprobe
    nprobe = min(max(1, nprobe), index.centroids.shape[0])
    q64 = np.asarray(query, dtype=np.float64).reshape(-1)
    if q64.shape[0] != index.dim:
        raise ValueError(f"query must have {index.dim} entries")

    cd = _sq_dists(index.centroids, q64)
    if nprobe < cd.shape[0]:
        probe = np.argpartition(cd, nprobe - 1)[:nprobe]
        probe = probe[np.argsort(cd[probe], kind="stable")]
    else:
        probe = np.argsort(cd, kind="stable")

    q32 = q64.astype(np.float32)
    cand_ids = [index.list_ids[c] for c in probe if index.list_ids[c].shape[0]]
    cand_vecs = [index.list_vecs[c] for c in probe if index.list_ids[c].shape[0]]
    if not cand_ids:
        return SearchResult(ids=np.empty(0, np.uint64), distances=np.empty(0),
                            requested_k=k, n_probed=int(nprobe))
    all_ids = np.concatenate(cand_ids)
    all_vecs = np.vstack(cand_vecs)
    dists = _sq_dists(all_vecs, q32).astype(np.float64)
    ids, top = _rank_hits(all_ids, dists, k)
    return SearchResult(ids=ids, distances=top, requested_k=k, n_probed=int(nprobe))


def exact_search(vectors, query, k: int, ids=None) -> SearchResult:
    """Full-scan oracle with the same distance and ordering contract as
    search()."""
    if k < 1:
        raise ValueError("k must be >= 1")
    X = np.ascontiguousarray(vectors, dtype=np.float32)
    n = X.shape[0]
    ids = np.arange(n, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
    if n == 0:
        return SearchResult(ids=np.empty(0, np.uint64), distances=np.empty(0), requested_k=k)
    q32 = np.asarray(query, dtype=np.float64).reshape(-1).astype(np.float32)
    dists = _sq_dists(X, q32).astype(np.float64)
    top_ids, top = _rank_hits(ids, dists, k)
    return SearchResult(ids=top_ids, distances=top, requested_k=k, n_probed=0)


def save_index(index: IvfIndex, path: str | Path) -> None:
    """TLIX binary format: magic, u32 version, u32 dim, u32 nlist, centroids
    (f32 row-major), then per list u64 length + ids (u64) + vectors (f32).
    Little-endian throughout."""
    nlist = index.centroids.shape[0]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, index.dim, nlist))
        fh.write(index.centroids.astype("<f4").tobytes())
        for ids, vecs in zip(index.list_ids, index.list_vecs):
            fh.write(struct.pack("<Q", ids.shape[0]))
            fh.write(ids.astype("<u8").tobytes())
            fh.write(vecs.astype("<f4").tobytes())


def load_index(path: str | Path, config: IndexConfig | None = None) -> IvfIndex:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise IndexFormatError("bad magic: not an index file")
    off = 4
    try:
        version, dim, nlist = struct.unpack_from("<III", data, off)
    except struct.error as exc:
        raise IndexFormatError(f"truncated header: {exc}") from None
    off += 12
    if version != _VERSION:
        raise IndexFormatError(f"unsupported version {version}")
    cent_bytes = dim * nlist * 4
    if off + cent_bytes > len(data):
        raise IndexFormatError("truncated centroid block")
    centroids = np.frombuffer(data[off:off + cent_bytes], dtype="<f4").reshape(nlist, dim).astype(np.float64)
    off += cent_bytes
    list_ids = []
    list_vecs = []
    for _ in range(nlist):
        try:
            (length,) = struct.unpack_from("<Q", data, off)
        except struct.error as exc:
            raise IndexFormatError(f"truncated list header: {exc}") from None
        off += 8
        id_bytes = length * 8
        vec_bytes = length * dim * 4
        if off + id_bytes + vec_bytes > len(data):
            raise IndexFormatError("truncated list payload")
        list_ids.append(np.frombuffer(data[off:off + id_bytes], dtype="<u8").copy())
        off += id_bytes
        list_vecs.append(np.frombuffer(data[off:off + vec_bytes], dtype="<f4").reshape(length, dim).copy())
        off += vec_bytes
    if off != len(data):
        raise IndexFormatError("trailing bytes after final list")
    if config is None:
        config = IndexConfig(nlist=nlist, nprobe=min(DEFAULT_NPROBE, nlist))
    return IvfIndex(centroids, list_ids, list_vecs, config)


class GeoGrid:
    """Uniform lon/lat bucket grid for nearest-record lookup in degree
    space (plain Euclidean on degrees, as specified; the longitude
    compression with latitude is not corrected)."""

    def __init__(self, lons, lats, ids, cell_deg: float = 0.5) -> None:
        if cell_deg <= 0:
            raise ValueError("cell_deg must be > 0")
        self.lons = np.asarray(lons, dtype=np.float64)
        self.lats = np.asarray(lats, dtype=np.float64)
        self.ids = np.asarray(ids, dtype=np.int64)
        if not (self.lons.shape == self.lats.shape == self.ids.shape):
            raise ValueError("lons, lats, ids must align")
        self.cell_deg = float(cell_deg)
        cx = np.floor(self.lons / cell_deg).astype(np.int64)
        cy = np.floor(self.lats / cell_deg).astype(np.int64)
        self.buckets: dict[tuple[int, int], np.ndarray] = {}
        order = np.lexsort((self.ids, cy, cx))
        key_rows: dict[tuple[int, int], list[int]] = {}
        for r in order:
            key_rows.setdefault((int(cx[r]), int(cy[r])), []).append(int(r))
        for key, rows in key_rows.items():
            self.buckets[key] = np.asarray(rows, dtype=np.int64)
        if self.buckets:
            keys = np.array(list(self.buckets.keys()))
            self._kx_min, self._ky_min = keys.min(axis=0)
            self._kx_max, self._ky_max = keys.max(axis=0)

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])


def nearest_geo(grid: GeoGrid, lon: float, lat: float) -> int:
    """Record id minimizing squared degree distance, expanding ring search
    over buckets; ties break toward the lower id."""
    if grid.n == 0:
        raise ValueError("geo grid is empty")
    cell = grid.cell_deg
    qx = int(np.floor(lon / cell))
    qy = int(np.floor(lat / cell))
    max_ring = int(max(abs(qx - grid._kx_min), abs(qx - grid._kx_max),
                       abs(qy - grid._ky_min), abs(qy - grid._ky_max))) + 1

    best_d = np.inf
    best_id = -1
    for ring in range(max_ring + 1):
        # once a hit exists, no cell at Chebyshev ring r can beat it if the
        # minimum possible distance (r - 1) * cell already exceeds it
        if best_id >= 0 and (ring - 1) * cell > np.sqrt(best_d):
            break
        if ring == 0:
            cells = [(qx, qy)]
        else:
            cells = []
            for dx in range(-ring, ring + 1):
                cells.append((qx + dx, qy - ring))
                cells.append((qx + dx, qy + ring))
            for dy in range(-ring + 1, ring):
                cells.append((qx - ring, qy + dy))
                cells.append((qx + ring, qy + dy))
        for key in cells:
            rows = grid.buckets.get(key)
            if rows is None:
                continue
            d = (grid.lons[rows] - lon) ** 2 + (grid.lats[rows] - lat) ** 2
            j = int(np.lexsort((grid.ids[rows], d))[0])
            if d[j] < best_d or (d[j] == best_d and grid.ids[rows][j] < best_id):
                best_d = float(d[j])
                best_id = int(grid.ids[rows][j])
    return best_id
