"""K-means clustering of encoded features and the cluster-level propensity table.

The invariant features c_i and spurious features s_i are clustered into m
and n groups; the propensity of sample i is P(C-cluster of i | S-cluster of i)
estimated by counting, floored away from zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_FLOOR = 0.05
INVARIANT = "invariant"
SPURIOUS = "spurious"


class PropensityError(ValueError):
    pass


class TooFewPoints(PropensityError):
    pass


class EmptyInput(PropensityError):
    pass


class MisalignedSamples(PropensityError):
    pass


class IndexOutOfRange(PropensityError, IndexError):
    pass


@dataclass
class FeatureSet:
    vectors: np.ndarray
    origin: str = INVARIANT
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim == 1:
            self.vectors = self.vectors[:, None]
        if self.vectors.shape[0] == 0:
            raise EmptyInput("feature set has no rows")
        if not np.all(np.isfinite(self.vectors)):
            raise PropensityError("feature vectors must be finite")
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.vectors))
        self.sample_ids = np.asarray(self.sample_ids)
        if len(self.sample_ids) != len(self.vectors):
            raise MisalignedSamples("sample_ids length differs from vectors")

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class Clustering:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)
    sample_ids: np.ndarray | None = None

    def relabel(self, perm) -> "Clustering":
        """Rename cluster ``a`` to ``perm[a]``."""
        perm = np.asarray(perm)
        cents = np.empty_like(self.centroids)
        cents[perm] = self.centroids
        return Clustering(self.k, cents, perm[self.assignments], self.inertia,
                          list(self.history), self.sample_ids)


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # direct differences rather than the expanded-square trick: exact zeros
    # for coincident points, which the k = N and degenerate cases rely on
    d = np.empty((len(x), len(c)))
    for j in range(len(c)):
        diff = x - c[j]
        d[:, j] = np.einsum("ij,ij->i", diff, diff)
    return d


def _assign(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sqdist(x, c)
    a = np.argmin(d, axis=1)  # first minimum, i.e. lowest index on ties
    return a, d[np.arange(len(x)), a]


def _farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(len(x)))]
    best = _sqdist(x, x[idx]).ravel()
    for _ in range(1, k):
        nxt = int(np.argmax(best))
        idx.append(nxt)
        best = np.minimum(best, _sqdist(x, x[[nxt]]).ravel())
    return x[idx].copy()


def kmeans(fs: FeatureSet | np.ndarray, k: int, seed: int = 0, max_iters: int = 100) -> Clustering:
    """Lloyd's algorithm from farthest-point seeding.

    Empty clusters are re-seeded at the point farthest from its centroid.
    Inertia is checked to be non-increasing after every assignment step.
    """
    if not isinstance(fs, FeatureSet):
        fs = FeatureSet(fs)
    x = fs.vectors
    if k < 1 or k > len(x):
        raise TooFewPoints(f"cannot form {k} clusters from {len(x)} points")
    if max_iters < 1:
        raise PropensityError("max_iters must be at least 1")
    rng = np.random.default_rng(seed)
    cents = _farthest_point_init(x, k, rng)
    assign, dist = _assign(x, cents)
    history = [float(dist.sum())]
    for _ in range(max_iters):
        counts = np.bincount(assign, minlength=k)
        onehot = np.zeros((k, len(x)))
        onehot[assign, np.arange(len(x))] = 1.0
        new = (onehot @ x) / np.maximum(counts, 1)[:, None]
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist))
            new[j] = x[far]
            dist[far] = 0.0
        # recompute distances against the updated centroids before reassigning
        new_assign, new_dist = _assign(x, new)
        inertia = float(new_dist.sum())
        # the mean step can only lower inertia; allow float noise
        assert inertia <= history[-1] * (1 + 1e-12) + 1e-12, (inertia, history[-1])
        history.append(inertia)
        cents = new
        done = np.array_equal(new_assign, assign)
        assign, dist = new_assign, new_dist
        if done:
            break
    return Clustering(k, cents, assign, history[-1], history, fs.sample_ids)


@dataclass
class PropensityTable:
    probs: np.ndarray
    counts: np.ndarray
    floor: float

    @property
    def m(self) -> int:
        return self.probs.shape[0]

    @property
    def n(self) -> int:
        return self.probs.shape[1]


def clip_columns(probs: np.ndarray, floor: float) -> np.ndarray:
    """Raise entries below ``floor`` to it and rescale the rest so each column sums to 1."""
    m = probs.shape[0]
    if floor * m > 1 + 1e-12:
        raise PropensityError(f"floor {floor} infeasible for {m} rows")
    out = probs.astype(float).copy()
    for l in range(out.shape[1]):
        col = out[:, l]
        fixed = np.zeros(m, dtype=bool)
        while True:
            low = (col < floor) & ~fixed
            if not low.any():
                break
            fixed |= low
            col[fixed] = floor
            free = ~fixed
            rest = col[free].sum()
            if free.any() and rest > 0:
                col[free] *= (1 - floor * fixed.sum()) / rest
        col /= col.sum()
    return out


def build_table(c_cluster: Clustering, s_cluster: Clustering, floor: float = DEFAULT_FLOOR) -> PropensityTable:
    """probs[k, l] = count(C=k, S=l) / count(S=l), floored at ``floor``."""
    ca = np.asarray(c_cluster.assignments)
    sa = np.asarray(s_cluster.assignments)
    if len(ca) != len(sa):
        raise MisalignedSamples(f"{len(ca)} invariant vs {len(sa)} spurious assignments")
    if c_cluster.sample_ids is not None and s_cluster.sample_ids is not None:
        if not np.array_equal(c_cluster.sample_ids, s_cluster.sample_ids):
            raise MisalignedSamples("clusterings cover different samples")
    m, n = c_cluster.k, s_cluster.k
    counts = np.zeros((m, n), dtype=np.int64)
    np.add.at(counts, (ca, sa), 1)
    col = counts.sum(axis=0)
    probs = np.full((m, n), 1.0 / m)
    nz = col > 0
    probs[:, nz] = counts[:, nz] / col[nz]
    if floor > 0:
        probs = clip_columns(probs, floor)
    return PropensityTable(probs, counts, floor)


def table_from_assignments(c_assign, s_assign, m: int, n: int, floor: float = DEFAULT_FLOOR) -> PropensityTable:
    c = Clustering(m, np.zeros((m, 0)), np.asarray(c_assign), 0.0)
    s = Clustering(n, np.zeros((n, 0)), np.asarray(s_assign), 0.0)
    return build_table(c, s, floor)


def sample_propensity(table: PropensityTable, c_cluster: Clustering, s_cluster: Clustering, i: int) -> float:
    if not 0 <= i < len(c_cluster.assignments):
        raise IndexOutOfRange(f"sample index {i} out of range")
    return float(table.probs[c_cluster.assignments[i], s_cluster.assignments[i]])


def propensities(table: PropensityTable, c_assign, s_assign) -> np.ndarray:
    """Vectorised π for aligned assignment arrays."""
    return table.probs[np.asarray(c_assign), np.asarray(s_assign)]


def psw_weights(pi, normalize: bool = False) -> np.ndarray:
    """Inverse-propensity weights 1/π, optionally divided by their batch mean."""
    w = 1.0 / np.asarray(pi, dtype=float)
    if normalize and len(w):
        w = w / w.mean()
    return w


def build_domain_tables(c_assign, s_assign, domains, m: int, n: int,
                        floor: float = DEFAULT_FLOOR, pooled: bool = False) -> tuple[dict, np.ndarray]:
    """One table per training domain (or one pooled table) and the per-sample π."""
    c_assign = np.asarray(c_assign)
    s_assign = np.asarray(s_assign)
    domains = np.asarray(domains)
    pi = np.empty(len(c_assign))
    tables = {}
    if pooled:
        t = table_from_assignments(c_assign, s_assign, m, n, floor)
        tables = {d: t for d in np.unique(domains).tolist()}
        pi[:] = propensities(t, c_assign, s_assign)
        return tables, pi
    for d in np.unique(domains).tolist():
        sel = domains == d
        t = table_from_assignments(c_assign[sel], s_assign[sel], m, n, floor)
        tables[d] = t
        pi[sel] = propensities(t, c_assign[sel], s_assign[sel])
    return tables, pi


def write_case_study_csv(path, sample_ids, domains, c_assign, s_assign, pi) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "domain", "c_cluster", "s_cluster", "pi"])
        for row in zip(sample_ids, domains, c_assign, s_assign, pi):
            w.writerow([int(row[0]), row[1], int(row[2]), int(row[3]), f"{float(row[4]):.6f}"])


def read_case_study_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
