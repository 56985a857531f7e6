"""k-means grouping of absorption spectra and cluster validity criteria."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateClusters,
    DegenerateW,
    MalformedRecord,
    NonFiniteInput,
    SizeMismatch,
    TooFewPoints,
)
from .material_db import (
    AbsorptionSpectrum,
    MaterialDatabase,
    format_coefficients,
    iter_records,
)


@dataclass(frozen=True)
class Clustering:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    k: int
    seed: int
    n_iter: int = 0
    inertia_history: tuple[float, ...] = field(default=(), repr=False)


@dataclass(frozen=True)
class CategoryTable:
    centroid_spectra: tuple[AbsorptionSpectrum, ...]
    material_to_category: dict[int, int]

    @property
    def theta_tot(self) -> int:
        return len(self.centroid_spectra)

    def matrix(self) -> np.ndarray:
        """The theta_tot x 8 category absorption matrix."""
        return np.array([s.coefficients for s in self.centroid_spectra], dtype=float)

    def label_vector(self, material_ids) -> np.ndarray:
        """Binary presence vector over categories for a set of surface materials."""
        y = np.zeros(self.theta_tot, dtype=np.int8)
        for mid in material_ids:
            y[self.material_to_category[int(mid)]] = 1
        return y


@dataclass(frozen=True)
class CriterionSweep:
    k_values: tuple[int, ...]
    db_scores: tuple[float, ...]
    vrc_scores: tuple[float, ...]
    inertias: tuple[float, ...]


def _check_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    if x.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("points contain NaN or inf")
    return x


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences: the expanded |x|^2-2xc+|c|^2 form loses exact zeros
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _inertia(x: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    d = x - centroids[assignments]
    return float(np.sum(d * d))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a chosen centre
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx : idx + 1])[:, 0])
    return x[chosen].copy()


def _fill_empty(x, assignments, centroids, k):
    """Move the worst-fitting point of a multi-member cluster into each empty cluster."""
    for j in range(k):
        if np.any(assignments == j):
            continue
        counts = np.bincount(assignments, minlength=k)
        d = np.sum((x - centroids[assignments]) ** 2, axis=1)
        d[counts[assignments] < 2] = -1.0
        far = int(np.argmax(d))
        donor = assignments[far]
        assignments[far] = j
        centroids[j] = x[far]
        centroids[donor] = x[assignments == donor].mean(axis=0)
    return assignments, centroids


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-10) -> Clustering:
    """Lloyd's algorithm from a k-means++ start.

    Ties in the assignment step go to the lowest cluster index.  A cluster
    that empties out is re-seeded with the point farthest from its own centroid.
    """
    x = _check_points(points)
    n = len(x)
    if k < 2:
        raise TooFewPoints(f"k must be at least 2, got {k}")
    if k > n:
        raise TooFewPoints(f"k={k} exceeds the number of points n={n}")
    if tol < 0:
        raise ValueError("tol must be non-negative")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    history = []
    assignments = np.argmin(_sq_dists(x, centroids), axis=1)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        assignments, centroids = _fill_empty(x, assignments, centroids, k)
        new = np.array([x[assignments == j].mean(axis=0) for j in range(k)])
        shift = float(np.max(np.sqrt(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        history.append(_inertia(x, assignments, centroids))
        if shift <= tol:
            break
        assignments = np.argmin(_sq_dists(x, centroids), axis=1)

    return Clustering(
        assignments=assignments.astype(np.int64),
        centroids=centroids,
        inertia=history[-1],
        k=k,
        seed=seed,
        n_iter=n_iter,
        inertia_history=tuple(history),
    )


def best_of_restarts(points, k: int, restarts: int = 10, seed: int = 0, **kw) -> Clustering:
    """Run :func:`kmeans` ``restarts`` times and keep the lowest inertia."""
    seeds = np.random.SeedSequence([seed, k]).generate_state(restarts)
    best = None
    for s in seeds:
        c = kmeans(points, k, seed=int(s), **kw)
        if best is None or c.inertia < best.inertia:
            best = c
    return best


def _members(x, clustering):
    k = clustering.k
    groups = [x[clustering.assignments == j] for j in range(k)]
    if any(len(g) == 0 for g in groups):
        raise DegenerateClusters("empty cluster")
    return groups


def davies_bouldin(points, clustering: Clustering) -> float:
    """Davies-Bouldin index (lower is better)."""
    x = _check_points(points)
    k = clustering.k
    if k < 2:
        raise DegenerateClusters("need at least two clusters")
    groups = _members(x, clustering)
    c = np.asarray(clustering.centroids, dtype=float)
    s = np.array([np.mean(np.linalg.norm(g - c[j], axis=1)) for j, g in enumerate(groups)])
    m = np.sqrt(_sq_dists(c, c))
    off = ~np.eye(k, dtype=bool)
    if np.any(m[off] == 0.0):
        raise DegenerateClusters("two centroids coincide")
    r = np.where(off, (s[:, None] + s[None, :]) / np.where(off, m, 1.0), -np.inf)
    return float(np.mean(np.max(r, axis=1)))


def vrc(points, clustering: Clustering) -> float:
    """Variance ratio criterion (Calinski-Harabasz, higher is better).

    Returns ``inf`` and emits :class:`DegenerateW` when the within-cluster
    scatter is zero.
    """
    x = _check_points(points)
    n, k = len(x), clustering.k
    if k < 2:
        raise DegenerateClusters("need at least two clusters")
    c = np.asarray(clustering.centroids, dtype=float)
    counts = np.bincount(clustering.assignments, minlength=k)
    grand = x.mean(axis=0)
    b = float(np.sum(counts * np.sum((c - grand) ** 2, axis=1)))
    w = _inertia(x, clustering.assignments, c)
    if w == 0.0:
        warnings.warn("within-cluster scatter is zero; VRC is +inf", DegenerateW, stacklevel=2)
        return math.inf
    if k > n - 1:
        raise DegenerateClusters(f"VRC needs k <= n-1 (k={k}, n={n})")
    return (b / (k - 1)) / (w / (n - k))


def sweep_criteria(points, k_min: int = 2, k_max: int = 80, restarts: int = 10, seed: int = 0) -> CriterionSweep:
    """Score best-of-restarts k-means for every k in ``[k_min, k_max]``."""
    x = _check_points(points)
    if k_min < 2 or k_max < k_min:
        raise ValueError(f"invalid k range [{k_min}, {k_max}]")
    if k_max > len(x):
        raise TooFewPoints(f"k_max={k_max} exceeds the number of points n={len(x)}")
    ks, dbs, vrcs, inertias = [], [], [], []
    for k in range(k_min, k_max + 1):
        cl = best_of_restarts(x, k, restarts=restarts, seed=seed)
        ks.append(k)
        inertias.append(cl.inertia)
        try:
            dbs.append(davies_bouldin(x, cl))
        except DegenerateClusters:
            dbs.append(math.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateW)
            vrcs.append(vrc(x, cl))
    return CriterionSweep(tuple(ks), tuple(dbs), tuple(vrcs), tuple(inertias))


def write_sweep_csv(sweep: CriterionSweep, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "davies_bouldin", "vrc", "inertia"])
        for row in zip(sweep.k_values, sweep.db_scores, sweep.vrc_scores, sweep.inertias):
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def build_category_table(db: MaterialDatabase, clustering: Clustering) -> CategoryTable:
    """Category centroids as the mean spectrum of each cluster's materials."""
    a = np.asarray(clustering.assignments)
    if len(a) != len(db):
        raise SizeMismatch(f"clustering covers {len(a)} points, database has {len(db)} materials")
    x = db.matrix()
    rows = []
    for j in range(clustering.k):
        members = x[a == j]
        if len(members) == 0:
            raise DegenerateClusters(f"cluster {j} is empty")
        rows.append(AbsorptionSpectrum(tuple(members.mean(axis=0))))
    mapping = {m.id: int(a[i]) for i, m in enumerate(db.materials)}
    return CategoryTable(tuple(rows), mapping)


def cluster_materials(db: MaterialDatabase, k: int = 10, restarts: int = 10, seed: int = 0) -> CategoryTable:
    return build_category_table(db, best_of_restarts(db.matrix(), k, restarts=restarts, seed=seed))


MAP_HEADER = "[material_to_category]"


def dump_category_table(table: CategoryTable) -> str:
    lines = ["# theta;name;a1,...,a8"]
    for theta, spec in enumerate(table.centroid_spectra):
        lines.append(f"{theta};category_{theta};{format_coefficients(spec.coefficients)}")
    lines.append(MAP_HEADER)
    for mid in sorted(table.material_to_category):
        lines.append(f"{mid};{table.material_to_category[mid]}")
    return "\n".join(lines) + "\n"


def save_category_table(table: CategoryTable, path: str | Path) -> None:
    Path(path).write_text(dump_category_table(table), encoding="utf-8")


def load_category_table(path: str | Path) -> CategoryTable:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        split = next(i for i, line in enumerate(text) if line.strip() == MAP_HEADER)
    except StopIteration:
        raise MalformedRecord(0, f"missing {MAP_HEADER} section") from None
    rows = []
    for line_no, theta, _name, coefs in iter_records(text[:split]):
        if theta != len(rows):
            raise MalformedRecord(line_no, f"category rows must be numbered 0..n-1, got {theta}")
        rows.append(AbsorptionSpectrum(coefs))
    mapping = {}
    for offset, raw in enumerate(text[split + 1 :], start=split + 2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            mid, theta = (int(t) for t in line.split(";"))
        except ValueError:
            raise MalformedRecord(offset, f"bad map entry {line!r}") from None
        if not 0 <= theta < len(rows):
            raise MalformedRecord(offset, f"category {theta} out of range")
        if mid in mapping:
            raise MalformedRecord(offset, f"material {mid} mapped twice")
        mapping[mid] = theta
    return CategoryTable(tuple(rows), mapping)
