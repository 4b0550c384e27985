"""Unit-sphere geometry and spherical K-means labeling.

Unit vectors are plain ``float64`` numpy arrays of shape ``(3,)`` (or
``(N, 3)`` for batches). Distances in the clustering hot loops are squared
chord lengths ``|a - b|^2 = 2 - 2 a.b``, which orders points exactly like the
geodesic distance does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class InfeasibleClusteringError(ValueError):
    """Raised when K centroids cannot be placed (k < 2 or too few distinct points)."""


def to_unit_vector(ra_deg, dec_deg) -> np.ndarray:
    """Map (RA, Dec) in degrees to a Cartesian unit vector.

    Accepts scalars or broadcastable arrays; output has a trailing axis of 3.
    RA is reduced modulo 360 first so the periodic coordinate maps exactly.
    """
    ra = np.asarray(ra_deg, dtype=np.float64)
    dec = np.asarray(dec_deg, dtype=np.float64)
    if not (np.all(np.isfinite(ra)) and np.all(np.isfinite(dec))):
        raise ValueError("non-finite RA/Dec")
    if np.any(np.abs(dec) > 90.0):
        raise ValueError("dec_deg outside [-90, 90]")
    a = np.radians(np.mod(ra, 360.0))
    d = np.radians(dec)
    cd = np.cos(d)
    return np.stack([cd * np.cos(a), cd * np.sin(a), np.sin(d)], axis=-1)


def to_radec(v) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=np.float64)
    ra = np.degrees(np.arctan2(v[..., 1], v[..., 0])) % 360.0
    dec = np.degrees(np.arcsin(np.clip(v[..., 2], -1.0, 1.0)))
    return ra, dec


def geodesic_distance(a, b) -> np.ndarray | float:
    """Great-circle angle between unit vectors, in radians.

    Uses ``atan2(|a x b|, a.b)``, which stays accurate near 0 and pi where
    ``acos`` loses half its digits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    out = np.arctan2(cross, dot)
    return float(out) if out.ndim == 0 else out


def squared_chord(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(N, K) matrix of squared chord distances."""
    diff = vectors[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _check_vectors(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise ValueError(f"expected (N, 3) vectors, got shape {v.shape}")
    return v


def kmeans_pp_init(vectors, k: int, rng: np.random.Generator) -> np.ndarray:
    """K-means++ seeding (D^2 sampling over squared chord distance).

    Returns a ``(k, 3)`` array of k distinct rows of ``vectors``.
    """
    v = _check_vectors(vectors)
    if k < 2:
        raise InfeasibleClusteringError(f"k must be >= 2, got {k}")
    if len(v) < k:
        raise InfeasibleClusteringError(f"{len(v)} vectors cannot seed k={k} clusters")
    if len(np.unique(v, axis=0)) < k:
        raise InfeasibleClusteringError(f"fewer than k={k} distinct vectors")

    idx = [int(rng.integers(len(v)))]
    d2 = squared_chord(v, v[idx[0]][None, :])[:, 0]
    for _ in range(1, k):
        cum = np.cumsum(d2)
        # u in (0, total]: the first index reaching u always has d2 > 0
        u = (1.0 - rng.random()) * cum[-1]
        j = int(np.searchsorted(cum, u, side="left"))
        idx.append(j)
        d2 = np.minimum(d2, squared_chord(v, v[j][None, :])[:, 0])
    return v[idx].copy()


@dataclass
class ClusterModel:
    centroids: np.ndarray
    iterations_run: int = 0
    converged: bool = False
    inertia: float = 0.0
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[1] != 3:
            raise ValueError("centroids must have shape (k, 3)")
        if self.k < 2:
            raise ValueError("ClusterModel needs k >= 2")

    @property
    def k(self) -> int:
        return len(self.centroids)

    def labels(self, vectors) -> np.ndarray:
        """Vectorized :func:`assign_label`."""
        return np.argmin(squared_chord(_check_vectors(vectors), self.centroids), axis=1)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps_model(self))

    @classmethod
    def load(cls, path) -> "ClusterModel":
        with open(path, encoding="utf-8") as fh:
            return loads_model(fh.read())


def _mean_directions(v, labels, k):
    # bincount sums in index order, so the reduction is reproducible
    sums = np.stack([np.bincount(labels, weights=v[:, j], minlength=k) for j in range(3)], axis=1)
    counts = np.bincount(labels, minlength=k)
    return sums, counts


def _lloyd(v, centroids, max_iter: int, tol: float) -> ClusterModel:
    k = len(centroids)
    history: list[float] = []
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        d2 = squared_chord(v, centroids)
        labels = np.argmin(d2, axis=1)
        own = d2[np.arange(len(v)), labels]
        history.append(float(own.sum()))

        sums, counts = _mean_directions(v, labels, k)
        new = centroids.copy()
        filled = counts > 0
        norms = np.linalg.norm(sums[filled], axis=1)
        new[filled] = sums[filled] / norms[:, None]

        taken = own.copy()
        for j in np.flatnonzero(~filled):
            far = int(np.argmax(taken))
            new[j] = v[far]
            taken[far] = -1.0

        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            converged = True
            break

    d2 = squared_chord(v, centroids)
    inertia = float(d2.min(axis=1).sum())
    history.append(inertia)
    return ClusterModel(centroids, it, converged, inertia, history)


def spherical_kmeans(
    vectors,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    tol: float = 1e-6,
    init: np.ndarray | None = None,
    n_init: int = 10,
) -> ClusterModel:
    """Lloyd iterations on the unit sphere.

    Assignment is by minimum squared chord distance (lowest index on ties);
    the update is the arithmetic mean of each cluster renormalized to unit
    length, which is the exact minimizer of the cluster's chord inertia on
    the sphere. An empty cluster is reseeded to the point farthest from its
    own assigned centroid. Stops once no centroid moves by ``tol`` or more.

    Runs ``n_init`` K-means++ seedings drawn in sequence from ``rng`` and
    returns the run with the lowest final inertia (earliest on ties). An
    explicit ``init`` means a single run.
    """
    v = _check_vectors(vectors)
    if init is not None:
        centroids = np.array(init, dtype=np.float64)
        if centroids.shape != (k, 3):
            raise InfeasibleClusteringError("init must provide k centroids")
        return _lloyd(v, centroids, max_iter, tol)
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best = None
    for _ in range(n_init):
        run = _lloyd(v, kmeans_pp_init(v, k, rng), max_iter, tol)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def assign_label(model: ClusterModel, v) -> int:
    d2 = squared_chord(np.asarray(v, dtype=np.float64).reshape(1, 3), model.centroids)[0]
    return int(np.argmin(d2))


def nearest_two(model: ClusterModel, v) -> tuple[int, int]:
    d2 = squared_chord(np.asarray(v, dtype=np.float64).reshape(1, 3), model.centroids)[0]
    order = np.argsort(d2, kind="stable")
    return int(order[0]), int(order[1])


def nearest_two_batch(model: ClusterModel, vectors) -> np.ndarray:
    """(N, 2) array of nearest and second-nearest centroid indices."""
    d2 = squared_chord(_check_vectors(vectors), model.centroids)
    return np.argsort(d2, axis=1, kind="stable")[:, :2]


def dumps_model(model: ClusterModel) -> str:
    lines = [f"k={model.k}"]
    for c in model.centroids:
        lines.append(" ".join(f"{x:.17g}" for x in c))
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> ClusterModel:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("k="):
        raise ValueError("cluster model file must start with 'k=<K>'")
    k = int(lines[0][2:])
    rows = [[float(x) for x in ln.split()] for ln in lines[1:]]
    if len(rows) != k or any(len(r) != 3 for r in rows):
        raise ValueError(f"expected {k} centroid lines of 3 numbers")
    return ClusterModel(np.array(rows), converged=True)


def uniform_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    """n points uniform on the sphere (RA uniform, sin Dec uniform)."""
    ra = rng.uniform(0.0, 360.0, n)
    dec = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, n)))
    return to_unit_vector(ra, dec)


def chord_from_angle(angle_rad: float) -> float:
    return 2.0 * math.sin(angle_rad / 2.0)
