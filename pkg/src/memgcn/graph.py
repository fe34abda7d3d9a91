"""Shared ROI graph: k-NN Gaussian adjacency and its (rescaled) Laplacian."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .numerics import as_matrix, lambda_max as _lambda_max


@dataclass(frozen=True)
class RoiCoordinates:
    coords: np.ndarray  # (n, 3)

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValidationError(f"ROI coordinates must be n x 3, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValidationError("ROI coordinates contain non-finite values")
        object.__setattr__(self, "coords", c)

    @property
    def n(self):
        return self.coords.shape[0]

    def duplicate_pairs(self):
        _, inverse, counts = np.unique(self.coords, axis=0, return_inverse=True, return_counts=True)
        return [np.flatnonzero(inverse.ravel() == g).tolist() for g in np.flatnonzero(counts > 1)]


@dataclass(frozen=True)
class SpatialGraph:
    W: np.ndarray
    delta: np.ndarray
    delta_tilde: np.ndarray
    lambda_max: float

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def edge_count(self):
        return int(np.count_nonzero(np.triu(self.W, 1) > 0))


def aggregate_coordinates(per_subject):
    """Average per-subject ROI centres into one shared coordinate set."""
    sets = [np.asarray(s, dtype=np.float64) for s in per_subject]
    if not sets:
        raise ValidationError("need at least one subject's coordinates")
    shape = sets[0].shape
    for m, s in enumerate(sets):
        if s.shape != shape:
            raise ValidationError(f"subject {m} has coordinate shape {s.shape}, expected {shape}")
    return RoiCoordinates(np.mean(np.stack(sets), axis=0))


def knn_sets(coords, k):
    """Neighbour index lists; ties go to the smaller ROI index, self excluded."""
    c = coords.coords if isinstance(coords, RoiCoordinates) else np.asarray(coords, dtype=np.float64)
    n = c.shape[0]
    if not 1 <= k < n:
        raise ValidationError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    d2 = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    neighbours = []
    for i in range(n):
        order = np.lexsort((np.arange(n), d2[i]))
        neighbours.append([j for j in order if j != i][:k])
    return neighbours, d2


def default_sigma(coords, k):
    """Mean distance from each ROI to its k-th nearest neighbour."""
    neighbours, d2 = knn_sets(coords, k)
    kth = [np.sqrt(d2[i, nb[-1]]) for i, nb in enumerate(neighbours)]
    return float(np.mean(kth))


def build_knn_graph(coords, k=10, sigma=None, allow_duplicates=False):
    """Union-symmetrized k-NN adjacency with Gaussian weights.

    ``w_ij = exp(-|v_i - v_j|^2 / (2 sigma^2))`` whenever i is among j's k
    nearest neighbours or j among i's; zero otherwise.
    """
    if not isinstance(coords, RoiCoordinates):
        coords = RoiCoordinates(coords)
    if not allow_duplicates and coords.duplicate_pairs():
        raise ValidationError(f"ROIs share identical coordinates: {coords.duplicate_pairs()}")
    neighbours, d2 = knn_sets(coords, k)
    if sigma is None:
        sigma = default_sigma(coords, k)
        if sigma == 0.0:
            sigma = 1.0
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    n = coords.n
    mask = np.zeros((n, n), dtype=bool)
    for i, nb in enumerate(neighbours):
        mask[i, nb] = True
    mask |= mask.T
    W = np.where(mask, np.exp(-d2 / (2.0 * sigma**2)), 0.0)
    np.fill_diagonal(W, 0.0)
    # exact symmetry regardless of rounding in d2
    W = np.triu(W, 1)
    return W + W.T


def normalized_laplacian(W):
    """``I - D^{-1/2} W D^{-1/2}``; isolated vertices keep an identity row."""
    W = as_matrix(W, "adjacency")
    if W.shape[0] != W.shape[1]:
        raise ValidationError(f"adjacency must be square, got {W.shape}")
    if np.any(W < 0):
        raise ValidationError("adjacency has negative weights")
    deg = W.sum(axis=1) - np.diag(W)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    delta = np.eye(W.shape[0]) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    return (delta + delta.T) / 2.0


def rescale_laplacian(delta, lmax):
    if not lmax > 0:
        raise ValidationError(f"lambda_max must be positive, got {lmax}")
    delta = as_matrix(delta, "laplacian")
    return (2.0 / lmax) * delta - np.eye(delta.shape[0])


# power iteration on near-degenerate top eigenvalues needs a tight stop for the
# rescaled spectrum to agree with an exact eigendecomposition to ~1e-10
LMAX_TOL = 1e-13


def build_spatial_graph(coords, k=10, sigma=None, seed=0, allow_duplicates=False):
    W = build_knn_graph(coords, k=k, sigma=sigma, allow_duplicates=allow_duplicates)
    delta = normalized_laplacian(W)
    lmax = _lambda_max(delta, seed=seed, tol=LMAX_TOL)
    if not lmax > 0:
        lmax = 2.0
    return SpatialGraph(W=W, delta=delta, delta_tilde=rescale_laplacian(delta, lmax), lambda_max=lmax)


def read_coordinates(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"coordinate file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["roi_id", "x", "y", "z"]:
            raise ParseError(path, 1, 1, f"expected header roi_id,x,y,z, got {','.join(header)}")
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(path, lineno, len(row), "expected 4 columns")
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(path, lineno, col, f"non-numeric value {cell!r}") from None
            rid = int(vals[0])
            if rid != vals[0] or rid in rows:
                raise ParseError(path, lineno, 1, f"bad or repeated roi_id {row[0]!r}")
            rows[rid] = vals[1:]
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise ValidationError(f"{path}: roi_id values must be dense 0..{n - 1}")
    return RoiCoordinates(np.array([rows[i] for i in range(n)]))


def write_coordinates(path, coords):
    c = coords.coords if isinstance(coords, RoiCoordinates) else np.asarray(coords)
    with open(path, "w", newline="") as fh:
        fh.write("roi_id,x,y,z\n")
        for i, (x, y, z) in enumerate(c):
            fh.write(f"{i},{float(x)!r},{float(y)!r},{float(z)!r}\n")
