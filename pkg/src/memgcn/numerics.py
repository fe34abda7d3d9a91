"""Dense float64 kernels shared by every layer.

Matrices are plain ``numpy.ndarray`` objects with ``dtype=float64``. Randomness
always flows through ``numpy.random.Generator`` backed by PCG64, so a seed
reproduces the same stream on every platform.
"""

import logging

import numpy as np

from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_H = 1e-5
GRAD_TOL = 1e-4


def make_rng(seed):
    """Return a PCG64-backed generator; generators are passed through untouched."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def check_symmetric(a, tol=1e-10, name="matrix"):
    a = as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise ValidationError(f"{name} must be square, got {a.shape}")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > tol:
        raise ValidationError(f"{name} is not symmetric (max asymmetry {asym:.3e})")
    return a


class EigenPair:
    """Ascending eigenvalues with orthonormal eigenvectors stored as columns."""

    __slots__ = ("values", "vectors")

    def __init__(self, values, vectors):
        self.values = values
        self.vectors = vectors

    def __iter__(self):
        return iter((self.values, self.vectors))


def sym_eig(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Each sweep zeroes every off-diagonal pair (p, q) once with a plane
    rotation. Iteration stops once the off-diagonal Frobenius mass falls
    below ``tol`` times the matrix norm.
    """
    a = check_symmetric(a, name="sym_eig input")
    n = a.shape[0]
    A = (a + a.T) / 2.0
    V = np.eye(n)
    scale = max(np.linalg.norm(A), np.finfo(float).tiny)

    def off_norm(M):
        off = M - np.diag(np.diag(M))
        return np.sqrt(np.sum(off * off))

    for _ in range(max_sweeps):
        if off_norm(A) <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow; t ~ 1/(2 theta)
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        residual = off_norm(A)
        if residual > tol * scale:
            raise NumericalError(
                f"Jacobi did not converge after {max_sweeps} sweeps "
                f"(off-diagonal residual {residual:.3e})"
            )

    values = np.diag(A).copy()
    order = np.argsort(values, kind="stable")
    return EigenPair(values[order], V[:, order])


def lambda_max(a, seed=0, tol=1e-9, max_iter=10_000):
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Falls back to :func:`sym_eig` if the Rayleigh quotient has not settled
    after ``max_iter`` iterations.
    """
    a = check_symmetric(a, name="lambda_max input")
    n = a.shape[0]
    if n == 0:
        raise ValidationError("lambda_max of an empty matrix")
    rng = make_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    prev = v @ a @ v
    for _ in range(max_iter):
        w = a @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        rq = v @ a @ v
        if abs(rq - prev) < tol:
            return float(rq)
        prev = rq
    log.warning("power iteration hit %d iterations; falling back to Jacobi", max_iter)
    return float(sym_eig(a).values[-1])


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValidationError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def grad_check(f, params, analytic, h=DEFAULT_H):
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``params`` is a list of arrays that ``f`` reads; they are perturbed in
    place one coordinate at a time and restored afterwards.
    """
    worst = 0.0
    for k, (p, g) in enumerate(zip(params, analytic)):
        if p.shape != np.shape(g):
            raise ValidationError(f"gradient {k} has shape {np.shape(g)}, parameter {p.shape}")
        flat = p.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params)
            flat[i] = orig - h
            fm = f(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite objective probing parameter {k}, coordinate {i}")
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, float(relative_error(gflat[i], numeric)))
    return worst
