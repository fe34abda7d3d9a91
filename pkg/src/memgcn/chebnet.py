"""Chebyshev spectral graph convolution.

Signals are ``(n, f)`` or batched ``(B, n, f)`` arrays. Internally they are
laid out vertex-major as ``(n, B*f)`` so each polynomial order costs a single
``(n, n) @ (n, B*f)`` matmul and no large transposes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numerics import make_rng, sym_eig

ORACLE_MAX_N = 64


@dataclass
class ChebFilterBank:
    theta: np.ndarray  # (r, f_in, f_out); theta[:, k_in, k_out] is one filter

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 3 or self.theta.shape[0] < 1:
            raise ValidationError(f"theta must have shape (r>=1, f_in, f_out), got {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise ValidationError("theta contains non-finite coefficients")

    @property
    def r(self):
        return self.theta.shape[0]

    @property
    def f_in(self):
        return self.theta.shape[1]

    @property
    def f_out(self):
        return self.theta.shape[2]

    @classmethod
    def init(cls, r, f_in, f_out, rng):
        bound = np.sqrt(6.0 / (f_in * r + f_out * r))
        return cls(make_rng(rng).uniform(-bound, bound, size=(r, f_in, f_out)))


def _vertex_major(X, n):
    """(..., n, f) -> (n, L*f) plus what is needed to undo it."""
    if X.shape[-2] != n:
        raise ValidationError(f"signal has {X.shape[-2]} vertices, Laplacian has {n}")
    lead, f = X.shape[:-2], X.shape[-1]
    return np.ascontiguousarray(np.moveaxis(X, -2, 0)).reshape(n, -1), lead, f


def _batch_major(Y, n, lead, f):
    return np.ascontiguousarray(np.moveaxis(Y.reshape((n,) + lead + (f,)), 0, -2))


def _recurrence(delta_tilde, x0, r):
    """Stack of T_p(L) x0 for p < r, shape (r, n, m)."""
    out = np.empty((r,) + x0.shape)
    out[0] = x0
    if r > 1:
        np.matmul(delta_tilde, x0, out=out[1])
    for p in range(2, r):
        np.matmul(delta_tilde, out[p - 1], out=out[p])
        out[p] *= 2.0
        out[p] -= out[p - 2]
    return out


def cheb_basis_apply(delta_tilde, X, r):
    """``[T_0(L) X, ..., T_{r-1}(L) X]`` by the three-term recurrence."""
    X = np.asarray(X, dtype=np.float64)
    delta_tilde = np.asarray(delta_tilde, dtype=np.float64)
    if r < 1:
        raise ValidationError(f"polynomial order must be >= 1, got {r}")
    if X.ndim < 2:
        raise ValidationError(f"signal must be at least 2-D, got shape {X.shape}")
    x0, lead, f = _vertex_major(X, delta_tilde.shape[0])
    return [_batch_major(b, x0.shape[0], lead, f) for b in _recurrence(delta_tilde, x0, r)]


def _theta(bank):
    # raw (r, f_in, f_out) arrays are accepted so hot loops skip revalidation
    return bank.theta if isinstance(bank, ChebFilterBank) else bank


def graph_conv_forward(bank, delta_tilde, H_in, return_basis=False):
    """``sum_k_in sum_p theta[p, k_in, :] T_p(L) h[:, k_in]`` for every output channel.

    With ``return_basis`` the vertex-major basis ``(r, n*L, f_in)`` is also
    returned so the backward pass can skip recomputing it.
    """
    theta = _theta(bank)
    H_in = np.asarray(H_in, dtype=np.float64)
    r, f_in, f_out = theta.shape
    if H_in.shape[-1] != f_in:
        raise ValidationError(f"input has {H_in.shape[-1]} channels, filter bank expects {f_in}")
    x0, lead, _ = _vertex_major(H_in, delta_tilde.shape[0])
    basis = _recurrence(delta_tilde, x0, r).reshape(r, -1, f_in)
    out = _batch_major(np.matmul(basis, theta).sum(axis=0), x0.shape[0], lead, f_out)
    return (out, basis) if return_basis else out


def graph_conv_backward(bank, delta_tilde, H_in, upstream_grad, basis=None, need_input_grad=True):
    """Gradients of ``sum(upstream * forward(H_in))`` w.r.t. theta and H_in."""
    theta = _theta(bank)
    up = np.asarray(upstream_grad, dtype=np.float64)
    H_in = np.asarray(H_in, dtype=np.float64)
    r, f_in, f_out = theta.shape
    n = delta_tilde.shape[0]
    if up.shape[:-1] != H_in.shape[:-1] or up.shape[-1] != f_out:
        raise ValidationError(f"upstream gradient shape {up.shape} does not match forward output")
    if H_in.shape[-1] != f_in:
        raise ValidationError(f"input has {H_in.shape[-1]} channels, filter bank expects {f_in}")
    if basis is None:
        x0, _, _ = _vertex_major(H_in, n)
        basis = _recurrence(delta_tilde, x0, r).reshape(r, -1, f_in)
    u0, lead, _ = _vertex_major(up, n)
    grad_theta = np.matmul(np.swapaxes(basis, 1, 2), u0.reshape(-1, f_out))
    if not need_input_grad:
        return grad_theta, None
    # T_p is symmetric, so the adjoint reuses the same recurrence on the upstream signal
    up_basis = _recurrence(delta_tilde, u0, r).reshape(r, -1, f_out)
    grad_H = np.matmul(up_basis, np.swapaxes(theta, 1, 2)).sum(axis=0)
    return grad_theta, _batch_major(grad_H, n, lead, f_in)


def chebyshev_scalar(lam, r):
    """Rows ``T_0(lam) ... T_{r-1}(lam)`` evaluated elementwise."""
    lam = np.asarray(lam, dtype=np.float64)
    T = np.empty((r,) + lam.shape)
    T[0] = 1.0
    if r > 1:
        T[1] = lam
    for p in range(2, r):
        T[p] = 2.0 * lam * T[p - 1] - T[p - 2]
    return T


def spectral_filter_oracle(delta, theta_vec, x, lmax=None):
    """Filter ``x`` through ``Phi g(Lambda~) Phi^T`` using a full eigendecomposition.

    ``lmax`` defaults to the largest eigenvalue of ``delta``. Test scale only.
    """
    delta = np.asarray(delta, dtype=np.float64)
    n = delta.shape[0]
    if n > ORACLE_MAX_N:
        raise ValidationError(f"oracle limited to n <= {ORACLE_MAX_N}, got {n}")
    theta_vec = np.asarray(theta_vec, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != n:
        raise ValidationError(f"signal length {x.shape[0]} does not match n={n}")
    values, Phi = sym_eig(delta)
    if lmax is None:
        lmax = values[-1]
    lam_t = 2.0 * values / lmax - 1.0
    g = theta_vec @ chebyshev_scalar(lam_t, theta_vec.shape[0])
    return Phi @ (g * (Phi.T @ x))
