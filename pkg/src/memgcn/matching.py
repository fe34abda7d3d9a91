"""Pair matching layers, classification head and the regularized pair loss.

All functions accept a leading batch axis: ``(n, d)`` or ``(P, n, d)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numerics import make_rng, softmax

INNER = "inner"
BILINEAR = "bilinear"
PROB_CLAMP = 1e-12


def normalize_rows(y):
    """Unit-normalize the last axis; zero rows stay zero. Returns (y_hat, norms)."""
    norms = np.sqrt(np.sum(y * y, axis=-1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, y / safe, 0.0), norms


def normalize_rows_backward(y_hat, norms, grad):
    safe = np.where(norms > 0, norms, 1.0)
    proj = np.sum(y_hat * grad, axis=-1, keepdims=True)
    return np.where(norms > 0, (grad - y_hat * proj) / safe, 0.0)


def _pair_shapes(yA, yB):
    yA = np.asarray(yA, dtype=np.float64)
    yB = np.asarray(yB, dtype=np.float64)
    if yA.shape != yB.shape or yA.ndim < 2:
        raise ValidationError(f"paired feature maps must share a shape, got {yA.shape} and {yB.shape}")
    return yA, yB


def _row_dot(a, b):
    return np.sum(a * b, axis=-1)


def inner_matching(yA, yB):
    """Per-ROI cosine similarity, shape (..., n)."""
    yA, yB = _pair_shapes(yA, yB)
    return _row_dot(normalize_rows(yA)[0], normalize_rows(yB)[0])


def _bilinear_normalized(a_hat, b_hat, M):
    P = a_hat @ M if not _is_identity(M) else a_hat
    return _row_dot(P[..., :, None, :], b_hat[..., None, :, :]), P


def _is_identity(M):
    return M.shape[0] == M.shape[1] and np.array_equal(M, np.eye(M.shape[0]))


def bilinear_matching(yA, yB, M):
    """``sim_ij = y_hat_A[i]^T M y_hat_B[j]``, shape (..., n, n)."""
    yA, yB = _pair_shapes(yA, yB)
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (yA.shape[-1], yA.shape[-1]):
        raise ValidationError(f"M must be {yA.shape[-1]}x{yA.shape[-1]}, got {M.shape}")
    return _bilinear_normalized(normalize_rows(yA)[0], normalize_rows(yB)[0], M)[0]


def match_forward(kind, yA, yB, M=None):
    """Batched matching that also returns what the backward pass needs."""
    a_hat, a_norm = normalize_rows(yA)
    b_hat, b_norm = normalize_rows(yB)
    cache = {"a_hat": a_hat, "a_norm": a_norm, "b_hat": b_hat, "b_norm": b_norm, "M": M}
    if kind == INNER:
        sims = _row_dot(a_hat, b_hat)
    elif kind == BILINEAR:
        sims, P = _bilinear_normalized(a_hat, b_hat, M)
        cache["P"] = P
    else:
        raise ValidationError(f"unknown matching kind {kind!r}")
    return sims, cache


def match_backward(kind, cache, grad_sims):
    """Returns (grad_yA, grad_yB, grad_M or None)."""
    a_hat, b_hat = cache["a_hat"], cache["b_hat"]
    if kind == INNER:
        g = grad_sims[..., None]
        da_hat, db_hat, dM = g * b_hat, g * a_hat, None
    else:
        M, P = cache["M"], cache["P"]
        dP = grad_sims @ b_hat
        db_hat = np.swapaxes(grad_sims, -1, -2) @ P
        d = a_hat.shape[-1]
        dM = a_hat.reshape(-1, d).T @ dP.reshape(-1, d)
        da_hat = dP @ M.T
    dA = normalize_rows_backward(a_hat, cache["a_norm"], da_hat)
    dB = normalize_rows_backward(b_hat, cache["b_norm"], db_hat)
    return dA, dB, dM


@dataclass
class HeadParams:
    W1: np.ndarray  # (h_head, match_dim)
    b1: np.ndarray  # (h_head,)
    W2: np.ndarray  # (2, h_head)
    b2: np.ndarray  # (2,)
    M: np.ndarray = None  # (d, d), bilinear only

    @classmethod
    def init(cls, match_dim, h_head, rng, d=None):
        rng = make_rng(rng)
        b1 = np.sqrt(6.0 / (match_dim + h_head))
        b2 = np.sqrt(6.0 / (h_head + 2))
        return cls(
            W1=rng.uniform(-b1, b1, size=(h_head, match_dim)),
            b1=np.zeros(h_head),
            W2=rng.uniform(-b2, b2, size=(2, h_head)),
            b2=np.zeros(2),
            M=None if d is None else np.eye(d),
        )


def head_forward(f, W1, b1, W2, b2):
    """One ReLU hidden layer then softmax over 2 classes; ``f`` is (N, dim) or (dim,)."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != W1.shape[1]:
        raise ValidationError(f"match output has {f.shape[-1]} values, head expects {W1.shape[1]}")
    a1 = f @ W1.T + b1
    r = np.maximum(a1, 0.0)
    logits = r @ W2.T + b2
    return softmax(logits, axis=-1), {"f": f, "a1": a1, "r": r}


def head_backward(W1, W2, cache, grad_logits):
    r, a1, f = cache["r"], cache["a1"], cache["f"]
    gW2 = grad_logits.T @ r
    gb2 = grad_logits.sum(axis=0)
    da1 = (grad_logits @ W2) * (a1 > 0)
    gW1 = da1.T @ f
    gb1 = da1.sum(axis=0)
    df = da1 @ W1
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}, df


def classify_head(match, head):
    """Probability pair ``[p_nonmatch, p_match]`` for one match output."""
    f = np.asarray(match, dtype=np.float64).ravel()
    p, _ = head_forward(f, head.W1, head.b1, head.W2, head.b2)
    return p


def check_labels(labels):
    labels = np.asarray(labels)
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    return labels.astype(np.float64)


def cross_entropy(p_match, labels):
    p = np.clip(np.asarray(p_match, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = check_labels(labels)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def l2_penalty(arrays):
    return float(sum(np.sum(a * a) for a in arrays))


def pair_loss(p_batch, labels, params=(), gamma=1e-2):
    """Mean binary cross-entropy on the matching probability plus ``gamma * sum ||theta||^2``.

    ``p_batch`` is either ``(N, 2)`` class probabilities or the ``(N,)``
    matching-class column.
    """
    if gamma < 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    p = np.asarray(p_batch, dtype=np.float64)
    p_match = p[..., 1] if p.ndim == 2 else p
    ce = cross_entropy(p_match, labels)
    if ce.size == 0:
        raise ValidationError("empty batch")
    return float(np.mean(ce)) + gamma * l2_penalty(params)
