"""Clinical-sequence memory: embeddings, ROI-to-slot attention and hop updates.

These are single-sample reference operations. The batched training path in
:mod:`memgcn.model` mirrors them and is tested against them.
"""

from dataclasses import dataclass, field

import numpy as np

from .chebnet import ChebFilterBank, graph_conv_forward
from .errors import ValidationError
from .numerics import softmax


@dataclass(frozen=True)
class ClinicalSequence:
    S: np.ndarray  # (t, D), entries in {0, 1}; padded rows first
    pad_count: int = 0

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64)
        if S.ndim != 2:
            raise ValidationError(f"sequence must be t x D, got shape {S.shape}")
        if not 0 <= self.pad_count <= S.shape[0]:
            raise ValidationError(f"pad_count {self.pad_count} outside [0, {S.shape[0]}]")
        if not np.all((S == 0) | (S == 1)):
            raise ValidationError("sequence entries must be 0 or 1")
        if np.any(S[: self.pad_count]):
            raise ValidationError("padded rows must be all zero")
        object.__setattr__(self, "S", S)

    @property
    def t(self):
        return self.S.shape[0]

    @property
    def D(self):
        return self.S.shape[1]

    def padding_mask(self):
        m = np.zeros(self.t, dtype=bool)
        m[: self.pad_count] = True
        return m


@dataclass
class AttentionTrace:
    per_hop: list = field(default_factory=list)  # L arrays of shape (t, n)

    def __len__(self):
        return len(self.per_hop)


def _check_2d(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def read_memories(S, A, B):
    """Input memory ``z = S A^T`` and output memory ``e = S B^T`` (one row per slot)."""
    S = S.S if isinstance(S, ClinicalSequence) else _check_2d(S, "sequence")
    A = _check_2d(A, "A")
    B = _check_2d(B, "B")
    if A.shape != B.shape or A.shape[1] != S.shape[1]:
        raise ValidationError(f"embedding shapes A{A.shape}, B{B.shape} do not fit D={S.shape[1]}")
    return S @ A.T, S @ B.T


def attend(y, z, pad_mask=None):
    """Row-wise softmax of ROI/slot inner products, shape (n, t)."""
    y = _check_2d(y, "ROI features")
    z = _check_2d(z, "memory")
    if y.shape[1] != z.shape[1]:
        raise ValidationError(f"ROI features have d={y.shape[1]}, memory has d={z.shape[1]}")
    logits = y @ z.T
    if pad_mask is not None and np.any(pad_mask):
        if np.all(pad_mask):
            raise ValidationError("cannot mask every memory slot")
        logits = np.where(np.asarray(pad_mask)[None, :], -np.inf, logits)
    return softmax(logits, axis=1)


def retrieve_context(alpha, e):
    """``c_i = sum_j alpha_ij e_j``."""
    alpha = _check_2d(alpha, "attention")
    e = _check_2d(e, "output memory")
    if alpha.shape[1] != e.shape[0]:
        raise ValidationError(f"attention has {alpha.shape[1]} slots, memory has {e.shape[0]}")
    sums = alpha.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValidationError(f"attention rows must sum to 1 (worst {sums[np.argmax(np.abs(sums - 1))]:.6g})")
    return alpha @ e


def hop_update(y, c, H):
    """Row i of the result is ``H y_i + c_i``."""
    y = _check_2d(y, "ROI features")
    c = _check_2d(c, "context")
    H = _check_2d(H, "H")
    if y.shape != c.shape or H.shape != (y.shape[1], y.shape[1]):
        raise ValidationError(f"shape mismatch: y{y.shape}, c{c.shape}, H{H.shape}")
    return y @ H.T + c


def activate(u, activation):
    if activation == "relu":
        return np.maximum(u, 0.0)
    if activation == "none":
        return u
    raise ValidationError(f"unknown activation {activation!r}")


def hop_keys(hops, tie_h=False):
    thetas = [f"theta_{l}" for l in range(1, hops + 1)]
    hs = ["H"] * hops if tie_h else [f"H_{l}" for l in range(1, hops + 1)]
    return thetas, hs


def memgcn_forward(x, seq, params, delta_tilde, hops, activation="relu", mask_padding=False, tie_h=False):
    """L-hop memory-augmented graph convolution for one acquisition.

    ``params`` maps ``theta_l``, ``A``, ``B`` and ``H_l`` (or a single ``H``
    when tied) to arrays. Returns the final ``(n, d)`` features and the
    per-hop attention as ``(t, n)`` matrices.
    """
    if hops < 1:
        raise ValidationError(f"hops must be >= 1, got {hops}")
    if not isinstance(seq, ClinicalSequence):
        seq = ClinicalSequence(seq)
    z, e = read_memories(seq, params["A"], params["B"])
    mask = seq.padding_mask() if mask_padding else None
    theta_keys, h_keys = hop_keys(hops, tie_h)
    h = np.asarray(x, dtype=np.float64)
    trace = AttentionTrace()
    for tk, hk in zip(theta_keys, h_keys):
        y = activate(graph_conv_forward(ChebFilterBank(params[tk]), delta_tilde, h), activation)
        alpha = attend(y, z, mask)
        c = retrieve_context(alpha, e)
        h = hop_update(y, c, params[hk])
        trace.per_hop.append(alpha.T.copy())
    return h, trace
