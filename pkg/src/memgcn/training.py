"""Pair enumeration, fold splitting, Adam, the training loop and checkpoints."""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import matching
from .errors import NumericalError, ValidationError
from .evaluation import accuracy, auc
from .model import MemGCN, MLPBaseline, RawEdges
from .numerics import make_rng

log = logging.getLogger(__name__)

MODEL_KINDS = ("memgcn", "gcn", "raw_edges", "mlp")


@dataclass
class TrainConfig:
    model: str = "memgcn"  # memgcn | gcn (memory ablated) | raw_edges | mlp
    batch_size: int = 32
    learning_rate: float = 5e-3
    gamma: float = 1e-2
    r: int = 30
    f_out: int = 32
    t: int = 12
    d: int = 32
    hops: int = 3
    matching: str = "inner"
    activation: str = "relu"
    mask_padding: bool = False
    tie_h: bool = False
    h_head: int = 64
    mlp_hidden: int = 1024
    knn: int = 10
    sigma: float = 0.0  # 0 selects the mean k-th neighbour distance
    normalize_connectivity: bool = False
    epochs: int = 50
    patience: int = 10
    val_fraction: float = 0.1
    balanced: bool = False
    folds: int = 5
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ValidationError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.matching not in (matching.INNER, matching.BILINEAR):
            raise ValidationError(f"matching must be inner or bilinear, got {self.matching!r}")
        if self.activation not in ("relu", "none"):
            raise ValidationError(f"activation must be relu or none, got {self.activation!r}")
        for name in ("batch_size", "r", "f_out", "t", "d", "hops", "h_head", "mlp_hidden", "knn", "threads"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epochs", "patience"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.gamma < 0 or self.sigma < 0:
            raise ValidationError("gamma and sigma must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValidationError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.folds < 2:
            raise ValidationError(f"folds must be >= 2, got {self.folds}")
        if self.d != self.f_out:
            raise ValidationError(f"d ({self.d}) must equal f_out ({self.f_out})")

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


@dataclass
class PairDataset:
    a: np.ndarray
    b: np.ndarray
    label: np.ndarray
    fold_of_acq: np.ndarray = None

    def __len__(self):
        return len(self.label)

    def subset(self, mask):
        return PairDataset(self.a[mask], self.b[mask], self.label[mask], self.fold_of_acq)

    def counts(self):
        m = int(self.label.sum())
        return len(self), m, len(self) - m


def enumerate_pairs(groups):
    """All unordered acquisition pairs; label 1 when both share a group."""
    groups = np.asarray(groups)
    M = len(groups)
    if M < 2:
        raise ValidationError(f"need at least 2 acquisitions, got {M}")
    a, b = np.triu_indices(M, k=1)
    return PairDataset(a, b, (groups[a] == groups[b]).astype(int))


def kfold_split(acq_count, k, seed):
    """Seeded shuffle then round-robin fold assignment at acquisition level."""
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if k > acq_count:
        raise ValidationError(f"k={k} exceeds acquisition count {acq_count}")
    order = make_rng(seed).permutation(acq_count)
    fold = np.empty(acq_count, dtype=int)
    fold[order] = np.arange(acq_count) % k
    return fold


def pairs_within(pairs, members):
    """Pairs whose two endpoints both lie in the boolean acquisition mask."""
    return pairs.subset(members[pairs.a] & members[pairs.b])


def fold_pairs(pairs, fold_of_acq, fold):
    """(train, test) pairs; pairs straddling the held-out fold are dropped."""
    held = fold_of_acq == fold
    return pairs_within(pairs, ~held), pairs_within(pairs, held)


class Adam:
    """Adam with bias correction over a dict of named parameter arrays."""

    def __init__(self, lr=5e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v = {}, {}
        self.step_index = 0

    def step(self, params, grads):
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter group {k!r}")
        self.step_index += 1
        adam_step(params, grads, self, self.step_index, self.lr)


def adam_step(params, grads, state, step_index, lr):
    """One in-place Adam update; ``state`` carries ``m``, ``v``, the betas and eps."""
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1**step_index
    bc2 = 1.0 - b2**step_index
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        if state.m[k].shape != params[k].shape:
            raise ValidationError(f"optimizer state for {k!r} has shape {state.m[k].shape}, parameter {params[k].shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        params[k] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def build_model(config, graph, n, D, seed=None):
    rng = make_rng(config.seed if seed is None else seed)
    if config.model in ("memgcn", "gcn"):
        return MemGCN(
            graph.delta_tilde, D, r=config.r, f_out=config.f_out, d=config.d, hops=config.hops,
            matching_kind=config.matching, h_head=config.h_head, activation=config.activation,
            mask_padding=config.mask_padding, tie_h=config.tie_h, use_memory=config.model == "memgcn", rng=rng,
        )
    if config.model == "raw_edges":
        return RawEdges(n, matching_kind=config.matching, h_head=config.h_head, rng=rng)
    return MLPBaseline(n, d=config.d, hidden=(config.mlp_hidden, 64), matching_kind=config.matching,
                       h_head=config.h_head, rng=rng)


def baseline_forward(kind, model, x_a, x_b):
    """Probability pair for one acquisition pair through a baseline model."""
    if kind not in ("raw_edges", "mlp") or model.kind != kind:
        raise ValidationError(f"unknown or mismatched baseline kind {kind!r}")
    X = np.stack([x_a, x_b])
    Y, _ = model.embed(X, None, None)
    return model.pair_probs(Y[:1], Y[1:])[0][0]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_auc: float


@dataclass
class History:
    initial: EpochRecord = None
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def write_csv(self, path):
        with open(path, "w") as fh:
            if self.initial is not None:
                i = self.initial
                fh.write(f"# initial train_loss={i.train_loss!r} val_loss={i.val_loss!r} "
                         f"val_acc={i.val_acc!r} val_auc={i.val_auc!r}\n")
            fh.write("epoch,train_loss,val_loss,val_acc,val_auc\n")
            for e in self.epochs:
                fh.write(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.val_acc!r},{e.val_auc!r}\n")


def evaluate_pairs(model, arrays, pairs):
    """(mean cross-entropy, accuracy, auc, p_match) on a pair set; NaN where undefined."""
    if len(pairs) == 0:
        return float("nan"), float("nan"), float("nan"), np.empty(0)
    X, S, pad = arrays
    used = np.unique(np.concatenate([pairs.a, pairs.b]))
    Y = np.zeros((len(X), model.n, model.d))
    Y[used] = model.embed_all(X[used], S[used], pad[used])
    p = model.predict_pairs(Y, pairs.a, pairs.b)[:, 1]
    loss = float(np.mean(matching.cross_entropy(p, pairs.label)))
    acc = accuracy(p, pairs.label)
    both = 0 < pairs.label.sum() < len(pairs)
    return loss, acc, auc(p, pairs.label) if both else float("nan"), p


def split_validation(train_pairs, fold_of_acq, fold, fraction, seed):
    """Carve a validation subset out of the training acquisitions."""
    train_acq = np.flatnonzero(fold_of_acq != fold)
    n_val = int(round(fraction * len(train_acq)))
    if n_val < 2:
        return train_pairs, train_pairs.subset(np.zeros(len(train_pairs), dtype=bool))
    val_acq = make_rng([seed, 3, fold]).choice(train_acq, size=n_val, replace=False)
    members = np.zeros(len(fold_of_acq), dtype=bool)
    members[val_acq] = True
    return pairs_within(train_pairs, ~members), pairs_within(train_pairs, members)


def _batches(pairs, batch_size, rng, balanced):
    idx = np.arange(len(pairs))
    if balanced:
        pos, neg = idx[pairs.label == 1], idx[pairs.label == 0]
        if len(pos) and len(neg):
            small, big = (pos, neg) if len(pos) < len(neg) else (neg, pos)
            idx = np.concatenate([big, rng.choice(small, size=len(big), replace=True)])
    idx = rng.permutation(idx)
    return [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]


def train(config, graph, cohort, pairs, fold, fold_of_acq, model=None):
    """Train on one fold; returns (model restored to its best validation epoch, History).

    Training pairs have both endpoints outside the held-out fold; a seeded
    ``val_fraction`` of those acquisitions is held back for early stopping.
    """
    train_all, _ = fold_pairs(pairs, fold_of_acq, fold)
    train_pairs, val_pairs = split_validation(train_all, fold_of_acq, fold, config.val_fraction, config.seed)
    if len(train_pairs) == 0:
        raise ValidationError(f"fold {fold} has no training pairs")
    if len(val_pairs) == 0:
        val_pairs = train_pairs
    arrays = cohort.arrays(normalize=config.normalize_connectivity)
    if model is None:
        model = build_model(config, graph, cohort.n, cohort.D)
    rng = make_rng([config.seed, 4, fold])
    opt = Adam(lr=config.learning_rate)
    history = History()

    def record(epoch):
        tl = evaluate_pairs(model, arrays, train_pairs)[0]
        vl, va, vauc, _ = evaluate_pairs(model, arrays, val_pairs)
        return EpochRecord(epoch, tl, vl, va, vauc)

    history.initial = record(0)
    best = history.initial.val_loss
    best_params = {k: v.copy() for k, v in model.params.items()}
    stale = 0
    X, S, pad = arrays
    for epoch in range(1, config.epochs + 1):
        for batch in _batches(train_pairs, config.batch_size, rng, config.balanced):
            _, _, grads = model.loss_and_grad(
                X, S, pad, train_pairs.a[batch], train_pairs.b[batch], train_pairs.label[batch],
                config.gamma, threads=config.threads,
            )
            opt.step(model.params, grads)
        rec = record(epoch)
        history.epochs.append(rec)
        log.info("fold %d epoch %d train %.4f val %.4f acc %.3f auc %.3f",
                 fold, epoch, rec.train_loss, rec.val_loss, rec.val_acc, rec.val_auc)
        if rec.val_loss < best:
            best, stale = rec.val_loss, 0
            history.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                history.stopped_early = True
                break
    model.params.update(best_params)
    return model, history


# checkpoint container: magic, version, tensor count, then per tensor
# (name length, name, ndim, dims..., little-endian float64 data)
MAGIC = b"MGCN"
VERSION = 1


def save_checkpoint(path, model, config, extra=None):
    path = Path(path)
    with open(path.with_suffix(".bin"), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(model.params)))
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    meta = {"format_version": VERSION, "config": asdict(config), "frozen": sorted(model.frozen)}
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_tensors(path):
    path = Path(path).with_suffix(".bin")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return out


def load_checkpoint(path, graph, n, D):
    """Rebuild the model described by the JSON sidecar and fill in its tensors."""
    path = Path(path)
    side = path.with_suffix(".json")
    if not side.exists():
        raise FileNotFoundError(f"checkpoint sidecar not found: {side}")
    meta = json.loads(side.read_text())
    config = TrainConfig(**meta["config"])
    model = build_model(config, graph, n, D)
    tensors = read_tensors(path)
    if set(tensors) != set(model.params):
        raise ValidationError(f"checkpoint tensors {sorted(tensors)} do not match model {sorted(model.params)}")
    for k, v in tensors.items():
        if v.shape != model.params[k].shape:
            raise ValidationError(f"checkpoint tensor {k} has shape {v.shape}, cohort implies {model.params[k].shape}")
        model.params[k] = v
    return model, config, meta
