"""Metrics and interpretability reports."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import matching
from .errors import ValidationError
from .numerics import make_rng

MAX_REPORT_PAIRS = 100_000


def accuracy(probs, labels, threshold=0.5):
    """Fraction of pairs where ``p_match >= threshold`` agrees with the label."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, 1]
    y = np.asarray(labels)
    if p.size == 0:
        raise ValidationError("accuracy of an empty set")
    if p.shape != y.shape:
        raise ValidationError(f"{p.shape[0]} scores but {y.shape[0]} labels")
    matching.check_labels(y)
    return float(np.mean((p >= threshold).astype(int) == y))


def auc(scores, labels):
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValidationError(f"{s.shape[0]} scores but {y.shape[0]} labels")
    matching.check_labels(y)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks over ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    per_fold: list = field(default_factory=list)  # (accuracy, auc) per fold

    @property
    def accuracy(self):
        return float(np.mean([a for a, _ in self.per_fold]))

    @property
    def auc(self):
        return float(np.mean([u for _, u in self.per_fold]))

    def mean_sd(self):
        acc = np.array([a for a, _ in self.per_fold])
        au = np.array([u for _, u in self.per_fold])
        sd = lambda v: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0  # noqa: E731
        return {"accuracy": (float(acc.mean()), sd(acc)), "auc": (float(au.mean()), sd(au))}

    def write_csv(self, path, meta=None):
        with open(path, "w") as fh:
            _write_meta(fh, meta)
            fh.write("fold,accuracy,auc\n")
            for i, (a, u) in enumerate(self.per_fold):
                fh.write(f"{i},{a!r},{u!r}\n")
            ms = self.mean_sd()
            fh.write(f"mean,{ms['accuracy'][0]!r},{ms['auc'][0]!r}\n")
            fh.write(f"sd,{ms['accuracy'][1]!r},{ms['auc'][1]!r}\n")


def _write_meta(fh, meta):
    for k, v in (meta or {}).items():
        fh.write(f"# {k}: {v}\n")


def _rank(scores, descending):
    keys = -scores if descending else scores
    order = np.lexsort((np.arange(len(scores)), keys))  # ties by index
    return [(int(i), float(scores[i])) for i in order]


def _group_pairs(labels, pairs, seed, max_pairs):
    """Case-case and case-control pairs (optionally seeded subsamples)."""
    ga, gb = labels[pairs.a], labels[pairs.b]
    cc = np.flatnonzero((ga == 1) & (gb == 1))
    cx = np.flatnonzero(ga != gb)
    rng = make_rng([seed, 5])
    sampled = {}
    if max_pairs is not None:
        if len(cc) > max_pairs:
            cc = np.sort(rng.choice(cc, size=max_pairs, replace=False))
            sampled["case_case_sampled"] = max_pairs
        if len(cx) > max_pairs:
            cx = np.sort(rng.choice(cx, size=max_pairs, replace=False))
            sampled["case_control_sampled"] = max_pairs
    return cc, cx, sampled


def _mean_sims(model, Y, pairs, idx, kind, chunk=2048):
    total = None
    for i in range(0, len(idx), chunk):
        sel = idx[i : i + chunk]
        sims, _ = matching.match_forward(kind, Y[pairs.a[sel]], Y[pairs.b[sel]], model.params.get("M"))
        s = sims.sum(axis=0)
        total = s if total is None else total + s
    return total / len(idx)


@dataclass
class RoiReport:
    identical_rois: list
    discriminative_rois: list
    meta: dict = field(default_factory=dict)

    def write_csv(self, out_dir):
        out = Path(out_dir)
        paths = []
        for name, rows in (("identical_rois", self.identical_rois), ("discriminative_rois", self.discriminative_rois)):
            p = out / f"{name}.csv"
            with open(p, "w") as fh:
                _write_meta(fh, self.meta)
                fh.write("rank,roi_id,score\n")
                for rank, (roi, score) in enumerate(rows, start=1):
                    fh.write(f"{rank},{roi},{score!r}\n")
            paths.append(p)
        return paths


def _embed_cohort(model, cohort, normalize):
    X, S, pad = cohort.arrays(normalize=normalize)
    return model.embed_all(X, S, pad)


def roi_similarity_report(model, pairs, cohort, seed=0, max_pairs=MAX_REPORT_PAIRS, normalize=False):
    """Rank ROIs by mean case-case similarity (desc) and case-control similarity (asc)."""
    if model.matching != matching.INNER:
        raise ValidationError("ROI similarity needs an inner-matching model; use edge_pattern_report for bilinear")
    labels = cohort.labels()
    cc, cx, sampled = _group_pairs(labels, pairs, seed, max_pairs)
    if len(cc) == 0 or len(cx) == 0:
        raise ValidationError("need both case-case and case-control pairs")
    Y = _embed_cohort(model, cohort, normalize)
    ident = _mean_sims(model, Y, pairs, cc, matching.INNER)
    disc = _mean_sims(model, Y, pairs, cx, matching.INNER)
    meta = {"seed": seed, "case_case_pairs": len(cc), "case_control_pairs": len(cx), **sampled}
    return RoiReport(_rank(ident, True), _rank(disc, False), meta)


def edge_pattern_report(model, pairs, cohort, top_k=20, seed=0, max_pairs=MAX_REPORT_PAIRS, normalize=False):
    """Top ROI-ROI edges of the averaged bilinear similarity matrices.

    Returns ``(identical, discriminative, meta)`` with ``(roi_i, roi_j, score)``
    rows: highest mean case-case scores and lowest mean case-control scores.
    """
    if model.matching != matching.BILINEAR:
        raise ValidationError("edge patterns need a bilinear-matching model")
    labels = cohort.labels()
    cc, cx, sampled = _group_pairs(labels, pairs, seed, max_pairs)
    if len(cc) == 0 or len(cx) == 0:
        raise ValidationError("need both case-case and case-control pairs")
    Y = _embed_cohort(model, cohort, normalize)
    n = model.n
    k = min(int(top_k), n * n)
    out = []
    for idx, desc in ((cc, True), (cx, False)):
        mean = _mean_sims(model, Y, pairs, idx, matching.BILINEAR).ravel()
        ranked = _rank(mean, desc)[:k]
        out.append([(flat // n, flat % n, s) for flat, s in ranked])
    meta = {"seed": seed, "case_case_pairs": len(cc), "case_control_pairs": len(cx), **sampled}
    return out[0], out[1], meta


def write_edges_csv(path, rows, meta=None):
    with open(path, "w") as fh:
        _write_meta(fh, meta)
        fh.write("rank,roi_i,roi_j,score\n")
        for rank, (i, j, s) in enumerate(rows, start=1):
            fh.write(f"{rank},{i},{j},{s!r}\n")


def attention_trace_export(model, cohort, acq_id, out_dir, normalize=False):
    """Write one ``t x n`` attention CSV per hop; returns the file paths."""
    if not hasattr(model, "attention_trace"):
        raise ValidationError(f"{model.kind} models have no memory attention")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    i = cohort.index_of(acq_id)
    X, S, pad = cohort.arrays(normalize=normalize)
    trace = model.attention_trace(X[i], S[i], pad[i])
    header = ",".join(f"roi_{j}" for j in range(model.n))
    paths = []
    for hop, mat in enumerate(trace.per_hop, start=1):
        p = out / f"attention_{acq_id}_hop{hop}.csv"
        np.savetxt(p, mat, delimiter=",", fmt="%.12g", header=header, comments="")
        paths.append(p)
    return paths


def read_attention_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
