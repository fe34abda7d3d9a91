"""Command-line entry point: ``memgcn {synth,pairs,train,eval,gradcheck,interpret}``.

Exit codes: 0 success, 1 failed check, 2 usage or validation error,
3 numerical abort.
"""

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data, evaluation, training
from .errors import NumericalError, ParseError, ValidationError
from .graph import build_spatial_graph
from .model import MemGCN, model_gradcheck
from .numerics import DEFAULT_H, GRAD_TOL, make_rng

log = logging.getLogger("memgcn")

EXTRA_KEYS = {
    "manifest": str, "out": str, "checkpoint": str, "mode": str, "acquisition": str,
    "top_k": int, "max_pairs": int, "fold": str, "h": float, "corrupt": str, "seq_columns": str,
}
SYNTH_KEYS = {f.name: f.type for f in fields(data.SynthSpec)}
TRAIN_KEYS = {f.name: f.type for f in fields(training.TrainConfig)}
ALL_KEYS = {**EXTRA_KEYS, **SYNTH_KEYS, **TRAIN_KEYS}


class UsageError(Exception):
    pass


def _convert(key, value):
    typ = ALL_KEYS[key]
    if isinstance(typ, str):
        typ = {"int": int, "float": float, "bool": bool, "str": str}[typ]
    if typ is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise UsageError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in ALL_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def resolve(args):
    """Defaults, then config file, then explicit flags."""
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if key in ALL_KEYS and value is not None:
            values[key] = _convert(key, value)
    return values


def _pick(values, keys):
    return {k: v for k, v in values.items() if k in keys}


def train_config(values):
    try:
        return training.TrainConfig(**_pick(values, TRAIN_KEYS))
    except ValidationError as exc:
        raise UsageError(str(exc)) from None


def _require(values, *keys):
    for k in keys:
        if values.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _out_dir(values):
    out = Path(values["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    if not out.is_dir():
        raise UsageError(f"output path is not a directory: {out}")
    return out


def echo_config(out, values, name="config.txt"):
    with open(out / name, "w") as fh:
        fh.write("# effective configuration\n")
        for k in sorted(values):
            fh.write(f"{k} = {values[k]}\n")


def load(values, config):
    _require(values, "manifest")
    cohort = data.load_cohort(values["manifest"], t=config.t)
    if values.get("seq_columns"):
        cohort = data.mask_columns(cohort, data.parse_columns(values["seq_columns"]))
    if len(cohort) < 2:
        raise ValidationError("cohort needs at least 2 acquisitions")
    sigma = config.sigma or None
    graph = build_spatial_graph(cohort.coords, k=min(config.knn, cohort.n - 1), sigma=sigma)
    return cohort, graph


def cmd_synth(values):
    _require(values, "out")
    spec_values = _pick(values, SYNTH_KEYS)
    try:
        spec = data.SynthSpec(**spec_values)
    except ValidationError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(values)
    cohort = data.generate_synthetic_cohort(spec)
    manifest = data.write_cohort(out, cohort)
    with open(out / "synth_spec.txt", "w") as fh:
        for k, v in asdict(spec).items():
            fh.write(f"{k} = {v}\n")
        fh.write(f"# planted_block = {','.join(map(str, cohort.report['planted_block']))}\n")
        fh.write(f"# signal_columns = {','.join(map(str, cohort.report['signal_columns']))}\n")
    log.info("wrote %d acquisitions to %s", len(cohort), manifest)
    return 0


def cmd_pairs(values):
    config = train_config(values)
    _require(values, "out")
    out = _out_dir(values)
    cohort = data.load_cohort(values.get("manifest") or _missing("manifest"), t=config.t)
    pairs = training.enumerate_pairs(cohort.labels())
    fold_of = training.kfold_split(len(cohort), config.folds, config.seed)
    ids = [a.id for a in cohort.acquisitions]
    with open(out / "pairs.csv", "w") as fh:
        total, m, nm = pairs.counts()
        fh.write(f"# total: {total}\n# matching: {m}\n# non_matching: {nm}\n")
        fh.write("id_a,id_b,label,fold_a,fold_b\n")
        for a, b, lab in zip(pairs.a, pairs.b, pairs.label):
            fh.write(f"{ids[a]},{ids[b]},{lab},{fold_of[a]},{fold_of[b]}\n")
    with open(out / "folds.csv", "w") as fh:
        fh.write("id,group,fold\n")
        for acq, f in zip(cohort.acquisitions, fold_of):
            fh.write(f"{acq.id},{acq.group},{f}\n")
    echo_config(out, {**values, **asdict(config)})
    print(f"{pairs.counts()[0]} pairs ({pairs.counts()[1]} matching, {pairs.counts()[2]} non-matching)")
    return 0


def _missing(key):
    raise UsageError(f"--{key} is required")


def _folds(values, config):
    if not values.get("fold"):
        return list(range(config.folds))
    folds = sorted({int(f) for f in str(values["fold"]).split(",") if f.strip()})
    if any(not 0 <= f < config.folds for f in folds):
        raise UsageError(f"fold indices must lie in [0, {config.folds})")
    return folds


def cmd_train(values):
    config = train_config(values)
    _require(values, "out")
    cohort, graph = load(values, config)
    out = _out_dir(values)
    echo_config(out, {**values, **asdict(config)})
    pairs = training.enumerate_pairs(cohort.labels())
    fold_of = training.kfold_split(len(cohort), config.folds, config.seed)
    report = evaluation.MetricsReport()
    arrays = cohort.arrays(normalize=config.normalize_connectivity)
    for fold in _folds(values, config):
        fdir = out / f"fold_{fold}"
        fdir.mkdir(exist_ok=True)
        model, history = training.train(config, graph, cohort, pairs, fold, fold_of)
        _, test = training.fold_pairs(pairs, fold_of, fold)
        _, acc, auc_, _ = training.evaluate_pairs(model, arrays, test)
        report.per_fold.append((acc, auc_))
        history.write_csv(fdir / "history.csv")
        training.save_checkpoint(fdir / "checkpoint", model, config, {
            "fold": fold, "test_pairs": len(test), "best_epoch": history.best_epoch,
            "manifest": str(values["manifest"]),
        })
        log.info("fold %d: test accuracy %.4f auc %.4f (%d pairs)", fold, acc, auc_, len(test))
    report.write_csv(out / "metrics.csv", {"model": config.model, "matching": config.matching,
                                          "hops": config.hops, "seed": config.seed})
    ms = report.mean_sd()
    print(f"accuracy {ms['accuracy'][0]:.4f} ({ms['accuracy'][1]:.4f})  auc {ms['auc'][0]:.4f} ({ms['auc'][1]:.4f})")
    return 0


def _load_checkpoint(values):
    _require(values, "checkpoint")
    side = Path(values["checkpoint"]).with_suffix(".json")
    if not side.exists():
        raise FileNotFoundError(f"checkpoint sidecar not found: {side}")
    import json

    meta = json.loads(side.read_text())
    config = training.TrainConfig(**meta["config"])
    if not values.get("manifest"):
        values["manifest"] = meta.get("manifest")
    cohort, graph = load(values, config)
    model, config, meta = training.load_checkpoint(values["checkpoint"], graph, cohort.n, cohort.D)
    return model, config, meta, cohort


def cmd_eval(values):
    _require(values, "out")
    model, config, meta, cohort = _load_checkpoint(values)
    out = _out_dir(values)
    pairs = training.enumerate_pairs(cohort.labels())
    fold_of = training.kfold_split(len(cohort), config.folds, config.seed)
    fold = int(meta.get("fold", 0)) if not values.get("fold") else int(values["fold"])
    _, test = training.fold_pairs(pairs, fold_of, fold)
    loss, acc, auc_, _ = training.evaluate_pairs(model, cohort.arrays(config.normalize_connectivity), test)
    report = evaluation.MetricsReport([(acc, auc_)])
    report.write_csv(out / "eval.csv", {"checkpoint": values["checkpoint"], "fold": fold,
                                        "test_pairs": len(test), "loss": loss})
    print(f"fold {fold}: accuracy {acc:.4f} auc {auc_:.4f} loss {loss:.4f}")
    return 0


def tiny_gradcheck(h=DEFAULT_H, seed=0, corrupt=None):
    """Full-model check on n=6, r=3, f_out=d=4, t=3, D=8, L=2 for both matchings."""
    rng = make_rng(seed)
    n, t, D = 6, 3, 8
    graph = build_spatial_graph(rng.uniform(size=(n, 3)), k=3)
    N = 5
    X = rng.uniform(size=(N, n, n))
    X = (X + np.swapaxes(X, 1, 2)) / 2.0
    S = (rng.uniform(size=(N, t, D)) < 0.4).astype(float)
    S[0, 0] = 0.0
    pad = np.zeros((N, t), dtype=bool)
    pad[0, 0] = True
    ia = np.array([0, 0, 1, 2, 3, 1])
    ib = np.array([1, 2, 3, 4, 4, 4])
    labels = np.array([1, 0, 0, 1, 1, 0])
    results = {}
    for kind in ("inner", "bilinear"):
        model = MemGCN(graph.delta_tilde, D, r=3, f_out=4, d=4, hops=2, matching_kind=kind, rng=rng)
        results[kind] = model_gradcheck(model, X, S, pad, ia, ib, labels, gamma=1e-2, h=h, corrupt=corrupt)
    return results


def cmd_gradcheck(values):
    h = values.get("h", DEFAULT_H)
    if not h > 0:
        raise UsageError("--h must be positive")
    try:
        results = tiny_gradcheck(h=h, seed=values.get("seed", 0), corrupt=values.get("corrupt"))
    except KeyError as exc:
        raise UsageError(f"unknown parameter group {exc}") from None
    failing = []
    for kind, groups in results.items():
        for group, err in groups.items():
            ok = err <= GRAD_TOL
            print(f"{kind:8s} {group:8s} {err:.3e} {'ok' if ok else 'FAIL'}")
            if not np.isfinite(err) or not ok:
                failing.append(f"{kind}/{group}")
    if failing:
        print("failing groups: " + ", ".join(failing))
        return 1
    return 0


def cmd_interpret(values):
    _require(values, "out", "mode")
    mode = values["mode"]
    if mode not in ("roi", "edges", "attention"):
        raise UsageError(f"--mode must be roi, edges or attention, got {mode!r}")
    model, config, meta, cohort = _load_checkpoint(values)
    out = _out_dir(values)
    pairs = training.enumerate_pairs(cohort.labels())
    seed = values.get("seed", config.seed)
    max_pairs = values.get("max_pairs", evaluation.MAX_REPORT_PAIRS)
    norm = config.normalize_connectivity
    ckpt = {"checkpoint": values["checkpoint"]}
    if mode == "roi":
        if model.matching != "inner":
            raise UsageError("roi mode needs an inner-matching checkpoint; use --mode edges")
        report = evaluation.roi_similarity_report(model, pairs, cohort, seed=seed, max_pairs=max_pairs, normalize=norm)
        report.meta = {**ckpt, **report.meta}
        for p in report.write_csv(out):
            print(p)
    elif mode == "edges":
        if model.matching != "bilinear":
            raise UsageError("edges mode needs a bilinear-matching checkpoint; use --mode roi")
        ident, disc, rmeta = evaluation.edge_pattern_report(
            model, pairs, cohort, top_k=values.get("top_k", 20), seed=seed, max_pairs=max_pairs, normalize=norm
        )
        for name, rows in (("identical_edges", ident), ("discriminative_edges", disc)):
            evaluation.write_edges_csv(out / f"{name}.csv", rows, {**ckpt, **rmeta})
            print(out / f"{name}.csv")
    else:
        if not isinstance(model, MemGCN):
            raise UsageError(f"attention mode needs a MemGCN checkpoint, got {model.kind}")
        acq = values.get("acquisition") or cohort.acquisitions[0].id
        for p in evaluation.attention_trace_export(model, cohort, acq, out, normalize=norm):
            print(p)
    return 0


COMMANDS = {
    "synth": cmd_synth, "pairs": cmd_pairs, "train": cmd_train, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "interpret": cmd_interpret,
}


def _flag(parser, key, help=None, **kw):
    parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=help, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="memgcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    train_flags = [k for k in TRAIN_KEYS]
    specs = {
        "synth": list(SYNTH_KEYS) + ["out"],
        "pairs": ["manifest", "out", "folds", "seed", "t"],
        "train": ["manifest", "out", "fold", "seq_columns"] + train_flags,
        "eval": ["checkpoint", "manifest", "out", "fold", "seq_columns"],
        "gradcheck": ["h", "seed"],
        "interpret": ["checkpoint", "manifest", "out", "mode", "acquisition", "top_k", "max_pairs", "seed",
                      "seq_columns"],
    }
    for name, keys in specs.items():
        p = sub.add_parser(name, help=COMMANDS[name].__doc__)
        p.add_argument("--config", default=None, help="key = value configuration file")
        for key in dict.fromkeys(keys):
            _flag(p, key)
        if name == "gradcheck":
            _flag(p, "corrupt", help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
    )
    try:
        values = resolve(args)
        return COMMANDS[args.command](values)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
