"""Cohort ingestion, clinical feature binarization and synthetic cohorts."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .graph import RoiCoordinates, read_coordinates, write_coordinates
from .memory import ClinicalSequence
from .numerics import make_rng

log = logging.getLogger(__name__)

CASE, CONTROL = "case", "control"
GROUPS = (CASE, CONTROL)


@dataclass(frozen=True)
class Acquisition:
    id: str
    x: np.ndarray
    sequence: ClinicalSequence
    group: str

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValidationError(f"acquisition {self.id}: group must be case or control, got {self.group!r}")
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != x.shape[1]:
            raise ValidationError(f"acquisition {self.id}: connectivity must be square, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"acquisition {self.id}: connectivity has non-finite values")
        object.__setattr__(self, "x", x)


@dataclass
class Cohort:
    coords: RoiCoordinates
    acquisitions: list
    report: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.acquisitions)

    @property
    def n(self):
        return self.coords.n

    @property
    def t(self):
        return self.acquisitions[0].sequence.t

    @property
    def D(self):
        return self.acquisitions[0].sequence.D

    def labels(self):
        """1 for case, 0 for control."""
        return np.array([a.group == CASE for a in self.acquisitions], dtype=int)

    def arrays(self, normalize=False):
        """Stacked (X, S, pad_mask) arrays in acquisition order."""
        X = np.stack([a.x for a in self.acquisitions])
        if normalize:
            peak = X.reshape(len(X), -1).max(axis=1)
            X = X / np.where(peak > 0, peak, 1.0)[:, None, None]
        S = np.stack([a.sequence.S for a in self.acquisitions])
        pad = np.stack([a.sequence.padding_mask() for a in self.acquisitions])
        return X, S, pad

    def index_of(self, acq_id):
        for i, a in enumerate(self.acquisitions):
            if a.id == acq_id:
                return i
        raise ValidationError(f"no acquisition with id {acq_id!r}")


@dataclass(frozen=True)
class SynthSpec:
    n_roi: int = 30
    n_case: int = 60
    n_control: int = 60
    conn_signal: float = 1.0
    seq_signal: float = 0.5
    noise_sd: float = 0.1
    t: int = 12
    D: int = 40
    seed: int = 0

    def __post_init__(self):
        for name in ("n_roi", "n_case", "n_control", "t", "D"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_roi < 2:
            raise ValidationError("n_roi must be >= 2")
        for name in ("conn_signal", "seq_signal", "noise_sd"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")


def pad_sequence(rows, t):
    """Front-pad with zero rows to length ``t``; longer inputs keep the last ``t`` rows."""
    rows = [np.asarray(r, dtype=np.float64).ravel() for r in rows]
    if t < 1:
        raise ValidationError(f"t must be >= 1, got {t}")
    if not rows:
        raise ValidationError("cannot infer D from an empty sequence; use empty_sequence(t, D)")
    D = rows[0].shape[0]
    for j, r in enumerate(rows):
        if r.shape[0] != D:
            raise ValidationError(f"row {j} has length {r.shape[0]}, expected {D}")
    rows = rows[-t:]
    pad = t - len(rows)
    S = np.vstack([np.zeros((pad, D)), np.array(rows)]) if pad else np.array(rows)
    return ClinicalSequence(S, pad)


def empty_sequence(t, D):
    return ClinicalSequence(np.zeros((t, D)), t)


def binarize_features(records, schema, report=None):
    """One-hot encode categorical records.

    ``records`` is a list of ``{feature: value}`` dicts (one per timestamp) and
    ``schema`` an ordered ``{feature: [categories]}`` mapping. Unknown values
    become an all-zero block and are counted in ``report``.
    """
    names = list(schema)
    width = sum(len(schema[k]) for k in names)
    out = np.zeros((len(records), width))
    for row, rec in enumerate(records):
        if set(rec) != set(names):
            missing = sorted(set(names) - set(rec))
            extra = sorted(set(rec) - set(names))
            raise ValidationError(f"record {row}: feature mismatch (missing {missing}, unexpected {extra})")
        col = 0
        for k in names:
            cats = [str(c) for c in schema[k]]
            value = str(rec[k]).strip()
            if value in cats:
                out[row, col + cats.index(value)] = 1.0
            elif report is not None and value != "":
                report.setdefault("unknown_categories", []).append((row, k, value))
            col += len(cats)
    return out


def _read_numeric_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for r, line in enumerate(csv.reader(fh), start=1):
            if not line:
                continue
            vals = []
            for c, cell in enumerate(line, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(path, r, c, f"non-numeric value {cell!r}") from None
            rows.append(vals)
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ParseError(path, len(rows), max(widths), "rows have differing column counts")
    return np.array(rows, dtype=np.float64).reshape(len(rows), widths.pop() if widths else 0)


def _read_categorical_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [dict(r) for r in reader]


def _resolve(base, rel):
    p = base / rel
    if not p.exists():
        raise FileNotFoundError(f"referenced file not found: {p}")
    return p


def load_cohort(manifest_path, t=12):
    """Load coordinates and acquisitions listed in a JSON manifest.

    Connectivity matrices are symmetrized as ``(x + x^T) / 2``. Sequences are
    front-padded (or truncated to the most recent ``t`` records).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(manifest_path, exc.lineno, exc.colno, exc.msg) from None
    base = manifest_path.parent
    for key in ("coords", "acquisitions"):
        if key not in manifest:
            raise ValidationError(f"{manifest_path}: missing field {key!r}")
    entries = manifest["acquisitions"]
    if not entries:
        raise ValidationError(f"{manifest_path}: manifest lists no acquisitions")
    coords = read_coordinates(_resolve(base, manifest["coords"]))
    schema = None
    if manifest.get("schema"):
        schema = json.loads(_resolve(base, manifest["schema"]).read_text())
    report = {}
    seqs, raw = [], []
    for entry in entries:
        for key in ("id", "connectivity", "sequence", "group"):
            if key not in entry:
                raise ValidationError(f"{manifest_path}: acquisition entry missing {key!r}")
        aid = str(entry["id"])
        x = _read_numeric_csv(_resolve(base, entry["connectivity"]))
        if x.shape != (coords.n, coords.n):
            raise ValidationError(f"acquisition {aid}: connectivity is {x.shape}, coordinates define n={coords.n}")
        seq_path = _resolve(base, entry["sequence"])
        if schema is not None:
            rows = binarize_features(_read_categorical_csv(seq_path), schema, report)
        else:
            rows = _read_numeric_csv(seq_path)
            if rows.size and not np.all((rows == 0) | (rows == 1)):
                raise ValidationError(f"acquisition {aid}: sequence file must contain only 0/1 values")
        raw.append((aid, (x + x.T) / 2.0, entry["group"]))
        seqs.append(rows)
    widths = {r.shape[1] for r in seqs if r.shape[0]}
    if len(widths) > 1:
        raise ValidationError(f"sequence feature dimension differs across acquisitions: {sorted(widths)}")
    if not widths:
        raise ValidationError("every sequence is empty; cannot infer D")
    D = widths.pop()
    acqs = []
    for (aid, x, group), rows in zip(raw, seqs):
        seq = pad_sequence(list(rows), t) if rows.shape[0] else empty_sequence(t, D)
        acqs.append(Acquisition(aid, x, seq, group))
    return Cohort(coords, acqs, report)


def write_cohort(out_dir, cohort):
    """Write manifest, coordinates, connectivity and 0/1 sequence CSVs."""
    out = Path(out_dir)
    (out / "connectivity").mkdir(parents=True, exist_ok=True)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    write_coordinates(out / "coords.csv", cohort.coords)
    entries = []
    for a in cohort.acquisitions:
        conn = f"connectivity/{a.id}.csv"
        seq = f"sequences/{a.id}.csv"
        np.savetxt(out / conn, a.x, delimiter=",", fmt="%.17g")
        rows = a.sequence.S[a.sequence.pad_count :]
        with open(out / seq, "w") as fh:
            for r in rows:
                fh.write(",".join(str(int(v)) for v in r) + "\n")
        entries.append({"id": a.id, "connectivity": conn, "sequence": seq, "group": a.group})
    manifest = {"coords": "coords.csv", "acquisitions": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out / "manifest.json"


def planted_block(spec):
    """ROI indices carrying the connectivity signal (about 15% of ROIs)."""
    rng = make_rng([spec.seed, 1])
    size = max(1, int(np.ceil(0.15 * spec.n_roi)))
    return np.sort(rng.choice(spec.n_roi, size=size, replace=False))


def signal_columns(spec):
    rng = make_rng([spec.seed, 2])
    size = max(1, int(np.ceil(0.2 * spec.D)))
    return np.sort(rng.choice(spec.D, size=size, replace=False))


def generate_synthetic_cohort(spec):
    """Two-group cohort with planted connectivity and clinical-sequence signal.

    Cases add ``conn_signal`` to the connectivity block among a fixed ROI
    subset. Their sequences raise a fixed 20% of columns from Bernoulli(0.1) to
    Bernoulli(0.1 + seq_signal * slot/t), so later records carry more signal.
    """
    rng = make_rng(spec.seed)
    n, t, D = spec.n_roi, spec.t, spec.D
    coords = RoiCoordinates(rng.uniform(0.0, 1.0, size=(n, 3)))
    base = rng.uniform(0.0, 1.0, size=(n, n))
    base = np.triu(base, 1)
    base = base + base.T
    block = planted_block(spec)
    cols = signal_columns(spec)
    slot = np.arange(1, t + 1)
    case_prob = 0.1 + spec.seq_signal * np.minimum(1.0, slot / t)
    if np.any(case_prob > 1.0):
        log.warning("seq_signal %.3g pushes case probabilities above 1; clamping", spec.seq_signal)
        case_prob = np.minimum(case_prob, 1.0)

    groups = [CASE] * spec.n_case + [CONTROL] * spec.n_control
    acqs = []
    for i, group in enumerate(groups):
        noise = rng.normal(0.0, spec.noise_sd, size=(n, n)) if spec.noise_sd > 0 else np.zeros((n, n))
        noise = np.triu(noise, 1)
        x = base + noise + noise.T
        if group == CASE:
            x[np.ix_(block, block)] += spec.conn_signal
        np.fill_diagonal(x, 0.0)
        x = np.maximum(x, 0.0)

        length = int(rng.integers(max(1, t // 2), t + 1))
        probs = np.full((t, D), 0.1)
        if group == CASE:
            probs[:, cols] = case_prob[:, None]
        S = (rng.uniform(size=(t, D)) < probs).astype(np.float64)
        S[: t - length] = 0.0
        acqs.append(Acquisition(f"{group}_{i:04d}", x, ClinicalSequence(S, t - length), group))
    return Cohort(coords, acqs, {"planted_block": block.tolist(), "signal_columns": cols.tolist()})


def mask_columns(cohort, columns):
    """Zero every sequence column outside ``columns`` (modality subsetting)."""
    keep = np.zeros(cohort.D, dtype=bool)
    keep[list(columns)] = True
    acqs = [
        Acquisition(a.id, a.x, ClinicalSequence(a.sequence.S * keep, a.sequence.pad_count), a.group)
        for a in cohort.acquisitions
    ]
    return Cohort(cohort.coords, acqs, dict(cohort.report))


def parse_columns(text):
    """``"0-9,20,30-39"`` to a sorted list of column indices."""
    cols = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            cols.update(range(int(lo), int(hi) + 1))
        else:
            cols.add(int(part))
    return sorted(cols)
