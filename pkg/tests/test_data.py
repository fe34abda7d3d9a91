import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memgcn.data import (
    SynthSpec, binarize_features, generate_synthetic_cohort, load_cohort, mask_columns, pad_sequence,
    parse_columns, write_cohort,
)
from memgcn.errors import ParseError, ValidationError

TOY = Path(__file__).parent / "fixtures" / "toy" / "manifest.json"


def test_toy_fixture_shapes():
    cohort = load_cohort(TOY, t=4)
    assert len(cohort) == 2 and cohort.n == 4 and cohort.D == 5 and cohort.t == 4
    X, S, pad = cohort.arrays()
    assert X.shape == (2, 4, 4) and S.shape == (2, 4, 5)
    np.testing.assert_array_equal(pad, [[True, False, False, False], [True, True, False, False]])
    np.testing.assert_array_equal(S[0, 3], [0, 0, 1, 0, 1])
    # unknown category degrades to a zero block and is reported
    np.testing.assert_array_equal(S[1, 3], [0, 0, 0, 1, 0])
    assert cohort.report["unknown_categories"] == [(1, "tremor", "trembling")]
    np.testing.assert_array_equal(cohort.labels(), [1, 0])


def test_symmetrization():
    cohort = load_cohort(TOY, t=4)
    raw = np.loadtxt(TOY.parent / "sub01_conn.csv", delimiter=",")
    x = cohort.acquisitions[0].x
    assert np.array_equal(x, x.T)
    np.testing.assert_allclose(x, (raw + raw.T) / 2, atol=1e-15)


def copy_toy(tmp_path):
    dst = tmp_path / "toy"
    shutil.copytree(TOY.parent, dst)
    return dst


def test_load_errors(tmp_path):
    toy = copy_toy(tmp_path)
    manifest = json.loads((toy / "manifest.json").read_text())
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_cohort(tmp_path / "nowhere.json")
    empty = dict(manifest, acquisitions=[])
    (toy / "empty.json").write_text(json.dumps(empty))
    with pytest.raises(ValidationError):
        load_cohort(toy / "empty.json")
    (toy / "sub02_conn.csv").write_text("0,1,2\n1,0,2\n2,2,0\n")
    with pytest.raises(ValidationError, match="sub02"):
        load_cohort(toy / "manifest.json")
    (toy / "sub02_conn.csv").write_text("0,1,2,3\n1,0,x,2\n2,2,0,1\n3,2,1,0\n")
    with pytest.raises(ParseError) as info:
        load_cohort(toy / "manifest.json")
    assert (info.value.row, info.value.col) == (2, 3)


def test_binarize_examples():
    np.testing.assert_array_equal(binarize_features([{"f": "b"}], {"f": ["a", "b", "c"]}), [[0, 1, 0]])
    with pytest.raises(ValidationError):
        binarize_features([{"g": "a"}], {"f": ["a"]})


@given(st.lists(st.integers(1, 6), min_size=1, max_size=8), st.integers(0, 10_000))
def test_binarize_random_schema(counts, seed):
    rng = np.random.default_rng(seed)
    schema = {f"f{i}": [f"c{j}" for j in range(c)] for i, c in enumerate(counts)}
    records = [{k: str(rng.choice(v + ["?"])) for k, v in schema.items()} for _ in range(4)]
    out = binarize_features(records, schema, {})
    assert out.shape[1] == sum(counts)
    col = 0
    for c in counts:
        assert np.all(out[:, col : col + c].sum(axis=1) <= 1)
        col += c


def test_pad_sequence_examples(rng):
    rows = (rng.uniform(size=(15, 3)) < 0.5).astype(float)
    full = pad_sequence(rows[:12], 12)
    assert full.pad_count == 0 and np.array_equal(full.S, rows[:12])
    short = pad_sequence(rows[:10], 12)
    assert short.pad_count == 2 and not short.S[:2].any() and np.array_equal(short.S[2:], rows[:10])
    long = pad_sequence(rows, 12)
    assert long.pad_count == 0 and np.array_equal(long.S, rows[3:])
    with pytest.raises(ValidationError):
        pad_sequence([np.ones(3), np.ones(2)], 4)


@given(st.integers(1, 20), st.integers(1, 15))
def test_padding_invariant(length, t):
    seq = pad_sequence(np.ones((length, 2)), t)
    assert seq.pad_count + min(length, t) == t
    assert not seq.S[: seq.pad_count].any()


def test_synth_determinism_and_report():
    spec = SynthSpec(n_roi=10, n_case=4, n_control=3, t=5, D=10, seed=3)
    a, b = generate_synthetic_cohort(spec), generate_synthetic_cohort(spec)
    for x, y in zip(a.acquisitions, b.acquisitions):
        assert x.id == y.id and np.array_equal(x.x, y.x) and np.array_equal(x.sequence.S, y.sequence.S)
    assert a.report == b.report
    assert len(a.report["planted_block"]) == 2 and len(a.report["signal_columns"]) == 2
    for acq in a.acquisitions:
        assert np.array_equal(acq.x, acq.x.T) and np.all(acq.x >= 0)
    with pytest.raises(ValidationError):
        SynthSpec(n_case=0)


def test_planted_block_statistic():
    spec = SynthSpec(n_roi=20, n_case=30, n_control=30, conn_signal=0.5, noise_sd=0.1, seed=1)
    cohort = generate_synthetic_cohort(spec)
    block = cohort.report["planted_block"]
    iu = np.triu_indices(len(block), 1)
    means = np.array([a.x[np.ix_(block, block)][iu].mean() for a in cohort.acquisitions])
    labels = cohort.labels()
    case, ctrl = means[labels == 1], means[labels == 0]
    se = np.sqrt(case.var(ddof=1) / len(case) + ctrl.var(ddof=1) / len(ctrl))
    assert (case.mean() - ctrl.mean()) / se >= 3


def test_seq_signal_clamp(caplog):
    with caplog.at_level("WARNING"):
        generate_synthetic_cohort(SynthSpec(n_roi=4, n_case=1, n_control=1, seq_signal=2.0, t=3, D=5))
    assert any("clamp" in r.message for r in caplog.records)


def test_write_cohort_roundtrip(tmp_path):
    cohort = generate_synthetic_cohort(SynthSpec(n_roi=6, n_case=3, n_control=2, t=4, D=7, seed=2))
    loaded = load_cohort(write_cohort(tmp_path, cohort), t=4)
    for a, b in zip(cohort.acquisitions, loaded.acquisitions):
        assert a.id == b.id and a.group == b.group
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.sequence.S, b.sequence.S) and a.sequence.pad_count == b.sequence.pad_count
    np.testing.assert_array_equal(cohort.coords.coords, loaded.coords.coords)


def test_mask_columns():
    cohort = generate_synthetic_cohort(SynthSpec(n_roi=4, n_case=2, n_control=2, t=3, D=6))
    masked = mask_columns(cohort, parse_columns("0-1,4"))
    S = masked.arrays()[1]
    assert not S[:, :, [2, 3, 5]].any()
    assert parse_columns("0-2, 7,5") == [0, 1, 2, 5, 7]
