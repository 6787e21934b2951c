import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import make_weights
from dynact.analysis import (
    ActivationPattern,
    extract_pattern,
    flocking_export,
    frequency_concentration,
    gini,
    inertia_battery,
    pattern_similarity,
)
from dynact.errors import ContractViolation
from dynact.model import ModelConfig, prefill
from dynact.samples import INERTIA_SAMPLES
from dynact.sparsity import magnitudes_from_hidden
from dynact.tokenizer import tokenize


def pat(bits):
    return ActivationPattern(0, np.asarray(bits, dtype=bool), "test")


class TestSimilarity:
    def test_identical_nonzero(self):
        assert pattern_similarity(pat([1, 1, 0]), pat([1, 1, 0])) == 1.0

    def test_disjoint(self):
        assert pattern_similarity(pat([1, 0, 0]), pat([0, 1, 0])) == 0.0

    def test_jaccard_set_arithmetic(self):
        # 1100 vs 1010: intersection {0}, union {0,1,2}
        assert pattern_similarity(pat([1, 1, 0, 0]), pat([1, 0, 1, 0])) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert pattern_similarity(pat([0, 0]), pat([0, 0])) == 1.0
        assert pattern_similarity(pat([0, 0]), pat([0, 0]), "cosine") == 1.0

    def test_one_empty_cosine(self):
        assert pattern_similarity(pat([0, 0]), pat([1, 0]), "cosine") == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            pattern_similarity(pat([1]), pat([1, 0]))

    @given(
        hnp.arrays(bool, 16), hnp.arrays(bool, 16),
        st.sampled_from(["jaccard", "cosine"]),
    )
    @settings(max_examples=100)
    def test_metric_axioms(self, a, b, metric):
        s = pattern_similarity(pat(a), pat(b), metric)
        assert 0.0 <= s <= 1.0
        assert s == pattern_similarity(pat(b), pat(a), metric)
        assert pattern_similarity(pat(a), pat(a), metric) == 1.0


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(n_layers=2, d_model=32, d_ff=64, n_heads=4,
                      vocab_size=257, max_seq_len=128)
    return make_weights(cfg, 3)


@pytest.fixture(scope="module")
def battery_model():
    cfg = ModelConfig(n_layers=2, d_model=32, d_ff=64, n_heads=4,
                      vocab_size=257, max_seq_len=128)
    return make_weights(cfg, 5)


class TestExtractPattern:
    def test_single_token_both_modes_identical(self, model):
        tok = [65]
        a = extract_pattern(model, tok, "per_token", 0)
        b = extract_pattern(model, tok, "as_sequence", 0)
        assert np.array_equal(a[0].bits, b[0].bits)

    def test_per_token_isolation(self, model):
        ids = tokenize("0123456789abcdef")[1:]  # 16 byte tokens
        patterns = extract_pattern(model, ids, "per_token", 1)
        assert len(patterns) == 16
        shuffled = extract_pattern(model, ids[::-1], "per_token", 1)
        for p, q in zip(patterns, shuffled[::-1]):
            assert np.array_equal(p.bits, q.bits)

    def test_sequence_position_count(self, model):
        ids = tokenize("hello")
        patterns = extract_pattern(model, ids, "as_sequence", 0)
        assert len(patterns) == len(ids)
        assert patterns[-1].source == f"sequence({len(ids) - 1})"

    def test_sequence_pattern_depends_on_history(self, model):
        # inertia signal: position t's pattern reacts to a change at t-1
        base = tokenize("abcdef")
        altered = base.copy()
        altered[-2] = (altered[-2] + 7) % 256
        thr = None
        a = extract_pattern(model, base, "as_sequence", 1, report_threshold=thr)
        b = extract_pattern(model, altered, "as_sequence", 1, report_threshold=thr)
        assert not np.array_equal(a[-1].bits, b[-1].bits)

    def test_empty_tokens_rejected(self, model):
        with pytest.raises(ContractViolation):
            extract_pattern(model, [], "per_token", 0)


class TestInertiaBattery:
    def test_matrix_properties_on_any_checkpoint(self, battery_model):
        matrix, report = inertia_battery(battery_model, INERTIA_SAMPLES)
        v = matrix.values
        assert v.shape == (13, 13)
        assert np.array_equal(v, v.T)
        assert np.all(np.diag(v) == 1.0)
        assert np.all((v >= 0.0) & (v <= 1.0))
        assert len(report["checks"]) == 15
        assert report["hard_asserted"] is False

    def test_duplicate_sample_maximal_similarity(self, battery_model):
        # samples 1 and 8 carry identical text
        matrix, _ = inertia_battery(battery_model, INERTIA_SAMPLES)
        assert matrix.values[0, 7] == 1.0

    def test_too_few_samples(self, battery_model):
        with pytest.raises(ContractViolation):
            inertia_battery(battery_model, INERTIA_SAMPLES[:1])

    def test_custom_two_sample_battery(self, battery_model):
        two = [
            {"index": 1, "text": "hello world", "treatment": "a"},
            {"index": 2, "text": "hello there", "treatment": "b"},
        ]
        matrix, report = inertia_battery(battery_model, two)
        assert matrix.values.shape == (2, 2)
        assert report["checks"] == []
        assert report["checks_status"].startswith("n/a")

    def test_single_layer_selection(self, battery_model):
        m0, _ = inertia_battery(battery_model, INERTIA_SAMPLES[:3], layer=0)
        m1, _ = inertia_battery(battery_model, INERTIA_SAMPLES[:3], layer=1)
        assert m0.values.shape == (3, 3)
        assert not np.allclose(m0.values, m1.values)

    def test_csv_shape(self, battery_model, tmp_path):
        matrix, _ = inertia_battery(battery_model, INERTIA_SAMPLES)
        path = tmp_path / "sim.csv"
        matrix.save(path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 13
        assert all(len(line.split(",")) == 13 for line in lines)


class TestFlockingExport:
    def test_line_count_contract(self, tmp_path):
        patterns = [pat([1, 0, 1, 0]), pat([0, 0, 1, 1])]
        path = tmp_path / "heat.csv"
        flocking_export(patterns, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 3  # 2 data rows + 1 frequency row

    def test_frequency_row_is_column_means(self, tmp_path):
        patterns = [pat([1, 0, 1, 0]), pat([0, 0, 1, 1])]
        path = tmp_path / "heat.csv"
        flocking_export(patterns, path)
        lines = path.read_text().strip().splitlines()
        freq = [float(v) for v in lines[-1].split(",")]
        assert freq == [0.5, 0.0, 1.0, 0.5]

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ContractViolation):
            flocking_export([], tmp_path / "x.csv")

    def test_sequence_mode_concentrates_frequencies(self):
        # measured direction: joint processing under causal attention
        # concentrates per-neuron activation frequency (higher Gini) than
        # isolated tokens, at a selective binarization threshold
        text = ("The quick brown fox jumps over the lazy dog while the cat "
                "sleeps on the warm windowsill")
        wins = 0
        for seed in (1, 2, 4):
            cfg = ModelConfig(n_layers=2, d_model=32, d_ff=64, n_heads=4,
                              vocab_size=257, max_seq_len=256)
            w = make_weights(cfg, seed)
            ids = tokenize(text)
            _, _, trace = prefill(w, ids)
            thr = float(np.percentile(
                magnitudes_from_hidden(w.layers[1], trace.hidden[1]), 80
            ))
            pt = extract_pattern(w, ids, "per_token", 1, report_threshold=thr)
            ps = extract_pattern(w, ids, "as_sequence", 1, report_threshold=thr)
            if frequency_concentration(ps) > frequency_concentration(pt):
                wins += 1
        assert wins == 3


class TestGini:
    def test_uniform_zero(self):
        assert gini(np.ones(10)) == pytest.approx(0.0, abs=1e-12)

    def test_point_mass(self):
        v = np.zeros(100)
        v[0] = 1.0
        assert gini(v) == pytest.approx(0.99, abs=1e-9)

    def test_all_zero(self):
        assert gini(np.zeros(5)) == 0.0
