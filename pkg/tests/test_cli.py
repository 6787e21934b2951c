import json

import pytest

from dynact.cli import main
from dynact.model import ModelConfig
from dynact.sparsity import ThresholdProfile
from dynact.weights_io import load_weights


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """A toy model written through the CLI itself."""
    d = tmp_path_factory.mktemp("cli")
    model = d / "toy.st"
    rc = main(["make-toy-model", "--d-model", "32", "--d-ff", "64",
               "--layers", "2", "--heads", "4", "--seed", "0",
               "--out", str(model)])
    assert rc == 0
    return model


@pytest.fixture(scope="module")
def calibration_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("calib") / "calib.txt"
    p.write_text("the quick brown fox\njumps over the lazy dog\n", encoding="utf-8")
    return p


class TestMakeToyModel:
    def test_loadable_round_trip(self, toy):
        cfg = ModelConfig.load(str(toy) + ".json")
        w = load_weights(toy, cfg)
        assert w.config.d_ff == 64

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a.st", tmp_path / "b.st"
        for out in (a, b):
            assert main(["make-toy-model", "--seed", "3", "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_requested_shapes(self, tmp_path):
        out = tmp_path / "s.st"
        assert main(["make-toy-model", "--d-ff", "8", "--layers", "2",
                     "--d-model", "4", "--heads", "2", "--out", str(out)]) == 0
        cfg = ModelConfig.load(str(out) + ".json")
        w = load_weights(out, cfg)
        assert len(w.layers) == 2
        assert all(l.ffn_gate.shape == (8, 4) for l in w.layers)


class TestSearchThresholds:
    def test_profile_shape_and_default_target(self, toy, calibration_file, tmp_path):
        out = tmp_path / "prof.json"
        rc = main(["search-thresholds", "--model", str(toy),
                   "--calibration", str(calibration_file), "--out", str(out)])
        assert rc == 0
        profile = ThresholdProfile.load(out)
        assert len(profile.per_layer_epsilon) == 2
        assert profile.cett_target == 0.2

    def test_byte_identical_reruns(self, toy, calibration_file, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for out in (a, b):
            assert main(["search-thresholds", "--model", str(toy),
                         "--calibration", str(calibration_file),
                         "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_empty_calibration_usage_error(self, toy, tmp_path):
        empty = tmp_path / "empty.txt"
        empty.write_text("", encoding="utf-8")
        rc = main(["search-thresholds", "--model", str(toy),
                   "--calibration", str(empty), "--out", str(tmp_path / "p.json")])
        assert rc == 2

    def test_unloadable_model(self, calibration_file, tmp_path):
        rc = main(["search-thresholds", "--model", str(tmp_path / "nope.st"),
                   "--calibration", str(calibration_file),
                   "--out", str(tmp_path / "p.json")])
        assert rc == 3


class TestGenerate:
    def test_degenerate_tda_matches_dense(self, toy, tmp_path):
        eps0 = tmp_path / "eps0.json"
        ThresholdProfile(cett_target=0.2, per_layer_epsilon=[0.0, 0.0]).save(eps0)
        a, b = tmp_path / "dense.txt", tmp_path / "tda.txt"
        assert main(["generate", "--model", str(toy), "--prompt", "hello",
                     "--strategy", "dense", "--max-new-tokens", "16",
                     "--out", str(a)]) == 0
        assert main(["generate", "--model", str(toy), "--prompt", "hello",
                     "--strategy", "tda", "--profile", str(eps0),
                     "--max-new-tokens", "16", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_zero_new_tokens(self, toy, capsys):
        assert main(["generate", "--model", str(toy), "--prompt", "x",
                     "--max-new-tokens", "0"]) == 0
        assert capsys.readouterr().out == "\n"

    def test_missing_profile_is_usage_error_before_load(self, tmp_path):
        # nonexistent model: fast-fail ordering means we still get exit 2
        rc = main(["generate", "--model", str(tmp_path / "absent.st"),
                   "--prompt", "x", "--strategy", "tda"])
        assert rc == 2

    def test_griffin_active_fraction_stat(self, toy, capsys):
        assert main(["generate", "--model", str(toy), "--prompt", "hello",
                     "--strategy", "griffin", "--sparsity", "0.5",
                     "--max-new-tokens", "4"]) == 0
        err = capsys.readouterr().err
        assert "mean_active_fraction=0.5" in err

    def test_negative_new_tokens_usage_error(self, toy):
        assert main(["generate", "--model", str(toy), "--prompt", "x",
                     "--max-new-tokens", "-1"]) == 2

    def test_mask_dump(self, toy, tmp_path):
        from dynact.sparsity import LayerMaskSet

        dump = tmp_path / "masks.txt"
        assert main(["generate", "--model", str(toy), "--prompt", "hello",
                     "--strategy", "griffin", "--sparsity", "0.5",
                     "--max-new-tokens", "2", "--dump-masks", str(dump)]) == 0
        masks = LayerMaskSet.from_hex_text(dump.read_text())
        assert masks.active_counts() == [32, 32]

    def test_mask_dump_requires_masked_strategy(self, toy, tmp_path):
        assert main(["generate", "--model", str(toy), "--prompt", "hello",
                     "--strategy", "dense", "--max-new-tokens", "2",
                     "--dump-masks", str(tmp_path / "m.txt")]) == 2


class TestAnalyzeInertia:
    def test_builtin_battery_13x13(self, toy, tmp_path):
        out = tmp_path / "inertia"
        rc = main(["analyze-inertia", "--model", str(toy), "--out-dir", str(out)])
        assert rc == 0
        lines = (out / "similarity_matrix.csv").read_text().strip().splitlines()
        assert len(lines) == 13
        report = json.loads((out / "ordinal_report.json").read_text())
        assert len(report["checks"]) == 15
        assert (out / "heatmap_per_token.csv").exists()
        assert (out / "heatmap_as_sequence.csv").exists()

    def test_custom_two_sample_battery(self, toy, tmp_path):
        battery = tmp_path / "two.json"
        battery.write_text(json.dumps([
            {"index": 1, "text": "alpha", "treatment": "a"},
            {"index": 2, "text": "beta", "treatment": "b"},
        ]), encoding="utf-8")
        out = tmp_path / "deep" / "nested"  # created on demand
        rc = main(["analyze-inertia", "--model", str(toy),
                   "--samples", str(battery), "--out-dir", str(out)])
        assert rc == 0
        lines = (out / "similarity_matrix.csv").read_text().strip().splitlines()
        assert len(lines) == 2

    def test_malformed_samples_file(self, toy, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        assert main(["analyze-inertia", "--model", str(toy),
                     "--samples", str(bad), "--out-dir", str(tmp_path)]) == 3
        bad.write_text('[{"index": 1}]', encoding="utf-8")
        assert main(["analyze-inertia", "--model", str(toy),
                     "--samples", str(bad), "--out-dir", str(tmp_path)]) == 3

    def test_deterministic_outputs(self, toy, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["analyze-inertia", "--model", str(toy),
                         "--out-dir", str(out)]) == 0
            outs.append((out / "similarity_matrix.csv").read_bytes())
        assert outs[0] == outs[1]


class TestBench:
    def test_default_strategies_four_rows(self, toy, tmp_path):
        out = tmp_path / "full.csv"
        rc = main(["bench", "--model", str(toy), "--prompt-len", "12",
                   "--new-tokens", "6", "--repetitions", "3", "--warmup", "0",
                   "--format", "csv", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert [l.split(",")[0] for l in lines[1:]] == ["dense", "tt", "griffin", "tda"]

    def test_two_strategy_rows(self, toy, tmp_path, capsys):
        out = tmp_path / "report.csv"
        rc = main(["bench", "--model", str(toy), "--prompt-len", "12",
                   "--new-tokens", "6", "--repetitions", "3", "--warmup", "0",
                   "--strategies", "dense,tda", "--format", "csv",
                   "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 1 + 2

    def test_markdown_annotations(self, toy, capsys):
        rc = main(["bench", "--model", str(toy), "--prompt-len", "12",
                   "--new-tokens", "6", "--repetitions", "3", "--warmup", "0",
                   "--strategies", "dense,griffin"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "%↓" in out or "%↑" in out

    def test_spec_file(self, toy, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({
            "model_path": str(toy), "prompt_len": 10, "new_tokens": 4,
            "repetitions": 3, "warmup": 0, "strategies": ["dense"],
        }), encoding="utf-8")
        out = tmp_path / "r.json"
        rc = main(["bench", "--spec", str(spec), "--format", "json",
                   "--out", str(out)])
        assert rc == 0
        assert json.loads(out.read_text())["strategies"][0]["strategy"] == "dense"

    def test_bad_repetitions_data_error(self, toy):
        rc = main(["bench", "--model", str(toy), "--repetitions", "1",
                   "--prompt-len", "8", "--new-tokens", "4"])
        assert rc == 3


class TestEmergence:
    def test_both_variants_two_files(self, tmp_path, capsys):
        out = tmp_path / "em"
        rc = main(["emergence", "--variant", "both", "--steps", "50",
                   "--seed", "1", "--out-dir", str(out)])
        assert rc == 0
        assert (out / "trajectory_relu.csv").exists()
        assert (out / "trajectory_swiglu.csv").exists()
        assert "relu" in capsys.readouterr().out

    def test_zero_steps_init_only(self, tmp_path):
        out = tmp_path / "em0"
        rc = main(["emergence", "--variant", "relu", "--steps", "0",
                   "--out-dir", str(out)])
        assert rc == 0
        lines = (out / "trajectory_relu.csv").read_text().strip().splitlines()
        assert len(lines) == 2  # header + init row

    def test_byte_identical_reruns(self, tmp_path):
        texts = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["emergence", "--variant", "relu", "--steps", "100",
                         "--seed", "5", "--out-dir", str(out)]) == 0
            texts.append((out / "trajectory_relu.csv").read_bytes())
        assert texts[0] == texts[1]

    def test_divergence_exit_code(self, tmp_path):
        rc = main(["emergence", "--variant", "swiglu", "--steps", "2000",
                   "--lr", "1000000", "--seed", "1",
                   "--out-dir", str(tmp_path / "div")])
        assert rc == 4


class TestUsageErrors:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

    def test_bench_without_model_or_spec(self):
        assert main(["bench"]) == 2
