import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from ordrisk import cli
from ordrisk import tensor as T
from ordrisk.config import ExperimentConfig, dump_config, load_config
from ordrisk.errors import ConfigError, ValidationError
from ordrisk.gradcheck import CheckResult, SuiteReport
from ordrisk.heatmaps import export_heatmaps, read_pgm, to_uint8, upsample_bilinear, write_pgm
from ordrisk.model import ModelConfig, RiskModel
from ordrisk.optim import Adam, AdamState, EarlyStopping, PlateauSchedule, adam_step
from ordrisk.synthgen import GenConfig, load_dataset
from ordrisk.tensor import DimensionError, Tensor
from ordrisk.training import (LOG_COLUMNS, PairArrays, attention_mass_in_box, evaluate, load_checkpoint,
                              overfit_single_batch, save_checkpoint, train)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def fast_config(**train_overrides) -> ExperimentConfig:
    """Narrow encoder, two epochs, small bootstrap: for pipeline checks on the 120-patient cohort."""
    base = ExperimentConfig(data=GenConfig(n_patients=120), model=ModelConfig(widths=(8, 8, 16, 16)))
    t = replace(base.train, **{"max_epochs": 2, "bootstrap_iters": 50, **train_overrides})
    cfg = replace(base, train=t)
    cfg.validate()
    return cfg


def file_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = np.array([1.0, -2.0])
        state = AdamState.zeros_like([p])
        adam_step([p], [np.zeros(2)], state, 1e-3)
        np.testing.assert_array_equal(p, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_magnitude(self):
        p = np.zeros(1)
        adam_step([p], [np.array([0.1])], AdamState.zeros_like([p]), 1e-3)
        # bias-corrected m/sqrt(v) = 0.1 / (0.1 + 1e-8)
        assert abs(p[0] - (-1e-3 * 0.1 / (0.1 + 1e-8))) <= 1e-15
        assert abs(p[0] + 1e-3) <= 1e-9

    def test_matches_hand_recursion(self, rng):
        grads = rng.normal(size=(5, 3))
        p = np.zeros(3)
        state = AdamState.zeros_like([p])
        m = v = np.zeros(3)
        expect = np.zeros(3)
        for t, g in enumerate(grads, start=1):
            adam_step([p], [g], state, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expect = expect - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p, expect, rtol=0, atol=1e-15)

    def test_replay_identical(self, rng):
        grads = [rng.normal(size=4) for _ in range(2)]
        a, b = np.ones(4), np.ones(4)
        sa, sb = AdamState.zeros_like([a]), AdamState.zeros_like([b])
        for g in grads:
            adam_step([a], [g], sa, 1e-2)
        for g in list(grads):
            adam_step([b], [g.copy()], sb, 1e-2)
        np.testing.assert_array_equal(a, b)

    def test_missing_grad_is_zero(self):
        p = np.ones(2)
        adam_step([p], [None], AdamState.zeros_like([p]), 1e-3)
        np.testing.assert_array_equal(p, 1.0)

    def test_shape_mismatch(self):
        p = np.ones(2)
        with pytest.raises(DimensionError):
            adam_step([p], [np.ones(3)], AdamState.zeros_like([p]), 1e-3)
        with pytest.raises(DimensionError):
            adam_step([p], [], AdamState.zeros_like([p]), 1e-3)

    def test_wrapper_updates_tensors(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([w], lr=1e-3)
        w.grad = np.array([0.1])
        opt.step()
        assert w.data[0] < 0
        opt.zero_grad()
        assert w.grad is None


class TestPlateauSchedule:
    def test_decay_after_patience(self):
        s = PlateauSchedule(1e-4, 0.5, 5)
        decays = [s.update(x) for x in [0.6] + [0.6] * 5]
        assert decays == [False] * 5 + [True]
        assert s.lr == 1e-4 * 0.5

    def test_improvement_resets(self):
        s = PlateauSchedule(1.0, 0.5, 3)
        for x in [0.5, 0.5, 0.5, 0.6, 0.6, 0.6]:
            s.update(x)
        assert s.lr == 1.0

    def test_min_delta(self):
        s = PlateauSchedule(1.0, 0.5, 2, min_delta=1e-4)
        for x in [0.5, 0.50005, 0.50009]:
            s.update(x)
        assert s.lr == 0.5

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.integers(1, 6))
    def test_lr_is_power_of_decay(self, scores, patience):
        s = PlateauSchedule(1e-4, 0.5, patience)
        best, bad, k = -np.inf, 0, 0
        for x in scores:
            decayed = s.update(x)
            if x >= best + 1e-4:
                best, bad = x, 0
            else:
                bad += 1
            if decayed:
                # only after at least `patience` non-improving epochs
                assert bad >= patience
                bad = 0
                k += 1
            assert s.lr == 1e-4 * 0.5 ** k


class TestEarlyStopping:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=80), st.integers(1, 15))
    def test_never_runs_past_patience(self, scores, patience):
        stop = EarlyStopping(patience)
        ran = 0
        for epoch, x in enumerate(scores):
            stop.update(x, epoch)
            ran = epoch
            if stop.should_stop:
                break
        assert ran - stop.best_epoch <= patience

    def test_best_tracking(self):
        stop = EarlyStopping(2)
        for e, x in enumerate([0.5, 0.7, 0.6, 0.65]):
            stop.update(x, e)
        assert (stop.best, stop.best_epoch, stop.should_stop) == (0.7, 1, True)


class TestConfig:
    @pytest.mark.parametrize("name", ["desk.yaml", "paper.profile.yaml"])
    def test_shipped_configs_load(self, name):
        cfg = load_config(CONFIG_DIR / name)
        assert cfg.train.lr == 1e-4
        assert cfg.train.lr_decay == 0.5

    def test_desk_matches_defaults(self):
        assert load_config(CONFIG_DIR / "desk.yaml") == load_config(None)

    def test_full_scale_profile_values(self):
        cfg = load_config(CONFIG_DIR / "paper.profile.yaml")
        assert (cfg.train.batch_size, cfg.train.max_epochs) == (96, 200)
        assert (cfg.train.lr_patience, cfg.train.early_stop_patience) == (5, 15)

    def test_round_trip(self, tmp_path):
        cfg = fast_config().with_ablation(disable_mv=True)
        dump_config(cfg, tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml") == cfg

    @pytest.mark.parametrize("body", [
        {"train": {"learning_rate": 1e-3}},
        {"trainer": {}},
        {"train": {"lr": -1.0}},
        {"train": {"lr_decay": 1.0}},
        {"train": {"lr_patience": 0}},
        {"train": {"loss": {"gamma": 1.0}}},
        {"train": {"ablation": {"disable_everything": True}}},
        {"model": {"image_height": 32}},
        {"data": {"horizon": 4}},
    ])
    def test_invalid_rejected(self, tmp_path, body):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(body))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("train: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_stp_resolves_model(self):
        cfg = ExperimentConfig().with_ablation(stp_mode=True)
        assert cfg.resolved_model().stp_mode
        w = cfg.train.effective_weights()
        assert w.reg == 0.0 and w.ml == 0.0

    def test_disable_align_resolves_model(self):
        assert not ExperimentConfig().with_ablation(disable_align=True).resolved_model().use_alignment

    def test_disable_mv_equals_zero_weight(self):
        a = ExperimentConfig().with_ablation(disable_mv=True).train.effective_weights()
        b = replace(ExperimentConfig().train, loss=replace(ExperimentConfig().train.loss, mv=0.0)).effective_weights()
        assert a == b


@pytest.fixture(scope="module")
def fast_run(small_dataset, tmp_path_factory):
    return train(fast_config(), small_dataset, tmp_path_factory.mktemp("run") / "a")


class TestTrain:
    def test_outputs_written(self, fast_run):
        for name in ("train_log.csv", "steps.csv", "timing.csv", "checkpoint/manifest.json"):
            assert (fast_run.out_dir / name).exists()

    def test_log_columns(self, fast_run):
        with open(fast_run.out_dir / "train_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == LOG_COLUMNS
        assert len(rows) == 2

    def test_lr_non_increasing_by_exact_factor(self, small_dataset, tmp_path):
        cfg = fast_config(max_epochs=4, lr_patience=1, min_improvement=1.0)
        res = train(cfg, small_dataset, tmp_path)
        lrs = [r["lr"] for r in res.log_rows]
        # each row holds the lr used in that epoch; epoch 0 sets the best, every later epoch decays
        assert lrs == [1e-4, 1e-4, 1e-4 * 0.5, 1e-4 * 0.25]

    def test_best_checkpoint_meta(self, fast_run):
        _, _, meta = load_checkpoint(fast_run.checkpoint_dir)
        assert meta["epoch"] == fast_run.best_epoch
        assert meta["val_c_harrell"] == fast_run.best_val
        assert fast_run.best_val == max(r["val_c_harrell"] for r in fast_run.log_rows)

    def test_reproducible_bytes(self, fast_run, small_dataset, tmp_path):
        again = train(fast_config(), small_dataset, tmp_path / "b")
        for name in ("train_log.csv", "steps.csv"):
            assert (again.out_dir / name).read_bytes() == (fast_run.out_dir / name).read_bytes()
        assert file_bytes(again.checkpoint_dir) == file_bytes(fast_run.checkpoint_dir)

    def test_seed_changes_run(self, fast_run, small_dataset, tmp_path):
        other = train(fast_config(seed=1), small_dataset, tmp_path)
        assert (other.out_dir / "steps.csv").read_bytes() != (fast_run.out_dir / "steps.csv").read_bytes()

    @pytest.mark.parametrize("flag", ["stp_mode", "disable_align", "disable_mv", "disable_poe", "disable_ml"])
    def test_ablations_run(self, small_dataset, tmp_path, flag):
        res = train(fast_config(max_epochs=1).with_ablation(**{flag: True}), small_dataset, tmp_path)
        assert np.isfinite(res.log_rows[0]["total"])
        model, cfg, _ = load_checkpoint(res.checkpoint_dir)
        assert getattr(cfg.train.ablation, flag)
        if flag == "stp_mode":
            assert model.cfg.stp_mode
            w = cfg.train.effective_weights()
            assert (w.reg, w.ml) == (0.0, 0.0)

    def test_undefined_validation_metric_aborts(self, small_dataset, tmp_path):
        data = load_dataset(small_dataset, "val")
        censored = [p for p in data if not p.label_current.event][:4]
        with pytest.raises(ValidationError, match="validation C-index"):
            train(fast_config(max_epochs=1), small_dataset, tmp_path, val_data=PairArrays.from_pairs(censored))

    def test_missing_split(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            train(fast_config(), tmp_path / "nowhere", tmp_path / "out")


@pytest.fixture(scope="module")
def overfit_totals(small_dataset):
    data = PairArrays.load(small_dataset, "train")
    return overfit_single_batch(ExperimentConfig(), data, list(range(16)), steps=200, lr=1e-3)


class TestOverfit:

    def test_loss_drops_tenfold(self, overfit_totals):
        assert overfit_totals[0] / overfit_totals[-1] >= 10.0

    def test_early_descent_monotone(self, overfit_totals):
        assert all(b <= a for a, b in zip(overfit_totals[:50], overfit_totals[1:50]))

    @pytest.mark.slow
    def test_train_split_concordance(self, small_dataset, tmp_path):
        # monitor the training split itself so the kept checkpoint is the most overfit one
        cfg = replace(ExperimentConfig(), train=replace(ExperimentConfig().train, lr=1e-3, max_epochs=40,
                                                        augment=False, early_stop_patience=100,
                                                        lr_patience=100, bootstrap_iters=50))
        res = train(cfg, small_dataset, tmp_path, val_data=PairArrays.load(small_dataset, "train"))
        report = evaluate(res.checkpoint_dir, small_dataset, "train")
        assert report["c_harrell"].estimate >= 0.95


class TestEvaluate:
    def test_identical_reports(self, fast_run, small_dataset, tmp_path):
        evaluate(fast_run.checkpoint_dir, small_dataset, "test", tmp_path / "a")
        evaluate(fast_run.checkpoint_dir, small_dataset, "test", tmp_path / "b")
        for name in ("metrics.json", "metrics.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_json_csv_agree(self, fast_run, small_dataset, tmp_path):
        report = evaluate(fast_run.checkpoint_dir, small_dataset, "test", tmp_path)
        js = json.loads((tmp_path / "metrics.json").read_text())
        assert js["n_records"] == report.n_records
        with open(tmp_path / "metrics.csv") as fh:
            for row in csv.DictReader(fh):
                entry = js["metrics"][row["name"]]
                if entry is None:
                    assert row["point"] == ""
                    continue
                for col, key in (("point", "point"), ("lo", "ci_lo"), ("hi", "ci_hi"), ("estimate", "estimate")):
                    assert float(row[col]) == entry[key]

    def test_default_bootstrap_iterations(self, fast_run, small_dataset):
        report = evaluate(fast_run.checkpoint_dir, small_dataset, "test")
        v = report["c_harrell"]
        assert v.ci_lo <= v.point <= v.ci_hi

    def test_unknown_split(self, fast_run, small_dataset):
        with pytest.raises(KeyError):
            evaluate(fast_run.checkpoint_dir, small_dataset, "holdout")

    def test_image_size_mismatch(self, fast_run, tmp_path):
        from ordrisk.synthgen import generate_cohort, write_dataset
        ds = write_dataset(generate_cohort(GenConfig(n_patients=20, image_height=32, image_width=16), 0), tmp_path)
        with pytest.raises(ConfigError):
            evaluate(fast_run.checkpoint_dir, ds, "test")


class TestCheckpoint:
    def test_round_trip_predictions(self, tmp_path, rng):
        cfg = fast_config()
        model = RiskModel(cfg.model, seed=4)
        model.align2.weight.data[:] = rng.normal(0, 0.1, model.align2.weight.shape).astype(np.float32)
        x = rng.normal(size=(4, 1, 64, 32)).astype(np.float32)
        model(x, x[::-1], 1.0, mode="train", rng=rng)
        save_checkpoint(model, cfg, tmp_path, {"epoch": 3})
        loaded, cfg2, meta = load_checkpoint(tmp_path)
        assert cfg2 == cfg and meta == {"epoch": 3}
        np.testing.assert_array_equal(loaded(x, x[::-1], 1.0).y_fused.data, model(x, x[::-1], 1.0).y_fused.data)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path)


@pytest.fixture(scope="module")
def exported(small_dataset, tmp_path_factory):
    """Heatmaps of one test pair from an untrained model with warmed batchnorm statistics."""
    cfg = fast_config()
    model = RiskModel(cfg.model, seed=0)
    data = PairArrays.load(small_dataset, "train")
    model(data.prior[:8], data.current[:8], data.gap[:8], mode="train", rng=np.random.default_rng(0))
    pair = load_dataset(small_dataset, "test")[0]
    out = tmp_path_factory.mktemp("heat")
    return out, export_heatmaps(model, pair, out), pair


class TestHeatmaps:
    def test_pgm_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (7, 5)).astype(np.uint8)
        write_pgm(tmp_path / "x.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), img)

    def test_pgm_raster_starting_with_whitespace_bytes(self, tmp_path):
        img = np.array([[10, 32, 9], [13, 0, 255]], dtype=np.uint8)
        write_pgm(tmp_path / "x.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), img)

    def test_pgm_rejects_float(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2)))

    def test_pgm_write_error_names_path(self, tmp_path):
        with pytest.raises(OSError, match="missing"):
            write_pgm(tmp_path / "missing" / "x.pgm", np.zeros((2, 2), np.uint8))

    def test_to_uint8_range(self, rng):
        m = rng.normal(size=(6, 6))
        img, lo, hi = to_uint8(m)
        assert (img.min(), img.max()) == (0, 255)
        assert (lo, hi) == (m.min(), m.max())

    def test_constant_map(self):
        img, lo, hi = to_uint8(np.full((3, 3), 0.25))
        assert not img.any() and lo == hi == 0.25

    def test_upsample_constant_and_corners(self):
        np.testing.assert_allclose(upsample_bilinear(np.full((2, 3), 0.7), (8, 12)), 0.7, atol=1e-12)
        m = np.array([[0.0, 1.0], [2.0, 3.0]])
        up = upsample_bilinear(m, (4, 4))
        # half-pixel centres: output pixel 0 lies a quarter cell before input cell 0, clamped
        assert up[0, 0] == 0.0 and up[-1, -1] == 3.0
        # pixel (1, 1) samples input coordinate (0.25, 0.25)
        expect = 0.75 * 0.75 * 0.0 + 0.75 * 0.25 * 1.0 + 0.25 * 0.75 * 2.0 + 0.25 * 0.25 * 3.0
        assert abs(up[1, 1] - expect) <= 1e-12

    def test_files(self, exported):
        out, _, pair = exported
        for name in ("a_cur", "a_pri", "a_dif", "phi_magnitude", "current", "prior",
                     "a_cur_overlay", "a_pri_overlay", "a_dif_overlay"):
            img = read_pgm(out / f"{name}.pgm")
            assert img.shape == pair.current.image.shape[-2:]

    def test_attention_scaled_with_recorded_range(self, exported):
        out, ranges, _ = exported
        rows = [line.split() for line in (out / "normalization.txt").read_text().splitlines()[1:]]
        recorded = {name: (float(lo), float(hi)) for name, lo, hi in rows}
        assert recorded == ranges
        for name in ("a_cur", "a_pri", "a_dif"):
            img = read_pgm(out / f"{name}.pgm")
            assert img.min() == 0 and img.max() == 255
            lo, hi = ranges[name]
            assert 0 <= lo < hi

    def test_zero_init_phi_map(self, exported):
        out, ranges, _ = exported
        assert not read_pgm(out / "phi_magnitude.pgm").any()
        assert ranges["phi_magnitude"] == (0.0, 0.0)

    def test_overlay_blend(self, exported):
        out, _, _ = exported
        base = read_pgm(out / "current.pgm").astype(float)
        att = read_pgm(out / "a_cur.pgm").astype(float)
        np.testing.assert_array_equal(read_pgm(out / "a_cur_overlay.pgm"), np.round(0.5 * base + 0.5 * att))


class TestAttentionMass:
    def test_uniform_map(self):
        mass, frac = attention_mass_in_box(np.full((8, 4), 1 / 32), (0, 16, 0, 16), (64, 32))
        assert abs(mass - frac) <= 1e-12 and frac == 0.125

    def test_point_mass(self):
        a = np.zeros((8, 4))
        a[2, 1] = 1.0
        mass, _ = attention_mass_in_box(a, (16, 24, 8, 16), (64, 32))
        assert abs(mass - 1.0) <= 1e-12
        assert attention_mass_in_box(a, (0, 16, 0, 32), (64, 32))[0] == 0.0

    def test_total_mass(self, rng):
        a = rng.dirichlet(np.ones(32)).reshape(8, 4)
        assert abs(attention_mass_in_box(a, (0, 64, 0, 32), (64, 32))[0] - 1.0) <= 1e-12


class TestCli:
    def test_pipeline(self, tmp_path, capsys):
        cfg_path = tmp_path / "fast.yaml"
        dump_config(fast_config(), cfg_path)
        data, run = tmp_path / "data", tmp_path / "run"
        assert cli.main(["generate", "--config", str(cfg_path), "--out", str(data), "--patients", "40"]) == 0
        assert cli.main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(run),
                         "--max-epochs", "1"]) == 0
        ckpt = str(run / "checkpoint")
        assert cli.main(["eval", "--data", str(data), "--checkpoint", ckpt, "--out", str(tmp_path / "m"),
                         "--iters", "10"]) == 0
        assert (tmp_path / "m" / "metrics.json").exists() and (tmp_path / "m" / "metrics.csv").exists()
        assert cli.main(["heatmap", "--data", str(data), "--checkpoint", ckpt, "--out", str(tmp_path / "h")]) == 0
        assert list((tmp_path / "h").glob("patient_*/a_dif.pgm"))
        assert "c_harrell" in capsys.readouterr().out

    def test_ablation_flag_reaches_checkpoint(self, small_dataset, tmp_path):
        cfg_path = tmp_path / "fast.yaml"
        dump_config(fast_config(), cfg_path)
        assert cli.main(["train", "--config", str(cfg_path), "--data", str(small_dataset), "--out", str(tmp_path),
                         "--max-epochs", "1", "--stp-mode"]) == 0
        _, cfg, _ = load_checkpoint(tmp_path / "checkpoint")
        assert cfg.train.ablation.stp_mode

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("train:\n  lr: -1\n")
        assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
        assert "lr" in capsys.readouterr().err

    def test_missing_data_exit_code(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1

    def test_unknown_split_exit_code(self, fast_run, small_dataset):
        assert cli.main(["eval", "--data", str(small_dataset), "--checkpoint", str(fast_run.checkpoint_dir),
                         "--split", "holdout", "--iters", "5"]) == 1

    def test_gradcheck_pass(self, tmp_path):
        assert cli.main(["gradcheck", "--scope", "losses", "--trials", "2", "--json", str(tmp_path / "g.json")]) == 0
        assert all(r["passed"] for r in json.loads((tmp_path / "g.json").read_text()))

    def test_gradcheck_failure_exit_code(self, monkeypatch):
        import ordrisk.gradcheck as gc
        failing = SuiteReport([CheckResult("conv2d", 1, 0.5, "x[0]")], 0.0)
        monkeypatch.setattr(gc, "run_suite", lambda scope, trials: failing)
        assert cli.main(["gradcheck", "--scope", "ops"]) == 2

    def test_numerical_error_exit_code(self, monkeypatch, tmp_path):
        def boom(args):
            raise T.NumericalError("non-finite")
        monkeypatch.setattr(cli, "cmd_generate", boom)
        assert cli.main(["generate", "--out", str(tmp_path)]) == 2
