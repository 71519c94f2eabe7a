import csv
import math

import numpy as np
import pytest

from gwcstereo.checkpoint import load_model, save_model
from gwcstereo.config import (REQUIRED_KEYS, ConfigError, NetworkConfig, SweepConfig, TrainConfig, format_config,
                              load_config, parse_config_text, variant_flags)
from gwcstereo.model import StereoNet, predict_disparity
from gwcstereo.stereo_io import StereoSample
from gwcstereo.tensor import Tensor, no_grad
from gwcstereo.train import (Adam, AdamState, TrainingDiverged, adam_step, degradation_trend, evaluate_model,
                             lr_at, run_sweep, split_train_val, sweep_network, train)

from conftest import TINY_CONFIG_TEXT


class TestAdam:
    def test_constant_gradient_descends(self):
        p = np.array([1.0, -1.0])
        state = AdamState.zeros_like([p])
        for _ in range(50):
            adam_step([p], [np.array([0.3, -2.0])], state, lr=0.01)
        assert p[0] < 1.0 and p[1] > -1.0
        assert state.t == 50

    def test_zero_gradient_keeps_parameter(self):
        p = np.array([0.5])
        state = AdamState.zeros_like([p])
        adam_step([p], [np.zeros(1)], state, lr=0.1)
        assert p[0] == 0.5

    @pytest.mark.parametrize("g", [1e-3, 0.5, -7.0, 300.0])
    def test_first_step_magnitude_is_lr(self, g):
        p = np.zeros(1)
        adam_step([p], [np.array([g])], AdamState.zeros_like([p]), lr=1e-3)
        # bias correction makes the first update lr * g / (|g| + eps)
        np.testing.assert_allclose(p, [-1e-3 * g / (abs(g) + 1e-8)], rtol=1e-9)

    def test_zero_lr_changes_nothing(self):
        p = np.random.default_rng(0).standard_normal(5)
        before = p.copy()
        adam_step([p], [np.ones(5)], AdamState.zeros_like([p]), lr=0.0)
        np.testing.assert_array_equal(p, before)

    def test_shape_drift_rejected(self):
        state = AdamState.zeros_like([np.zeros(3)])
        with pytest.raises(ValueError, match="shape"):
            adam_step([np.zeros(4)], [np.zeros(4)], state, lr=0.1)
        with pytest.raises(ValueError):
            adam_step([np.zeros(3), np.zeros(1)], [None, None], state, lr=0.1)

    def test_missing_gradient_treated_as_zero(self):
        from gwcstereo.tensor import Parameter

        w = Parameter(np.ones(2))
        opt = Adam([w], TrainConfig())
        opt.step(0.1)
        np.testing.assert_array_equal(w.data, 1.0)


class TestSchedule:
    def test_ends_at_final_rate(self):
        cfg = TrainConfig(lr=1e-3, lr_milestones=(10, 12, 14), lr_decay=2.0)
        assert lr_at(9, cfg) == 1e-3
        assert lr_at(10, cfg) == 5e-4
        assert lr_at(13, cfg) == 2.5e-4
        assert lr_at(14, cfg) == 0.000125
        assert lr_at(10_000, cfg) == 0.000125

    def test_invalid(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(lr_milestones=(5, 3))


class TestConfigFile:
    def test_round_trip_and_types(self, tiny_config_file):
        net, tcfg, extra = load_config(tiny_config_file)
        assert net.stage_blocks == (1, 1, 1, 1) and net.d_max == 8
        assert tcfg.max_iterations == 4 and tcfg.lr == 0.001
        assert extra == {}

    def test_format_then_load(self, tmp_path):
        net, tcfg = NetworkConfig(d_max=16), TrainConfig(lr_milestones=(3, 5), seed=4)
        (tmp_path / "c.cfg").write_text(format_config(net, tcfg))
        assert load_config(tmp_path / "c.cfg")[:2] == (net, tcfg)

    @pytest.mark.parametrize("key", REQUIRED_KEYS)
    def test_missing_key_named(self, tmp_path, key):
        text = "\n".join(l for l in TINY_CONFIG_TEXT.splitlines() if not l.startswith(key + " "))
        (tmp_path / "c.cfg").write_text(text)
        with pytest.raises(ConfigError, match=repr(key)):
            load_config(tmp_path / "c.cfg")

    def test_errors_carry_line_numbers(self, tmp_path):
        with pytest.raises(ConfigError, match=":3: unknown key 'colour'"):
            parse_config_text("a_comment = 1 # x\n".replace("a_comment", "lr") + "\ncolour = red\n", "f")
        (tmp_path / "c.cfg").write_text(TINY_CONFIG_TEXT + "lr_decay = fast\n")
        with pytest.raises(ConfigError, match=r":\d+: bad value for 'lr_decay'"):
            load_config(tmp_path / "c.cfg")
        with pytest.raises(ConfigError, match=":2: duplicate"):
            parse_config_text("lr = 1\nlr = 2\n")
        with pytest.raises(ConfigError, match=":1: expected key=value"):
            parse_config_text("just words\n")

    def test_variants(self, tmp_path):
        assert variant_flags("gwc-cat") == dict(use_gwc_volume=True, use_concat_volume=True)
        assert variant_flags("cat") == dict(use_gwc_volume=False, use_concat_volume=True)
        with pytest.raises(ConfigError):
            variant_flags("corr")
        (tmp_path / "c.cfg").write_text(TINY_CONFIG_TEXT + "variant = gwc\n")
        net, _, _ = load_config(tmp_path / "c.cfg")
        assert net.use_gwc_volume and not net.use_concat_volume


class TestModel:
    def test_train_mode_outputs(self, tiny_net):
        model = StereoNet(tiny_net)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 16, 32)).astype(np.float32))
        outs = model(x, x)
        assert len(outs) == 4 and all(o.shape == (2, 16, 32) for o in outs)
        model.eval()
        with no_grad():
            assert len(model(x, x)) == 1

    def test_inference_excludes_aux_heads(self, tiny_net):
        model = StereoNet(tiny_net)
        aux = sum(h.num_parameters() for h in model.heads[:-1])
        assert aux > 0 and model.inference_parameters() == model.num_parameters() - aux

    def test_predict_pads_and_crops(self, tiny_net):
        model = StereoNet(tiny_net).eval()
        img = np.random.default_rng(0).standard_normal((3, 14, 30)).astype(np.float32)
        disp = predict_disparity(model, img, img)
        assert disp.shape == (14, 30)
        assert disp.min() >= 0 and disp.max() <= tiny_net.d_max - 1

    def test_size_mismatch(self, tiny_net):
        model = StereoNet(tiny_net).eval()
        with pytest.raises(ValueError, match="shape"):
            predict_disparity(model, np.zeros((3, 16, 32)), np.zeros((3, 16, 16)))


class TestTrainLoop:
    def test_determinism(self, tiny_net, tiny_train_cfg, tiny_samples):
        a = train(tiny_net, tiny_samples[:4], tiny_samples[4:], tiny_train_cfg)
        b = train(tiny_net, tiny_samples[:4], tiny_samples[4:], tiny_train_cfg)
        assert [r["train_loss"] for r in a.log] == [r["train_loss"] for r in b.log]
        assert a.best_epe == b.best_epe

    def test_outputs_and_checkpoint_reproduces_epe(self, tmp_path, tiny_net, tiny_train_cfg, tiny_samples):
        result = train(tiny_net, tiny_samples[:4], tiny_samples[4:], tiny_train_cfg, tmp_path)
        assert (tmp_path / "best.ckpt").exists()
        with open(tmp_path / "log.csv") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["iteration", "lr", "train_loss", "val_epe", "val_d1"]
        assert all(math.isfinite(float(r["train_loss"])) for r in rows)
        loaded = load_model(tmp_path / "best.ckpt")
        assert evaluate_model(loaded, tiny_samples[4:]).epe == result.best_epe

    def test_nan_aborts_with_checkpoint_reference(self, tmp_path, tiny_net, tiny_samples):
        bad = [StereoSample(np.full_like(s.left, np.nan), s.right, s.gt) for s in tiny_samples[:2]]
        with pytest.raises(TrainingDiverged, match="iteration 1"):
            train(tiny_net, bad, [], TrainConfig(max_iterations=2), tmp_path)

    def test_early_stop_at_target(self, tiny_net, tiny_samples):
        cfg = TrainConfig(max_iterations=6, val_interval=2, target_val_epe=1e6)
        assert train(tiny_net, tiny_samples[:4], tiny_samples[4:], cfg).iterations == 2

    def test_split(self):
        tr, va = split_train_val(list(range(20)))
        assert tr == list(range(18)) and va == [18, 19]


class TestSweep:
    def test_channel_arithmetic(self):
        base = NetworkConfig()
        cat = sweep_network(base, "cat", 4)
        gwc = sweep_network(base, "gwc-cat", 4)
        assert (cat.base_3d_channels, gwc.gwc_groups, gwc.concat_channels) == (4, 4, 2)
        assert gwc.volume_channels - cat.volume_channels == gwc.gwc_groups

    def test_rows_and_monotone_parameters(self, tmp_path, tiny_net, tiny_samples):
        cfg = SweepConfig(base_channels=(4, 2), network=tiny_net,
                          train=TrainConfig(max_iterations=1, val_interval=1))
        rows = run_sweep(cfg, tiny_samples[:4], tiny_samples[4:], tmp_path / "sweep.csv")
        assert len(rows) == 4
        with open(tmp_path / "sweep.csv") as f:
            assert len(list(csv.DictReader(f))) == 4
        for variant in cfg.variants:
            params = [r["parameters"] for r in rows if r["variant"] == variant]
            assert params[0] > params[1]
        assert set(degradation_trend(rows)) == set(cfg.variants)
