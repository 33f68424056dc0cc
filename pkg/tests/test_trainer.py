import numpy as np
import numpy.testing as npt
import pytest

from noisymim.checkpoint import load_checkpoint, save_checkpoint
from noisymim.config import TrainConfig, apply_overrides, config_from_items, config_items
from noisymim.corruption import STREAM_SYNTH, Rng
from noisymim.data import (SynthSpec, build_synthetic_dataset, check_cifar10, gen_synthetic,
                           load_cifar10, write_cifar10)
from noisymim.encoder import Encoder, EncoderConfig
from noisymim.errors import ConfigError, FormatError, NumericsError
from noisymim.optim import OptimizerState, adamw_step, decay_exempt, lr_at
from noisymim.tensor import Tensor
from noisymim.trainer import (load_train_checkpoint, pretrain, save_train_checkpoint)

TINY_OVERRIDES = {
    "encoder.image_size": "8", "encoder.patch_size": "4", "encoder.embed_dim": "8",
    "encoder.depth": "2", "encoder.heads": "2", "encoder.noise_block": "1",
    "train.batch_size": "4", "data.samples_per_class": "8", "data.classes": "2",
    "train.steps": "4",
}


def tiny_cfg(**extra):
    return apply_overrides(TrainConfig(), {**TINY_OVERRIDES, **{k: str(v) for k, v in extra.items()}})


class TestCifarIO:
    def test_single_zero_record(self, tmp_path):
        path = tmp_path / "one.bin"
        path.write_bytes(bytes(3073))
        ds = load_cifar10(path)
        assert len(ds) == 1 and ds.labels[0] == 0
        npt.assert_array_equal(ds.images[0], 0.0)

    def test_byte_255_maps_to_one(self, tmp_path):
        path = tmp_path / "one.bin"
        path.write_bytes(bytes([7]) + b"\xff" * 3072)
        ds = load_cifar10(path)
        assert ds.labels[0] == 7
        npt.assert_array_equal(ds.images[0], 1.0)

    def test_write_then_read_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=(10, 3, 32, 32)).astype(np.uint8)
        labels = rng.integers(0, 10, size=10)
        path = tmp_path / "rt.bin"
        write_cifar10(path, raw, labels)
        ds = load_cifar10(path)
        npt.assert_array_equal(ds.labels, labels)
        npt.assert_array_equal(np.round(ds.images * 255).astype(np.uint8), raw)
        # second cycle is bit-exact
        path2 = tmp_path / "rt2.bin"
        write_cifar10(path2, ds.images, ds.labels)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file_reports_offset(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(3073 * 2 + 100))
        with pytest.raises(FormatError, match="6146"):
            load_cifar10(path)
        with pytest.raises(FormatError, match="6146"):
            check_cifar10(path)

    def test_directory_loading(self, tmp_path):
        for i in range(2):
            write_cifar10(tmp_path / f"batch_{i}.bin",
                          np.full((3, 3, 32, 32), i * 40, dtype=np.uint8), [i] * 3)
        ds = load_cifar10(tmp_path)
        assert len(ds) == 6
        npt.assert_array_equal(np.unique(ds.labels), [0, 1])


class TestSynthetic:
    def test_deterministic_given_rng(self):
        spec = SynthSpec(classes=2, noise_std=0.0)
        a, _ = gen_synthetic(spec, Rng(5), label=1, patch_xy=(3, 3))
        b, _ = gen_synthetic(spec, Rng(5), label=1, patch_xy=(3, 3))
        npt.assert_array_equal(a, b)

    def test_shared_palette_differs_only_in_patch(self):
        spec = SynthSpec(classes=2, noise_std=0.0)  # classes 0,1 share palette 0
        a, _ = gen_synthetic(spec, Rng(6), label=0, patch_xy=(5, 7))
        b, _ = gen_synthetic(spec, Rng(6), label=1, patch_xy=(5, 7))
        diff = np.any(a != b, axis=0)
        ys, xs = np.where(diff)
        assert ys.size > 0
        assert ys.min() >= 7 and ys.max() < 7 + spec.stripe_patch
        assert xs.min() >= 5 and xs.max() < 5 + spec.stripe_patch

    def test_distinct_signatures_required(self):
        with pytest.raises(ConfigError):
            SynthSpec(classes=2, high_freq_signature=[(0.2, 0.1), (0.2, 0.1)])

    def test_balanced_dataset(self):
        ds = build_synthetic_dataset(SynthSpec(classes=3), 5, Rng(7, STREAM_SYNTH))
        npt.assert_array_equal(np.bincount(ds.labels), [5, 5, 5])
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_values_in_range(self):
        ds = build_synthetic_dataset(SynthSpec(classes=2, noise_std=0.3), 10, Rng(8, STREAM_SYNTH))
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


class TestAdamW:
    def test_zero_grads_zero_decay_no_change(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True, name="w")}
        state = OptimizerState.for_params(p)
        adamw_step(p, {"w": np.zeros(2)}, state, lr=1e-3, weight_decay=0.0)
        npt.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_lr_zero_no_change(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True, name="w")}
        state = OptimizerState.for_params(p)
        adamw_step(p, {"w": np.array([3.0, -1.0])}, state, lr=0.0)
        npt.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        # hand-rolled first AdamW step for a scalar with g = 1
        lr, b1, b2, eps = 1e-3, 0.9, 0.95, 1e-8
        m = (1 - b1) * 1.0
        v = (1 - b2) * 1.0
        expected_update = (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        p = {"w": Tensor(np.array([0.5]), requires_grad=True, name="w")}
        state = OptimizerState.for_params(p)
        adamw_step(p, {"w": np.ones(1)}, state, lr=lr, beta1=b1, beta2=b2, eps=eps,
                   weight_decay=0.0)
        assert p["w"].data[0] == 0.5 - lr * expected_update

    def test_weight_decay_exemptions(self):
        enc = Encoder(EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2,
                                    noise_block=0), Rng(9))
        assert decay_exempt("theta", enc.params["theta"])
        assert decay_exempt("pos", enc.params["pos"])
        assert decay_exempt("block0.ln1.gain", enc.params["block0.ln1.gain"])
        assert decay_exempt("block0.attn.bq", enc.params["block0.attn.bq"])
        assert not decay_exempt("block0.attn.wq", enc.params["block0.attn.wq"])
        assert not decay_exempt("embed.weight", enc.params["embed.weight"])

    def test_nonfinite_grad_names_parameter(self):
        p = {"w": Tensor(np.ones(2), requires_grad=True, name="w")}
        state = OptimizerState.for_params(p)
        with pytest.raises(NumericsError, match="'w'"):
            adamw_step(p, {"w": np.array([1.0, np.nan])}, state, lr=1e-3)

    def test_any_nonzero_grad_changes_a_parameter(self):
        rng = Rng(10, 2)
        p = {"a": Tensor(rng.normal(3), requires_grad=True, name="a"),
             "b": Tensor(rng.normal(3), requires_grad=True, name="b")}
        state = OptimizerState.for_params(p)
        before = {k: v.data.copy() for k, v in p.items()}
        adamw_step(p, {"a": np.zeros(3), "b": np.array([0.0, 1e-9, 0.0])}, state, lr=1e-3)
        assert any(not np.array_equal(before[k], p[k].data) for k in p)

    def test_lr_schedule(self):
        assert lr_at(1, 1.0, 10, 100) == 0.1
        assert lr_at(10, 1.0, 10, 100) == 1.0
        assert abs(lr_at(100, 1.0, 10, 100)) < 1e-12
        mid = lr_at(55, 1.0, 10, 100)
        assert 0.4 < mid < 0.6


class TestCheckpointFormat:
    def test_roundtrip(self, tmp_path):
        items = [("a.b", "1"), ("c", "hello world")]
        blobs = {"w": np.random.default_rng(0).normal(size=(3, 4)),
                 "scalar": np.float64(7.5),
                 "vec": np.arange(5.0)}
        path = tmp_path / "x.nmim"
        save_checkpoint(path, items, blobs)
        items2, blobs2 = load_checkpoint(path)
        assert items2 == items
        for k in blobs:
            npt.assert_array_equal(np.asarray(blobs[k]), blobs2[k])

    def test_save_load_save_bytes_identical(self, tmp_path):
        blobs = {"w": np.random.default_rng(1).normal(size=(4, 4))}
        p1, p2 = tmp_path / "a.nmim", tmp_path / "b.nmim"
        save_checkpoint(p1, [("k", "v")], blobs)
        items, loaded = load_checkpoint(p1)
        save_checkpoint(p2, items, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.nmim"
        path.write_bytes(b"XXXX" + bytes(100))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.nmim"
        path.write_bytes(b"NMIM" + (99).to_bytes(4, "little") + bytes(8))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_truncation_is_format_error(self, tmp_path):
        full = tmp_path / "full.nmim"
        save_checkpoint(full, [("k", "v")], {"w": np.ones((8, 8))})
        data = full.read_bytes()
        for cut in (3, 7, 20, len(data) - 5):
            trunc = tmp_path / f"t{cut}.nmim"
            trunc.write_bytes(data[:cut])
            with pytest.raises(FormatError):
                load_checkpoint(trunc)


class TestTrainCheckpoint:
    def test_fresh_init_roundtrip_bit_exact(self, tmp_path):
        cfg = tiny_cfg()
        enc = Encoder(cfg.encoder, Rng(cfg.seed))
        state = OptimizerState.for_params(enc.params)
        path = tmp_path / "init.nmim"
        save_train_checkpoint(path, cfg, enc, state)
        cfg2, enc2, state2 = load_train_checkpoint(path)
        assert config_items(cfg2) == config_items(cfg)
        for name in enc.params:
            npt.assert_array_equal(enc.params[name].data, enc2.params[name].data)
        assert state2.step == 0

    def test_config_flat_roundtrip(self):
        cfg = tiny_cfg(**{"loss.disrupt_layers": "0,1", "encoder.use_cls_token": "true"})
        again = config_from_items(config_items(cfg))
        assert config_items(again) == config_items(cfg)


class TestPretrain:
    def test_zero_steps_checkpoint_equals_init(self, tmp_path):
        cfg = tiny_cfg(**{"train.steps": 0})
        arts = pretrain(cfg, tmp_path / "run")
        _, enc, state = load_train_checkpoint(arts.checkpoint_path)
        fresh = Encoder(cfg.encoder, Rng(cfg.seed))
        for name in fresh.params:
            npt.assert_array_equal(enc.params[name].data, fresh.params[name].data)
        assert state.step == 0

    def test_smoke_writes_artifacts(self, tmp_path):
        arts = pretrain(tiny_cfg(), tmp_path / "run")
        assert arts.checkpoint_path.exists()
        assert arts.loss_csv_path.exists()
        assert arts.manifest_path.exists()
        lines = arts.loss_csv_path.read_text().splitlines()
        assert lines[0] == "step,l_mim,l_denoise,l_disrupt,total,lr"
        assert len(lines) == 5  # header + 4 logged steps
        assert "status=ok" in arts.manifest_path.read_text()

    def test_losses_finite_and_components_positive(self, tmp_path):
        arts = pretrain(tiny_cfg(), tmp_path / "run")
        rows = [line.split(",") for line in arts.loss_csv_path.read_text().splitlines()[1:]]
        vals = np.array([[float(v) for v in row[1:]] for row in rows])
        assert np.all(np.isfinite(vals))
        assert np.all(vals[:, :4] >= 0)

    def test_same_seed_bit_identical_checkpoints(self, tmp_path):
        a = pretrain(tiny_cfg(), tmp_path / "a")
        b = pretrain(tiny_cfg(), tmp_path / "b")
        assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()

    def test_different_seed_differs(self, tmp_path):
        a = pretrain(tiny_cfg(), tmp_path / "a")
        b = pretrain(tiny_cfg(**{"train.seed": 1}), tmp_path / "b")
        assert a.checkpoint_path.read_bytes() != b.checkpoint_path.read_bytes()

    def test_periodic_checkpoints(self, tmp_path):
        cfg = tiny_cfg(**{"train.checkpoint_every": 2})
        pretrain(cfg, tmp_path / "run")
        assert (tmp_path / "run" / "checkpoint_000002.nmim").exists()
        assert (tmp_path / "run" / "checkpoint_000004.nmim").exists()

    def test_strategies_all_run(self, tmp_path):
        for strategy in ("mim", "diffused", "hybrid"):
            cfg = tiny_cfg(**{"encoder.strategy": strategy, "train.steps": 2})
            arts = pretrain(cfg, tmp_path / strategy)
            assert arts.final_report is not None

    def test_mim_arm_has_zero_denoise_and_disrupt(self, tmp_path):
        cfg = tiny_cfg(**{"encoder.strategy": "mim", "train.steps": 2})
        arts = pretrain(cfg, tmp_path / "mim")
        assert arts.final_report.l_denoise == 0.0
        assert arts.final_report.l_disrupt == 0.0
        assert arts.final_report.counts[1] == 0
