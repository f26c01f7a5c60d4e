import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixelgen import checkpoint, data
from pixelgen.denoiser import Denoiser, DenoiserConfig
from pixelgen.errors import ConfigError, DimensionError, FormatError, NumericalError, VersionError
from pixelgen.flow import fm_loss
from pixelgen.perception import Extractors, GlobalFeatureNet, LocalFeatureNet, PerceptualConfig
from pixelgen.trainer import (
    METRICS_HEADER,
    EmaState,
    OptimizerState,
    TrainConfig,
    Trainer,
    adamw_update,
    clip_grad_norm,
    ema_update,
    global_norm,
    load_checkpoint,
    make_batch,
    run,
    train_step,
)

SMALL = DenoiserConfig(width=16, depth=2, heads=2, repa_tap=0)


@pytest.fixture(scope="module")
def nets():
    return Extractors(LocalFeatureNet(widths=(4, 8, 8)), GlobalFeatureNet(stages=1))


def small_trainer(nets, pcfg=None, **train):
    cfg = TrainConfig(**{"batch_size": 4, "lr": 1e-3, "ema_decay": 0.9, **train})
    return Trainer(SMALL, pcfg or PerceptualConfig(gate_threshold=0.0), cfg, nets=nets)


def params_bytes(model):
    return {k: v.tobytes() for k, v in model.state_dict().items()}


class TestAdamW:
    def test_first_step_magnitude(self):
        w = {"w": np.array([0.5])}
        adamw_update(w, {"w": np.array([1.0])}, OptimizerState.zeros_like(w))
        assert w["w"][0] - 0.5 == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-9)

    def test_zero_gradient_is_a_no_op(self):
        w = {"w": np.array([0.3, -2.0])}
        adamw_update(w, {"w": np.zeros(2)}, OptimizerState.zeros_like(w))
        np.testing.assert_array_equal(w["w"], [0.3, -2.0])

    def test_decoupled_decay(self):
        w = {"w": np.array([2.0])}
        adamw_update(w, {"w": np.zeros(1)}, OptimizerState.zeros_like(w, lr=0.1, weight_decay=0.5))
        assert w["w"][0] == pytest.approx(2.0 * (1 - 0.05))

    def test_shape_mismatch(self):
        w = {"w": np.zeros(3)}
        with pytest.raises(DimensionError):
            adamw_update(w, {"w": np.zeros(2)}, OptimizerState.zeros_like(w))

    def test_deterministic_100_steps(self):
        def trajectory():
            rng = np.random.default_rng(4)
            w = {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 2))}
            st_ = OptimizerState.zeros_like(w)
            for _ in range(100):
                adamw_update(w, {k: np.sin(v) for k, v in w.items()}, st_)
            return {k: v.tobytes() for k, v in w.items()}

        assert trajectory() == trajectory()


class TestEma:
    def test_one_step(self):
        ema = EmaState({"p": np.zeros(1)}, 0.9999)
        ema_update(ema, {"p": np.ones(1)})
        assert ema.shadow["p"][0] == pytest.approx(1e-4, rel=1e-9)

    @given(st.floats(0.0, 0.999), st.integers(1, 30))
    @settings(max_examples=30, deadline=None)
    def test_geometric_decay(self, decay, k):
        ema = EmaState({"p": np.array([5.0])}, decay)
        for _ in range(k):
            ema_update(ema, {"p": np.array([2.0])})
        assert abs(ema.shadow["p"][0] - 2.0) == pytest.approx(decay**k * 3.0, rel=1e-9, abs=1e-12)

    def test_zero_decay_copies(self):
        ema = EmaState({"p": np.zeros(3)}, 0.0)
        ema_update(ema, {"p": np.array([1.0, 2.0, 3.0])})
        np.testing.assert_array_equal(ema.shadow["p"], [1.0, 2.0, 3.0])

    def test_decay_range(self):
        with pytest.raises(ConfigError):
            EmaState({}, 1.0)


class TestClip:
    def test_halves_above_threshold(self):
        g = {"a": np.array([1.2]), "b": np.array([1.6])}  # norm 2
        out, norm = clip_grad_norm(g, 1.0)
        assert norm == pytest.approx(2.0)
        np.testing.assert_allclose(out["a"], [0.6])
        np.testing.assert_allclose(out["b"], [0.8])

    def test_below_threshold_unchanged(self):
        g = {"a": np.array([0.3, 0.4])}
        out, norm = clip_grad_norm(g, 1.0)
        assert norm == pytest.approx(0.5)
        assert out["a"] is g["a"]

    @given(st.integers(0, 2**20), st.floats(0.01, 10.0), st.floats(0.01, 10.0))
    @settings(max_examples=50, deadline=None)
    def test_post_clip_norm(self, seed, scale, max_norm):
        rng = np.random.default_rng(seed)
        g = {"a": rng.standard_normal(7) * scale, "b": rng.standard_normal((3, 2)) * scale}
        out, norm = clip_grad_norm(g, max_norm)
        assert global_norm(out) == pytest.approx(min(norm, max_norm), abs=1e-6)


class TestTrainStep:
    def test_degenerate_objective_is_plain_flow_matching(self, nets):
        tr = small_trainer(nets, PerceptualConfig(lambda1=0, lambda2=0, repa_weight=0))
        tr.model.head.weight.data[:] = 0.01
        images, labels = data.gen_batch(0, range(4))
        batch = make_batch(images, labels, 0, tr.cfg)
        dropped = tr.model.drop_labels(labels, tr.cfg.seed, 0, range(4))
        expected = fm_loss(tr.model(batch.x_t, batch.t, dropped).x_pred, batch).item()
        res = train_step(tr.model, images, labels, 0, tr.pcfg, tr.opt, tr.ema, tr.nets, tr.cfg)
        assert res.breakdown.total == res.breakdown.fm == pytest.approx(expected, rel=1e-6)
        assert res.breakdown.lpips == res.breakdown.pdino == res.breakdown.repa == 0.0

    def test_total_recombines(self, nets):
        tr = small_trainer(nets)
        for res in tr.run(3):
            assert res.breakdown.total == pytest.approx(res.breakdown.recombine(tr.pcfg), abs=1e-6)

    def test_same_seed_same_losses(self, nets):
        a = [r.breakdown.total for r in small_trainer(nets, seed=3).run(50)]
        b = [r.breakdown.total for r in small_trainer(nets, seed=3).run(50)]
        assert a == b
        c = [r.breakdown.total for r in small_trainer(nets, seed=4).run(5)]
        assert c != a[:5]

    def test_loss_decreases_on_fixed_batch(self, nets):
        images, labels = data.gen_batch(0, range(8))
        wins = 0
        for seed in range(3):
            tr = small_trainer(nets, seed=seed)
            # reuse step 0's draws so only the parameters change
            losses = [train_step(tr.model, images, labels, 0, tr.pcfg, tr.opt, tr.ema, tr.nets, tr.cfg)
                      .breakdown.total for _ in range(200)]
            wins += losses[-1] < losses[0]
        assert wins >= 2

    def test_non_finite_loss_aborts(self, nets):
        tr = small_trainer(nets)
        tr.model.head.weight.data[:] = np.nan
        images, labels = data.gen_batch(0, range(4))
        with pytest.raises(NumericalError, match="step 7"):
            train_step(tr.model, images, labels, 7, tr.pcfg, tr.opt, tr.ema, tr.nets, tr.cfg)

    def test_extractors_frozen(self, nets):
        before = nets.checksum()
        small_trainer(nets).run(2)
        assert nets.checksum() == before
        assert all(p.grad is None for p in nets.parameters())

    def test_ema_never_trained(self, nets):
        tr = small_trainer(nets, ema_decay=0.5)
        tr.run(2)
        shadow = {k: v.copy() for k, v in tr.ema.shadow.items()}
        tr.ema_model()
        assert all(np.array_equal(shadow[k], tr.ema.shadow[k]) for k in shadow)
        assert not all(np.array_equal(shadow[k], tr.model.state_dict()[k]) for k in shadow)


class TestCheckpoint:
    def test_round_trip_bitwise(self, nets, tmp_path):
        tr = small_trainer(nets)
        tr.run(3)
        path = tr.save(tmp_path / "a.ckpt")
        fresh = load_checkpoint(path, small_trainer(nets))
        a, b = tr.state_tensors(), fresh.state_tensors()
        assert a.keys() == b.keys()
        assert all(a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes() for k in a)

    def test_truncated_file_applies_nothing(self, nets, tmp_path):
        tr = small_trainer(nets)
        tr.run(2)
        raw = (tr.save(tmp_path / "a.ckpt")).read_bytes()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(raw[: len(raw) // 2])
        target = small_trainer(nets)
        before = params_bytes(target.model)
        with pytest.raises(FormatError) as info:
            load_checkpoint(bad, target)
        assert info.value.offset is not None
        assert params_bytes(target.model) == before and target.step == 0

    def test_version_rejected(self, nets, tmp_path):
        raw = bytearray(small_trainer(nets).save(tmp_path / "a.ckpt").read_bytes())
        raw[4:8] = (2).to_bytes(4, "little")
        (tmp_path / "v.ckpt").write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_checkpoint(tmp_path / "v.ckpt", small_trainer(nets))

    def test_wrong_architecture_rejected(self, nets, tmp_path):
        path = small_trainer(nets).save(tmp_path / "a.ckpt")
        other = Trainer(DenoiserConfig(width=8, depth=2, heads=2, repa_tap=0), PerceptualConfig(),
                        TrainConfig(batch_size=4), nets=nets)
        with pytest.raises((DimensionError, FormatError)):
            load_checkpoint(path, other)

    def test_resume_matches_uninterrupted(self, nets, tmp_path):
        whole = small_trainer(nets)
        whole.run(10)
        first = small_trainer(nets)
        first.run(5)
        second = load_checkpoint(first.save(tmp_path / "half.ckpt"), small_trainer(nets))
        second.run(5)
        assert params_bytes(second.model) == params_bytes(whole.model)
        assert all(second.ema.shadow[k].tobytes() == whole.ema.shadow[k].tobytes() for k in whole.ema.shadow)


class TestRunLoop:
    def test_outputs_and_resume(self, nets, tmp_path):
        cfg = dict(checkpoint_every=2, sample_every=0)
        run(small_trainer(nets, **cfg), tmp_path / "full", steps=4)
        run(small_trainer(nets, **cfg), tmp_path / "split", steps=2)
        run(small_trainer(nets, **cfg), tmp_path / "split", steps=4, resume=True)
        full = (tmp_path / "full" / "metrics.csv").read_text()
        assert full.splitlines()[0] == METRICS_HEADER
        assert len(full.splitlines()) == 5
        assert (tmp_path / "split" / "metrics.csv").read_text() == full
        for name in ("final.ckpt", "ema.ckpt", "step_2.ckpt", "samples_4.ppm"):
            assert (tmp_path / "full" / name).exists(), name
        blob = checkpoint.load(tmp_path / "full" / "final.ckpt")
        assert int(blob["meta/step"][0]) == 4

    def test_ema_checkpoint_loads_as_model(self, nets, tmp_path):
        tr = small_trainer(nets)
        tr.run(2)
        path = tr.save_ema(tmp_path / "ema.ckpt")
        from pixelgen.trainer import load_model

        m = load_model(path, SMALL)
        assert isinstance(m, Denoiser)
        assert all(m.state_dict()[k].tobytes() == v.tobytes() for k, v in tr.ema.shadow.items())
