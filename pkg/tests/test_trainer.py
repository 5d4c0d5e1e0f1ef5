import numpy as np
import pytest

from spikelat.autodiff import Tensor
from spikelat.data import synth_blobs
from spikelat.errors import ContractError, FormatError, TrainingAbort
from spikelat.network import build_model, preset_spec
from spikelat.trainer import (
    AdamW,
    TrainConfig,
    cosine_lr,
    evaluate,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train,
    write_metrics_csv,
)

from helpers import rel_err


def reference_adamw(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    """Textbook decoupled update, coded straight from the recurrence."""
    p = np.array(p0, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
    return p


class TestAdamW:
    def run_opt(self, p0, grads, **kw):
        p = Tensor(np.array(p0, dtype=np.float64))
        opt = AdamW([("p", p)], **kw)
        for g in grads:
            p.grad = np.array(g, dtype=np.float64)
            opt.step()
        return p.data

    def test_single_step_analytic(self):
        got = self.run_opt([1.0], [[0.5]], lr=0.1, weight_decay=0.1)
        mhat = 0.5
        vhat = 0.25
        expect = 1.0 - 0.1 * (mhat / (np.sqrt(vhat) + 1e-8) + 0.1 * 1.0)
        np.testing.assert_allclose(got, [expect], rtol=1e-12)

    def test_matches_reference_over_many_steps(self):
        rng = np.random.default_rng(0)
        p0 = rng.normal(size=7)
        grads = [rng.normal(size=7) for _ in range(25)]
        got = self.run_opt(p0, grads, lr=0.01, weight_decay=0.05)
        ref = reference_adamw(p0, grads, lr=0.01, wd=0.05)
        assert rel_err(got, ref) < 1e-12

    def test_decay_is_decoupled_from_moments(self):
        # a coupled L2 pushes wd*p through the moment estimates; with a zero
        # gradient that changes the step direction, decoupled decay does not
        got = self.run_opt([2.0], [[0.0], [0.0]], lr=0.1, weight_decay=0.1)
        expect = 2.0 * (1 - 0.1 * 0.1) ** 2
        np.testing.assert_allclose(got, [expect], rtol=1e-12)

        def coupled(p0, steps, lr, wd):
            p, m, v = p0, 0.0, 0.0
            for t in range(1, steps + 1):
                g = wd * p
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                p = p - lr * (m / (1 - 0.9**t)) / (
                    np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            return p

        assert abs(got[0] - coupled(2.0, 2, 0.1, 0.1)) > 1e-3

    def test_zero_decay_leaves_unforced_params_alone(self):
        got = self.run_opt([3.0], [[0.0]], lr=0.5, weight_decay=0.0)
        np.testing.assert_allclose(got, [3.0])

    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(ContractError):
            AdamW([("p", Tensor([1.0]))], lr=0.0)
        with pytest.raises(ContractError):
            AdamW([("p", Tensor([1.0]))], betas=(1.0, 0.999))


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 0.4) == 0.4
        np.testing.assert_allclose(cosine_lr(50, 100, 0.4), 0.2, rtol=1e-12)
        np.testing.assert_allclose(cosine_lr(100, 100, 0.4), 0.0, atol=1e-15)

    def test_monotone_decay(self):
        vals = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_clamps_out_of_range_steps(self):
        assert cosine_lr(-5, 10, 1.0) == 1.0
        np.testing.assert_allclose(cosine_lr(15, 10, 1.0), 0.0, atol=1e-15)


class TestCheckpoints:
    def arrays(self):
        rng = np.random.default_rng(1)
        return {
            "w": rng.normal(size=(3, 4)),
            "b": rng.normal(size=4),
            "scalar": np.array(2.5),
            "deep": rng.normal(size=(2, 2, 2, 2)),
        }

    def test_roundtrip_values_and_shapes(self, tmp_path):
        arrays = self.arrays()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, arrays)
        back = read_checkpoint(path)
        assert set(back) == set(arrays)
        for name, a in arrays.items():
            assert back[name].shape == a.shape
            np.testing.assert_allclose(back[name], a, rtol=1e-6)

    def test_double_save_is_byte_identical(self, tmp_path):
        arrays = self.arrays()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, arrays)
        save_checkpoint(p2, read_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_offset_zero(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(FormatError) as e:
            read_checkpoint(p)
        assert e.value.offset == 0

    def test_bad_version_offset_four(self, tmp_path):
        import struct

        p = tmp_path / "x.ckpt"
        p.write_bytes(b"SPKL" + struct.pack("<II", 9, 0))
        with pytest.raises(FormatError) as e:
            read_checkpoint(p)
        assert e.value.offset == 4

    def test_truncation_reports_position(self, tmp_path):
        p = tmp_path / "x.ckpt"
        save_checkpoint(p, {"w": np.zeros((4, 4))})
        whole = p.read_bytes()
        p.write_bytes(whole[:-7])
        with pytest.raises(FormatError) as e:
            read_checkpoint(p)
        assert "truncated" in str(e.value)
        assert e.value.offset is not None

    def test_trailing_garbage_rejected(self, tmp_path):
        p = tmp_path / "x.ckpt"
        save_checkpoint(p, {"w": np.zeros(3)})
        p.write_bytes(p.read_bytes() + b"\x00\x01")
        with pytest.raises(FormatError, match="trailing"):
            read_checkpoint(p)

    def test_model_state_roundtrip(self, tmp_path):
        spec = preset_spec("mlp-mini", (1, 8, 8), classes=3, timesteps=4,
                           hidden=16)
        model = build_model(spec, seed=5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.state_arrays())
        clone = load_checkpoint(path, spec, seed=99)
        for (na, a), (nb, b) in zip(model.parameters(), clone.parameters()):
            assert na == nb
            np.testing.assert_allclose(a.data, b.data, rtol=1e-6)
        path2 = tmp_path / "m2.ckpt"
        save_checkpoint(path2, clone.state_arrays())
        assert path.read_bytes() == path2.read_bytes()


def tiny_setup(seed=0, n=160, classes=3):
    train_ds = synth_blobs(n, classes=classes, seed=seed)
    eval_ds = synth_blobs(60, classes=classes, seed=seed + 1000)
    spec = preset_spec("mlp-mini", (1, 8, 8), classes=classes, timesteps=4,
                       hidden=32)
    model = build_model(spec, seed=seed)
    return model, train_ds, eval_ds, spec


class TestTrainLoop:
    def test_loss_decreases_and_accuracy_rises(self):
        model, tr, ev, _ = tiny_setup()
        cfg = TrainConfig(epochs=4, batch_size=32, lr=0.01, seed=0)
        history = train(model, tr, ev, cfg)
        assert len(history) == 4
        assert history[-1].train_loss < history[0].train_loss
        assert history[-1].accuracy > 0.5

    def test_history_fields_are_sane(self):
        model, tr, ev, _ = tiny_setup(seed=1)
        history = train(model, tr, ev, TrainConfig(epochs=2, batch_size=32,
                                                   lr=0.01, seed=1))
        for row in history:
            assert 0.0 <= row.accuracy <= 1.0
            assert 1.0 <= row.mean_exit <= 4.0
            assert 0.0 <= row.sparsity <= 1.0
            assert 0.0 <= row.fallback_rate <= 1.0
            assert row.lr >= 0.0

    def test_repeat_run_is_identical(self, tmp_path):
        outs = []
        for rep in range(2):
            model, tr, ev, _ = tiny_setup(seed=2)
            history = train(model, tr, ev,
                            TrainConfig(epochs=2, batch_size=32, lr=0.01,
                                        seed=2))
            csv = tmp_path / f"m{rep}.csv"
            ckpt = tmp_path / f"c{rep}.ckpt"
            write_metrics_csv(csv, history)
            save_checkpoint(ckpt, model.state_arrays())
            outs.append((csv.read_bytes(), ckpt.read_bytes()))
        assert outs[0] == outs[1]

    def test_vanilla_loss_mode_runs(self):
        model, tr, ev, _ = tiny_setup(seed=3)
        history = train(model, tr, ev,
                        TrainConfig(epochs=1, batch_size=32, lr=0.01,
                                    loss="vanilla", seed=3))
        assert np.isfinite(history[0].train_loss)

    def test_poisoned_model_aborts_cleanly(self):
        model, tr, ev, _ = tiny_setup(seed=4)
        model.encoder.k.data[...] = np.nan
        with pytest.raises(TrainingAbort, match="epoch 1"):
            train(model, tr, ev, TrainConfig(epochs=1, batch_size=32, seed=4))

    def test_class_mismatch_rejected(self):
        model, tr, ev, _ = tiny_setup(seed=5)
        bad = synth_blobs(40, classes=4, seed=9)
        with pytest.raises(ContractError):
            train(model, bad, ev, TrainConfig(epochs=1))

    def test_config_validation(self):
        with pytest.raises(ContractError):
            TrainConfig(loss="hinge")
        with pytest.raises(ContractError):
            TrainConfig(epochs=0)


class TestEvaluate:
    def test_rate_and_first_spike_modes(self):
        model, tr, ev, _ = tiny_setup(seed=6)
        first = evaluate(model, ev, decode="first")
        rate = evaluate(model, ev, decode="rate")
        assert 0.0 <= first.accuracy <= 1.0
        assert 0.0 <= rate.accuracy <= 1.0
        assert rate.mean_exit == model.spec.timesteps
        assert len(first.decisions) == len(ev)
        with pytest.raises(ContractError):
            evaluate(model, ev, decode="argmax")


class TestMetricsCsv:
    def test_layout(self, tmp_path):
        from spikelat.trainer import EpochRow

        rows = [EpochRow(1, 0.01, 1.5, 0.5, 2.25, 0.125, 0.0)]
        p = tmp_path / "m.csv"
        write_metrics_csv(p, rows)
        text = p.read_text().splitlines()
        assert text[0] == ("epoch,lr,train_loss,accuracy,mean_exit,"
                           "sparsity,fallback_rate")
        assert text[1] == "1,0.01,1.5,0.5,2.25,0.125,0"
        assert len(text) == 2
