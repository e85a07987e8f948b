import csv

import numpy as np
import pytest

from dudotrans import gradcore as gc
from dudotrans import model as M
from dudotrans import simulate, tomo, train
from dudotrans.gradcore import Tensor
from dudotrans.swin import StmConfig
from dudotrans.train import AdamState, TrainConfig, adam_step

TINY_STM = StmConfig(embed_dim=8, num_heads=2, window_size=4)


class TestAdamStep:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        st = AdamState.zeros_like(p)
        out = adam_step(p, {"w": np.zeros(3)}, st)
        np.testing.assert_array_equal(out["w"], p["w"])
        assert st.t == 1

    def test_first_step_hand_value(self):
        p = {"theta": np.array([0.0])}
        st = AdamState.zeros_like(p)
        out = adam_step(p, {"theta": np.array([1.0])}, st)
        assert out["theta"][0] == pytest.approx(-1e-4 / (1.0 + 1e-8), rel=1e-12)
        assert st.m["theta"][0] == pytest.approx(0.1)
        assert st.v["theta"][0] == pytest.approx(0.001)

    def test_quadratic_200_steps(self):
        p = {"theta": np.array([1.0])}
        st = AdamState.zeros_like(p, lr=1e-2)
        for _ in range(200):
            p = adam_step(p, {"theta": 2.0 * p["theta"]}, st)
        assert abs(p["theta"][0]) < 0.5

    def test_lr_zero_is_bitwise_noop(self, rng):
        p = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": rng.standard_normal(5).astype(np.float32)}
        st = AdamState.zeros_like(p, lr=0.0)
        out = p
        for _ in range(5):
            out = adam_step(out, {k: rng.standard_normal(v.shape).astype(np.float32) * 1e3 for k, v in p.items()}, st)
        for k in p:
            assert out[k].tobytes() == p[k].tobytes()

    def test_moments_finite_for_finite_grads(self, rng):
        p = {"a": np.zeros(4)}
        st = AdamState.zeros_like(p)
        for scale in (0.0, 1e-30, 1e30):
            p = adam_step(p, {"a": scale * rng.standard_normal(4)}, st)
            assert np.all(np.isfinite(st.m["a"])) and np.all(np.isfinite(st.v["a"]))
            assert np.all(np.isfinite(p["a"]))

    def test_shape_mismatch(self):
        p = {"a": np.zeros(3)}
        with pytest.raises(ValueError, match="shape|gradient"):
            adam_step(p, {"a": np.zeros(4)}, AdamState.zeros_like(p))

    def test_missing_grad_skipped(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        out = adam_step(p, {"a": np.ones(2), "b": None}, AdamState.zeros_like(p))
        np.testing.assert_array_equal(out["b"], p["b"])
        assert out["a"][0] < 1.0

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(checkpoint_interval=0),
                                     dict(lr=-1.0)])
    def test_config_invariants(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    g = tomo.ScanGeometry(num_views=8, num_detectors=64, image_size=(32, 32))
    simulate.build_dataset(simulate.phantom_family(5, seed=1), g, 24, simulate.NoiseConfig(seed=2), out)
    return out / "manifest.json"


def _tiny_model(manifest, seed=0):
    items = train.load_split(manifest, "train")
    cfg = M.ModelConfig(geometry=items[0]["geometry"], srt=M.SrtConfig(1, 1, 1, TINY_STM),
                        rirm=M.RirmConfig(1, 1, 2, TINY_STM), seed=seed)
    return M.DuDoTransModel(cfg), items


class TestTrainLoop:
    def test_split_sizes(self, tiny_data):
        assert len(train.load_split(tiny_data, "train")) == 3
        assert len(train.load_split(tiny_data, "test")) == 2

    def test_two_runs_identical_logs(self, tiny_data, tmp_path):
        logs = []
        for run in ("a", "b"):
            model, items = _tiny_model(tiny_data)
            res = train.train_loop(model, items, TrainConfig(epochs=2, seed=4, lr=1e-3), tmp_path / run)
            logs.append((tmp_path / run / "loss_log.csv").read_text())
            assert [p.name for p in res.checkpoints] == ["ckpt_epoch2.ddtc"]
        assert logs[0] == logs[1]

    def test_log_format(self, tiny_data, tmp_path):
        model, items = _tiny_model(tiny_data)
        train.train_loop(model, items, TrainConfig(epochs=2, checkpoint_interval=1, lr=1e-3), tmp_path)
        with open(tmp_path / "loss_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "item", "loss", "loss_srt", "loss_dc", "loss_rirm"]
        assert len(rows) == 1 + 2 * 3
        assert all(np.isfinite(float(v)) for r in rows[1:] for v in r[2:])
        assert sorted({r[1] for r in rows[1:]}) == ["0", "1", "2"]
        assert (tmp_path / "ckpt_epoch1.ddtc").exists() and (tmp_path / "ckpt_epoch2.ddtc").exists()

    def test_final_checkpoint_matches_model(self, tiny_data, tmp_path):
        model, items = _tiny_model(tiny_data)
        res = train.train_loop(model, items, TrainConfig(epochs=1, lr=1e-3), tmp_path)
        loaded, hyper, moments = M.load_checkpoint(res.checkpoints[-1])
        for k, v in model.state_dict().items():
            assert v.tobytes() == loaded.state_dict()[k].tobytes()
        assert hyper["t"] == 3

    def test_loss_decreases(self, tiny_data, tmp_path):
        model, items = _tiny_model(tiny_data)
        res = train.train_loop(model, items, TrainConfig(epochs=6, lr=2e-3), tmp_path)
        assert res.epoch_means[-1] < res.epoch_means[0]

    def test_batched_training_runs(self, tiny_data, tmp_path):
        model, items = _tiny_model(tiny_data)
        res = train.train_loop(model, items, TrainConfig(epochs=1, batch_size=2, lr=1e-3), tmp_path)
        assert [r["item"].count("+") for r in res.rows] == [1, 0]

    def test_nan_aborts(self, tiny_data, tmp_path):
        model, items = _tiny_model(tiny_data)
        bad = [dict(items[0], phantom=np.full_like(items[0]["phantom"], np.nan))]
        with pytest.raises(train.NumericalError, match="epoch 1"):
            train.train_loop(model, bad, TrainConfig(epochs=1), tmp_path)

    def test_empty_split(self, tmp_path, tiny_data):
        model, _ = _tiny_model(tiny_data)
        with pytest.raises(ValueError, match="empty"):
            train.train_loop(model, [], TrainConfig(epochs=1), tmp_path)


class TestSmoke:
    def test_identity_targets_start_at_zero(self, tiny_data):
        model, items = _tiny_model(tiny_data)
        geom = items[0]["geometry"]
        ident = []
        for it in items:
            noisy32 = Tensor(it["noisy"]).data
            x1 = Tensor(M.fbp_batch(noisy32[None, None], geom)).data[0, 0]
            ident.append(dict(it, clean=noisy32, phantom=x1))
        assert train.evaluate_loss(model, ident) == 0.0

    def test_short_run_reproducible(self, tiny_data):
        reports = []
        for _ in range(2):
            model, items = _tiny_model(tiny_data)
            reports.append(train.overfit_smoke(model, items, steps=6, lr=1e-3))
        assert reports[0]["history"] == reports[1]["history"]
        assert reports[0]["final"] == reports[1]["final"]


def test_gradients_independent_of_thread_limit(tiny_data):
    from threadpoolctl import threadpool_limits

    grads = []
    for limit in (1, None):
        model, items = _tiny_model(tiny_data)
        with threadpool_limits(limits=limit):
            loss, _ = M.total_loss(*model(items[0]["noisy"]), items[0]["clean"], items[0]["phantom"])
            gc.backward(loss)
        grads.append({k: p.grad.copy() for k, p in model.named_parameters()})
    for k in grads[0]:
        assert grads[0][k].tobytes() == grads[1][k].tobytes()
