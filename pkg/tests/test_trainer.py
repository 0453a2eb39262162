import csv

import numpy as np
import pytest

from olbp.dataset import SceneSpec
from olbp.model import LOSS_TERMS, Network, OLBPConfig
from olbp.pipeline import synthetic_samples
from olbp.tensor import NumericalError
from olbp.trainer import (CSVLog, KahanSum, TrainConfig, TrainState, accumulate_gradients, load_train_checkpoint,
                          lr_schedule, resize_gt_pyramid, sample_indices, save_train_checkpoint, sgd_step,
                          train_loop)

TINY_SPEC = SceneSpec(size=16, objects=(2, 2), object_size=(4, 7), subjects=2)


@pytest.fixture(scope="module")
def tiny_samples():
    return synthetic_samples(4, TINY_SPEC, seed=0)


def tiny_train_cfg(**kw):
    base = dict(lr=1e-2, total_iters=6, lr_drop_iter=4, iter_size=2, batch_size=1, rng_seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestSGD:
    def test_vanilla(self):
        p = {"w": np.array([1.0, -2.0])}
        sgd_step(p, {"w": np.array([0.5, 0.5])}, {}, lr=0.1, momentum=0.0, weight_decay=0.0)
        np.testing.assert_array_equal(p["w"], [0.95, -2.05])

    def test_quadratic_bowl(self):
        x, v = 3.0, 0.0
        p, state = {"x": np.array([3.0])}, {}
        for _ in range(50):
            sgd_step(p, {"x": p["x"].copy()}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
            v = 0.9 * v + x
            x = x - 0.1 * v
            assert abs(p["x"][0] - x) < 1e-12

    def test_weight_decay_additive(self):
        p, state = {"w": np.array([2.0])}, {}
        sgd_step(p, {"w": np.array([0.0])}, state, lr=1.0, momentum=0.9, weight_decay=1e-4)
        assert state["w"][0] == pytest.approx(2e-4)
        assert p["w"][0] == pytest.approx(2.0 - 2e-4)

    def test_no_decay_zero_grad_unchanged(self):
        p = {"a": np.array([1.5, 2.5]), "b": np.array([3.0])}
        sgd_step(p, {"a": np.array([1.0, 1.0])}, {}, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert p["b"][0] == 3.0

    def test_non_finite_named(self):
        with pytest.raises(NumericalError, match="enc1.conv1.w"):
            sgd_step({"enc1.conv1.w": np.zeros(2)}, {"enc1.conv1.w": np.array([np.nan, 0])}, {}, 0.1, 0.9, 0.0)


class TestSchedule:
    def test_full_schedule(self):
        cfg = TrainConfig.paper()
        assert lr_schedule(0, cfg) == 8e-8
        assert lr_schedule(13_999, cfg) == 8e-8
        assert lr_schedule(14_000, cfg) == pytest.approx(8e-9, rel=1e-15)
        assert lr_schedule(29_999, cfg) == pytest.approx(8e-9, rel=1e-15)
        with pytest.raises(ValueError):
            lr_schedule(30_000, cfg)

    def test_full_defaults(self):
        c = TrainConfig.paper()
        assert (c.dropout, c.batch_size, c.iter_size, c.momentum, c.weight_decay) == (0.5, 1, 8, 0.9, 1e-4)

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(iter_size=0), dict(momentum=1.0), dict(dropout=1.0)])
    def test_validate(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()


class TestHelpers:
    def test_kahan(self):
        k = KahanSum()
        for _ in range(10):
            k.add(np.array([0.1]))
        assert k.total[0] == pytest.approx(1.0, abs=1e-16)

    def test_pyramid(self, rng):
        gs = (rng.random((288, 288)) > 0.5).astype(np.uint8)
        gb = np.zeros_like(gs)
        pyr = resize_gt_pyramid(gs, gb, [(288, 288), (18, 18)])
        np.testing.assert_array_equal(pyr[0][0], gs)
        assert set(np.unique(pyr[1][0])) <= {0, 1}
        assert pyr[1][1].sum() == 0

    def test_sample_indices_wrap(self):
        idx = sample_indices(0, 10, 4, seed=0)
        assert sorted(idx[:4]) == [0, 1, 2, 3] and sorted(idx[4:8]) == [0, 1, 2, 3]
        assert sample_indices(6, 4, 4, 0) == idx[6:10]


class TestAccumulation:
    def test_iter_size_matches_full_batch(self, tiny_samples):
        net = Network(OLBPConfig.tiny(), dtype=np.float64)
        idx = list(range(8))
        acc, _, la = accumulate_gradients(net, tiny_samples, [[i] for i in idx], 0.0, 0, 0)
        full, _, lb = accumulate_gradients(net, tiny_samples, [idx], 0.0, 0, 0)
        assert la == pytest.approx(lb, abs=1e-10)
        for name in acc:
            np.testing.assert_allclose(acc[name], full[name], rtol=0, atol=1e-10)

    def test_passes_per_step(self, tiny_samples, monkeypatch):
        import olbp.trainer as tr
        calls = []
        real = tr.forward
        monkeypatch.setattr(tr, "forward", lambda *a, **k: calls.append(1) or real(*a, **k))
        train_loop(Network(OLBPConfig.tiny()), tiny_samples, tiny_train_cfg(total_iters=1, iter_size=8))
        assert len(calls) == 8


class TestLoop:
    def test_deterministic(self, tiny_samples):
        runs = []
        for _ in range(2):
            net = Network(OLBPConfig.tiny())
            st = train_loop(net, tiny_samples, tiny_train_cfg())
            runs.append(([h["total"] for h in st.history], net.state_dict()))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            assert runs[0][1][k].tobytes() == runs[1][1][k].tobytes()

    def test_resume_bit_identical(self, tiny_samples, tmp_path):
        cfg = tiny_train_cfg(checkpoint_every=3)
        ref = Network(OLBPConfig.tiny())
        ref_state = train_loop(ref, tiny_samples, cfg, checkpoint_dir=tmp_path)
        part = Network(OLBPConfig.tiny())
        train_loop(part, tiny_samples, cfg, stop_at=3)
        save_train_checkpoint(tmp_path / "mine.olbp", part, cfg, TrainState(3, {}))
        net, cfg2, state = load_train_checkpoint(tmp_path / "ckpt_000003.olbp")
        assert state.iteration == 3 and cfg2 == cfg
        state = train_loop(net, tiny_samples, cfg2, state=state)
        assert [h["total"] for h in state.history] == [h["total"] for h in ref_state.history[3:]]
        for k, v in ref.state_dict().items():
            assert v.tobytes() == net.state_dict()[k].tobytes()
        assert (tmp_path / "ckpt_000006.olbp").exists()

    def test_checkpoint_meta(self, tiny_samples, tmp_path):
        from olbp.checkpoint import load_checkpoint
        cfg = tiny_train_cfg(total_iters=2)
        net = Network(OLBPConfig.tiny())
        st = train_loop(net, tiny_samples, cfg)
        save_train_checkpoint(tmp_path / "c.olbp", net, cfg, st)
        sections, meta = load_checkpoint(tmp_path / "c.olbp")
        assert meta["iteration"] == 2
        assert meta["rng"] == {"seed": 3, "sample_cursor": 4}
        assert set(sections["momentum"]) == {n for n, p in net.params.items() if p.learnable}

    def test_csv_log(self, tiny_samples, tmp_path):
        log = CSVLog(tmp_path / "log.csv")
        train_loop(Network(OLBPConfig.tiny()), tiny_samples, tiny_train_cfg(total_iters=3), callbacks=[log])
        log.close()
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0] == ["iteration", "lr"] + list(LOSS_TERMS) + ["total"]
        assert len(rows) == 4 and rows[1][0] == "1"
        assert float(rows[-1][1]) == 1e-2
        assert rows[1][2] != "" and float(rows[1][-1]) > 0

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_loop(Network(OLBPConfig.tiny()), [], tiny_train_cfg())

    def test_toy_descent(self):
        samples = synthetic_samples(2, SceneSpec(), seed=0)
        assert len(samples) == 4
        st = train_loop(Network(OLBPConfig.toy()), samples, TrainConfig.toy(total_iters=300, log_every=0))
        losses = [h["total"] for h in st.history]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
