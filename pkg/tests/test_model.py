import math

import numpy as np
import pytest

from olbp import ops
from olbp.model import (ABLATIONS, LOSS_TERMS, Ablation, ConfigError, Network, OLBPConfig, bpm_forward, forward,
                        image_tensor, olm_forward, total_loss)
from olbp.tensor import ShapeError, Tensor, no_grad


def toy_inputs(rng, size=64, n=1):
    img = rng.standard_normal((n, 3, size, size)).astype(np.float32) * 0.3
    fdm = np.zeros((size, size))
    fdm[size // 4:size // 2, size // 4:size // 2] = 1.0
    gs = (fdm > 0).astype(np.uint8)
    gb = np.zeros_like(gs)
    gb[size // 4 - 1, size // 4:size // 2] = 1
    return img, fdm, gs, gb


class TestConfig:
    def test_full_preset_values(self):
        c = OLBPConfig.paper()
        assert c.input_size == (288, 288, 3)
        assert c.block_channels == [64, 128, 256, 512, 512]
        assert c.olm_dilation_rates == [[1, 3, 5, 7]] * 3 + [[1, 2, 3, 4]] * 2
        assert c.olm_dilation_channels == [32, 64, 128, 256, 256]
        assert c.olm_2conv == [(7, 128), (5, 256), (5, 512), (3, 1024), (3, 1024)]

    def test_toy_is_scaled(self):
        p, t = OLBPConfig.paper(), OLBPConfig.toy()
        assert t.input_size == (64, 64, 3)
        assert t.block_channels == [c // 8 for c in p.block_channels]
        assert t.olm_dilation_rates == p.olm_dilation_rates

    @pytest.mark.parametrize("key,val", [("block_channels", [8, 16, 32, 64]),
                                         ("olm_dilation_rates", [[1, 3, 5]] * 5),
                                         ("input_size", (60, 64, 3))])
    def test_invalid(self, key, val):
        with pytest.raises(ConfigError):
            Network(OLBPConfig.toy(**{key: val}))

    def test_inconsistent_ablation(self):
        with pytest.raises(ConfigError):
            OLBPConfig.toy(ablation=Ablation(use_olm=False)).validate()

    def test_dict_roundtrip(self):
        c = OLBPConfig.toy(ablation=ABLATIONS["no_concat"])
        assert OLBPConfig.from_dict(c.to_dict()) == c
        assert c.config_hash() == OLBPConfig.from_dict(c.to_dict()).config_hash()

    def test_param_names_unique_and_seeded(self):
        a, b = Network(OLBPConfig.tiny()), Network(OLBPConfig.tiny())
        names = [n for n, _ in a.manifest()]
        assert len(names) == len(set(names))
        for n in names:
            np.testing.assert_array_equal(a.params[n].data, b.params[n].data)


class TestFullSizeGeometry:
    def test_encoder_and_olm(self, full_run):
        _, out, _ = full_run
        enc = {l: out.encoder_features[l].shape[1:] for l in range(1, 6)}
        assert enc == {1: (64, 288, 288), 2: (128, 144, 144), 3: (256, 72, 72), 4: (512, 36, 36), 5: (512, 18, 18)}
        olm = {l: out.olm_features[l].shape[1:] for l in range(1, 6)}
        assert olm == {1: (128, 288, 288), 2: (256, 144, 144), 3: (512, 72, 72), 4: (1024, 36, 36),
                       5: (1024, 18, 18)}

    def test_heads_and_sides(self, full_run):
        _, out, _ = full_run
        assert out.seg_final.shape == out.boundary_final.shape == (1, 2, 288, 288)
        assert out.bpm_side_seg[5].shape == (1, 2, 36, 36)
        kinds = [k for _, _, k in out.supervised()]
        assert kinds.count("seg") == 10 and kinds.count("bnd") == 5


class TestToyNetwork:
    def test_olm_resolutions(self, toy_net, rng):
        img, fdm, _, _ = toy_inputs(rng)
        with no_grad():
            out = toy_net(img, fdm)
        assert [out.olm_side[l].shape[2] for l in range(1, 6)] == [64, 32, 16, 8, 4]
        for l in range(1, 6):
            r = out.r_loc[l].data
            assert r.min() > 0 and r.max() < 1

    def test_r_loc_depends_only_on_fdm(self, toy_net, rng):
        fdm = np.zeros((64, 64))
        with no_grad():
            a = toy_net(rng.standard_normal((1, 3, 64, 64)), fdm)
            b = toy_net(rng.standard_normal((1, 3, 64, 64)), fdm)
        for l in range(1, 6):
            np.testing.assert_array_equal(a.r_loc[l].data, b.r_loc[l].data)

    def test_inference_deterministic(self, toy_net, rng):
        img, fdm, _, _ = toy_inputs(rng)
        with no_grad():
            a = toy_net(img, fdm, training=False)
            b = toy_net(img, fdm, training=False)
        np.testing.assert_array_equal(a.seg_final.data, b.seg_final.data)

    def test_training_needs_rng(self, toy_net, rng):
        img, fdm, _, _ = toy_inputs(rng)
        with pytest.raises(ValueError):
            forward(toy_net, img, fdm, training=True)

    def test_all_params_get_finite_grads(self, toy_net, rng):
        img, fdm, gs, gb = toy_inputs(rng)
        toy_net.zero_grad()
        out = forward(toy_net, img, fdm, training=True, rng=np.random.default_rng(0))
        total_loss(out, gs, gb).total.backward()
        for name, p in toy_net.params.items():
            assert p.grad is not None, name
            assert np.isfinite(p.grad).all(), name
        toy_net.zero_grad()

    def test_bad_inputs(self, toy_net, rng):
        with pytest.raises(ShapeError):
            toy_net(np.zeros((1, 3, 32, 32)), np.zeros((32, 32)))
        with pytest.raises(ShapeError):
            toy_net(np.zeros((1, 3, 64, 64)), np.zeros((32, 32)))

    def test_image_tensor(self):
        t = image_tensor(np.full((4, 4, 3), 255, np.uint8))
        assert t.shape == (1, 3, 4, 4) and np.all(t == 0.5)


class TestModules:
    def test_olm_shapes_and_variants(self, rng):
        for variant, ch in [("full", 16), ("no_concat", 8), ("no_multiply", 16), ("no_dilated", 16)]:
            net = Network(OLBPConfig.toy(ablation=Ablation(olm_variant=variant)))
            f_r = Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32))
            f_fdm = Tensor(rng.random((1, 1, 16, 16)).astype(np.float32))
            with no_grad():
                f_olm, s, r = olm_forward(net, 1, f_r, f_fdm)
            assert f_olm.shape == (1, ch, 16, 16), variant
            assert s.shape == (1, 2, 16, 16)
            if variant == "full":
                np.testing.assert_allclose(f_olm.data[:, 8:], f_r.data * r.data, rtol=1e-6)
            if variant == "no_multiply":
                np.testing.assert_array_equal(f_olm.data[:, 8:], r.data)
        net = Network(OLBPConfig.toy(ablation=Ablation(olm_variant="no_seg_sup")))
        with no_grad():
            assert olm_forward(net, 1, f_r, f_fdm)[1] is None

    def test_olm_channel_mismatch(self, toy_net, rng):
        with pytest.raises(ShapeError):
            olm_forward(toy_net, 1, Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 1, 8, 8))))

    def test_r_loc_ones_gives_identity(self, rng):
        f_r = Tensor(rng.standard_normal((1, 4, 5, 5)))
        np.testing.assert_array_equal(ops.eltwise_mul(f_r, Tensor(np.ones((1, 4, 5, 5)))).data, f_r.data)

    def test_bpm_channels(self, toy_net, rng):
        # deconv at level 5 upsamples 4 -> 8 with c_4 channels
        f_p = Tensor(rng.standard_normal((1, 64, 8, 8)).astype(np.float32))
        with no_grad():
            f_bpm, b, s = bpm_forward(toy_net, 5, f_p)
        assert f_bpm.shape == (1, 65, 8, 8)
        assert b.shape == s.shape == (1, 2, 8, 8)
        with pytest.raises(ValueError):
            bpm_forward(toy_net, 1, f_p)

    def test_no_bpm_skips(self, rng):
        net = Network(OLBPConfig.toy(ablation=ABLATIONS["no_bpm"]))
        assert not any(n.startswith("bpm") for n in net.params)
        with no_grad():
            out = net(*toy_inputs(rng)[:2])
        assert out.bpm_side_seg == {} and out.bpm_side_boundary == {}

    def test_ba_star_input(self):
        net = Network(OLBPConfig.toy(ablation=ABLATIONS["ba_star"]))
        assert net.params["enc1.conv1.w"].shape[1] == 4
        assert not any(n.startswith("olm") for n in net.params)


class TestLoss:
    @staticmethod
    def _uniform(net, rng):
        img, fdm, gs, gb = toy_inputs(rng)
        with no_grad():
            out = net(img, fdm)
        for _, t, _ in out.supervised():
            t.data[...] = 0.0
        return total_loss(out, gs, gb)

    def test_uniform_logits(self, rng):
        net = Network(OLBPConfig.toy(), dtype=np.float64)
        loss = self._uniform(net, rng)
        assert loss.count == 15
        assert float(loss.total.data) == pytest.approx(15 * math.log(2), abs=1e-9)
        assert set(loss.terms) == set(LOSS_TERMS)

    @pytest.mark.parametrize("name,count", [("full", 15), ("no_bpm", 7), ("ba_star", 2), ("ba_star_bpm", 10),
                                            ("no_concat", 15), ("no_seg_sup", 10)])
    def test_term_counts(self, rng, name, count):
        net = Network(OLBPConfig.toy(ablation=ABLATIONS[name]))
        assert self._uniform(net, rng).count == count

    def test_gt_resized_per_level(self, toy_net, rng):
        img, fdm, gs, gb = toy_inputs(rng)
        with no_grad():
            out = toy_net(img, fdm)
        loss = total_loss(out, gs, gb)
        # the loss of a side output equals CE against the nearest-resized GT
        side = out.olm_side[3]
        target = ops.resize_nearest_array(gs, 16, 16)[None, None]
        assert loss.terms["olm3"] == pytest.approx(float(ops.softmax_ce_loss(side, target).data), rel=1e-6)
