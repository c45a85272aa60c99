import os

import numpy as np
import pytest

from feedbackseg import layers as L
from feedbackseg.network import (
    CheckpointError,
    FeedbackUnit,
    NetworkConfig,
    UnsupportedVersionError,
    backward,
    build_network,
    feedback_infer,
    forward_classify,
    forward_units,
    gate_context,
    load_checkpoint,
    parse_target,
    refine_with_input,
    save_checkpoint,
)
from feedbackseg.tensor import ShapeError
from helpers import (
    logits_from_unit,
    numeric_grad,
    perturbation_grad_at_relu,
    rel_error,
    tiny_network,
    toy_identity_network,
)

TOY_INPUT = np.array([[1.0, -1.0], [2.0, 0.0]], np.float32)


@pytest.fixture(scope="module")
def default_net():
    return build_network(NetworkConfig(), seed=3)


class TestBuild:
    def test_default_shapes(self, default_net):
        x = np.random.default_rng(0).uniform(size=(2, 1, 64, 64)).astype(np.float32)
        logits, probs, cache = forward_classify(default_net, x)
        assert cache.last_map.shape == (2, 2, 8, 8)
        assert logits.shape == probs.shape == (2, 2)
        from feedbackseg.network import upsample

        assert upsample(default_net, cache.last_map).shape == (2, 2, 64, 64)

    def test_deterministic(self):
        a = build_network(NetworkConfig(), seed=11).state()
        b = build_network(NetworkConfig(), seed=11).state()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_he_init_scale(self):
        net = build_network(NetworkConfig(), seed=0)
        w = net.units[5].conv.weights
        assert w.std() == pytest.approx(np.sqrt(2 / (64 * 9)), rel=0.05)
        assert not net.units[5].conv.bias.any()

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(unit_channels=(16, 2), strides=(1, 1)),
            dict(unit_channels=(16,) * 7, strides=(1,) * 7),
            dict(strides=(1, 2, 1, 2, 1, 2)),
            dict(gamma=-0.1),
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            build_network(NetworkConfig(**kwargs))

    def test_upsample_factor(self):
        assert NetworkConfig().upsample_factor == 8


class TestForward:
    def test_gates_absent_equals_all_ones(self, default_net):
        x = np.random.default_rng(1).uniform(size=(1, 1, 64, 64)).astype(np.float32)
        l1, _, c1 = forward_classify(default_net, x)
        ones = [np.ones_like(u.relu_out) for u in c1.units]
        l2, _, c2 = forward_classify(default_net, x, gates=ones)
        assert l1.tobytes() == l2.tobytes()
        assert c1.last_map.tobytes() == c2.last_map.tobytes()

    def test_toy_arithmetic(self):
        net = toy_identity_network()
        logits, probs, cache = forward_classify(net, TOY_INPUT)
        np.testing.assert_array_equal(cache.last_map[0, 0], [[1, 0], [2, 0]])
        assert logits[0, 0] == pytest.approx(0.75)
        assert probs[0, 0] == pytest.approx(1 / (1 + np.exp(-0.75)))

    def test_init_logits_bounded(self, default_net):
        x = np.random.default_rng(2).uniform(size=(4, 1, 64, 64)).astype(np.float32)
        logits, _, _ = forward_classify(default_net, x)
        assert np.isfinite(logits).all() and np.abs(logits).max() < 1e3

    def test_indivisible_size(self, default_net):
        with pytest.raises(ShapeError):
            forward_classify(default_net, np.zeros((1, 1, 60, 64), np.float32))


class TestBackward:
    def test_zero_grad(self):
        net = tiny_network(0)
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
        _, _, cache = forward_classify(net, x, "train")
        g = backward(net, cache, np.zeros((2, 2)))
        assert all(not v.any() for v in g.params.values())
        assert all(not a.any() for a in g.activations)

    @pytest.mark.parametrize("mode", ["infer", "train"])
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, mode, seed):
        net = tiny_network(seed)
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 1, 4, 4))
        gl = r.normal(size=(2, 2))
        _, _, cache = forward_classify(net.copy(), x, mode)
        grads = backward(net, cache, gl)

        def f():
            return float(np.sum(forward_classify(net.copy(), x, mode)[0] * gl))

        for name, p in net.parameters().items():
            assert rel_error(grads.params[name], numeric_grad(f, p)) < 1e-4, name

    def test_dead_relu_blocks_weight_grad(self):
        # unit 0 output is all zeros -> nothing flows to unit 0's conv weights
        net = tiny_network(5, bn=False)
        net.units[0].conv.bias[:] = -100.0
        x = np.random.default_rng(5).normal(size=(1, 1, 4, 4))
        _, _, cache = forward_classify(net, x)
        assert not cache.units[0].relu_out.any()
        g = backward(net, cache, np.ones((1, 2)))
        assert not g.params["unit0.conv.weight"].any()
        assert not g.params["unit0.conv.bias"].any()


def center_tap_network():
    """Seven 1-channel units whose 3x3 kernels only pass the centre tap: cell i reads pixel 8i."""
    net = build_network(NetworkConfig((1,) * 7, num_classes=1), seed=0)
    for u in net.units:
        u.conv.weights[:] = 0
        u.conv.weights[0, 0, 1, 1] = 1
        u.bn = None
    return net


class TestUpsampleRegistration:
    @pytest.mark.parametrize("row,col", [(0, 0), (16, 40), (56, 8), (32, 32)])
    def test_impulse_peaks_on_its_pixel(self, row, col):
        from feedbackseg.network import upsample

        net = center_tap_network()
        img = np.zeros((1, 1, 64, 64), np.float32)
        img[0, 0, row, col] = 1
        _, _, cache = forward_classify(net, img)
        assert cache.last_map[0, 0, row // 8, col // 8] == 1
        up = upsample(net, cache.last_map)[0, 0]
        assert up.shape == (64, 64)
        assert np.unravel_index(np.argmax(up), up.shape) == (row, col)
        assert up[row, col] == 1

    def test_interpolates_between_cells(self):
        from feedbackseg.network import upsample

        net = center_tap_network()
        m = np.zeros((1, 1, 2, 2), np.float32)
        m[0, 0, 0, 0] = 1
        up = upsample(net, m)[0, 0]
        np.testing.assert_allclose(up[0, :9], 1 - np.arange(9) / 8)

    def test_constant_map_stays_constant(self, default_net):
        from feedbackseg.network import upsample

        up = upsample(default_net, np.full((1, 2, 8, 8), 0.3, np.float32))
        np.testing.assert_allclose(up, 0.3, rtol=1e-6)


class TestFeedbackInfer:
    def test_toy_all_gates_open(self):
        net = toy_identity_network()
        m, ctx = feedback_infer(net, TOY_INPUT, 0, return_context=True)
        np.testing.assert_allclose(ctx[0].gradients[0][0, 0], np.full((2, 2), 0.25))
        assert ctx[0].gates[0].all()
        np.testing.assert_allclose(m, [[0.5, 0], [1, 0]])

    def test_toy_all_gradients_negative(self):
        # unit 0: identity; unit 1: relu(3 - a) > 0 everywhere, so d logit / d a = -1/4
        cfg = NetworkConfig((1, 1), (1, 1), 1, 1, 1, 0.0)
        net = build_network(cfg, 0, standard_depth=False)
        for u in net.units:
            u.bn = None
        net.units[0].conv.weights[:] = 1
        net.units[1].conv.weights[:] = -1
        net.units[1].conv.bias[:] = 3
        m, ctx = feedback_infer(net, TOY_INPUT, 0, return_context=True)
        np.testing.assert_allclose(ctx[0].gradients[0], -0.25)
        assert not ctx[0].gates[0].any()
        assert not m.any()

    def test_bad_class(self):
        with pytest.raises(ValueError):
            feedback_infer(toy_identity_network(), TOY_INPUT, 1)

    @pytest.mark.parametrize("seed", range(4))
    def test_gates_match_perturbation_oracle(self, seed):
        net = tiny_network(seed, channels=(3, 2), strides=(1, 2))
        img = np.random.default_rng(seed).normal(size=(1, 1, 6, 6))
        _, _, cache = forward_classify(net, img)
        ctx = gate_context(net, cache, 1)
        for u in range(2):
            num = perturbation_grad_at_relu(net, img, u, 1)
            sel = np.abs(num) > 1e-6
            np.testing.assert_array_equal(ctx.gates[u][sel], (num[sel] > 0).astype(float))

    def test_pass_two_with_open_gates_is_pass_one(self, default_net):
        img = np.random.default_rng(4).uniform(size=(1, 1, 64, 64)).astype(np.float32)
        _, _, c1 = forward_classify(default_net, img)
        ones = [np.ones_like(u.relu_out) for u in c1.units]
        c2 = forward_units(default_net, img[None] if img.ndim == 3 else img, "infer", ones)
        assert all(a.out.tobytes() == b.out.tobytes() for a, b in zip(c1.units, c2))

    def test_unit_one_suppression_is_monotone(self, default_net):
        img = np.random.default_rng(5).uniform(size=(1, 1, 64, 64)).astype(np.float32)
        _, _, cache = forward_classify(default_net, img)
        ctx = gate_context(default_net, cache, 1)
        c2 = forward_units(default_net, img, "infer", ctx.gates)
        assert np.all(c2[0].out <= cache.units[0].out)

    def test_suppressed_mass_nonpositive(self, default_net):
        for s in range(5):
            img = np.random.default_rng(s).uniform(size=(1, 1, 64, 64)).astype(np.float32)
            _, ctx = feedback_infer(default_net, img, s % 2, return_context=True)
            assert all(m <= 0 for m in ctx[s % 2].suppressed_mass())

    def test_output_range_and_determinism(self, default_net):
        img = np.random.default_rng(6).uniform(size=(1, 64, 64)).astype(np.float32)
        a = feedback_infer(default_net, img, "top1")
        b = feedback_infer(default_net, img, "top1")
        assert a.tobytes() == b.tobytes()
        assert a.shape == (64, 64)
        assert a.min() == 0 and (a.max() == 1 or not a.any())

    def test_topk_independent(self, default_net):
        img = np.random.default_rng(7).uniform(size=(1, 64, 64)).astype(np.float32)
        both = feedback_infer(default_net, img, "top2")
        assert set(both) == {0, 1}
        for j in (0, 1):
            assert both[j].tobytes() == feedback_infer(default_net, img, j).tobytes()

    def test_feedback_off_is_pass_one_channel(self, default_net):
        img = np.random.default_rng(8).uniform(size=(1, 64, 64)).astype(np.float32)
        from feedbackseg.network import upsample
        from feedbackseg.tensor import minmax_normalize

        _, _, cache = forward_classify(default_net, img)
        expect = minmax_normalize(upsample(default_net, cache.last_map)[0, 1])
        np.testing.assert_array_equal(feedback_infer(default_net, img, 1, feedback=False), expect)


def test_parse_target():
    assert parse_target("top1", 2) == ("top", 1)
    assert parse_target(("topk", 2), 2) == ("top", 2)
    assert parse_target("1", 2) == ("class", 1)
    for bad in ("5", "top3", "nope", -1):
        with pytest.raises(ValueError):
            parse_target(bad, 2)


class TestRefine:
    def test_identity_on_ones(self):
        m = np.array([[0.0, 0.5], [1.0, 0.25]], np.float32)
        np.testing.assert_allclose(refine_with_input(m, np.ones((2, 2))), m)

    def test_zero_map(self):
        assert not refine_with_input(np.zeros((2, 2)), np.random.default_rng(0).uniform(size=(2, 2))).any()

    def test_hand_example(self):
        out = refine_with_input(np.ones((2, 2)), np.array([[0.2, 0.8], [0.4, 0.6]]))
        np.testing.assert_allclose(out, [[0, 1], [1 / 3, 2 / 3]], atol=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            refine_with_input(np.ones((2, 2)), np.ones((3, 3)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, default_net):
        net = default_net.copy()
        net.units[2].bn.running_mean = np.random.default_rng(0).normal(size=32).astype(np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, net.config, path)
        loaded, cfg = load_checkpoint(path)
        assert cfg == net.config
        a, b = net.state(), loaded.state()
        assert list(a) == list(b)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        save_checkpoint(loaded, cfg, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_header_layout(self, tmp_path, default_net):
        path = tmp_path / "m.ckpt"
        save_checkpoint(default_net, None, path)
        raw = path.read_bytes()
        assert raw[:4] == b"WSFB"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert [int.from_bytes(raw[8 + 4 * i : 12 + 4 * i], "little") for i in range(7)] == [
            16, 16, 32, 32, 64, 64, 2,
        ]

    def test_bad_magic(self, tmp_path, default_net):
        path = tmp_path / "m.ckpt"
        save_checkpoint(default_net, None, path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_future_version(self, tmp_path, default_net):
        path = tmp_path / "m.ckpt"
        save_checkpoint(default_net, None, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, default_net):
        path = tmp_path / "m.ckpt"
        save_checkpoint(default_net, None, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_extent_overflow(self, tmp_path, default_net):
        path = tmp_path / "m.ckpt"
        save_checkpoint(default_net, None, path)
        raw = bytearray(path.read_bytes())
        # header is 76 bytes, then the u32 tensor count, then the first tensor
        nlen = int.from_bytes(raw[80:82], "little")
        ext = 82 + nlen + 1
        raw[ext : ext + 4] = (2**31).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="overflow"):
            load_checkpoint(path)

    def test_only_standard_depth_saved(self, tmp_path):
        net = tiny_network(0, dtype=np.float32)
        with pytest.raises(CheckpointError):
            save_checkpoint(net, None, tmp_path / "x.ckpt")
