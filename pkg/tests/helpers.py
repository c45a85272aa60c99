"""Shared builders and finite-difference oracles for the test suite."""

import numpy as np

from feedbackseg.network import NetworkConfig, build_network


def numeric_grad(f, x, h=1e-4):
    """Central differences of scalar ``f()`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    """Largest |a - b| relative to the gradient scale (floored at 1e-6 for all-zero gradients)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-6)
    return float(np.abs(a - b).max() / scale)


def tiny_network(seed, units=2, channels=(3, 2), strides=(1, 2), kernel=3, bn=True,
                 dtype=np.float64, num_classes=None):
    """Small randomized network with non-trivial BN statistics, for gradient checks."""
    channels = tuple(channels[:units])
    strides = tuple(strides[:units])
    cfg = NetworkConfig(channels, strides, num_classes or channels[-1], 1, kernel, 0.0)
    net = build_network(cfg, seed, standard_depth=False).astype(dtype)
    r = np.random.default_rng(seed + 1)
    for u in net.units:
        u.conv.bias = r.normal(0, 0.3, u.conv.bias.shape).astype(dtype)
        if bn:
            c = u.conv.bias.size
            u.bn.gamma_scale = r.uniform(0.5, 1.5, c).astype(dtype)
            u.bn.beta_shift = r.normal(0, 0.3, c).astype(dtype)
            u.bn.running_mean = r.normal(0, 0.3, c).astype(dtype)
            u.bn.running_var = r.uniform(0.5, 2.0, c).astype(dtype)
        else:
            u.bn = None
    net.head_bias = r.normal(0, 0.1, net.head_bias.shape).astype(dtype)
    return net


def toy_identity_network(weight=1.0):
    """One 1x1 unit, no batch norm, stride 1: the last map is relu(weight * x)."""
    cfg = NetworkConfig((1,), (1,), 1, 1, 1, 0.0)
    net = build_network(cfg, 0, standard_depth=False)
    u = net.units[0]
    u.conv.weights = np.full((1, 1, 1, 1), weight, np.float32)
    u.bn = None
    return net


def logits_from_unit(net, unit_out, start, mode="infer", gates=None):
    """Logits when unit ``start - 1`` emits ``unit_out``; reruns only the remaining units."""
    from feedbackseg import layers as L
    from feedbackseg.network import forward_units

    x = unit_out
    if start < len(net.units):
        x = forward_units(net, unit_out, mode, gates, start=start)[-1].out
    return L.global_avg_pool_forward(x) + net.head_bias


def perturbation_grad_at_relu(net, image, unit, target, h=1e-4):
    """d(logit[target]) / d(ReLU output of ``unit``) by central differences, float64."""
    from feedbackseg.network import forward_classify

    _, _, cache = forward_classify(net, image, "infer")
    a = cache.units[unit].relu_out.copy()

    def f():
        return float(logits_from_unit(net, a, unit + 1)[0, target])

    return numeric_grad(f, a, h)
