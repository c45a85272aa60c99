"""Stacked feedback units, the GAP classification head, and feedback inference.

The network is a stack of feedback units (Conv -> BatchNorm -> ReLU ->
RevReLU). The last unit has one channel per class; global average pooling
plus a per-class bias turns those maps into logits. A frozen bilinear
transposed convolution brings a class map back to input resolution.

Feedback inference runs the network once with all gates open, backpropagates
a one-hot signal from the target logit to every ReLU output, closes every
neuron whose gradient is not above ``gamma``, and runs the network again.
"""

import copy
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .tensor import DTYPE, ShapeError, minmax_normalize

STANDARD_DEPTH = 7


@dataclass
class NetworkConfig:
    unit_channels: tuple = (16, 16, 32, 32, 64, 64, 2)
    strides: tuple = (1, 2, 1, 2, 1, 2, 1)
    num_classes: int = 2
    input_channels: int = 1
    kernel_size: int = 3
    gamma: float = 0.0

    def __post_init__(self):
        self.unit_channels = tuple(int(c) for c in self.unit_channels)
        self.strides = tuple(int(s) for s in self.strides)

    @property
    def upsample_factor(self):
        return int(np.prod(self.strides))

    @property
    def depth(self):
        return len(self.unit_channels)

    def validate(self, standard_depth=True):
        if standard_depth and self.depth != STANDARD_DEPTH:
            raise ValueError(f"network must have {STANDARD_DEPTH} feedback units, got {self.depth}")
        if self.depth < 1 or len(self.strides) != self.depth:
            raise ValueError("unit_channels and strides must be non-empty and equally long")
        if self.num_classes < 1 or self.input_channels < 1:
            raise ValueError("num_classes and input_channels must be positive")
        if self.unit_channels[-1] != self.num_classes:
            raise ValueError(
                f"last unit has {self.unit_channels[-1]} channels, expected num_classes={self.num_classes}"
            )
        if any(c < 1 for c in self.unit_channels) or any(s < 1 for s in self.strides):
            raise ValueError("channel counts and strides must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class FeedbackUnit:
    conv: L.ConvParams
    bn: L.BatchNormParams = None  # None bypasses normalization


@dataclass
class Network:
    config: NetworkConfig
    units: list
    upsampler: L.ConvParams
    head_bias: np.ndarray

    def parameters(self):
        """Trainable tensors by name. The upsampler is frozen and excluded."""
        params = {}
        for i, u in enumerate(self.units):
            params[f"unit{i}.conv.weight"] = u.conv.weights
            params[f"unit{i}.conv.bias"] = u.conv.bias
            if u.bn is not None:
                params[f"unit{i}.bn.gamma"] = u.bn.gamma_scale
                params[f"unit{i}.bn.beta"] = u.bn.beta_shift
        params["head.bias"] = self.head_bias
        return params

    def set_parameter(self, name, value):
        m = re.fullmatch(r"unit(\d+)\.(conv|bn)\.(\w+)", name)
        if name == "head.bias":
            self.head_bias = value
            return
        if m is None:
            raise KeyError(name)
        unit = self.units[int(m.group(1))]
        attr = {
            "weight": "weights",
            "bias": "bias",
            "gamma": "gamma_scale",
            "beta": "beta_shift",
            "running_mean": "running_mean",
            "running_var": "running_var",
        }[m.group(3)]
        setattr(unit.conv if m.group(2) == "conv" else unit.bn, attr, value)

    def state(self):
        """Every tensor needed to rebuild the network, in checkpoint order."""
        out = {}
        for i, u in enumerate(self.units):
            out[f"unit{i}.conv.weight"] = u.conv.weights
            out[f"unit{i}.conv.bias"] = u.conv.bias
            if u.bn is not None:
                out[f"unit{i}.bn.gamma"] = u.bn.gamma_scale
                out[f"unit{i}.bn.beta"] = u.bn.beta_shift
                out[f"unit{i}.bn.running_mean"] = u.bn.running_mean
                out[f"unit{i}.bn.running_var"] = u.bn.running_var
        out["upsampler.weight"] = self.upsampler.weights
        out["head.bias"] = self.head_bias
        return out

    def astype(self, dtype):
        """Deep copy with every tensor cast, e.g. to float64 for gradient checks."""
        net = copy.deepcopy(self)
        for name, t in net.state().items():
            if name == "upsampler.weight":
                net.upsampler.weights = t.astype(dtype)
                net.upsampler.bias = net.upsampler.bias.astype(dtype)
            else:
                net.set_parameter(name, t.astype(dtype))
        return net

    def copy(self):
        return copy.deepcopy(self)


def build_network(config, seed=0, standard_depth=True):
    """He-initialized network; deterministic for a fixed ``seed``."""
    config.validate(standard_depth=standard_depth)
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    units = []
    c_in = config.input_channels
    for c_out, stride in zip(config.unit_channels, config.strides):
        std = np.sqrt(2.0 / (c_in * k * k))
        w = (std * rng.standard_normal((c_out, c_in, k, k))).astype(DTYPE)
        conv = L.ConvParams(w, np.zeros(c_out, DTYPE), stride=stride, padding=k // 2)
        units.append(FeedbackUnit(conv, L.BatchNormParams.identity(c_out)))
        c_in = c_out
    up = L.bilinear_upsampler(config.num_classes, config.upsample_factor, centered=True)
    return Network(config, units, up, np.zeros(config.num_classes, DTYPE))


# -- forward / backward -----------------------------------------------------


@dataclass
class UnitCache:
    x: np.ndarray
    cols: np.ndarray
    conv_out: np.ndarray
    bn_cache: tuple
    pre_relu: np.ndarray
    relu_out: np.ndarray
    gates: np.ndarray
    out: np.ndarray


@dataclass
class ForwardCache:
    units: list
    last_map: np.ndarray
    mode: str


@dataclass
class Gradients:
    params: dict
    activations: list  # d(score)/d(ReLU output), one per unit
    input: np.ndarray = None


def _as_batch(batch, config):
    batch = np.asarray(batch)
    if batch.ndim == 2:
        batch = batch[None, None]
    elif batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[1] != config.input_channels:
        raise ShapeError(
            f"expected N x {config.input_channels} x H x W input, got {batch.shape}"
        )
    f = config.upsample_factor
    if batch.shape[2] % f or batch.shape[3] % f:
        raise ShapeError(
            f"spatial size {batch.shape[2:]} is not divisible by the upsample factor {f}"
        )
    return batch


def unit_forward(unit, x, mode, gates=None):
    conv_out, cols = L.conv2d_forward(x, unit.conv, return_cols=True)
    if unit.bn is not None:
        pre_relu, bn_cache = L.batchnorm_forward(conv_out, unit.bn, mode)
    else:
        pre_relu, bn_cache = conv_out, None
    relu_out = L.relu_forward(pre_relu)
    out = relu_out if gates is None else L.revrelu_apply(relu_out, gates)
    return UnitCache(x, cols, conv_out, bn_cache, pre_relu, relu_out, gates, out)


def forward_units(net, x, mode="infer", gates=None, start=0):
    """Run units ``start..`` on ``x``; returns the list of unit caches."""
    caches = []
    for i in range(start, len(net.units)):
        g = None if gates is None else gates[i]
        c = unit_forward(net.units[i], x, mode, g)
        caches.append(c)
        x = c.out
    return caches


def forward_classify(net, batch, mode="infer", gates=None):
    """Return ``(logits, class_probs, cache)``.

    ``gates`` is an optional per-unit list of masks (or a GateContext);
    absent gates leave every neuron open.
    """
    batch = _as_batch(batch, net.config)
    if isinstance(gates, GateContext):
        gates = gates.gates
    if gates is not None and len(gates) != len(net.units):
        raise ValueError(f"expected {len(net.units)} gate masks, got {len(gates)}")
    caches = forward_units(net, batch, mode, gates)
    last = caches[-1].out
    logits = L.global_avg_pool_forward(last) + net.head_bias
    return logits, L.sigmoid(logits), ForwardCache(caches, last, mode)


def backward(net, cache, grad_logits):
    """Gradients of ``sum(grad_logits * logits)`` for every parameter and ReLU output."""
    last = cache.last_map
    grad_logits = np.asarray(grad_logits, dtype=last.dtype)
    if grad_logits.shape != last.shape[:2]:
        raise ShapeError(f"grad_logits {grad_logits.shape} vs logits {last.shape[:2]}")
    params = {"head.bias": grad_logits.sum(axis=0)}
    acts = [None] * len(net.units)
    g = L.global_avg_pool_backward(last.shape, grad_logits)
    for i in reversed(range(len(net.units))):
        u, c = net.units[i], cache.units[i]
        if g.shape != c.out.shape:
            raise ShapeError(f"stale cache at unit {i}: {g.shape} vs {c.out.shape}")
        if c.gates is not None:
            g = g * c.gates
        acts[i] = g
        g = L.relu_backward(c.pre_relu, g)
        if u.bn is not None:
            g, gg, gb = L.batchnorm_backward(c.conv_out, u.bn, g, c.bn_cache)
            params[f"unit{i}.bn.gamma"] = gg
            params[f"unit{i}.bn.beta"] = gb
        g, gw, gbias = L.conv2d_backward(c.x, u.conv, g, cols=c.cols)
        params[f"unit{i}.conv.weight"] = gw
        params[f"unit{i}.conv.bias"] = gbias
    return Gradients(params, acts, g)


# -- feedback inference -----------------------------------------------------


@dataclass
class GateContext:
    activations: list
    gradients: list
    gates: list
    target_class: int
    logits: np.ndarray = field(default=None, repr=False)

    def suppressed_mass(self):
        """Per unit: sum of gradient * pass-1 activation over closed neurons."""
        return [
            float(np.sum(np.where(th == 0, g * a, 0), dtype=np.float64))
            for a, g, th in zip(self.activations, self.gradients, self.gates)
        ]


def parse_target(target, num_classes):
    """Normalize ``"top1"``, ``"topK"``, ``("topk", k)``, or a class index."""
    if isinstance(target, tuple):
        kind, k = target
        target = f"{kind[:3]}{k}"
    if isinstance(target, str):
        m = re.fullmatch(r"top(k?)(\d+)", target.strip().lower())
        if m:
            k = int(m.group(2))
            if not 1 <= k <= num_classes:
                raise ValueError(f"top-{k} needs 1 <= k <= {num_classes}")
            return ("top", k)
        try:
            target = int(target)
        except ValueError:
            raise ValueError(f"unrecognized target {target!r}") from None
    j = int(target)
    if not 0 <= j < num_classes:
        raise ValueError(f"class index {j} out of range for {num_classes} classes")
    return ("class", j)


def gate_context(net, cache, target_class, gamma=None):
    """Gates for ``target_class`` from a gates-open pass-1 cache."""
    gamma = net.config.gamma if gamma is None else gamma
    last = cache.last_map
    delta = np.zeros(last.shape[:2], dtype=last.dtype)
    delta[:, target_class] = 1
    grads = backward(net, cache, delta)
    gates = [L.revrelu_compute_gates(g, gamma) for g in grads.activations]
    return GateContext(
        [c.relu_out for c in cache.units], grads.activations, gates, target_class
    )


def upsample(net, class_map):
    """Upsample an N x C x h x w map to N x C x fh x fw with the frozen bilinear kernel.

    With 3x3, pad-1 convolutions, last-map cell ``i`` is centred on input
    pixel ``f * i``. The centred kernel puts each cell's peak exactly there;
    the map is edge-extended by one cell so the bottom and right borders
    interpolate toward a copy of the last row/column, and the result is
    cropped to ``f`` times the map size.
    """
    up = net.upsampler
    if up.weights.dtype != class_map.dtype:
        up = L.ConvParams(up.weights.astype(class_map.dtype), up.bias.astype(class_map.dtype),
                          up.stride, up.padding)
    h, w = class_map.shape[-2:]
    f = up.stride
    extended = np.pad(class_map, ((0, 0), (0, 0), (0, 1), (0, 1)), mode="edge")
    return L.conv_transpose2d_forward(extended, up)[..., : h * f, : w * f]


def feedback_infer(net, image, target="top1", gamma=None, feedback=True, normalize=True,
                   return_context=False):
    """Dense localization map(s) for a single image.

    Returns an H x W map in [0, 1] for a single target, or a dict mapping
    class index to map for a top-k target. ``feedback=False`` returns the
    target channel of the gates-open pass instead. With ``normalize=False``
    the raw upsampled channel is returned (useful for stitching tiles).
    """
    batch = _as_batch(image, net.config)
    if batch.shape[0] != 1:
        raise ShapeError("feedback_infer takes one image")
    kind, k = parse_target(target, net.config.num_classes)
    logits, _, cache = forward_classify(net, batch, "infer")
    if kind == "class":
        classes = [k]
    else:
        classes = [int(c) for c in np.argsort(-logits[0], kind="stable")[:k]]

    results, contexts = {}, {}
    for j in classes:
        if feedback:
            ctx = gate_context(net, cache, j, gamma)
            ctx.logits = logits
            last = forward_units(net, batch, "infer", ctx.gates)[-1].out
            contexts[j] = ctx
        else:
            last = cache.last_map
        m = upsample(net, last)[0, j]
        results[j] = minmax_normalize(m) if normalize else m

    out = results[classes[0]] if (kind == "class" or k == 1) else results
    if return_context:
        return out, contexts
    return out


def refine_with_input(seg_map, image):
    """Element-wise product of the map with the image intensity, renormalized."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image.mean(axis=0)
    if image.shape != seg_map.shape:
        raise ShapeError(f"map {seg_map.shape} vs image {image.shape}")
    g = np.clip(image, 0, 1).astype(seg_map.dtype)
    return minmax_normalize(seg_map * g)


# -- checkpoints ------------------------------------------------------------

MAGIC = b"WSFB"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def save_checkpoint(net, config, path):
    cfg = config if config is not None else net.config
    if cfg.unit_channels != net.config.unit_channels or cfg.strides != net.config.strides:
        raise CheckpointError("config does not describe this network")
    if cfg.depth != STANDARD_DEPTH:
        raise CheckpointError(f"checkpoint format stores exactly {STANDARD_DEPTH} units")
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack("<7I", *cfg.unit_channels)
    buf += struct.pack("<7I", *cfg.strides)
    buf += struct.pack("<IIf", cfg.num_classes, cfg.input_channels, cfg.gamma)
    state = net.state()
    buf += struct.pack("<I", len(state))
    for name, t in state.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", t.ndim)
        buf += struct.pack(f"<{t.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(buf))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Return ``(Network, NetworkConfig)`` from a checkpoint file."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I")
    if version > FORMAT_VERSION or version < 1:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    channels = r.unpack("<7I")
    strides = r.unpack("<7I")
    num_classes, input_channels, gamma = r.unpack("<IIf")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        if n * 4 > len(r.data) - r.pos:
            raise CheckpointError(f"tensor {name!r} extents {shape} overflow the file")
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(DTYPE)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after the last tensor")

    try:
        kernel = tensors["unit0.conv.weight"].shape[2]
    except KeyError:
        raise CheckpointError("checkpoint has no unit0.conv.weight") from None
    config = NetworkConfig(channels, strides, num_classes, input_channels, kernel, float(gamma))
    try:
        config.validate()
    except ValueError as e:
        raise CheckpointError(f"invalid config block: {e}") from None
    net = build_network(config, seed=0)
    expected = net.state()
    if set(tensors) != set(expected):
        raise CheckpointError(
            f"tensor names differ from the configured network: {sorted(set(tensors) ^ set(expected))}"
        )
    for name, t in tensors.items():
        if t.shape != expected[name].shape:
            raise CheckpointError(f"{name}: shape {t.shape}, expected {expected[name].shape}")
        if name == "upsampler.weight":
            net.upsampler.weights = t
        else:
            net.set_parameter(name, t)
    return net, config
