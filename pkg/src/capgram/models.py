"""Model assembly: capsule network and a plain CNN baseline.

The capsule network runs a small convolutional stem, forms primary capsules
by reshaping a strided correlation and squashing, then stacks routed
capsule layers until the class layer has spatial extent 1x1. The class
activation is the norm of the (spatially averaged) class capsule, which the
squash keeps below 1.

The CNN baseline matches depth/width, uses max-pooling, and scores classes
through a full-extent correlation head with either a sigmoid (margin
training) or raw logits (cross-entropy training).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import routing as rt
from .autodiff import Tensor
from .equivariant import ConvLayer, FeatureField, MaxPoolLayer

CHECKPOINT_MAGIC = b"CGL1"


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    activation: str = "relu"


@dataclass(frozen=True)
class PoolSpec:
    window: int
    stride: int


@dataclass(frozen=True)
class RoutedSpec:
    n_out: int
    dim: int
    kernel: int
    stride: int
    iters: int = 3


@dataclass(frozen=True)
class CapsNetConfig:
    image_size: int = 32
    in_channels: int = 1
    stem: tuple = (ConvSpec(16, 3), ConvSpec(32, 3))
    primary_types: int = 8
    primary_dim: int = 8
    primary_kernel: int = 3
    primary_stride: int = 2
    routed: tuple = (RoutedSpec(8, 8, 3, 2), RoutedSpec(2, 16, 6, 1))
    routing_mode: str = "dynamic"  # dynamic | equal
    n_classes: int = 2


@dataclass(frozen=True)
class CNNConfig:
    image_size: int = 32
    in_channels: int = 1
    layers: tuple = (
        ConvSpec(16, 3),
        ConvSpec(32, 3),
        PoolSpec(2, 2),
        ConvSpec(64, 3),
        PoolSpec(2, 2),
        ConvSpec(64, 3),
    )
    head: str = "margin_scores"  # margin_scores | cross_entropy_logits
    n_classes: int = 2


@dataclass
class ModelOutput:
    class_activations: Tensor  # [B, n_classes], in [0, 1)
    traces: list = dc_field(default_factory=list)
    logits: Tensor | None = None  # raw scores for the cross-entropy head


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_out(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


class CapsNet:
    def __init__(self, cfg, seed, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.PCG64(seed))
        self._params = []
        extent = cfg.image_size
        ch = cfg.in_channels
        self.stem = []
        for n, spec in enumerate(cfg.stem):
            k = _he_uniform(
                rng,
                (spec.channels, ch, spec.kernel, spec.kernel),
                ch * spec.kernel * spec.kernel,
                self.dtype,
            )
            t = Tensor(k, requires_grad=True)
            b = Tensor(np.zeros(spec.channels, dtype=self.dtype), requires_grad=True)
            self._params.append((f"stem.{n}.kernels", t))
            self._params.append((f"stem.{n}.bias", b))
            self.stem.append(
                ConvLayer(t, spec.stride, spec.padding, spec.activation, bias=b)
            )
            extent = _conv_out(extent, spec.kernel, spec.stride, spec.padding)
            ch = spec.channels
            if extent < 1:
                raise ValueError(f"stem layer {n} shrinks extent to {extent}")
        prim_ch = cfg.primary_types * cfg.primary_dim
        k = _he_uniform(
            rng,
            (prim_ch, ch, cfg.primary_kernel, cfg.primary_kernel),
            ch * cfg.primary_kernel**2,
            self.dtype,
        )
        self.primary_kernels = Tensor(k, requires_grad=True)
        # the bias keeps blank canvas regions from producing exactly-zero
        # capsules, whose routing rows would be stuck at uniform forever
        self.primary_bias = Tensor(np.zeros(prim_ch, dtype=self.dtype), requires_grad=True)
        self._params.append(("primary.kernels", self.primary_kernels))
        self._params.append(("primary.bias", self.primary_bias))
        extent = _conv_out(extent, cfg.primary_kernel, cfg.primary_stride, 0)
        if extent < 1:
            raise ValueError(f"primary capsule layer shrinks extent to {extent}")

        self.routed_filters = []
        n_types, dim = cfg.primary_types, cfg.primary_dim
        for n, spec in enumerate(cfg.routed):
            k = _he_uniform(
                rng,
                (spec.n_out, spec.dim, dim, spec.kernel, spec.kernel),
                dim * spec.kernel * spec.kernel,
                self.dtype,
            )
            t = Tensor(k, requires_grad=True)
            self._params.append((f"routed.{n}.filters", t))
            self.routed_filters.append(t)
            extent = _conv_out(extent, spec.kernel, spec.stride, 0)
            if extent < 1:
                raise ValueError(
                    f"routed layer {n} shrinks extent to {extent} "
                    f"(kernel {spec.kernel}, stride {spec.stride})"
                )
            n_types, dim = spec.n_out, spec.dim
        if cfg.routed[-1].n_out != cfg.n_classes:
            raise ValueError(
                f"final routed layer has {cfg.routed[-1].n_out} types, "
                f"expected n_classes={cfg.n_classes}"
            )
        if extent != 1:
            raise ValueError(
                f"class capsule layer must end at extent 1, got {extent}; "
                f"adjust kernels/strides"
            )

    def parameters(self):
        return [t for _, t in self._params]

    def named_parameters(self):
        return list(self._params)

    def bind_parameters(self, tensors):
        """Swap in replacement parameter tensors (e.g. graph-connected views)."""
        if len(tensors) != len(self._params):
            raise ValueError(f"expected {len(self._params)} tensors, got {len(tensors)}")
        for (name, old), new in zip(self._params, tensors):
            if new.shape != old.shape:
                raise ValueError(f"{name}: shape {new.shape} != {old.shape}")
        self._params = [(n, t) for (n, _), t in zip(self._params, tensors)]
        k = 2 * len(self.stem)
        for i, layer in enumerate(self.stem):
            layer.kernels = self._params[2 * i][1]
            layer.bias = self._params[2 * i + 1][1]
        self.primary_kernels = self._params[k][1]
        self.primary_bias = self._params[k + 1][1]
        self.routed_filters = [t for _, t in self._params[k + 2 :]]

    def forward(self, batch):
        x = _check_batch(batch, self.cfg, self.dtype)
        field = FeatureField(x)
        for layer in self.stem:
            field = layer(field)
        prim = ad.correlate2d(
            field.values, self.primary_kernels, self.cfg.primary_stride, 0
        )
        prim = ad.add(prim, ad.reshape(self.primary_bias, (self.primary_bias.shape[0], 1, 1)))
        B = prim.shape[0]
        Hp, Wp = prim.shape[-2:]
        caps = ad.reshape(
            prim, (B, self.cfg.primary_types, self.cfg.primary_dim, Hp, Wp)
        )
        caps = rt.CapsuleField(rt.squash(caps, axis=-3))
        traces = []
        for spec, filters in zip(self.cfg.routed, self.routed_filters):
            S = rt.predict(caps, filters, spec.stride, 0)
            if self.cfg.routing_mode == "equal":
                caps, trace = rt.equal_route_traced(S)
            else:
                caps, trace = rt.dynamic_route(S, spec.iters)
            traces.append(trace)
        # class capsules are [B, K, D, 1, 1]: spatial mean is trivial by
        # construction, then the vector norm is the class activation
        agg = ad.reduce_mean(caps.values, axis=(-2, -1))
        acts = ad.l2_norm(agg, axis=-1, epsilon=1e-8)
        return ModelOutput(class_activations=acts, traces=traces)


class CNN:
    def __init__(self, cfg, seed, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.PCG64(seed))
        self._params = []
        self.layers = []
        extent = cfg.image_size
        ch = cfg.in_channels
        for n, spec in enumerate(cfg.layers):
            if isinstance(spec, PoolSpec):
                self.layers.append(MaxPoolLayer(spec.window, spec.stride))
                extent = (extent - spec.window) // spec.stride + 1
            else:
                k = _he_uniform(
                    rng,
                    (spec.channels, ch, spec.kernel, spec.kernel),
                    ch * spec.kernel * spec.kernel,
                    self.dtype,
                )
                t = Tensor(k, requires_grad=True)
                b = Tensor(np.zeros(spec.channels, dtype=self.dtype), requires_grad=True)
                self._params.append((f"layers.{n}.kernels", t))
                self._params.append((f"layers.{n}.bias", b))
                self.layers.append(
                    ConvLayer(t, spec.stride, spec.padding, spec.activation, bias=b)
                )
                extent = _conv_out(extent, spec.kernel, spec.stride, spec.padding)
                ch = spec.channels
            if extent < 1:
                raise ValueError(f"layer {n} shrinks extent to {extent}")
        k = _he_uniform(
            rng, (cfg.n_classes, ch, extent, extent), ch * extent * extent, self.dtype
        )
        self.head_kernels = Tensor(k, requires_grad=True)
        self.head_bias = Tensor(np.zeros(cfg.n_classes, dtype=self.dtype), requires_grad=True)
        self._params.append(("head.kernels", self.head_kernels))
        self._params.append(("head.bias", self.head_bias))

    def parameters(self):
        return [t for _, t in self._params]

    def named_parameters(self):
        return list(self._params)

    def bind_parameters(self, tensors):
        if len(tensors) != len(self._params):
            raise ValueError(f"expected {len(self._params)} tensors, got {len(tensors)}")
        for (name, old), new in zip(self._params, tensors):
            if new.shape != old.shape:
                raise ValueError(f"{name}: shape {new.shape} != {old.shape}")
        self._params = [(n, t) for (n, _), t in zip(self._params, tensors)]
        convs = [l for l in self.layers if isinstance(l, ConvLayer)]
        for i, layer in enumerate(convs):
            layer.kernels = self._params[2 * i][1]
            layer.bias = self._params[2 * i + 1][1]
        self.head_kernels = self._params[-2][1]
        self.head_bias = self._params[-1][1]

    def forward(self, batch):
        x = _check_batch(batch, self.cfg, self.dtype)
        field = FeatureField(x)
        for layer in self.layers:
            field = layer(field)
        scores = ad.correlate2d(field.values, self.head_kernels, 1, 0)
        scores = ad.add(scores, ad.reshape(self.head_bias, (self.cfg.n_classes, 1, 1)))
        B = scores.shape[0]
        scores = ad.reshape(scores, (B, self.cfg.n_classes))
        if self.cfg.head == "cross_entropy_logits":
            probs = ad.softmax(scores, axis=1)
            return ModelOutput(class_activations=probs, logits=scores)
        return ModelOutput(class_activations=ad.sigmoid(scores))


def _check_batch(batch, cfg, dtype):
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=dtype))
    if x.ndim != 4:
        raise ValueError(f"batch must be [B, C, H, W], got {x.shape}")
    if x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ValueError(
            f"batch extent {x.shape[1:]} does not match configured "
            f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})"
        )
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixels must be normalized to [0, 1], got [{lo}, {hi}]")
    return x


def build_capsnet(cfg=None, seed=0, dtype=np.float64):
    return CapsNet(cfg or CapsNetConfig(), seed, dtype)


def build_cnn(cfg=None, seed=0, dtype=np.float64):
    return CNN(cfg or CNNConfig(), seed, dtype)


def parameter_count(model):
    return sum(t.data.size for t in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints: magic "CGL1", then per parameter
#   u64 name length | name utf-8 | u64 rank | u64 extents... | f64 values
# all little-endian; values are stored wide regardless of training precision


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, t in model.named_parameters():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", t.data.ndim))
            for extent in t.data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint into an ordered name -> float64 array mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    pos = 4
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(count * 8), dtype="<f8").reshape(shape)
        out[name] = values.copy()
    return out


def load_state(model, state):
    """Load checkpoint arrays into a model, casting to its precision."""
    for name, t in model.named_parameters():
        if name not in state:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        arr = state[name]
        if arr.shape != t.data.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, "
                f"model expects {t.data.shape}"
            )
        t.data = arr.astype(model.dtype)
    extra = set(state) - {n for n, _ in model.named_parameters()}
    if extra:
        raise ValueError(f"checkpoint has unexpected parameters: {sorted(extra)}")
