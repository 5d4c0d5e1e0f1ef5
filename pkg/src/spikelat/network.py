"""Model assembly: latency encoder in front, spiking stages behind it.

A model is described by a ``ModelSpec`` (input geometry, class count,
window length, stage list) and materialized by :func:`build_model` with a
seeded initializer. The forward pass is layer-major: the encoder turns the
image into T spike frames, then each stage consumes its predecessor's T
frames and produces its own, threading membrane state across time inside
the stage. That is equivalent to stepping the whole net through time for a
feedforward wiring, and far simpler to assemble.

The output stage is itself a spiking population. Its pre-reset membrane
potentials double as the per-step logits for the loss; its spikes drive
first-spike decoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, avg_pool2d, batchnorm2d, conv2d, linear
from .encoder import LatencyEncoder
from .errors import ContractError, ShapeError, SpecError
from .lif import LifConfig, lif_unroll


@dataclass(frozen=True)
class LayerSpec:
    kind: str          # conv | sew | pool | flatten | linear
    out: int = 0       # channels (conv/sew) or units (linear)
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    pool: int = 2

    def __post_init__(self):
        if self.kind not in ("conv", "sew", "pool", "flatten", "linear"):
            raise SpecError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple      # (C, H, W)
    classes: int
    timesteps: int
    encoder_channels: int
    layers: tuple           # of LayerSpec
    lif: LifConfig = field(default_factory=LifConfig)

    def __post_init__(self):
        if len(self.input_shape) != 3:
            raise SpecError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.classes < 2:
            raise SpecError("need at least two classes")
        if self.timesteps < 1:
            raise SpecError("timesteps must be >= 1")
        if self.encoder_channels < 1:
            raise SpecError("encoder_channels must be >= 1")


PRESETS = ("mlp-mini", "vgg-mini", "sew-mini")


def preset_spec(name, input_shape, classes, timesteps=8, hidden=128,
                encoder_channels=2, lif=None, width=8):
    """Concrete ModelSpec for one of the built-in architectures.

    mlp-mini: encode, flatten, one hidden spiking linear layer.
    vgg-mini: encode, two conv blocks with pooling.
    sew-mini: vgg-mini plus a residual spiking block on the second conv.
    """
    lif = lif if lif is not None else LifConfig()
    if name == "mlp-mini":
        layers = (
            LayerSpec("flatten"),
            LayerSpec("linear", out=hidden),
        )
    elif name == "vgg-mini":
        layers = (
            LayerSpec("conv", out=width),
            LayerSpec("pool", pool=2),
            LayerSpec("conv", out=2 * width),
            LayerSpec("pool", pool=2),
            LayerSpec("flatten"),
        )
    elif name == "sew-mini":
        layers = (
            LayerSpec("conv", out=width),
            LayerSpec("pool", pool=2),
            LayerSpec("conv", out=2 * width),
            LayerSpec("sew", out=2 * width),
            LayerSpec("pool", pool=2),
            LayerSpec("flatten"),
        )
    else:
        raise SpecError(f"unknown preset {name!r}, expected one of {PRESETS}")
    return ModelSpec(
        name=name,
        input_shape=tuple(input_shape),
        classes=classes,
        timesteps=timesteps,
        encoder_channels=encoder_channels,
        layers=layers,
        lif=lif,
    )


@dataclass
class StageAudit:
    """Static per-stage accounting used by the energy model."""

    name: str
    kind: str
    in_shape: tuple     # per-sample, without batch
    out_shape: tuple
    flops: int          # multiply-accumulates per sample per presentation
    spiking: bool       # whether the stage emits spike-valued outputs


@dataclass
class ForwardRecord:
    """Everything one forward pass produced that training or analysis reads.

    ``logits[t]`` are the output population's pre-reset potentials, shape
    (N, classes). ``stage_spikes`` maps stage name to that stage's emitted
    values per step (plain arrays, detached from the tape).
    """

    logits: list
    out_spikes: list
    features: Tensor
    stage_spikes: dict
    batch: int

    @property
    def timesteps(self):
        return len(self.logits)

    def stage_alpha(self):
        """Mean emitted value per slot per step, keyed by stage name."""
        out = {}
        for name, frames in self.stage_spikes.items():
            total = float(sum(f.sum() for f in frames))
            slots = len(frames) * frames[0].size
            out[name] = total / slots
        return out

    def sparsity(self):
        """Fraction of slot-steps carrying a spike, over all spiking stages."""
        total = 0.0
        slots = 0
        for frames in self.stage_spikes.values():
            total += float(sum(np.count_nonzero(f) for f in frames))
            slots += len(frames) * frames[0].size
        return total / slots


def _kaiming(rng, shape, fan_in):
    return rng.normal(size=shape) * np.sqrt(2.0 / fan_in)


class ConvStage:
    def __init__(self, name, in_ch, out_ch, kernel, stride, pad, lif, rng):
        self.name = name
        self.k = Tensor(_kaiming(rng, (out_ch, in_ch, kernel, kernel),
                                 in_ch * kernel * kernel))
        self.gamma = Tensor(np.ones(out_ch))
        self.beta = Tensor(np.zeros(out_ch))
        self.running_mean = np.zeros(out_ch)
        self.running_var = np.ones(out_ch)
        self.stride, self.pad, self.lif = stride, pad, lif

    def unroll(self, frames, training):
        currents = []
        for x in frames:
            h = conv2d(x, self.k, stride=self.stride, pad=self.pad)
            h = batchnorm2d(h, self.gamma, self.beta, self.running_mean,
                            self.running_var, training=training)
            currents.append(h)
        return lif_unroll(currents, self.lif).spikes

    def parameters(self):
        return [(f"{self.name}.conv.k", self.k),
                (f"{self.name}.bn.gamma", self.gamma),
                (f"{self.name}.bn.beta", self.beta)]

    def buffers(self):
        return [(f"{self.name}.bn.running_mean", self.running_mean),
                (f"{self.name}.bn.running_var", self.running_var)]


class SewStage:
    """Residual spiking block: spikes of a conv path added to its input.

    Input frames must be binary; outputs take values in {0, 1, 2}.
    """

    def __init__(self, name, channels, kernel, lif, rng):
        self.inner = ConvStage(name, channels, channels, kernel, 1,
                               kernel // 2, lif, rng)
        self.name = name

    def unroll(self, frames, training):
        branch = self.inner.unroll(frames, training)
        return [s + x for s, x in zip(branch, frames)]

    def parameters(self):
        return self.inner.parameters()

    def buffers(self):
        return self.inner.buffers()


class PoolStage:
    def __init__(self, name, size):
        self.name = name
        self.size = size

    def unroll(self, frames, training):
        return [avg_pool2d(x, self.size) for x in frames]

    def parameters(self):
        return []

    def buffers(self):
        return []


class FlattenStage:
    def __init__(self, name):
        self.name = name

    def unroll(self, frames, training):
        n = frames[0].shape[0]
        return [x.reshape(n, int(np.prod(x.shape[1:]))) for x in frames]

    def parameters(self):
        return []

    def buffers(self):
        return []


class LinearStage:
    def __init__(self, name, in_dim, out_dim, lif, rng):
        self.name = name
        self.w = Tensor(_kaiming(rng, (in_dim, out_dim), in_dim))
        self.b = Tensor(np.zeros(out_dim))
        self.lif = lif

    def unroll(self, frames, training):
        currents = [linear(x, self.w, self.b) for x in frames]
        return lif_unroll(currents, self.lif).spikes

    def parameters(self):
        return [(f"{self.name}.lin.w", self.w), (f"{self.name}.lin.b", self.b)]

    def buffers(self):
        return []


class OutputStage:
    """Readout: linear map into a spiking population of one unit per class."""

    def __init__(self, name, in_dim, classes, lif, rng):
        self.name = name
        self.w = Tensor(_kaiming(rng, (in_dim, classes), in_dim))
        self.b = Tensor(np.zeros(classes))
        self.lif = lif

    def unroll(self, frames, training):
        currents = [linear(x, self.w, self.b) for x in frames]
        trace = lif_unroll(currents, self.lif)
        return trace.spikes, trace.potentials

    def parameters(self):
        return [(f"{self.name}.lin.w", self.w), (f"{self.name}.lin.b", self.b)]

    def buffers(self):
        return []


class Model:
    def __init__(self, spec: ModelSpec, encoder, stages, output, audit):
        self.spec = spec
        self.encoder = encoder
        self.stages = stages
        self.output = output
        self.audit = audit

    def forward(self, images: Tensor, training: bool = False) -> ForwardRecord:
        if images.ndim != 4 or tuple(images.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"expected images (N, {', '.join(map(str, self.spec.input_shape))}),"
                f" got {images.shape}"
            )
        frames, features = self.encoder.encode(images, training)
        record_frames = {"enc": [f.data for f in frames]}
        for stage in self.stages:
            frames = stage.unroll(frames, training)
            if not isinstance(stage, (PoolStage, FlattenStage)):
                record_frames[stage.name] = [f.data for f in frames]
        spikes, potentials = self.output.unroll(frames, training)
        record_frames["out"] = [s.data for s in spikes]
        return ForwardRecord(
            logits=potentials,
            out_spikes=spikes,
            features=features,
            stage_spikes=record_frames,
            batch=images.shape[0],
        )

    def parameters(self):
        out = [(f"enc.{n}", t) for n, t in self.encoder.parameters()]
        for stage in self.stages:
            out.extend(stage.parameters())
        out.extend(self.output.parameters())
        return out

    def buffers(self):
        out = [(f"enc.{n}", a) for n, a in self.encoder.buffers()]
        for stage in self.stages:
            out.extend(stage.buffers())
        return out

    def state_arrays(self):
        """Name -> array for everything a checkpoint must carry."""
        state = {n: t.data for n, t in self.parameters()}
        state.update({n: a for n, a in self.buffers()})
        return state

    def load_state(self, arrays):
        state = dict(arrays)
        for n, t in self.parameters():
            if n not in state:
                raise SpecError(f"checkpoint missing parameter {n!r}")
            a = np.asarray(state.pop(n), dtype=np.float64)
            if a.shape != t.data.shape:
                raise SpecError(
                    f"parameter {n!r} has shape {a.shape}, model needs {t.data.shape}"
                )
            t.data[...] = a
        for n, buf in self.buffers():
            if n not in state:
                raise SpecError(f"checkpoint missing buffer {n!r}")
            a = np.asarray(state.pop(n), dtype=np.float64)
            if a.shape != buf.shape:
                raise SpecError(
                    f"buffer {n!r} has shape {a.shape}, model needs {buf.shape}"
                )
            buf[...] = a
        if state:
            extra = ", ".join(sorted(state))
            raise SpecError(f"checkpoint carries unknown arrays: {extra}")

    def zero_grad(self):
        for _, t in self.parameters():
            t.zero_grad()


def _conv_out(h, w, kernel, stride, pad):
    return ((h + 2 * pad - kernel) // stride + 1,
            (w + 2 * pad - kernel) // stride + 1)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Materialize parameters for a spec with a deterministic initializer."""
    rng = np.random.default_rng(seed)
    c, h, w = spec.input_shape
    encoder = LatencyEncoder(c, spec.encoder_channels, spec.timesteps, rng=rng)
    eh, ew = _conv_out(h, w, 3, 1, 1)
    audit = [StageAudit("enc", "conv", (c, h, w),
                        (spec.encoder_channels, eh, ew),
                        eh * ew * c * spec.encoder_channels * 9, True)]
    shape = (spec.encoder_channels, eh, ew)

    stages = []
    for i, layer in enumerate(spec.layers):
        name = f"s{i}"
        if layer.kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"{name}: conv needs a (C,H,W) input, have {shape}")
            ci, hi, wi = shape
            ho, wo = _conv_out(hi, wi, layer.kernel, layer.stride, layer.pad)
            stages.append(ConvStage(name, ci, layer.out, layer.kernel,
                                    layer.stride, layer.pad, spec.lif, rng))
            flops = ho * wo * ci * layer.out * layer.kernel * layer.kernel
            audit.append(StageAudit(name, "conv", shape, (layer.out, ho, wo),
                                    flops, True))
            shape = (layer.out, ho, wo)
        elif layer.kind == "sew":
            if len(shape) != 3 or shape[0] != layer.out:
                raise SpecError(
                    f"{name}: residual block needs matching channels, have {shape}"
                )
            ci, hi, wi = shape
            stages.append(SewStage(name, ci, layer.kernel, spec.lif, rng))
            flops = hi * wi * ci * ci * layer.kernel * layer.kernel
            audit.append(StageAudit(name, "sew", shape, shape, flops, True))
        elif layer.kind == "pool":
            if len(shape) != 3:
                raise SpecError(f"{name}: pool needs a (C,H,W) input, have {shape}")
            ci, hi, wi = shape
            if hi % layer.pool or wi % layer.pool:
                raise SpecError(
                    f"{name}: {hi}x{wi} not divisible by pool {layer.pool}"
                )
            stages.append(PoolStage(name, layer.pool))
            shape = (ci, hi // layer.pool, wi // layer.pool)
            audit.append(StageAudit(name, "pool",
                                    (ci, hi, wi), shape, 0, False))
        elif layer.kind == "flatten":
            stages.append(FlattenStage(name))
            flat = int(np.prod(shape))
            audit.append(StageAudit(name, "flatten", shape, (flat,), 0, False))
            shape = (flat,)
        elif layer.kind == "linear":
            if len(shape) != 1:
                raise SpecError(f"{name}: linear needs a flat input, have {shape}")
            stages.append(LinearStage(name, shape[0], layer.out, spec.lif, rng))
            audit.append(StageAudit(name, "linear", shape, (layer.out,),
                                    shape[0] * layer.out, True))
            shape = (layer.out,)

    if len(shape) != 1:
        raise SpecError(f"output stage needs a flat input, have {shape}")
    output = OutputStage("out", shape[0], spec.classes, spec.lif, rng)
    audit.append(StageAudit("out", "linear", shape, (spec.classes,),
                            shape[0] * spec.classes, True))
    return Model(spec, encoder, stages, output, audit)
