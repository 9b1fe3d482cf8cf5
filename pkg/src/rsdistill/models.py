"""Three tiny image classifiers from different architecture families.

All families expose the same tap point: the penultimate embedding is the
input of a single affine classifier head. Token models mean-pool their
tokens (no class token).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import ops
from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Parameter
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor

FAMILIES = ("cnn", "transformer", "mixer")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    embed_dim: int = 32
    num_classes: int = 3
    depth: Optional[int] = None
    width: int = 8
    patch_size: int = 4
    image_size: int = 16
    in_channels: int = 1
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.depth is None:
            object.__setattr__(self, "depth", 3 if self.family == "cnn" else 2)
        if self.embed_dim < 2 or self.num_classes < 2:
            raise ConfigError("embed_dim and num_classes must both be >= 2")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.family != "cnn" and self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by "
                              f"patch_size {self.patch_size}")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    logits: Tensor
    penultimate: Tensor
    taps: dict


class Model(Module):
    spec: ModelSpec

    def _check_input(self, x: Tensor) -> None:
        s = self.spec
        want = (s.in_channels, s.image_size, s.image_size)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"{s.family} expects input B×{want[0]}×{want[1]}×{want[2]}, "
                             f"got {x.shape}")

    def forward(self, x, mode: Optional[str] = None) -> ForwardOutput:
        x = T.as_tensor(x)
        self._check_input(x)
        if mode is not None:
            if mode not in ("train", "eval"):
                raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
            self.train() if mode == "train" else self.eval()
        taps = self._features(x)
        emb = taps["penultimate"]
        return ForwardOutput(self.head(emb), emb, taps)

    __call__ = forward

    @property
    def tap_names(self) -> list:
        return [f"block{i + 1}" for i in range(self.spec.depth)] + ["penultimate"]


def patchify(x: Tensor, p: int) -> Tensor:
    """B×C×H×W -> B×T×(C·p·p), tokens in row-major patch order."""
    b, c, h, w = x.shape
    t = T.reshape(x, (b, c, h // p, p, w // p, p))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))
    return T.reshape(t, (b, (h // p) * (w // p), c * p * p))


def _mean_tokens(x: Tensor) -> Tensor:
    return T.reduce_mean(x, 1)


class TinyCNN(Model):
    """Stride-2 3×3 conv blocks with batchnorm+ReLU, then global average pooling."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        chans = cnn_channels(spec)
        self.convs, self.norms = [], []
        c_in = spec.in_channels
        for c_out in chans:
            self.convs.append(Conv2d(c_in, c_out, 3, rng, stride=2, padding=1))
            self.norms.append(BatchNorm2d(c_out))
            c_in = c_out
        self.head = Linear(spec.embed_dim, spec.num_classes, rng)

    def _features(self, x: Tensor) -> dict:
        taps = {}
        h = x
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = ops.relu(norm(conv(h)))
            taps[f"block{i + 1}"] = h
        b, c, hh, ww = h.shape
        taps["penultimate"] = T.reduce_mean(T.reshape(h, (b, c, hh * ww)), 2)
        return taps


def cnn_channels(spec: ModelSpec) -> list:
    return [spec.width * 2 ** i for i in range(spec.depth - 1)] + [spec.embed_dim]


class _AttentionBlock(Module):
    def __init__(self, d: int, ratio: int, rng):
        self.norm1 = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.proj = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(d, ratio * d, rng)
        self.fc2 = Linear(ratio * d, d, rng)
        self.scale = 1.0 / math.sqrt(d)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        q, k, v = self.q(h), self.k(h), self.v(h)
        scores = T.bmm(q, T.transpose(k, (0, 2, 1))) * self.scale
        attn = ops.softmax(scores)
        x = x + self.proj(T.bmm(attn, v))
        return x + self.fc2(ops.gelu(self.fc1(self.norm2(x))))


class TinyTransformer(Model):
    """Linear patch embedding, single-head attention blocks, mean-pooled tokens."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        d = spec.embed_dim
        self.embed = Linear(spec.patch_dim, d, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(spec.num_tokens, d)))
        self.blocks = [_AttentionBlock(d, spec.mlp_ratio, rng) for _ in range(spec.depth)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, spec.num_classes, rng)

    def _features(self, x: Tensor) -> dict:
        h = self.embed(patchify(x, self.spec.patch_size))
        h = h + T.expand(T.reshape(self.pos, (1,) + self.pos.shape), h.shape)
        taps = {}
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            taps[f"block{i + 1}"] = h
        taps["penultimate"] = _mean_tokens(self.norm(h))
        return taps


class _MixerBlock(Module):
    def __init__(self, n_tokens: int, d: int, ratio: int, rng):
        self.norm1 = LayerNorm(d)
        self.tok1 = Linear(n_tokens, ratio * n_tokens, rng)
        self.tok2 = Linear(ratio * n_tokens, n_tokens, rng)
        self.norm2 = LayerNorm(d)
        self.ch1 = Linear(d, ratio * d, rng)
        self.ch2 = Linear(ratio * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.transpose(self.norm1(x), (0, 2, 1))
        h = self.tok2(ops.gelu(self.tok1(h)))
        x = x + T.transpose(h, (0, 2, 1))
        return x + self.ch2(ops.gelu(self.ch1(self.norm2(x))))


class TinyMixer(Model):
    """Token-mixing and channel-mixing MLP blocks over linear patch embeddings."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        d = spec.embed_dim
        self.embed = Linear(spec.patch_dim, d, rng)
        self.blocks = [_MixerBlock(spec.num_tokens, d, spec.mlp_ratio, rng)
                       for _ in range(spec.depth)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, spec.num_classes, rng)

    def _features(self, x: Tensor) -> dict:
        h = self.embed(patchify(x, self.spec.patch_size))
        taps = {}
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            taps[f"block{i + 1}"] = h
        taps["penultimate"] = _mean_tokens(self.norm(h))
        return taps


_BUILDERS = {"cnn": TinyCNN, "transformer": TinyTransformer, "mixer": TinyMixer}


def build(spec: ModelSpec) -> Model:
    return _BUILDERS[spec.family](spec)


def expected_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count for a spec."""
    c = spec.num_classes
    d = spec.embed_dim
    r = spec.mlp_ratio
    head = d * c + c
    if spec.family == "cnn":
        total, c_in = 0, spec.in_channels
        for c_out in cnn_channels(spec):
            total += c_in * c_out * 9 + c_out + 2 * c_out
            c_in = c_out
        return total + head
    embed = spec.patch_dim * d + d
    final_norm = 2 * d
    channel_mlp = d * r * d + r * d + r * d * d + d
    if spec.family == "transformer":
        block = 2 * d + 4 * (d * d + d) + 2 * d + channel_mlp
        return embed + spec.num_tokens * d + spec.depth * block + final_norm + head
    n = spec.num_tokens
    token_mlp = n * r * n + r * n + r * n * n + n
    block = 2 * d + token_mlp + 2 * d + channel_mlp
    return embed + spec.depth * block + final_norm + head


class FrozenModel:
    """A model whose parameters receive no gradients and always runs in eval mode."""

    def __init__(self, model: Model):
        self.model = model
        for p in model.parameters():
            p.requires_grad = False
            p.grad = None
        model.eval()

    @property
    def spec(self) -> ModelSpec:
        return self.model.spec

    @property
    def tap_names(self) -> list:
        return self.model.tap_names

    def forward(self, x, mode: Optional[str] = None) -> ForwardOutput:
        return self.model.forward(x, "eval")

    __call__ = forward

    def checksum(self) -> str:
        return self.model.checksum()

    def parameters(self):
        return self.model.parameters()


def freeze(model: Model) -> FrozenModel:
    return model if isinstance(model, FrozenModel) else FrozenModel(model)


def save_model(model, path) -> None:
    inner = model.model if isinstance(model, FrozenModel) else model
    save_checkpoint(path, {"kind": "model", "spec": inner.spec.to_dict()}, inner.state_dict())


def load_model(path) -> Model:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "model":
        raise ConfigError(f"{path} is not a model checkpoint")
    model = build(ModelSpec(**header["spec"]))
    model.load_state_dict(arrays)
    return model


def with_seed(spec: ModelSpec, seed: int) -> ModelSpec:
    return replace(spec, seed=seed)


def spec_json(spec: ModelSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
