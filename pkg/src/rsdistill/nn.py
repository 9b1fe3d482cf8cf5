"""Parameter containers and the small set of layers the models use."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import ops
from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal container: parameters and submodules are found by attribute scan."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {}
        for name, value in self._children():
            if isinstance(value, Parameter):
                out[prefix + name] = value
            else:
                out.update(value.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, value in self._children():
            if isinstance(value, Module):
                out.update(value.named_buffers(prefix + name + "."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for k in buffers:
            self._set_buffer(k, np.array(state[k], dtype=np.float64))

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        parts = dotted.split(".")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        obj.set_buffer(parts[-1], value)

    def train(self) -> "Module":
        for m in self.modules():
            m.training = True
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


class Linear(Module):
    """Affine map ``x @ weight + bias``; leading dims beyond the last are flattened."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(uniform_init(rng, (d_in, d_out), d_in))
        self.bias = Parameter(uniform_init(rng, (d_out,), d_in)) if bias else None

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got shape {x.shape}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else T.reshape(x, (-1, self.d_in))
        out = T.matmul(flat, self.weight)
        if self.bias is not None:
            out = out + T.expand(T.reshape(self.bias, (1, self.d_out)), out.shape)
        return out if x.ndim == 2 else T.reshape(out, lead + (self.d_out,))


class BatchNorm1d(Module):
    def __init__(self, dim: int):
        self.dim = dim
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.stats = ops.RunningStats.fresh(dim)

    def __call__(self, x) -> Tensor:
        return ops.batchnorm_1d(x, self.gamma, self.beta, self.stats, training=self.training)

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + "running_mean": self.stats.mean, prefix + "running_var": self.stats.var}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "running_mean":
            self.stats.mean = value
        elif name == "running_var":
            self.stats.var = value
        else:
            raise KeyError(name)


class BatchNorm2d(BatchNorm1d):
    """Per-channel batchnorm on B×C×H×W, routed through the 1-D kernel."""

    def __call__(self, x) -> Tensor:
        b, c, h, w = x.shape
        flat = T.reshape(T.transpose(x, (0, 2, 3, 1)), (b * h * w, c))
        y = ops.batchnorm_1d(flat, self.gamma, self.beta, self.stats, training=self.training)
        return T.transpose(T.reshape(y, (b, h, w, c)), (0, 3, 1, 2))


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = Parameter(uniform_init(rng, (c_out,), fan_in))
        self.stride, self.padding = stride, padding

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)
