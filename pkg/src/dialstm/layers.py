"""Parameterized layers over the autodiff core, with uniform parameter accounting.

Every layer carries named parameter tensors and reports two tallies: a
weight-only count (the quantity matched by the closed-form budgets of the
attention cells) and an affine count (biases plus normalization scale/shift,
which the closed forms exclude). `learnable_count` is their sum and always
equals brute-force enumeration of the parameter buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class: named parameters plus weight/affine accounting."""

    kind = "layer"

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def weight_count(self) -> int:
        raise NotImplementedError

    def affine_count(self) -> int:
        raise NotImplementedError

    def learnable_count(self) -> int:
        return self.weight_count() + self.affine_count()


class FullyConnected(Layer):
    kind = "fully_connected"

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(fan_in_uniform(rng, (in_features, out_features), in_features),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.data.ndim == 1
        if squeeze:
            x = T.reshape(x, (1, -1))
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        if squeeze:
            out = T.reshape(out, (self.out_features,))
        return out

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def weight_count(self):
        return self.in_features * self.out_features

    def affine_count(self):
        return self.out_features if self.bias is not None else 0


class GroupedLinear(Layer):
    """Block-diagonal n -> n linear map with n^2/groups weights."""

    kind = "grouped_linear"

    def __init__(self, n: int, groups: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        if groups < 1 or n % groups != 0:
            raise ConfigError(f"grouped_linear: groups={groups} must divide n={n}")
        rng = rng or np.random.default_rng(0)
        self.n = n
        self.groups = groups
        s = n // groups
        self.weight = Tensor(fan_in_uniform(rng, (groups, s, s), s), requires_grad=True)
        self.bias = Tensor(np.zeros(n), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.grouped_linear(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def as_dense_matrix(self) -> np.ndarray:
        """Assemble the equivalent [n, n] block-diagonal matrix."""
        s = self.n // self.groups
        dense = np.zeros((self.n, self.n))
        for g in range(self.groups):
            dense[g * s:(g + 1) * s, g * s:(g + 1) * s] = self.weight.data[g]
        return dense

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def weight_count(self):
        return self.n * self.n // self.groups

    def affine_count(self):
        return self.n if self.bias is not None else 0


class ElementwiseAffine(Layer):
    """w * x + b with learnable per-element vectors; both count as weights."""

    kind = "elementwise_affine"

    def __init__(self, n: int):
        self.n = n
        self.weight = Tensor(np.ones(n), requires_grad=True)
        self.bias = Tensor(np.zeros(n), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.elementwise_affine(x, self.weight, self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def weight_count(self):
        return 2 * self.n

    def affine_count(self):
        return 0


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, bias: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            fan_in_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def weight_count(self):
        return self.in_channels * self.out_channels * self.kernel * self.kernel

    def affine_count(self):
        return self.out_channels if self.bias is not None else 0


class BatchNorm(Layer):
    """Channel normalization; the learnable scale/shift sit in the affine bucket."""

    kind = "batch_norm"

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training=training,
                            momentum=self.momentum, eps=self.eps)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def weight_count(self):
        return 0

    def affine_count(self):
        return 2 * self.channels


@dataclass
class ParamBudget:
    """Per-component weight-only and bias/affine tallies.

    Shared parameters are counted once, attributed to the first component
    that references them.
    """

    rows: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def weights_total(self) -> int:
        return sum(w for w, _ in self.rows.values())

    @property
    def affine_total(self) -> int:
        return sum(a for _, a in self.rows.values())

    @property
    def learnable_total(self) -> int:
        return self.weights_total + self.affine_total

    def weights(self, name: str) -> int:
        return self.rows[name][0]

    def affine(self, name: str) -> int:
        return self.rows[name][1]

    def format_table(self) -> str:
        width = max([len(n) for n in self.rows] + [len("component")])
        lines = [f"{'component':<{width}}  {'weights':>12}  {'affine':>10}  {'total':>12}"]
        for name, (w, a) in self.rows.items():
            lines.append(f"{name:<{width}}  {w:>12}  {a:>10}  {w + a:>12}")
        lines.append(f"{'TOTAL':<{width}}  {self.weights_total:>12}  "
                     f"{self.affine_total:>10}  {self.learnable_total:>12}")
        return "\n".join(lines)


def count_weights(components) -> ParamBudget:
    """Tally unique parameters per component.

    `components` maps component name -> iterable of Layers. A parameter
    tensor referenced from several positions (sharing) contributes exactly
    once, in the first component that declares it.
    """
    budget = ParamBudget()
    seen: set[int] = set()
    for name, layers in components.items():
        weights = 0
        affine = 0
        for layer in layers:
            fresh = [pname for pname, p in layer.parameters().items()
                     if id(p) not in seen]
            if not fresh:
                continue
            if len(fresh) == len(layer.parameters()):
                weights += layer.weight_count()
                affine += layer.affine_count()
            else:
                # partially shared layer: fall back to buffer-length bucketing
                for pname in fresh:
                    p = layer.parameters()[pname]
                    if layer.kind == "elementwise_affine":
                        weights += p.data.size
                    elif pname == "bias" or layer.kind == "batch_norm":
                        affine += p.data.size
                    else:
                        weights += p.data.size
            for pname, p in layer.parameters().items():
                seen.add(id(p))
        budget.rows[name] = (weights, affine)
    return budget


def enumerate_learnable(layers) -> int:
    """Brute-force parameter buffer lengths, deduplicated by identity."""
    seen = set()
    total = 0
    for layer in layers:
        for p in layer.parameters().values():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.data.size
    return total
