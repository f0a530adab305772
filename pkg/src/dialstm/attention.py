"""Channel attention modules and the shared recurrent unit.

Three module families implement the extraction -> processing -> recalibration
pipeline: SE (two fully connected layers over the pooled descriptor), ECA
(1-D convolution over the channel descriptor), and the LSTM-gated unit whose
parameters are shared by every block of a stage while a hidden/cell state
pair carries information across blocks. The hidden state is the attention
map applied back to the feature map by channel-wise multiplication.

Cell variants and their weight-only budgets (N channels, reduction r):

  standard  eight N x N gate maps                            8 N^2
  modified  per stream one N -> N/r reduction + four N/r -> N gate maps,
            two streams (pooled input and previous hidden)   10 N^2 / r
  light     per stream one r-group block-diagonal N -> N map + four
            element-wise affine gate maps                    2 N^2/r + 16 N
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import (ElementwiseAffine, FullyConnected, GroupedLinear, Layer,
                     fan_in_uniform)
from .tensor import Tensor

GATES = ("i", "f", "g", "o")

_OUTPUT_ACTIVATIONS = {"sigmoid": T.sigmoid, "tanh": T.tanh, "relu": T.relu}

CELL_VARIANTS = ("standard", "modified", "light")
SHARING_MODES = ("shared", "per-block")
SAM_KINDS = ("none", "se", "eca", "dia-lstm")


@dataclass(frozen=True)
class LstmCellConfig:
    """Cell variant selection; `n` is usually derived from the stage width."""

    variant: str = "modified"
    r: int = 4
    output_activation: str = "sigmoid"
    stack_depth: int = 1
    n: int | None = None

    def validate(self, n: int | None = None) -> None:
        n = self.n if n is None else n
        if self.variant not in CELL_VARIANTS:
            raise ConfigError(f"unknown cell variant {self.variant!r}")
        if self.output_activation not in _OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")
        if self.stack_depth < 1:
            raise ConfigError("stack_depth must be >= 1")
        if self.variant in ("modified", "light"):
            if self.r < 1:
                raise ConfigError("reduction ratio r must be >= 1")
            if n is not None and n % self.r != 0:
                raise ConfigError(f"reduction ratio r={self.r} must divide width n={n}")


@dataclass(frozen=True)
class SamConfig:
    """Which attention module a network uses, and how it is shared."""

    kind: str = "none"
    sharing: str = "shared"
    se_reduction: int = 16
    eca_kernel_size: int = 3
    cell: LstmCellConfig = LstmCellConfig()

    def validate(self, width: int | None = None) -> None:
        if self.kind not in SAM_KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"unknown sharing mode {self.sharing!r}")
        if self.kind == "dia-lstm":
            if self.sharing != "shared":
                raise ConfigError("dia-lstm requires shared sharing: its recurrence "
                                  "is meaningless per block")
            self.cell.validate(width)
        if self.kind == "se" and self.se_reduction < 1:
            raise ConfigError("se reduction must be >= 1")
        if self.kind == "eca" and self.eca_kernel_size % 2 == 0:
            raise ConfigError(f"eca kernel size must be odd, got {self.eca_kernel_size}")


# ---------------------------------------------------------------------------
# per-block baseline modules
# ---------------------------------------------------------------------------

class SeModule:
    """Squeeze-excite: sigmoid(FC2(relu(FC1(GAP(a)))))."""

    def __init__(self, channels: int, reduction: int = 16,
                 rng: np.random.Generator | None = None):
        if reduction < 1:
            raise ConfigError("se reduction must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.fc1 = FullyConnected(channels, hidden, bias=True, rng=rng)
        self.fc2 = FullyConnected(hidden, channels, bias=True, rng=rng)

    def __call__(self, a: Tensor) -> Tensor:
        y = T.global_avg_pool(a)
        return T.sigmoid(self.fc2(T.relu(self.fc1(y))))

    def layers(self) -> list[Layer]:
        return [self.fc1, self.fc2]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for lname, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            for pname, p in layer.parameters().items():
                out[f"{lname}.{pname}"] = p
        return out


class _ChannelConv1d(Layer):
    """1-D convolution across the channel axis with same-length zero padding."""

    kind = "channel_conv1d"

    def __init__(self, kernel_size: int, rng: np.random.Generator):
        self.kernel_size = kernel_size
        self.weight = Tensor(fan_in_uniform(rng, (kernel_size,), kernel_size),
                             requires_grad=True)

    def __call__(self, y: Tensor) -> Tensor:
        b, n = y.shape
        k = self.kernel_size
        as_map = T.reshape(y, (b, 1, 1, n))
        w = T.reshape(self.weight, (1, 1, 1, k))
        out = T.conv2d(as_map, w, stride=1, padding=(0, k // 2))
        return T.reshape(out, (b, n))

    def parameters(self):
        return {"weight": self.weight}

    def weight_count(self):
        return self.kernel_size

    def affine_count(self):
        return 0


class EcaModule:
    """Efficient channel attention: sigmoid(conv1d(GAP(a), k))."""

    def __init__(self, channels: int, kernel_size: int = 3,
                 rng: np.random.Generator | None = None):
        if kernel_size % 2 == 0:
            raise ConfigError(f"eca kernel size must be odd, got {kernel_size}")
        self.channels = channels
        self.conv = _ChannelConv1d(kernel_size, rng or np.random.default_rng(0))

    def __call__(self, a: Tensor) -> Tensor:
        return T.sigmoid(self.conv(T.global_avg_pool(a)))

    def layers(self) -> list[Layer]:
        return [self.conv]

    def parameters(self) -> dict[str, Tensor]:
        return {"conv.weight": self.conv.weight}


# ---------------------------------------------------------------------------
# LSTM cells
# ---------------------------------------------------------------------------

class _CellBase:
    """Shared gate arithmetic: subclasses provide per-gate pre-activations."""

    def __init__(self, n: int, output_activation: str):
        self.n = n
        self.output_activation = output_activation
        self._act = _OUTPUT_ACTIVATIONS[output_activation]

    def _gate_pre(self, gate: str, y: Tensor, h: Tensor) -> Tensor:
        raise NotImplementedError

    def _prepare(self, y: Tensor, h: Tensor):
        return y, h

    def step(self, y: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrence update; returns (new hidden, new cell state)."""
        y2, h2 = self._prepare(y, h)
        i = T.sigmoid(self._gate_pre("i", y2, h2))
        f = T.sigmoid(self._gate_pre("f", y2, h2))
        g = T.tanh(self._gate_pre("g", y2, h2))
        o = T.sigmoid(self._gate_pre("o", y2, h2))
        c_new = T.add(T.mul(f, c), T.mul(i, g))
        h_new = T.mul(o, self._act(c_new))
        return h_new, c_new

    def layers(self) -> list[Layer]:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError


class StandardLstmCell(_CellBase):
    """Eight dense N -> N maps (plus per-gate biases, excluded from budgets)."""

    def __init__(self, n: int, output_activation: str = "sigmoid",
                 rng: np.random.Generator | None = None):
        super().__init__(n, output_activation)
        rng = rng or np.random.default_rng(0)
        self.w_y = {g: FullyConnected(n, n, bias=False, rng=rng) for g in GATES}
        self.w_h = {g: FullyConnected(n, n, bias=False, rng=rng) for g in GATES}
        self.b = {g: Tensor(np.zeros(n), requires_grad=True) for g in GATES}
        self.b["f"].data[:] = 1.0  # forget-gate bias starts open

    def _gate_pre(self, gate, y, h):
        return T.add(T.add(self.w_y[gate](y), self.w_h[gate](h)), self.b[gate])

    def layers(self):
        return [self.w_y[g] for g in GATES] + [self.w_h[g] for g in GATES]

    def parameters(self):
        out = {}
        for g in GATES:
            out[f"w_y.{g}.weight"] = self.w_y[g].weight
            out[f"w_h.{g}.weight"] = self.w_h[g].weight
            out[f"bias.{g}"] = self.b[g]
        return out

    def bias_count(self) -> int:
        return 4 * self.n


class ModifiedLstmCell(_CellBase):
    """Shared dimension reduction per input stream, then four N/r -> N gate maps.

    Each stream (pooled input and previous hidden) gets its own N -> N/r
    reduction followed by relu, so the stream budgets match at 5 N^2 / r.
    """

    def __init__(self, n: int, r: int = 4, output_activation: str = "sigmoid",
                 rng: np.random.Generator | None = None):
        super().__init__(n, output_activation)
        if n % r != 0:
            raise ConfigError(f"reduction ratio r={r} must divide width n={n}")
        rng = rng or np.random.default_rng(0)
        self.r = r
        hidden = n // r
        self.reduce_y = FullyConnected(n, hidden, bias=True, rng=rng)
        self.reduce_h = FullyConnected(n, hidden, bias=True, rng=rng)
        self.w_y = {g: FullyConnected(hidden, n, bias=False, rng=rng) for g in GATES}
        self.w_h = {g: FullyConnected(hidden, n, bias=False, rng=rng) for g in GATES}
        self.b = {g: Tensor(np.zeros(n), requires_grad=True) for g in GATES}
        self.b["f"].data[:] = 1.0

    def _prepare(self, y, h):
        return T.relu(self.reduce_y(y)), T.relu(self.reduce_h(h))

    def _gate_pre(self, gate, y2, h2):
        return T.add(T.add(self.w_y[gate](y2), self.w_h[gate](h2)), self.b[gate])

    def layers(self):
        return ([self.reduce_y, self.reduce_h]
                + [self.w_y[g] for g in GATES] + [self.w_h[g] for g in GATES])

    def parameters(self):
        out = {"reduce_y.weight": self.reduce_y.weight,
               "reduce_y.bias": self.reduce_y.bias,
               "reduce_h.weight": self.reduce_h.weight,
               "reduce_h.bias": self.reduce_h.bias}
        for g in GATES:
            out[f"w_y.{g}.weight"] = self.w_y[g].weight
            out[f"w_h.{g}.weight"] = self.w_h[g].weight
            out[f"bias.{g}"] = self.b[g]
        return out

    def bias_count(self) -> int:
        return 4 * self.n + 2 * (self.n // self.r)


class LightLstmCell(_CellBase):
    """Block-diagonal stream mixing plus element-wise affine gate maps.

    The grouped linears are bias-free so the weight-only budget is exactly
    2 N^2/r + 16 N; the affine gate maps start at identity (w=1, b=0) with
    the input-stream forget-gate bias opened to 1.
    """

    def __init__(self, n: int, r: int = 4, output_activation: str = "sigmoid",
                 rng: np.random.Generator | None = None):
        super().__init__(n, output_activation)
        if n % r != 0:
            raise ConfigError(f"reduction ratio r={r} must divide width n={n}")
        rng = rng or np.random.default_rng(0)
        self.r = r
        self.mix_y = GroupedLinear(n, r, bias=False, rng=rng)
        self.mix_h = GroupedLinear(n, r, bias=False, rng=rng)
        self.ea_y = {g: ElementwiseAffine(n) for g in GATES}
        self.ea_h = {g: ElementwiseAffine(n) for g in GATES}
        self.ea_y["f"].bias.data[:] = 1.0

    def _prepare(self, y, h):
        return T.relu(self.mix_y(y)), T.relu(self.mix_h(h))

    def _gate_pre(self, gate, y2, h2):
        return T.add(self.ea_y[gate](y2), self.ea_h[gate](h2))

    def layers(self):
        return ([self.mix_y, self.mix_h]
                + [self.ea_y[g] for g in GATES] + [self.ea_h[g] for g in GATES])

    def parameters(self):
        out = {"mix_y.weight": self.mix_y.weight, "mix_h.weight": self.mix_h.weight}
        for g in GATES:
            out[f"ea_y.{g}.weight"] = self.ea_y[g].weight
            out[f"ea_y.{g}.bias"] = self.ea_y[g].bias
            out[f"ea_h.{g}.weight"] = self.ea_h[g].weight
            out[f"ea_h.{g}.bias"] = self.ea_h[g].bias
        return out

    def bias_count(self) -> int:
        return 0


def make_cell(cfg: LstmCellConfig, n: int, rng: np.random.Generator):
    cfg.validate(n)
    if cfg.variant == "standard":
        return StandardLstmCell(n, cfg.output_activation, rng)
    if cfg.variant == "modified":
        return ModifiedLstmCell(n, cfg.r, cfg.output_activation, rng)
    return LightLstmCell(n, cfg.r, cfg.output_activation, rng)


def cell_weight_formula(variant: str, n: int, r: int = 1) -> int:
    """Closed-form weight-only budget per cell variant."""
    if variant == "standard":
        return 8 * n * n
    if variant == "modified":
        return 10 * n * n // r
    if variant == "light":
        return 2 * n * n // r + 16 * n
    raise ConfigError(f"unknown cell variant {variant!r}")


# ---------------------------------------------------------------------------
# the shared recurrent unit
# ---------------------------------------------------------------------------

@dataclass
class DiaState:
    """One (hidden, cell) pair per stacked cell; zeroed at stage entry."""

    pairs: list[tuple[Tensor, Tensor]]

    @classmethod
    def zeros(cls, n: int, stack_depth: int, batch: int) -> "DiaState":
        return cls([(Tensor(np.zeros((batch, n))), Tensor(np.zeros((batch, n))))
                    for _ in range(stack_depth)])


class DiaUnit:
    """A stack of LSTM cells shared across all blocks of one stage."""

    def __init__(self, cfg: LstmCellConfig, n: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        cfg = replace(cfg, n=n)
        cfg.validate()
        self.cfg = cfg
        self.n = n
        self.cells = [make_cell(cfg, n, rng) for _ in range(cfg.stack_depth)]

    def init_state(self, batch: int) -> DiaState:
        return DiaState.zeros(self.n, len(self.cells), batch)

    def step(self, y: Tensor, state: DiaState) -> tuple[Tensor, DiaState]:
        """Feed the pooled descriptor through the stack; top hidden state is
        the attention map."""
        if y.shape[-1] != self.n:
            raise ConfigError(f"unit width {self.n} does not match input width "
                              f"{y.shape[-1]}")
        new_pairs = []
        feed = y
        for cell, (h, c) in zip(self.cells, state.pairs):
            h_new, c_new = cell.step(feed, h, c)
            new_pairs.append((h_new, c_new))
            feed = h_new
        return feed, DiaState(new_pairs)

    def layers(self) -> list[Layer]:
        out = []
        for cell in self.cells:
            out.extend(cell.layers())
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, cell in enumerate(self.cells):
            for name, p in cell.parameters().items():
                out[f"cell{k}.{name}"] = p
        return out

    def weight_count(self) -> int:
        return sum(layer.weight_count() for layer in self.layers())


def dia_lstm_step(unit: DiaUnit, y: Tensor, state: DiaState):
    """Functional form of one shared-unit recurrence update."""
    return unit.step(y, state)


def dia_apply(unit: DiaUnit, blocks, x0: Tensor, use_skip: bool = True,
              trace=None, stage: int = 0) -> Tensor:
    """Iterate a stage: a_t = block(x_t), h_t from the shared unit, then
    x_{t+1} = x_t + a_t (x) h_t (the skip term drops when use_skip=False).

    `blocks` is a sequence of callables mapping x_t to the residual-branch
    output a_t of identical shape. State starts at zero on entry. A trace
    sink with a record(stage, block, h, y) method receives every attention
    map and pooled descriptor as plain arrays.
    """
    x = x0
    state = unit.init_state(x.shape[0])
    for t, block in enumerate(blocks):
        a = block(x)
        y = T.global_avg_pool(a)
        h, state = unit.step(y, state)
        recal = T.channelwise_mul(a, h)
        x = T.add(x, recal) if use_skip else recal
        if trace is not None:
            trace.record(stage, t, h.data, y.data)
    return x


def make_sam_module(cfg: SamConfig, channels: int, rng: np.random.Generator):
    """Instantiate the configured module at a given channel width."""
    cfg.validate(channels)
    if cfg.kind == "none":
        return None
    if cfg.kind == "se":
        return SeModule(channels, cfg.se_reduction, rng)
    if cfg.kind == "eca":
        return EcaModule(channels, cfg.eca_kernel_size, rng)
    return DiaUnit(cfg.cell, channels, rng)
