"""Residual network construction from declarative configs.

Stages are runs of pre-activation blocks (basic or bottleneck) sharing one
output width; that width is the sharing scope of a recurrent attention unit.
Stability toggles (skip connections, batch normalization) exist so training
behavior without them can be measured rather than crashing the process.

Parameter initialization draws from two decoupled streams derived from the
seed: one for backbone weights, one for attention modules. Networks that
differ only in their attention configuration therefore share bitwise-equal
backbone parameters, which the identity-recalibration checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import DiaUnit, SamConfig, make_sam_module
from .errors import ConfigError, ShapeError
from .layers import BatchNorm, Conv2d, FullyConnected, count_weights
from .tensor import Tensor


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int  # base width; block output is channels * expansion
    stride: int


@dataclass
class NetworkConfig:
    stages: list[StageSpec]
    block_kind: str = "basic"
    attention: SamConfig = field(default_factory=SamConfig)
    attention_block_mask: list[list[bool]] | None = None
    attention_stage_mask: list[bool] | None = None
    masked_blocks_advance_state: bool = False
    use_skip: bool = True
    use_batchnorm: bool = True
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    name: str = ""

    @property
    def expansion(self) -> int:
        return 4 if self.block_kind == "bottleneck" else 1

    def stage_width(self, stage: int) -> int:
        return self.stages[stage].channels * self.expansion

    def validate(self) -> None:
        if self.block_kind not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block kind {self.block_kind!r}")
        if not self.stages:
            raise ConfigError("network needs at least one stage")
        if self.attention_stage_mask is not None and \
                len(self.attention_stage_mask) != len(self.stages):
            raise ConfigError(
                f"attention_stage_mask has {len(self.attention_stage_mask)} entries "
                f"for {len(self.stages)} stages")
        if self.attention_block_mask is not None:
            if len(self.attention_block_mask) != len(self.stages):
                raise ConfigError("attention_block_mask needs one list per stage")
            for s, mask in enumerate(self.attention_block_mask):
                if len(mask) != self.stages[s].blocks:
                    raise ConfigError(
                        f"attention_block_mask[{s}] has {len(mask)} entries for "
                        f"{self.stages[s].blocks} blocks")
        for s in range(len(self.stages)):
            self.attention.validate(self.stage_width(s))

    def stage_mask(self, stage: int) -> bool:
        return self.attention_stage_mask is None or self.attention_stage_mask[stage]

    def block_mask(self, stage: int, block: int) -> bool:
        return self.attention_block_mask is None or self.attention_block_mask[stage][block]


_NAMED_BOTTLENECK_BLOCKS = {"resnet83": 9, "resnet164": 18,
                            "resnet245": 27, "resnet407": 45}


def named_config(name: str, num_classes: int | None = None) -> NetworkConfig:
    """Stock architectures; attention is configured separately by the caller."""
    if name in _NAMED_BOTTLENECK_BLOCKS:
        n = _NAMED_BOTTLENECK_BLOCKS[name]
        cfg = NetworkConfig(
            stages=[StageSpec(n, 16, 1), StageSpec(n, 32, 2), StageSpec(n, 64, 2)],
            block_kind="bottleneck", num_classes=num_classes or 100, name=name)
    elif name == "resnet56-basic":
        cfg = NetworkConfig(
            stages=[StageSpec(9, 16, 1), StageSpec(9, 32, 2), StageSpec(9, 64, 2)],
            block_kind="basic", num_classes=num_classes or 100, name=name)
    elif name == "tiny-dia":
        # desk-scale training config: minutes on one core at 16x16 input
        cfg = NetworkConfig(
            stages=[StageSpec(3, 8, 1), StageSpec(3, 16, 2), StageSpec(3, 32, 2)],
            block_kind="basic", num_classes=num_classes or 4,
            input_shape=(3, 16, 16), name=name)
    else:
        raise ConfigError(f"unknown architecture {name!r}")
    return cfg


class BasicBlock:
    """Pre-activation basic block: (BN-relu-conv3x3) x 2."""

    expansion = 1

    def __init__(self, in_ch: int, channels: int, stride: int, use_bn: bool,
                 rng: np.random.Generator):
        out_ch = channels
        self.bn1 = BatchNorm(in_ch) if use_bn else None
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, rng=rng)
        self.bn2 = BatchNorm(out_ch) if use_bn else None
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng=rng)
        self.proj = (Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng)
                     if stride != 1 or in_ch != out_ch else None)

    def branch(self, x: Tensor, training: bool) -> Tensor:
        h = x
        if self.bn1 is not None:
            h = self.bn1(h, training)
        h = T.relu(h)
        h = self.conv1(h)
        if self.bn2 is not None:
            h = self.bn2(h, training)
        h = T.relu(h)
        return self.conv2(h)

    def shortcut(self, x: Tensor) -> Tensor:
        return self.proj(x) if self.proj is not None else x

    def named_layers(self):
        out = []
        for name in ("bn1", "conv1", "bn2", "conv2", "proj"):
            layer = getattr(self, name)
            if layer is not None:
                out.append((name, layer))
        return out


class BottleneckBlock:
    """Pre-activation bottleneck: 1x1 down, 3x3, 1x1 up (x4 expansion)."""

    expansion = 4

    def __init__(self, in_ch: int, channels: int, stride: int, use_bn: bool,
                 rng: np.random.Generator):
        out_ch = channels * self.expansion
        self.bn1 = BatchNorm(in_ch) if use_bn else None
        self.conv1 = Conv2d(in_ch, channels, 1, rng=rng)
        self.bn2 = BatchNorm(channels) if use_bn else None
        self.conv2 = Conv2d(channels, channels, 3, stride=stride, rng=rng)
        self.bn3 = BatchNorm(channels) if use_bn else None
        self.conv3 = Conv2d(channels, out_ch, 1, rng=rng)
        self.proj = (Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng)
                     if stride != 1 or in_ch != out_ch else None)

    def branch(self, x: Tensor, training: bool) -> Tensor:
        h = x
        if self.bn1 is not None:
            h = self.bn1(h, training)
        h = T.relu(h)
        h = self.conv1(h)
        if self.bn2 is not None:
            h = self.bn2(h, training)
        h = T.relu(h)
        h = self.conv2(h)
        if self.bn3 is not None:
            h = self.bn3(h, training)
        h = T.relu(h)
        return self.conv3(h)

    def shortcut(self, x: Tensor) -> Tensor:
        return self.proj(x) if self.proj is not None else x

    def named_layers(self):
        out = []
        for name in ("bn1", "conv1", "bn2", "conv2", "bn3", "conv3", "proj"):
            layer = getattr(self, name)
            if layer is not None:
                out.append((name, layer))
        return out


class Model:
    """A built network: blocks, attention modules, classifier head."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        rng_backbone = np.random.default_rng([seed, 0])
        rng_attention = np.random.default_rng([seed, 1])

        block_cls = BasicBlock if config.block_kind == "basic" else BottleneckBlock
        in_ch = config.stages[0].channels
        self.conv0 = Conv2d(config.input_shape[0], in_ch, 3, rng=rng_backbone)

        self.stages: list[list] = []
        for spec in config.stages:
            blocks = []
            for b in range(spec.blocks):
                stride = spec.stride if b == 0 else 1
                block = block_cls(in_ch, spec.channels, stride,
                                  config.use_batchnorm, rng_backbone)
                in_ch = spec.channels * block_cls.expansion
                blocks.append(block)
            self.stages.append(blocks)

        self.head_bn = BatchNorm(in_ch) if config.use_batchnorm else None
        self.head_fc = FullyConnected(in_ch, config.num_classes, bias=True,
                                      rng=rng_backbone)

        # attention modules: one per stage when shared, one per block otherwise
        self.shared_attention: list = [None] * len(config.stages)
        self.block_attention: list[list] = [[None] * s.blocks for s in config.stages]
        if config.attention.kind != "none":
            for s, spec in enumerate(config.stages):
                if not config.stage_mask(s):
                    continue
                width = config.stage_width(s)
                if config.attention.sharing == "shared":
                    self.shared_attention[s] = make_sam_module(
                        config.attention, width, rng_attention)
                else:
                    for b in range(spec.blocks):
                        if config.block_mask(s, b):
                            self.block_attention[s][b] = make_sam_module(
                                config.attention, width, rng_attention)

    # -- forward ---------------------------------------------------------

    def forward(self, x, training: bool = True, trace=None,
                collect_stage_outputs: bool = False,
                force_identity_attention: bool = False,
                use_skip_override: bool | None = None):
        """Run the network; returns logits, or (logits, stage outputs).

        A trace sink receives (stage, block, h_t, GAP(a_t)) for every block
        whose attention module ran. `force_identity_attention` bypasses the
        recalibration entirely (debug hook for the h_t = 1 equivalence).

        Overflow to inf/nan raises NumericOverflowError (warnings are
        suppressed; the error is the reporting channel).
        """
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._forward(x, training, trace, collect_stage_outputs,
                                 force_identity_attention, use_skip_override)

    def _forward(self, x, training, trace, collect_stage_outputs,
                 force_identity_attention, use_skip_override):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        expect = self.config.input_shape
        if x.data.ndim != 4 or x.shape[1:] != tuple(expect):
            raise ShapeError(f"forward: input shape {x.shape} does not match "
                             f"configured {('B',) + tuple(expect)}")
        use_skip = self.config.use_skip if use_skip_override is None else use_skip_override
        batch = x.shape[0]

        h = self.conv0(x)
        stage_outputs = []
        for s, blocks in enumerate(self.stages):
            unit = self.shared_attention[s]
            state = unit.init_state(batch) if isinstance(unit, DiaUnit) else None
            for b, block in enumerate(blocks):
                a = block.branch(h, training)
                hvec = None
                active = (self.config.block_mask(s, b)
                          and not force_identity_attention)
                if active and isinstance(unit, DiaUnit):
                    y = T.global_avg_pool(a)
                    hvec, state = unit.step(y, state)
                elif (not active and isinstance(unit, DiaUnit)
                      and self.config.masked_blocks_advance_state
                      and not force_identity_attention):
                    _, state = unit.step(T.global_avg_pool(a), state)
                elif active and unit is not None:
                    hvec = unit(a)
                elif active and self.block_attention[s][b] is not None:
                    hvec = self.block_attention[s][b](a)

                recal = T.channelwise_mul(a, hvec) if hvec is not None else a
                if use_skip:
                    h = T.add(block.shortcut(h), recal)
                else:
                    h = recal
                if trace is not None and hvec is not None:
                    trace.record(s, b, hvec.data, a.data.mean(axis=(2, 3)))
            stage_outputs.append(h)

        if self.head_bn is not None:
            h = self.head_bn(h, training)
        h = T.relu(h)
        pooled = T.global_avg_pool(h)
        logits = self.head_fc(pooled)
        if collect_stage_outputs:
            return logits, stage_outputs
        return logits

    def __call__(self, x, **kwargs):
        return self.forward(x, **kwargs)

    # -- parameter access --------------------------------------------------

    def _named_modules(self):
        """(prefix, module) pairs in declaration order."""
        yield "conv0", self.conv0
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                for lname, layer in block.named_layers():
                    yield f"stage{s}.block{b}.{lname}", layer
            if self.shared_attention[s] is not None:
                yield f"stage{s}.attn", self.shared_attention[s]
            for b, mod in enumerate(self.block_attention[s]):
                if mod is not None:
                    yield f"stage{s}.block{b}.attn", mod
        if self.head_bn is not None:
            yield "head.bn", self.head_bn
        yield "head.fc", self.head_fc

    def parameters(self) -> dict[str, Tensor]:
        """name -> tensor, in declaration order (the checkpoint order)."""
        out = {}
        for prefix, mod in self._named_modules():
            for pname, p in mod.parameters().items():
                out[f"{prefix}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """BatchNorm running statistics, in declaration order."""
        out = {}
        for prefix, mod in self._named_modules():
            if isinstance(mod, BatchNorm):
                for bname, buf in mod.buffers().items():
                    out[f"{prefix}.{bname}"] = buf
        return out

    def attention_layers(self):
        out = []
        for mod in self.shared_attention:
            if mod is not None:
                out.extend(mod.layers())
        for mods in self.block_attention:
            for mod in mods:
                if mod is not None:
                    out.extend(mod.layers())
        return out

    def backbone_layers(self):
        out = [self.conv0]
        for blocks in self.stages:
            for block in blocks:
                out.extend(layer for _, layer in block.named_layers())
        if self.head_bn is not None:
            out.append(self.head_bn)
        out.append(self.head_fc)
        return out

    def components(self):
        return {"backbone": self.backbone_layers(),
                "attention": self.attention_layers()}

    def param_budget(self):
        return count_weights(self.components())

    def attention_parameter_ids(self, stage: int) -> set[int]:
        """Identities of distinct attention parameters used by one stage."""
        ids = set()
        mods = []
        if self.shared_attention[stage] is not None:
            mods.append(self.shared_attention[stage])
        mods.extend(m for m in self.block_attention[stage] if m is not None)
        for mod in mods:
            for p in mod.parameters().values():
                ids.add(id(p))
        return ids


def build(config: NetworkConfig, seed: int = 0) -> Model:
    """Construct a model with deterministic, seed-derived initialization."""
    return Model(config, seed)


def build_named(name: str, seed: int = 0, attention: SamConfig | None = None,
                num_classes: int | None = None, **overrides) -> Model:
    cfg = named_config(name, num_classes=num_classes)
    if attention is not None:
        cfg = replace(cfg, attention=attention)
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return build(cfg, seed)
