"""Run configuration: a sectioned key=value file plus command-line overrides.

Grammar: `[section]` headers, `key = value` lines, full-line `#` comments.
Unknown sections or keys are errors; there are no silent typos. Overrides
come as `--set section.key=value` and take precedence over the file, which
takes precedence over the DIA_SEED environment variable (train.seed only),
which takes precedence over built-in defaults.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .attention import LstmCellConfig, SamConfig
from .backbone import NetworkConfig, StageSpec, named_config
from .data import Dataset, load_cifar10_binary, synth_generate
from .errors import ConfigError
from .training import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(p) for p in text.split(","))


@dataclass(frozen=True)
class _Key:
    default: object
    parse: object  # callable str -> value
    help: str


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


SCHEMA: dict[str, dict[str, _Key]] = {
    "network": {
        "arch": _Key("tiny-dia", str,
                     "named architecture (tiny-dia, resnet56-basic, resnet83, "
                     "resnet164, resnet245, resnet407) or 'custom'"),
        "stages": _Key("", str,
                       "custom stages as blocks:channels:stride triples, comma separated"),
        "block_kind": _Key("basic", str, "basic or bottleneck (custom arch only)"),
        "attention": _Key("dia-lstm", str, "none, se, eca, or dia-lstm"),
        "sharing": _Key("shared", str, "shared or per-block"),
        "cell_variant": _Key("modified", str, "standard, modified, or light"),
        "reduction": _Key(4, int, "reduction ratio r of the recurrent cell"),
        "output_activation": _Key("sigmoid", str, "sigmoid, tanh, or relu"),
        "stack_depth": _Key(1, int, "number of stacked recurrent cells"),
        "se_reduction": _Key(16, int, "SE bottleneck reduction"),
        "eca_kernel_size": _Key(3, int, "ECA kernel size (odd)"),
        "use_skip": _Key(True, _parse_bool, "keep skip connections"),
        "use_batchnorm": _Key(True, _parse_bool, "keep batch normalization"),
        "num_classes": _Key(0, int, "classifier width; 0 derives it from the data"),
        "attention_stage_mask": _Key("", str,
                                     "per-stage 0/1 flags, comma separated; empty = all"),
        "attention_block_mask": _Key("", str,
                                     "per-stage comma lists of 0/1 per block, "
                                     "stages separated by ';'; empty = all"),
        "masked_blocks_advance_state": _Key(
            False, _parse_bool,
            "whether mask-skipped blocks still advance the recurrent state"),
    },
    "data": {
        "source": _Key("synthetic", str, "synthetic or cifar10"),
        "classes": _Key(4, int, "synthetic class count"),
        "count": _Key(2048, int, "synthetic training sample count"),
        "eval_count": _Key(512, int, "synthetic held-out sample count"),
        "height": _Key(16, int, "synthetic image height"),
        "width": _Key(16, int, "synthetic image width"),
        "seed": _Key(1, int, "synthetic generator seed"),
        "path": _Key("", str, "CIFAR-10 binary training file"),
        "eval_path": _Key("", str, "CIFAR-10 binary evaluation file"),
    },
    "train": {
        "epochs": _Key(30, int, "training epochs"),
        "batch_size": _Key(128, int, "SGD batch size"),
        "lr": _Key(0.1, float, "initial learning rate"),
        "momentum": _Key(0.9, float, "SGD momentum"),
        "weight_decay": _Key(0.0005, float, "coupled weight decay"),
        "milestones": _Key((0.5, 0.75), _parse_float_list,
                           "epoch fractions where lr decays"),
        "decay_factor": _Key(0.1, float, "lr multiplier at each milestone"),
        "augment": _Key(True, _parse_bool, "pad-4 random crop + horizontal flip"),
        "shuffle": _Key(True, _parse_bool, "reshuffle samples every epoch"),
        "seed": _Key(0, int, "training seed (DIA_SEED overrides the default)"),
    },
    "analyze": {
        "sample_cap": _Key(256, int, "max samples per correlation pair"),
        "trace_batch": _Key(64, int, "batch size when recording traces"),
        "forest_trees": _Key(100, int, "random-forest size"),
        "forest_depth": _Key(8, int, "random-forest max depth"),
        "forest_min_leaf": _Key(2, int, "random-forest min samples per leaf"),
        "forest_seed": _Key(0, int, "random-forest seed"),
        "grad_batches": _Key(4, int, "batches sampled for gradient statistics"),
        "grad_batch_size": _Key(64, int, "batch size for gradient statistics"),
        "grad_seed": _Key(0, int, "batch sampling seed for gradient statistics"),
    },
    "output": {
        "dir": _Key("runs/out", str, "directory for checkpoints, metrics, reports"),
    },
}


def schema_lines() -> list[str]:
    """One `section.key = default -- help` line per key (drives --help)."""
    lines = []
    for section, keys in SCHEMA.items():
        for key, spec in keys.items():
            default = _fmt(spec.default)
            shown = default if default != "" else "''"
            lines.append(f"  {section}.{key} = {shown}  ({spec.help})")
    return lines


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    explicit: set = field(default_factory=set)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set_value(self, section: str, key: str, raw: str) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown configuration key {section}.{key}")
        spec = SCHEMA[section][key]
        try:
            self.values[section][key] = spec.parse(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
        self.explicit.add((section, key))

    def render(self) -> str:
        """The fully resolved configuration, re-parsable by this module."""
        chunks = []
        for section, keys in SCHEMA.items():
            chunks.append(f"[{section}]")
            for key in keys:
                chunks.append(f"{key} = {_fmt(self.values[section][key])}")
            chunks.append("")
        return "\n".join(chunks)

    # -- typed views -------------------------------------------------------

    def sam_config(self) -> SamConfig:
        net = self.values["network"]
        return SamConfig(
            kind=net["attention"], sharing=net["sharing"],
            se_reduction=net["se_reduction"],
            eca_kernel_size=net["eca_kernel_size"],
            cell=LstmCellConfig(variant=net["cell_variant"], r=net["reduction"],
                                output_activation=net["output_activation"],
                                stack_depth=net["stack_depth"]))

    def network_config(self, num_classes: int | None = None) -> NetworkConfig:
        net = self.values["network"]
        if net["arch"] == "custom":
            if not net["stages"]:
                raise ConfigError("network.stages is required when network.arch=custom")
            stages = []
            for part in str(net["stages"]).split(","):
                try:
                    blocks, channels, stride = (int(v) for v in part.split(":"))
                except ValueError:
                    raise ConfigError(
                        f"network.stages entry {part!r} is not blocks:channels:stride"
                    ) from None
                stages.append(StageSpec(blocks, channels, stride))
            cfg = NetworkConfig(stages=stages, block_kind=net["block_kind"],
                                name="custom")
        else:
            cfg = named_config(net["arch"])
        cfg.attention = self.sam_config()
        cfg.use_skip = net["use_skip"]
        cfg.use_batchnorm = net["use_batchnorm"]
        cfg.masked_blocks_advance_state = net["masked_blocks_advance_state"]
        if net["attention_stage_mask"]:
            cfg.attention_stage_mask = [
                bool(int(v)) for v in str(net["attention_stage_mask"]).split(",")]
        if net["attention_block_mask"]:
            cfg.attention_block_mask = [
                [bool(int(v)) for v in group.split(",")]
                for group in str(net["attention_block_mask"]).split(";")]
        if net["num_classes"] > 0:
            cfg.num_classes = net["num_classes"]
        elif num_classes is not None:
            cfg.num_classes = num_classes
        data = self.values["data"]
        if data["source"] == "synthetic":
            cfg.input_shape = (3, data["height"], data["width"])
        else:
            cfg.input_shape = (3, 32, 32)
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        tr = self.values["train"]
        cfg = TrainConfig(epochs=tr["epochs"], batch_size=tr["batch_size"],
                          lr=tr["lr"], momentum=tr["momentum"],
                          weight_decay=tr["weight_decay"],
                          milestones=tuple(tr["milestones"]),
                          decay_factor=tr["decay_factor"], augment=tr["augment"],
                          shuffle=tr["shuffle"], seed=tr["seed"])
        cfg.validate()
        return cfg

    def build_datasets(self) -> tuple[Dataset, Dataset | None]:
        data = self.values["data"]
        if data["source"] == "synthetic":
            total = data["count"] + data["eval_count"]
            full = synth_generate(data["classes"], total, data["height"],
                                  data["width"], seed=data["seed"])
            train = Dataset(images=full.images[:data["count"]],
                            labels=full.labels[:data["count"]],
                            num_classes=full.num_classes,
                            mean=full.mean, std=full.std)
            if data["eval_count"]:
                evalset = Dataset(images=full.images[data["count"]:],
                                  labels=full.labels[data["count"]:],
                                  num_classes=full.num_classes,
                                  mean=full.mean, std=full.std)
            else:
                evalset = None
            return train, evalset
        if data["source"] == "cifar10":
            if not data["path"]:
                raise ConfigError("data.path is required when data.source=cifar10")
            train = load_cifar10_binary(data["path"])
            evalset = load_cifar10_binary(data["eval_path"]) if data["eval_path"] else None
            return train, evalset
        raise ConfigError(f"unknown data.source {data['source']!r}")

    def data_classes(self) -> int:
        data = self.values["data"]
        return data["classes"] if data["source"] == "synthetic" else 10


def default_run_config() -> RunConfig:
    cfg = RunConfig()
    for section, keys in SCHEMA.items():
        cfg.values[section] = {key: spec.default for key, spec in keys.items()}
    return cfg


def _apply_ini_text(cfg: RunConfig, text: str, source: str) -> None:
    parser = configparser.ConfigParser(inline_comment_prefixes=None,
                                       interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown configuration section [{section}]")
        for key, raw in parser.items(section):
            cfg.set_value(section, key, raw)


def run_config_from_text(text: str, source: str = "<embedded>") -> RunConfig:
    """Parse a rendered configuration (e.g. a checkpoint's embedded echo)."""
    cfg = default_run_config()
    _apply_ini_text(cfg, text, source)
    return cfg


def load_run_config(path: str | None = None, overrides=(),
                    env: dict | None = None) -> RunConfig:
    """Resolve defaults <- DIA_SEED <- config file <- --set overrides."""
    cfg = default_run_config()

    env = os.environ if env is None else env
    if "DIA_SEED" in env:
        try:
            cfg.values["train"]["seed"] = int(env["DIA_SEED"])
        except ValueError:
            raise ConfigError(f"DIA_SEED must be an integer, "
                              f"got {env['DIA_SEED']!r}") from None

    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            _apply_ini_text(cfg, f.read(), str(path))

    for item in overrides:
        head, sep, raw = item.partition("=")
        if not sep or "." not in head:
            raise ConfigError(f"override {item!r} is not section.key=value")
        section, _, key = head.partition(".")
        cfg.set_value(section.strip(), key.strip(), raw.strip())
    return cfg
