"""Run configuration: an INI-style ``key = value`` file with bracketed sections.

Sections: ``[run]``, ``[data]``, ``[network]``, ``[layer1]`` ... ``[layerL]``,
``[train]`` and ``[pretrain]``.  Unknown sections or keys are errors.
Missing keys take the defaults below.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .mex import PoolSpec
from .network import LayerConfig, NetworkSpec, build_network
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    checkpoint: str = "simnet.ckpt"
    metrics: str = "metrics.tsv"
    report: str = "pretrain_report.txt"


@dataclass
class DataSection:
    format: str = "synthetic"
    train: str = ""  # comma-separated paths
    train_labels: str = ""
    test: str = ""
    test_labels: str = ""
    classes: int = 2
    height: int = 1
    width: int = 1
    channels: int = 2
    label_bytes: int = 1
    class_filter: str = ""  # e.g. "0,1" keeps two classes, relabelled 0 and 1
    limit: int = 0
    holdout: int = 0
    mean_subtraction: bool = False
    synthetic_task: str = "separable"
    synthetic_size: int = 200


@dataclass
class NetworkSection:
    class_beta: float = 1.0
    global_beta: float = 0.0
    offsets: bool = True
    learn_p: bool = True
    learn_class_beta: bool = True
    learn_global_beta: bool = True


@dataclass
class LayerSection:
    field: int = 1
    stride: int = 1
    pad: int = 0
    channels: int = 4
    whiten_dim: int = 0  # 0 keeps the full patch dimension
    kind: str = "lp"
    weighted: bool = True
    p: float = 2.0
    trainable_filters: bool = True
    pool: str = "none"  # none | mex | global
    pool_window: int = 2
    pool_stride: int = 2
    pool_beta: float = 60.0
    pool_learned: bool = False

    def to_layer_config(self) -> LayerConfig:
        pool = None
        if self.pool == "mex":
            pool = PoolSpec(self.pool_window, self.pool_window, self.pool_stride, self.pool_stride,
                            self.pool_beta, False, self.pool_learned)
        elif self.pool == "global":
            pool = PoolSpec(1, 1, 1, 1, self.pool_beta, True, self.pool_learned)
        elif self.pool != "none":
            raise ConfigError(f"pool must be none, mex or global, got {self.pool!r}")
        return LayerConfig(self.field, self.channels, self.whiten_dim or None, self.stride, self.pad,
                           self.kind, self.weighted, self.p, self.trainable_filters, pool)


@dataclass
class PretrainSection:
    enabled: bool = False
    patches: int = 100_000
    subsample: int = 0  # 0 uses every training image
    shape: str = "2.0"  # a number or "learned"
    whitening: str = "pca"
    max_iter: int = 300
    tol: float = 1e-7


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    layers: list = field(default_factory=lambda: [LayerSection()])
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)

    @property
    def input_shape(self) -> tuple:
        return (self.data.height, self.data.width, self.data.channels)

    @property
    def n_classes(self) -> int:
        if self.data.class_filter:
            return len(parse_int_list(self.data.class_filter))
        return self.data.classes

    def build_network(self) -> NetworkSpec:
        net = self.network
        spec = build_network(self.input_shape, [s.to_layer_config() for s in self.layers], self.n_classes,
                             class_beta=net.class_beta, global_beta=net.global_beta,
                             offsets=net.offsets, seed=self.run.seed)
        spec.learn_p = net.learn_p
        spec.learn_class_beta = net.learn_class_beta
        spec.learn_global_beta = net.learn_global_beta
        return spec

    def pretrain_shape(self):
        return "learned" if self.pretrain.shape == "learned" else float(self.pretrain.shape)


_TRAIN_KEYS = ("batch_size", "momentum", "weight_decay", "lr", "lr_steps", "epochs",
               "noise_std", "augmentation")


def parse_int_list(text: str) -> list[int]:
    return [int(t) for t in text.replace(" ", "").split(",") if t]


def _parse_steps(text: str) -> list:
    steps = []
    for item in text.replace(" ", "").split(","):
        if not item:
            continue
        epoch, _, mult = item.partition(":")
        if not mult:
            raise ConfigError(f"lr step {item!r} must look like epoch:multiplier")
        steps.append((int(epoch), float(mult)))
    return steps


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(f"{e}:{m!r}" for e, m in value)
    return str(value)


def _convert(raw: str, default, key: str, section: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return _parse_steps(raw)
        return raw.strip()
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from err


def _fill(cls, items: dict, section: str, keys=None):
    defaults = cls()
    allowed = keys or [f.name for f in dataclasses.fields(cls)]
    kwargs = {}
    for key, raw in items.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        kwargs[key] = _convert(raw, getattr(defaults, key), key, section)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{section}]: {err}") from err


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    sections = {name: dict(cp.items(name)) for name in cp.sections()}
    layer_names = sorted((s for s in sections if s.startswith("layer")), key=lambda s: int(s[5:] or 0))
    for name in sections:
        if name not in ("run", "data", "network", "train", "pretrain") and name not in layer_names:
            raise ConfigError(f"unknown section [{name}]")
    expected = [f"layer{i}" for i in range(1, len(layer_names) + 1)]
    if layer_names != expected:
        raise ConfigError(f"layer sections must be numbered layer1..layerL, got {layer_names}")
    run = _fill(RunSection, sections.get("run", {}), "run")
    cfg = RunConfig(
        run=run,
        data=_fill(DataSection, sections.get("data", {}), "data"),
        network=_fill(NetworkSection, sections.get("network", {}), "network"),
        layers=[_fill(LayerSection, sections[n], n) for n in layer_names] or [LayerSection()],
        train=_fill(TrainConfig, sections.get("train", {}), "train", _TRAIN_KEYS),
        pretrain=_fill(PretrainSection, sections.get("pretrain", {}), "pretrain"),
    )
    cfg.train.seed = run.seed
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: RunConfig) -> str:
    """Serialise every key (defaults included) so parsing it back is lossless."""
    out = []

    def section(name, obj, keys=None):
        out.append(f"[{name}]")
        for key in keys or [f.name for f in dataclasses.fields(obj)]:
            out.append(f"{key} = {_format_value(getattr(obj, key))}")
        out.append("")

    section("run", cfg.run)
    section("data", cfg.data)
    section("network", cfg.network)
    for i, layer in enumerate(cfg.layers, start=1):
        section(f"layer{i}", layer)
    section("train", cfg.train, _TRAIN_KEYS)
    section("pretrain", cfg.pretrain)
    return "\n".join(out)
