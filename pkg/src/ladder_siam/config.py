"""Plain-text ``key = value`` run configuration with dotted sections."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import losses as L
from .augment import AugPolicy
from .dataio import Dataset, load_cifar10, synth_dataset
from .nn import ArchConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, msg: str, key: str | None = None):
        self.key = key
        super().__init__(msg)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(eval_fraction(x)) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def eval_fraction(s: str) -> float:
    """'1/16' or '0.0625' -> 0.0625."""
    s = s.strip()
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s
    return parse


# key -> (default text, parser); "" defaults mean "derived / unset"
SCHEMA: dict[str, tuple[str, Callable[[str], Any]]] = {
    "data.kind": ("synth", _choice("synth", "cifar10")),
    "data.path": ("", str),
    "data.n": ("2048", int),
    "data.num_classes": ("10", int),
    "data.seed": ("0", int),
    "arch.input_size": ("32", int),
    "arch.stem_channels": ("32", int),
    "arch.channels": ("32,64,128,256", _ints),
    "arch.blocks_per_stage": ("2", int),
    "arch.bn_momentum": ("0.9", float),
    "arch.bn_eps": ("1e-5", float),
    "heads.hidden": ("256", int),
    "heads.out": ("64", int),
    "ladder.preset": ("ladder_byol", _choice(*L.PRESETS)),
    "ladder.weight_w": ("0.5", eval_fraction),
    "ladder.heads": ("", _strs),
    "ladder.weights": ("", _floats),
    "ladder.symmetrize": ("true", _bool),
    "ladder.tau_base": ("0.99", float),
    "optim.kind": ("sgd", _choice("sgd", "lars")),
    "optim.lr": ("0.5", float),
    "optim.weight_decay": ("1e-4", float),
    "optim.momentum": ("0.9", float),
    "optim.epochs": ("40", int),
    "optim.batch_size": ("256", int),
    "optim.target_bn": ("eval", _choice("eval", "train")),
    "aug.crop_min": ("0.2", float),
    "aug.crop_max": ("1.0", float),
    "aug.flip_p": ("0.5", float),
    "aug.jitter_p": ("0.8", float),
    "aug.gray_p": ("0.2", float),
    "aug.brightness": ("0.4", float),
    "aug.contrast": ("0.4", float),
    "aug.saturation": ("0.4", float),
    "aug.hue": ("0.1", float),
    "run.seed": ("0", int),
    "run.out_dir": ("runs/default", str),
    "run.ckpt_every": ("0", int),
    "probe.epochs": ("30", int),
    "probe.lr": ("1.0", float),
    "probe.momentum": ("0.9", float),
    "probe.batch_size": ("256", int),
    "probe.seeds": ("0", _ints),
    "probe.val_fraction": ("0.2", float),
    "probe.val_source": ("split", _choice("split", "test")),
}


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), v.strip()


@dataclass
class RunConfig:
    raw: dict[str, str] = field(default_factory=dict)
    values: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def resolve(cls, file_text: str = "", overrides: list[str] | dict[str, str] = (),
                source: str = "<config>") -> "RunConfig":
        """Defaults <- file <- overrides; unknown keys and bad values raise ConfigError."""
        raw = {k: d for k, (d, _) in SCHEMA.items()}
        given = parse_lines(file_text, source)
        items = overrides.items() if isinstance(overrides, dict) else map(parse_override, overrides)
        given.update(dict(items))
        for k, v in given.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}", key=k)
            raw[k] = v
        values = {}
        for k, v in raw.items():
            if v == "" and SCHEMA[k][0] == "":
                values[k] = None
                continue
            try:
                values[k] = SCHEMA[k][1](v)
            except ValueError as e:
                raise ConfigError(f"bad value for {k}: {e}", key=k) from e
        cfg = cls(raw, values)
        cfg.ladder()  # validate preset expansion eagerly
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides=()) -> "RunConfig":
        text = Path(path).read_text() if path else ""
        return cls.resolve(text, overrides, str(path or "<defaults>"))

    def __getitem__(self, key: str):
        return self.values[key]

    # ---- builders

    def arch(self) -> ArchConfig:
        v = self.values
        try:
            return ArchConfig(input_size=v["arch.input_size"], stem_channels=v["arch.stem_channels"],
                              channels=v["arch.channels"], blocks_per_stage=v["arch.blocks_per_stage"],
                              bn_momentum=v["arch.bn_momentum"], bn_eps=v["arch.bn_eps"])
        except ValueError as e:
            raise ConfigError(str(e), key="arch.channels") from e

    def ladder(self) -> L.LadderConfig:
        v = self.values
        S = len(v["arch.channels"])
        kw = dict(tau_base=v["ladder.tau_base"], symmetrize=v["ladder.symmetrize"],
                  hidden_dim=v["heads.hidden"], out_dim=v["heads.out"])
        try:
            base = L.LadderConfig.preset(v["ladder.preset"], S, v["ladder.weight_w"], **kw)
            heads = v["ladder.heads"] or base.heads
            weights = v["ladder.weights"] or base.weights
            return L.LadderConfig(heads, weights, **kw)
        except L.ConfigError as e:
            raise ConfigError(str(e), key="ladder.preset") from e

    def aug(self) -> AugPolicy:
        v = self.values
        try:
            return AugPolicy(crop_scale=(v["aug.crop_min"], v["aug.crop_max"]),
                             out_size=v["arch.input_size"], flip_p=v["aug.flip_p"],
                             jitter_p=v["aug.jitter_p"], gray_p=v["aug.gray_p"],
                             brightness=v["aug.brightness"], contrast=v["aug.contrast"],
                             saturation=v["aug.saturation"], hue=v["aug.hue"])
        except ValueError as e:
            raise ConfigError(str(e), key="aug") from e

    def train(self, workers: int = 1) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(arch=self.arch(), ladder=self.ladder(), aug=self.aug(),
                               epochs=v["optim.epochs"], batch_size=v["optim.batch_size"],
                               lr=v["optim.lr"], weight_decay=v["optim.weight_decay"],
                               optimizer=v["optim.kind"], momentum=v["optim.momentum"],
                               target_bn=v["optim.target_bn"], seed=v["run.seed"],
                               ckpt_every=v["run.ckpt_every"], workers=workers)
        except ValueError as e:
            raise ConfigError(str(e), key="optim") from e

    def dataset(self, split: str = "train") -> Dataset:
        v = self.values
        n = v["data.n"] or None
        if v["data.kind"] == "cifar10":
            if not v["data.path"]:
                raise ConfigError("data.path is required for cifar10", key="data.path")
            return load_cifar10(v["data.path"], split, limit=n)
        seed = v["data.seed"] + (0 if split == "train" else 7919)
        return synth_dataset(n or 2048, v["data.num_classes"], seed, size=v["arch.input_size"])

    def snapshot(self) -> str:
        """Fully resolved text; derived ladder heads/weights are written out explicitly."""
        lad = self.ladder()
        lines = []
        for k in SCHEMA:
            if k == "ladder.heads":
                val = ",".join(lad.heads)
            elif k == "ladder.weights":
                val = ",".join(repr(w) for w in lad.weights)
            else:
                val = self.raw[k]
            lines.append(f"{k} = {val}")
        return "\n".join(lines) + "\n"
