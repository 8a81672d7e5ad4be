"""Run configuration: an INI-style file with five fixed sections.

Every key has a default, unknown sections or keys are rejected, and
``dumps(parse(text))`` is a canonical form (parse -> dump -> parse is a
fixed point).
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import DivergenceMetric
from .net import NetConfig, OptimConfig
from .tasks import TaskSpec
from .training import TrainConfig, TrainMode


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "diffusion": {"T": (int, 15), "kappa": (float, 1.0), "power": (float, 2.0)},
    "net": {"channels": (int, 1), "base": (int, 16), "depth": (int, 2), "kernel": (int, 3)},
    "train": {
        "mode": (str, "traditional"),
        "steps": (int, 5000),
        "max_lr": (float, 1e-4),
        "ema_decay": (float, 0.999),
        "batch_size": (int, 4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "seed": (int, 0),
        "chain_stochastic": (_bool, True),
        "chain_use_ema": (_bool, False),
        "checkpoint_every": (int, 1000),
    },
    "task": {
        "kind": (str, "denoise"),
        "sigma": (float, 50.0),
        "blur_sigma": (float, 1.5),
        "size": (int, 32),
        "image_kind": (str, "blobs"),
        "count": (int, 64),
        "seed": (int, 100),
        "eval_count": (int, 16),
        "eval_seed": (int, 999),
    },
    "io": {
        "out_dir": (str, "runs/default"),
        "data_dir": (str, "data/default"),
        "metric": (str, "kl"),
        "report_samples": (int, 64),
        "report_items": (int, 16),
        "report_seed": (int, 1),
        "sample_seed": (int, 7),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict] = field(default_factory=lambda: {
        sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def with_value(self, section: str, key: str, raw) -> "RunConfig":
        new = {s: dict(kv) for s, kv in self.values.items()}
        new[section][key] = _coerce(section, key, raw, self.source)
        return RunConfig(new, self.source)

    # typed views
    def train_config(self) -> TrainConfig:
        d, n, t = self["diffusion"], self["net"], self["train"]
        try:
            return TrainConfig(
                mode=TrainMode.parse(t["mode"]),
                T=d["T"], kappa=d["kappa"], power=d["power"],
                net=NetConfig(image_channels=n["channels"], base=n["base"], depth=n["depth"], kernel=n["kernel"]),
                optim=OptimConfig(max_lr=t["max_lr"], total_steps=t["steps"], ema_decay=t["ema_decay"],
                                  beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"], batch_size=t["batch_size"]),
                seed=t["seed"], chain_stochastic=t["chain_stochastic"], chain_use_ema=t["chain_use_ema"])
        except ValueError as exc:
            raise ConfigError(f"{self.source}: {exc}") from exc

    def task_spec(self, split: str = "train") -> TaskSpec:
        k = self["task"]
        count, seed = (k["count"], k["seed"]) if split == "train" else (k["eval_count"], k["eval_seed"])
        try:
            return TaskSpec(kind=k["kind"], sigma=k["sigma"], blur_sigma=k["blur_sigma"], size=k["size"],
                            count=count, seed=seed, channels=self["net"]["channels"], image_kind=k["image_kind"])
        except ValueError as exc:
            raise ConfigError(f"{self.source}: {exc}") from exc

    def metric(self) -> DivergenceMetric:
        return DivergenceMetric.parse(self["io"]["metric"])

    def train_hash(self) -> str:
        """Digest of everything that determines a training trajectory."""
        text = dumps(self, sections=("diffusion", "net", "train", "task"), skip={("train", "checkpoint_every")})
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _coerce(section, key, raw, source):
    if section not in SCHEMA:
        raise ConfigError(f"{source}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
    typ = SCHEMA[section][key][0]
    try:
        return typ(raw) if not isinstance(raw, str) or typ is str else typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{source}: bad value for {section}.{key}: {raw!r}") from exc


def parse(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case (T)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig(source=source)
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            cfg.values[section][key] = _coerce(section, key, raw, source)
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(cfg: RunConfig, sections=None, skip=frozenset()) -> str:
    out = []
    for sec in sections or SCHEMA:
        out.append(f"[{sec}]")
        for key in SCHEMA[sec]:
            if (sec, key) not in skip:
                out.append(f"{key} = {_fmt(cfg.values[sec][key])}")
        out.append("")
    return "\n".join(out)
