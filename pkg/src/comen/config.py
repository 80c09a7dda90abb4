"""Run configuration and its key = value file format."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace


@dataclass
class TrainConfig:
    # optimization
    lr: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 20
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    # stage schedules
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    predictor_pretrain_epochs: int = 200
    predictor_pretrain_lr: float = 0.1
    stage2_restart: bool = False
    stage2_refine_predictor: bool = False
    # loss trade-offs and module constants
    lam: float = 0.1
    gamma: float = 0.1
    tau: float = 0.5
    rho: float = 0.7
    delta: float = 0.5
    eps: float = 1e-5
    contrast_normalize: bool = True
    balance_guard_weight: float = 0.1
    # model
    conv_channels: tuple[int, int] = (8, 16)
    embed_dim: int = 64
    norm_momentum: float = 0.9
    leaky_slope: float = 0.2
    predictor_hidden: int = 64
    # latent domains: 0 means "use the fold's source-domain count"
    domains: int = 0
    # ablation switches
    sdnorm: bool = True
    protogr: bool = True
    protoccl: bool = True
    # seeds for multi-seed runs (ablation)
    seeds: tuple[int, ...] = (7, 8, 9)

    def resolve_domains(self, source_domains: int) -> int:
        return self.domains if self.domains > 0 else source_domains

    def with_switches(self, sdnorm: bool, protogr: bool, protoccl: bool) -> "TrainConfig":
        return replace(self, sdnorm=sdnorm, protogr=protogr, protoccl=protoccl)


_SECTIONS = {
    "optim": ["lr", "lr_decay_factor", "lr_decay_epoch", "momentum",
              "weight_decay", "batch_size"],
    "stage1": ["stage1_epochs", "predictor_pretrain_epochs", "predictor_pretrain_lr"],
    "stage2": ["stage2_epochs", "stage2_restart", "stage2_refine_predictor"],
    "loss": ["lam", "gamma", "tau", "rho", "delta", "contrast_normalize",
             "balance_guard_weight"],
    "model": ["conv_channels", "embed_dim", "eps", "norm_momentum",
              "leaky_slope", "predictor_hidden", "domains"],
    "ablation": ["sdnorm", "protogr", "protoccl", "seeds"],
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    ftype = _FIELD_TYPES[name]
    if ftype == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    if name == "conv_channels":
        parts = [int(v) for v in raw.replace(",", " ").split()]
        if len(parts) != 2:
            raise ValueError(f"conv_channels: expected two integers, got {raw!r}")
        return tuple(parts)
    if name == "seeds":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    raise ValueError(f"unknown config field {name}")


def load_config(path) -> TrainConfig:
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    cfg = TrainConfig()
    updates = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            updates[key] = _parse_value(key, raw)
    return replace(cfg, **updates)


def save_config(cfg: TrainConfig, path) -> None:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            if isinstance(value, tuple):
                value = " ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
