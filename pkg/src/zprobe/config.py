"""Experiment configuration: INI-style ``key = value`` sections."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from zprobe.attacks import AttackKind, AttackSpec
from zprobe.secagg import DropStage


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DropoutEvent:
    epoch: int
    step: int  # 1 = cluster aggregation, 3 = final aggregation
    client: int
    stage: DropStage


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    epochs: int = 30
    # data
    data_source: str = "synthetic"
    data_path: str = ""
    data_header: bool = False
    test_fraction: float = 0.2
    classes: int = 2
    dim: int = 20
    per_client: int = 64
    test_size: int = 2000
    separation: float = 4.0
    heterogeneity: float = 0.0
    # model and training
    architecture: str = "logistic_regression"
    hidden: int = 0
    lr: float = 0.1
    batch_size: int = 32
    # protocol
    n_clients: int = 50
    graph_mode: str = "neighbor"
    degree: int = 0
    threshold: int = 0
    correctness_checks: bool = True
    scale_bits: int = 16
    # defense
    defense: bool = True
    clusters: int = 7
    eta: float = 0.0
    z: float = 3.0
    eta_mode: str = "adaptive"
    eta_decay: float = 0.85
    eta_min: float = 0.25
    phi_max: float = 0.25
    delta: float = 0.005
    s_m_assumed: float = 0.5
    g_max: float = 10.0
    # attack
    attack: AttackSpec = field(default_factory=AttackSpec)
    byzantine_fraction: float = 0.25
    # dropouts
    dropouts: tuple[DropoutEvent, ...] = ()
    # output
    transcript: str = "last"
    timing: bool = False
    figures: bool = True
    threads: int = 1

    def validate(self) -> ExperimentConfig:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(key, msg)

        need(self.epochs >= 1, "experiment.epochs", "must be >= 1")
        need(self.n_clients >= 2, "protocol.n_clients", "must be >= 2")
        need(self.data_source in ("synthetic", "csv"), "data.source", "must be synthetic or csv")
        need(self.data_source != "csv" or self.data_path, "data.path", "required for csv data")
        need(0 <= self.test_fraction < 1, "data.test_fraction", "must lie in [0, 1)")
        need(self.classes >= 2, "data.classes", "must be >= 2")
        need(self.dim >= 2, "data.dim", "must be >= 2")
        need(self.per_client >= 1, "data.per_client", "must be >= 1")
        need(self.architecture in ("logistic_regression", "mlp_1hidden"),
             "model.architecture", "must be logistic_regression or mlp_1hidden")
        need(self.architecture != "mlp_1hidden" or self.hidden >= 1, "model.hidden",
             "must be >= 1 for mlp_1hidden")
        need(self.lr > 0, "training.lr", "must be positive")
        need(self.batch_size >= 0, "training.batch_size", "must be >= 0 (0 = full shard)")
        need(self.graph_mode in ("neighbor", "full"), "protocol.graph_mode", "must be neighbor or full")
        need(self.degree >= 0 and self.degree < self.n_clients, "protocol.degree",
             "must be 0 (auto) or below n_clients")
        need(self.degree == 0 or self.degree % 2 == 0 or self.degree == self.n_clients - 1,
             "protocol.degree", "must be even or n_clients - 1")
        need(self.threshold >= 0, "protocol.threshold", "must be >= 0 (0 = auto)")
        need(8 <= self.scale_bits <= 40, "protocol.scale_bits", "must lie in [8, 40]")
        need(1 <= self.clusters <= self.n_clients, "defense.clusters",
             f"must lie in [1, n_clients={self.n_clients}]")
        need(not self.defense or self.clusters >= 2, "defense.clusters",
             "the robustness check needs at least two clusters")
        need(self.eta >= 0, "defense.eta", "must be >= 0 (0 = z * sqrt(cluster size))")
        need(self.z > 0, "defense.z", "must be positive")
        need(self.eta_mode in ("fixed", "adaptive"), "defense.eta_mode", "must be fixed or adaptive")
        need(0 < self.eta_decay < 1, "defense.eta_decay", "must lie in (0, 1)")
        need(self.eta_min > 0, "defense.eta_min", "must be positive")
        need(0 <= self.phi_max < 1, "defense.phi_max", "must lie in [0, 1)")
        need(0 < self.delta < 1, "defense.delta", "must lie in (0, 1)")
        need(0 < self.s_m_assumed <= 1, "defense.s_m_assumed", "must lie in (0, 1]")
        need(self.g_max > 0, "defense.g_max", "must be positive")
        need(0 <= self.byzantine_fraction <= 1, "attack.byzantine_fraction", "must lie in [0, 1]")
        need(self.transcript in ("last", "all", "none"), "output.transcript",
             "must be last, all or none")
        need(self.threads >= 1, "output.threads", "must be >= 1")
        for ev in self.dropouts:
            need(1 <= ev.client <= self.n_clients, "dropout.schedule", f"unknown client {ev.client}")
            need(ev.step in (1, 3), "dropout.schedule", "step must be 1 or 3")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        d["dropouts"] = [f"{e.epoch}:{e.step}:{e.client}:{e.stage.value}" for e in self.dropouts]
        return d

    def with_overrides(self, **kw) -> ExperimentConfig:
        return replace(self, **kw).validate()


# section.key -> (field name, type)
_KEYS = {
    "experiment.name": ("name", str), "experiment.seed": ("seed", int),
    "experiment.epochs": ("epochs", int),
    "data.source": ("data_source", str), "data.path": ("data_path", str),
    "data.header": ("data_header", bool), "data.test_fraction": ("test_fraction", float),
    "data.classes": ("classes", int), "data.dim": ("dim", int),
    "data.per_client": ("per_client", int), "data.test_size": ("test_size", int),
    "data.separation": ("separation", float), "data.heterogeneity": ("heterogeneity", float),
    "model.architecture": ("architecture", str), "model.hidden": ("hidden", int),
    "training.lr": ("lr", float), "training.batch_size": ("batch_size", int),
    "protocol.n_clients": ("n_clients", int), "protocol.graph_mode": ("graph_mode", str),
    "protocol.degree": ("degree", int), "protocol.threshold": ("threshold", int),
    "protocol.correctness_checks": ("correctness_checks", bool),
    "protocol.scale_bits": ("scale_bits", int),
    "defense.enabled": ("defense", bool), "defense.clusters": ("clusters", int),
    "defense.eta": ("eta", float), "defense.z": ("z", float),
    "defense.eta_mode": ("eta_mode", str), "defense.eta_decay": ("eta_decay", float),
    "defense.eta_min": ("eta_min", float), "defense.phi_max": ("phi_max", float),
    "defense.delta": ("delta", float), "defense.s_m_assumed": ("s_m_assumed", float),
    "defense.g_max": ("g_max", float),
    "attack.byzantine_fraction": ("byzantine_fraction", float),
    "output.transcript": ("transcript", str), "output.timing": ("timing", bool),
    "output.figures": ("figures", bool), "output.threads": ("threads", int),
}
_ATTACK_KEYS = {"kind": str, "kappa": float, "s_m": float, "seed": int}


def _coerce(key: str, raw: str, typ):
    try:
        if typ is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(key, f"cannot read {raw!r} as {typ.__name__}") from None


def parse_dropouts(text: str) -> tuple[DropoutEvent, ...]:
    events = []
    for item in filter(None, (s.strip() for s in text.replace(";", ",").split(","))):
        parts = item.split(":")
        if len(parts) != 4:
            raise ConfigError("dropout.schedule", f"{item!r} is not epoch:step:client:stage")
        try:
            events.append(DropoutEvent(int(parts[0]), int(parts[1]), int(parts[2]),
                                       DropStage(parts[3].strip())))
        except ValueError as exc:
            raise ConfigError("dropout.schedule", f"{item!r}: {exc}") from None
    return tuple(events)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    kw: dict = {}
    attack: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            full = f"{section}.{key}"
            if section == "attack" and key in _ATTACK_KEYS:
                attack[key] = _coerce(full, raw, _ATTACK_KEYS[key])
            elif full == "dropout.schedule":
                kw["dropouts"] = parse_dropouts(raw)
            elif full in _KEYS:
                name, typ = _KEYS[full]
                kw[name] = _coerce(full, raw, typ)
            else:
                raise ConfigError(full, "unknown key")
    if attack:
        try:
            kind = AttackKind(attack.get("kind", "none"))
        except ValueError:
            raise ConfigError("attack.kind", f"unknown attack {attack.get('kind')!r}") from None
        try:
            kw["attack"] = AttackSpec(kind, attack.get("kappa", 1.0), attack.get("s_m", 1.0),
                                      attack.get("seed", 0))
        except ValueError as exc:
            raise ConfigError("attack", str(exc)) from None
    return ExperimentConfig(**kw).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("file", f"cannot read {path}: {exc.strerror}") from None
    cfg = parse_config(text)
    if cfg.data_source == "csv" and not Path(cfg.data_path).is_absolute():
        cfg = replace(cfg, data_path=str(path.parent / cfg.data_path))
    return cfg


def config_fields() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]
