"""Training configuration: defaults, validation and (de)serialization.

Config files are YAML or JSON mappings. ``env`` may be a bare name or a
mapping; dotted keys such as ``env.max_steps`` are accepted at top level.
Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .envs import ENV_NAMES, EnvConfig

CONFIG_SCHEMA = 1
ALGOS = ("reinforce", "ppo")

# algorithm-specific defaults, applied where the file leaves a key unset
ALGO_DEFAULTS = {
    "reinforce": dict(gamma=0.95, lr=1e-3, episodes_per_collect=8, repeat_per_collect=2,
                      max_grad_norm=None, normalize_returns=True),
    "ppo": dict(gamma=0.99, lr=2.5e-4, episodes_per_collect=10, repeat_per_collect=4,
                max_grad_norm=0.5, normalize_returns=False),
}
THRESHOLDS = {"cartpole": 475.0, "cliff": 9.0}
_ALIASES = {"E_W": "energy_w", "E_H_clip": "eh_clip"}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class TrainConfig:
    algo: str = "reinforce"
    env: EnvConfig = field(default_factory=EnvConfig)
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    gamma: float | None = None
    lr: float | None = None
    optimizer: str = "adam"
    batch_size: int = 64
    epochs: int = 100
    steps_per_epoch: int = 1000
    episodes_per_collect: int | None = None
    repeat_per_collect: int | None = None
    epsilon: float = 0.0
    acpg: bool = False
    energy_w: float = 1.0
    eh_clip: float | None = None
    seed: int = 0
    gae_lambda: float = 0.95
    clip_eps: float = 0.1
    entropy_coef: float = 0.01
    value_coef: float = 0.25
    max_grad_norm: float | None = None
    normalize_returns: bool | None = None
    normalize_advantages: bool = True
    kl_limit: float = 0.5
    balanced: int | None = None
    threshold: float | None = None
    stop_window: int = 5
    test_episodes: int = 10

    def resolved(self) -> "TrainConfig":
        """Copy with algorithm and environment defaults filled in."""
        data = asdict(self)
        data["env"] = EnvConfig(**data["env"])
        for key, value in ALGO_DEFAULTS.get(self.algo, {}).items():
            if data[key] is None:
                data[key] = value
        if data["threshold"] is None:
            data["threshold"] = THRESHOLDS.get(self.env.name)
        if data["env"].max_steps is None:
            data["env"].max_steps = 500 if self.env.name == "cartpole" else 50
        return TrainConfig(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["schema"] = CONFIG_SCHEMA
        return data

    def dump(self, path: str | Path) -> None:
        text = self.to_dict()
        p = Path(path)
        if p.suffix in (".yaml", ".yml"):
            p.write_text(yaml.safe_dump(text, sort_keys=False))
        else:
            p.write_text(json.dumps(text, indent=2))

    def replace(self, **changes) -> "TrainConfig":
        data = asdict(self)
        env_changes = {k[4:]: changes.pop(k) for k in list(changes) if k.startswith("env.")}
        data.update(changes)
        data["env"] = EnvConfig(**{**data["env"], **env_changes})
        return validate(TrainConfig(**data))


def _range(path: str, ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


def validate(cfg: TrainConfig) -> TrainConfig:
    _range("algo", cfg.algo in ALGOS, f"must be one of {ALGOS}, got {cfg.algo!r}")
    _range("env.name", cfg.env.name in ENV_NAMES, f"must be one of {ENV_NAMES}, got {cfg.env.name!r}")
    _range("hidden", len(cfg.hidden) > 0 and all(int(w) > 0 for w in cfg.hidden),
           "must be a non-empty list of positive widths")
    if cfg.gamma is not None:
        _range("gamma", 0.0 <= cfg.gamma <= 1.0, f"must lie in [0, 1], got {cfg.gamma}")
    if cfg.lr is not None:
        _range("lr", cfg.lr > 0, f"must be positive, got {cfg.lr}")
    _range("epsilon", 0.0 <= cfg.epsilon <= 1.0, f"must lie in [0, 1], got {cfg.epsilon}")
    _range("optimizer", cfg.optimizer in ("adam", "sgd"), f"unknown optimizer {cfg.optimizer!r}")
    _range("batch_size", cfg.batch_size > 0, "must be positive")
    _range("epochs", cfg.epochs > 0, "must be positive")
    _range("steps_per_epoch", cfg.steps_per_epoch > 0, "must be positive")
    _range("energy_w", cfg.energy_w > 0, f"must be positive, got {cfg.energy_w}")
    if cfg.eh_clip is not None:
        _range("eh_clip", cfg.eh_clip > 0, f"must be positive, got {cfg.eh_clip}")
    if cfg.algo == "ppo":
        _range("clip_eps", cfg.clip_eps > 0, f"must be positive for ppo, got {cfg.clip_eps}")
    _range("gae_lambda", 0.0 <= cfg.gae_lambda <= 1.0, "must lie in [0, 1]")
    _range("stop_window", cfg.stop_window > 0, "must be positive")
    _range("test_episodes", cfg.test_episodes >= 0, "must be non-negative")
    if cfg.balanced is not None:
        _range("balanced", cfg.balanced > 0, "must be positive")
        _range("balanced", cfg.env.name == "cliff", "balanced batches need the gridworld oracle")
    if cfg.env.max_steps is not None:
        _range("env.max_steps", cfg.env.max_steps > 0, "must be positive")
    return cfg


def _expand_dotted(raw: dict) -> dict:
    out: dict = {}
    for key, value in raw.items():
        if "." in key:
            head, tail = key.split(".", 1)
            out.setdefault(head, {})
            if isinstance(out[head], str):
                out[head] = {"name": out[head]}
            out[head][tail] = value
        elif key == "env" and key in out and isinstance(value, str):
            out[key].setdefault("name", value)
        else:
            out[key] = value
    return out


def from_dict(raw: dict) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    raw = _expand_dotted({_ALIASES.get(k, k): v for k, v in raw.items()})
    schema = raw.pop("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError("schema", f"unsupported schema {schema}")

    known = {f.name for f in fields(TrainConfig)}
    env_known = {f.name for f in fields(EnvConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown key")

    env_raw = raw.pop("env", {})
    if isinstance(env_raw, str):
        env_raw = {"name": env_raw}
    if not isinstance(env_raw, dict):
        raise ConfigError("env", "must be a name or a mapping")
    for key in env_raw:
        if key not in env_known:
            raise ConfigError(f"env.{key}", "unknown key")

    try:
        cfg = TrainConfig(env=EnvConfig(**env_raw), **raw)
    except TypeError as exc:
        raise ConfigError("<root>", str(exc)) from None
    _coerce(cfg)
    return validate(cfg).resolved()


def _coerce(cfg: TrainConfig) -> None:
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if value is None or f.name == "env":
            continue
        try:
            if f.name == "hidden":
                cfg.hidden = [int(w) for w in value]
            elif f.name in ("algo", "optimizer"):
                setattr(cfg, f.name, str(value))
            elif f.name in ("acpg", "normalize_returns", "normalize_advantages"):
                if not isinstance(value, bool):
                    raise TypeError(f"expected a boolean, got {value!r}")
            elif f.name in ("batch_size", "epochs", "steps_per_epoch", "episodes_per_collect",
                            "repeat_per_collect", "seed", "balanced", "stop_window",
                            "test_episodes"):
                if isinstance(value, bool) or int(value) != value:
                    raise TypeError(f"expected an integer, got {value!r}")
                setattr(cfg, f.name, int(value))
            else:
                if isinstance(value, bool):
                    raise TypeError(f"expected a number, got {value!r}")
                setattr(cfg, f.name, float(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f.name, str(exc)) from None


def parse_config(path: str | Path) -> TrainConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    text = p.read_text()
    raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    return from_dict(raw or {})
