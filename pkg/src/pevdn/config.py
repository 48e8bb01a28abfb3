"""Run configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, fields

from .dp import DPConfig
from .env import EnvOptions
from .errors import ConfigError


class Mode(str, enum.Enum):
    IQL = "IQL"
    VANILLA_VDN = "VANILLA_VDN"
    PEVDN_A = "PEVDN_A"
    PEVDN_B = "PEVDN_B"
    PEVDN_C = "PEVDN_C"

    @property
    def decentralized(self) -> bool:
        return self in (Mode.PEVDN_A, Mode.PEVDN_B, Mode.PEVDN_C)

    @property
    def secure(self) -> bool:
        return self in (Mode.PEVDN_B, Mode.PEVDN_C)


ALL_MODES = tuple(Mode)

# optimizer defaults per regime: plain SGD without DP, momentum SGD with DP
_NON_DP = {"lr": 5e-4, "momentum": 0.0, "weight_decay": 0.0}
_DP = {"lr": 5e-3, "momentum": 0.9, "weight_decay": 0.01}


@dataclass
class RunConfig:
    mode: Mode = Mode.PEVDN_B
    env: str = "climbing"
    seed: int = 0
    # learning
    gamma: float | None = None
    optimizer: str = "sgd"
    lr: float | None = None
    momentum: float | None = None
    weight_decay: float | None = None
    hidden: str = "64,64"
    history_k: int = 4
    target_period: int = 200
    # exploration: linear decay over the first eps_fraction of max_steps
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    # budget and evaluation
    max_steps: int = 400_000
    eval_interval: int = 5_000
    eval_episodes: int = 32
    # replay and privacy
    buffer_size: int = 500
    expected_batch_size: int = 32
    clip: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5
    buffer_throughput: float = 1.0
    precision: int = 5
    # anchoring
    anchor: bool = False
    anchor_threshold: float = 0.5
    anchor_increment: float = 0.05
    anchor_lambda: float = 0.1
    # environment overrides
    payoff: str | None = None
    grid_size: int = 5
    goal: str = "4,4"
    starts: str | None = None
    n_agents: int = 3
    episode_limit: int = 25
    # plumbing
    transport: str = "inprocess"
    delivery: str = "shuffle"
    transcript: str | None = None

    def __post_init__(self):
        if not isinstance(self.mode, Mode):
            self.mode = parse_mode(self.mode)
        defaults = _DP if self.mode == Mode.PEVDN_C else _NON_DP
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)

    def validate(self):
        if self.env not in ("climbing", "gridworld"):
            raise ConfigError("env", f"unknown environment {self.env!r}")
        if self.mode == Mode.PEVDN_C and self.noise_multiplier <= 0:
            raise ConfigError("noise_multiplier", "PEVDN_C needs a positive noise multiplier")
        if self.mode.secure and self.precision < 1:
            raise ConfigError("precision", "secure modes need precision >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps", "budget must be non-negative")
        if self.eval_interval < 1 or self.eval_episodes < 1:
            raise ConfigError("eval_interval", "evaluation interval and episode count must be positive")
        if self.history_k < 1:
            raise ConfigError("history_k", "history window must hold at least one slot")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer", f"unknown optimizer {self.optimizer!r}")
        if self.transport not in ("inprocess", "tcp"):
            raise ConfigError("transport", f"unknown transport {self.transport!r}")
        if self.delivery not in ("shuffle", "fifo", "reverse"):
            raise ConfigError("delivery", f"unknown delivery order {self.delivery!r}")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ConfigError("eps_start", "need 0 <= eps_end <= eps_start <= 1")
        try:
            self.dp_config()
        except ValueError as exc:
            raise ConfigError("buffer_size", str(exc)) from exc
        try:
            self.hidden_sizes()
        except ValueError as exc:
            raise ConfigError("hidden", str(exc)) from exc
        return self

    def dp_config(self) -> DPConfig:
        return DPConfig(clip=self.clip, noise_multiplier=self.noise_multiplier, delta=self.delta,
                        buffer_size=self.buffer_size, buffer_throughput=self.buffer_throughput,
                        expected_batch_size=self.expected_batch_size)

    def env_options(self) -> EnvOptions:
        return EnvOptions(name=self.env, gamma=self.gamma, payoff=self.payoff,
                          grid_size=self.grid_size, goal=self.goal, starts=self.starts,
                          n_agents=self.n_agents, episode_limit=self.episode_limit)

    def hidden_sizes(self) -> tuple[int, ...]:
        if not self.hidden.strip():
            return ()
        sizes = tuple(int(v) for v in self.hidden.split(","))
        if any(s < 1 for s in sizes):
            raise ValueError("hidden sizes must be positive")
        return sizes

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, Mode):
                value = value.value
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def parse_mode(text) -> Mode:
    try:
        return Mode(str(text).strip().upper().replace("-", "_"))
    except ValueError:
        raise ConfigError("mode", f"unknown mode {text!r}") from None


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(name: str, raw: str, annotation: str):
    raw = raw.strip()
    try:
        if name == "mode":
            return parse_mode(raw)
        if annotation.startswith("bool"):
            return _BOOL[raw.lower()]
        if annotation.startswith("int"):
            return int(raw.replace("_", ""))
        if annotation.startswith("float"):
            return float(raw)
        return raw if raw else None
    except (KeyError, ValueError):
        raise ConfigError(name, f"cannot parse {raw!r} as {annotation}") from None


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments allowed) into a validated config."""
    known = {f.name: str(f.type) for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _convert(key, raw, known[key])
    for key, value in (overrides or {}).items():
        values[key] = value
    return RunConfig(**values).validate()


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)
