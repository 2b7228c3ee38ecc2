"""One flat config binding every knob of the engine.

The file form is plain JSON with exactly these field names; anything omitted
keeps its default, unknown keys are rejected (they are almost always typos).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .canon import canonical_dumps
from .energy import EnergyParams, PATCH_SIDE_DEFAULT, S_TOTAL_DEFAULT
from .errors import DomainError
from .protocol import DEFAULT_INSTRUCTION
from .runtime import EpisodeConfig, TOKEN_ENV_DEFAULT


class ConfigError(DomainError):
    code = "ConfigError"


@dataclass
class Config:
    # energy / shaping
    lambda_decay: float = 0.1
    gamma_feedback: float = 0.3
    s_total: int = S_TOTAL_DEFAULT
    top_k: int = 5
    uniform_mode: bool = False
    patch_side: int = PATCH_SIDE_DEFAULT
    # runtime
    t_max: int = 20
    search_k: int = 5
    n_frames: int = 8
    instruction_path: str = ""  # empty -> built-in default instruction
    # training
    clip_epsilon: float = 0.2
    # policy
    policy_mode: str = "scripted"  # "scripted" | "remote"
    policy_script: str = ""
    policy_base_url: str = ""
    policy_model: str = ""
    policy_token_env: str = TOKEN_ENV_DEFAULT
    policy_timeout_s: float = 60.0
    # judge
    judge_mode: str = "exact"  # "exact" | "remote"
    judge_base_url: str = ""
    judge_model: str = ""
    judge_token_env: str = TOKEN_ENV_DEFAULT
    # paths
    corpus_path: str = ""
    session_dir: str = ""
    output_dir: str = "out"

    def __post_init__(self) -> None:
        if self.policy_mode not in ("scripted", "remote"):
            raise ConfigError(f"policy_mode must be 'scripted' or 'remote', got {self.policy_mode!r}")
        if self.judge_mode not in ("exact", "remote"):
            raise ConfigError(f"judge_mode must be 'exact' or 'remote', got {self.judge_mode!r}")

    def energy_params(self) -> EnergyParams:
        return EnergyParams(
            lambda_decay=self.lambda_decay,
            gamma_feedback=self.gamma_feedback,
            s_total=self.s_total,
            top_k=self.top_k,
            uniform_mode=self.uniform_mode,
        )

    def instruction_text(self) -> str:
        if not self.instruction_path:
            return DEFAULT_INSTRUCTION
        return Path(self.instruction_path).read_text(encoding="utf-8")

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            t_max=self.t_max,
            energy=self.energy_params(),
            search_k=self.search_k,
            n_frames=self.n_frames,
            instruction=self.instruction_text(),
        )

    def require(self, field_name: str) -> str:
        value = getattr(self, field_name)
        if not value:
            raise ConfigError(f"config field {field_name!r} is required for this command")
        return value


def load_config(path: str | Path | None) -> Config:
    """Defaults plus overrides from a JSON config file (when given)."""
    if path is None:
        return Config()
    path = Path(path)
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(record, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(Config)}
    unknown = sorted(set(record) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config fields {unknown}")
    try:
        return Config(**record)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump_config(config: Config) -> str:
    return canonical_dumps(asdict(config)) + "\n"
