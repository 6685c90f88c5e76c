"""Pipeline configuration: one YAML file, flags layered on top.

Secrets never live in the file — string values may reference environment
variables as ``${VAR_NAME}`` and are interpolated at load. Unknown keys
are rejected so typos fail loudly instead of silently using a default.
"""
from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .gateway import (
    GatewayBase,
    GatewayConfig,
    HttpGateway,
    RecordingGateway,
    ReplayGateway,
    SyntheticGateway,
    SyntheticProfile,
)
from .schema import (
    DEFAULT_LANG,
    PromptSpec,
    TemplateSet,
    builtin_name_pool,
    load_name_pool,
)
from .distiller import DistillPlan

GATEWAY_MODES = ("live", "record", "replay", "synthetic")

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def interpolate_env(value, env=None):
    """Replace ${VAR} references in strings, recursing into containers."""
    env = os.environ if env is None else env
    if isinstance(value, str):
        def sub(m):
            name = m.group(1)
            if name not in env:
                raise ConfigError(f"environment variable {name} is not set")
            return env[name]

        return _ENV_REF.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate_env(v, env) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v, env) for v in value]
    return value


@dataclass(frozen=True)
class GatewaySettings:
    """Which gateway to build and how it should behave."""

    mode: str = "synthetic"
    transcript: Optional[str] = None
    synthetic_seed: int = 0
    synthetic_invalid_rate: float = 0.3
    config: GatewayConfig = field(default_factory=GatewayConfig)

    def __post_init__(self):
        if self.mode not in GATEWAY_MODES:
            raise ConfigError(f"gateway mode must be one of {GATEWAY_MODES}, got {self.mode!r}")
        if self.mode in ("live", "record") and not self.config.endpoint_url:
            raise ConfigError(f"gateway mode {self.mode!r} requires endpoint_url")
        if self.mode in ("record", "replay") and not self.transcript:
            raise ConfigError(f"gateway mode {self.mode!r} requires a transcript path")
        if not 0.0 <= self.synthetic_invalid_rate <= 1.0:
            raise ConfigError("synthetic_invalid_rate must lie in [0, 1]")


@dataclass(frozen=True)
class FilterSettings:
    judge_sample_n: int = 4000
    holdout_fraction: float = 0.2
    epochs: int = 300
    learning_rate: float = 2.0
    l2: float = 1e-4
    hash_size: int = 16384
    calibrate_threshold: bool = False

    def __post_init__(self):
        if self.judge_sample_n < 2:
            raise ConfigError("judge_sample_n must be >= 2")
        if not 0.0 < self.holdout_fraction <= 0.5:
            raise ConfigError("holdout_fraction must lie in (0, 0.5]")
        if self.epochs < 1 or self.learning_rate <= 0 or self.l2 < 0:
            raise ConfigError("bad training hyperparameters")


@dataclass(frozen=True)
class EvalSettings:
    per_stratum_n: int = 100
    annotators: tuple = ("annotator-1", "annotator-2", "annotator-3")
    host: str = "127.0.0.1"
    port: int = 8321
    ui_dir: Optional[str] = None
    order_seed: int = 0

    def __post_init__(self):
        if self.per_stratum_n < 1:
            raise ConfigError("per_stratum_n must be >= 1")
        if not self.annotators:
            raise ConfigError("at least one annotator is required")


@dataclass(frozen=True)
class AssetSettings:
    """Where templates, seeds and the name pool come from.

    ``templates`` is either a directory holding head_distill/tail_distill/
    judge text files or the literal ``builtin``; same idea for
    ``name_pool``.
    """

    head_seeds: str = ""
    triple_seeds: str = ""
    templates: str = "builtin"
    name_pool: str = "builtin"
    language: str = DEFAULT_LANG


@dataclass(frozen=True)
class PipelineConfig:
    workspace: str
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    plan: DistillPlan = field(default_factory=lambda: DistillPlan(target_heads_per_type=200))
    filter: FilterSettings = field(default_factory=FilterSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    assets: AssetSettings = field(default_factory=AssetSettings)

    # -- workspace layout ---------------------------------------------------

    @property
    def store_path(self) -> Path:
        return Path(self.workspace) / "store.jsonl"

    @property
    def export_dir(self) -> Path:
        return Path(self.workspace) / "exports"

    @property
    def filter_model_path(self) -> Path:
        return Path(self.workspace) / "filter_model.json"

    @property
    def judged_samples_path(self) -> Path:
        return Path(self.workspace) / "judged_samples.jsonl"

    @property
    def eval_sample_path(self) -> Path:
        return Path(self.workspace) / "eval" / "sample.json"

    @property
    def annotations_path(self) -> Path:
        return Path(self.workspace) / "eval" / "annotations.jsonl"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.workspace) / "tail_checkpoint.json"

    @property
    def heads_path(self) -> Path:
        return Path(self.workspace) / "heads.jsonl"

    @property
    def runs_dir(self) -> Path:
        return Path(self.workspace) / "runs"

    # -- component builders ---------------------------------------------------

    def build_gateway(self) -> GatewayBase:
        gw = self.gateway
        if gw.mode == "synthetic":
            profile = dataclasses.replace(
                SyntheticProfile.for_language(self.assets.language),
                invalid_rate=gw.synthetic_invalid_rate,
            )
            return SyntheticGateway(
                seed=gw.synthetic_seed,
                profile=profile,
                model_id=gw.config.model_id,
                max_concurrent=gw.config.max_concurrent,
            )
        if gw.mode == "replay":
            return ReplayGateway(
                gw.transcript,
                model_id=gw.config.model_id,
                max_concurrent=gw.config.max_concurrent,
            )
        live = HttpGateway(gw.config)
        if gw.mode == "record":
            return RecordingGateway(live, gw.transcript)
        return live

    def load_templates(self) -> TemplateSet:
        if self.assets.templates == "builtin":
            return TemplateSet.builtin(self.assets.language)
        return TemplateSet.from_dir(self.assets.templates, self.assets.language)

    def load_names(self) -> list:
        if self.assets.name_pool == "builtin":
            return builtin_name_pool()
        return load_name_pool(self.assets.name_pool)


_PLAN_SCALARS = (
    "target_heads_per_type",
    "seeds_per_type",
    "triple_seeds_per_relation",
    "rng_seed",
    "items_per_head_request",
    "stall_limit",
    "failure_tolerance",
    "max_requests_per_stage",
)
_PLAN_PROMPT_KEYS = (
    "head_example_count",
    "head_temperature",
    "tail_example_count",
    "tails_per_request",
    "tail_temperature",
)


def _build(cls, data: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown {section} key(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"bad {section} section: {e}") from None


def _build_plan(data: dict) -> DistillPlan:
    unknown = set(data) - set(_PLAN_SCALARS) - set(_PLAN_PROMPT_KEYS)
    if unknown:
        raise ConfigError(f"unknown plan key(s): {', '.join(sorted(unknown))}")
    head_spec = PromptSpec.head_distill(
        example_count=data.get("head_example_count", 10),
        temperature=data.get("head_temperature", 0.7),
    )
    tail_spec = PromptSpec.tail_distill(
        example_count=data.get("tail_example_count", 8),
        tails_per_request=data.get("tails_per_request", 10),
        temperature=data.get("tail_temperature", 0.7),
    )
    scalars = {k: data[k] for k in _PLAN_SCALARS if k in data}
    if "target_heads_per_type" not in scalars:
        raise ConfigError("plan.target_heads_per_type is required")
    return DistillPlan(head_spec=head_spec, tail_spec=tail_spec, **scalars)


def load_config(path: str | Path, overrides: Optional[dict] = None) -> PipelineConfig:
    """Parse a YAML config file; overrides are dotted keys from CLI flags,
    e.g. {"plan.rng_seed": 7, "workspace": "/tmp/ws"}."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: invalid YAML ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    raw = interpolate_env(raw)
    for key, value in (overrides or {}).items():
        node = raw
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key}: {part} is not a mapping")
        node[leaf] = value
    return build_config(raw, base_dir=p.parent)


def build_config(raw: dict, base_dir: Optional[Path] = None) -> PipelineConfig:
    known = {"workspace", "gateway", "plan", "filter", "eval", "assets"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    if "workspace" not in raw:
        raise ConfigError("config needs a workspace path")

    def resolve(value: str) -> str:
        if not value or value == "builtin" or base_dir is None:
            return value
        q = Path(value)
        return str(q if q.is_absolute() else base_dir / q)

    gw_raw = dict(raw.get("gateway", {}))
    gw_cfg_keys = {f.name for f in dataclasses.fields(GatewayConfig)}
    cfg_data = {k: gw_raw.pop(k) for k in list(gw_raw) if k in gw_cfg_keys}
    if "transcript" in gw_raw and gw_raw["transcript"]:
        gw_raw["transcript"] = resolve(gw_raw["transcript"])
    gw_raw["config"] = _build(GatewayConfig, cfg_data, "gateway")
    gateway = _build(GatewaySettings, gw_raw, "gateway")

    assets_raw = dict(raw.get("assets", {}))
    for key in ("head_seeds", "triple_seeds", "templates", "name_pool"):
        if key in assets_raw:
            assets_raw[key] = resolve(assets_raw[key])
    assets = _build(AssetSettings, assets_raw, "assets")

    eval_raw = dict(raw.get("eval", {}))
    if "annotators" in eval_raw:
        eval_raw["annotators"] = tuple(eval_raw["annotators"])
    if eval_raw.get("ui_dir"):
        eval_raw["ui_dir"] = resolve(eval_raw["ui_dir"])

    cfg = PipelineConfig(
        workspace=resolve(str(raw["workspace"])),
        gateway=gateway,
        plan=_build_plan(dict(raw.get("plan", {}))),
        filter=_build(FilterSettings, dict(raw.get("filter", {})), "filter"),
        eval=_build(EvalSettings, eval_raw, "eval"),
        assets=assets,
    )
    _check_referenced_files(cfg)
    return cfg


def _check_referenced_files(cfg: PipelineConfig) -> None:
    checks = [
        ("assets.head_seeds", cfg.assets.head_seeds),
        ("assets.triple_seeds", cfg.assets.triple_seeds),
    ]
    if cfg.assets.templates != "builtin":
        checks.append(("assets.templates", cfg.assets.templates))
    if cfg.assets.name_pool != "builtin":
        checks.append(("assets.name_pool", cfg.assets.name_pool))
    if cfg.gateway.mode == "replay":
        checks.append(("gateway.transcript", cfg.gateway.transcript))
    for name, value in checks:
        if not value:
            raise ConfigError(f"{name} is required")
        if not Path(value).exists():
            raise ConfigError(f"{name}: no such file or directory: {value}")
