"""Run configuration: one serializable record holding every hyperparameter."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from .data import DomainDatasetSpec, DomainShift, StrongAugConfig
from .encoders import ConfigError, EncoderConfig
from .prompter import PrompterConfig, Strategy


class Mode(str, Enum):
    UDA = "uda"
    MSDA = "msda"
    DG = "dg"


@dataclass
class RunConfig:
    mode: Mode = Mode.UDA
    epochs: int = 30
    iterations_per_epoch: int | None = None
    batch_size: int = 32
    learning_rate: float = 3e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    threshold: float = 0.6
    lambda_c: float = 1.0
    lambda_i: float = 1.0
    tau: float = 0.01
    n_ctx: int = 32
    alpha_schedule: str = "linear"
    idc_source_weight: float = 1.0
    idc_target_weight: float = 1.0
    use_sc: bool = True
    use_idc: bool = True
    use_im: bool = True
    seed: int = 0
    align_encoders: bool = True
    anchor_per_class: int = 20
    align_random_captions: int = 4
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompter: PrompterConfig = field(default_factory=PrompterConfig)
    data: DomainDatasetSpec = field(default_factory=DomainDatasetSpec)
    strong_aug: StrongAugConfig = field(default_factory=StrongAugConfig)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.adam_betas = tuple(self.adam_betas)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ConfigError("iterations_per_epoch must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.align_random_captions < 0:
            raise ConfigError("align_random_captions must be >= 0")
        if self.lambda_c < 0 or self.lambda_i < 0:
            raise ConfigError("loss weights must be non-negative")
        n_src = len(self.data.sources)
        if self.mode is Mode.MSDA and n_src < 2:
            raise ConfigError(f"msda mode needs >= 2 source domains, got {n_src}")
        if self.mode is Mode.UDA and n_src != 1:
            raise ConfigError(f"uda mode takes exactly one source domain, got {n_src}")
        if self.mode is Mode.DG:
            if self.data.target is not None:
                raise ConfigError("dg mode forbids a target domain; put the test domain in data.unseen")
        elif self.data.target is None:
            raise ConfigError(f"{self.mode.value} mode needs a target domain")
        if self.encoder.image_size != self.data.image_size:
            raise ConfigError(
                f"encoder.image_size={self.encoder.image_size} != data.image_size={self.data.image_size}"
            )
        if self.encoder.image_channels != self.data.channels:
            raise ConfigError("encoder.image_channels must equal data.channels")
        self.encoder.validate()
        self.prompter.validate()
        self.data.validate()

    def steps_per_epoch(self) -> int:
        if self.iterations_per_epoch is not None:
            return self.iterations_per_epoch
        sizes = [self.data.n_source * self.data.num_classes]
        if self.mode is not Mode.DG:
            sizes.append(self.data.n_target * self.data.num_classes)
        return max(1, math.ceil(min(sizes) / self.batch_size))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        raw = dict(raw)
        nested = {
            "encoder": EncoderConfig,
            "prompter": PrompterConfig,
            "data": DomainDatasetSpec,
            "strong_aug": StrongAugConfig,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in raw and isinstance(raw[key], dict):
                _check_keys(typ, raw[key], key)
                raw[key] = typ(**raw[key])
        return cls(**raw)


def _check_keys(typ, raw: dict, where: str) -> None:
    known = {f.name for f in dataclasses.fields(typ)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _plain(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    raw = _plain(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part.isdigit() and isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        last = parts[-1]
        parsed = yaml.safe_load(value)
        if last.isdigit() and isinstance(node, list):
            node[int(last)] = parsed
        else:
            node[last] = parsed
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults < file < overrides."""
    raw = RunConfig().to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = _merge(raw, loaded)
    raw = apply_overrides(raw, overrides or [])
    cfg = RunConfig.from_dict(raw)
    cfg.validate()
    return cfg


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


# Ablation ladder: (row name, ITP, VP, L_sc, L_idc, L_im)
ABLATION_LADDER = [
    ("baseline_coop", False, False, False, False, False),
    ("vp_only", False, True, False, False, False),
    ("itp_only", True, False, False, False, False),
    ("mutual", True, True, False, False, False),
    ("mutual+sc", True, True, True, False, False),
    ("mutual+sc+idc", True, True, True, True, False),
    ("full", True, True, True, True, True),
]

STRATEGY_ROWS = [s for s in Strategy]


def ablation_config(base: RunConfig, row: str) -> RunConfig:
    """Copy of ``base`` with the toggles of one ablation-ladder row."""
    match = [r for r in ABLATION_LADDER if r[0] == row]
    if not match:
        raise ConfigError(f"unknown ablation row {row!r}")
    _, itp, vp, sc, idc, im = match[0]
    cfg = RunConfig.from_dict(base.to_dict())
    cfg.prompter.textual_prompting = itp
    cfg.prompter.visual_prompting = vp
    cfg.use_sc, cfg.use_idc, cfg.use_im = sc, idc, im
    return cfg


def strategy_config(base: RunConfig, strategy: Strategy | str) -> RunConfig:
    """Prompting-strategy comparison: only the supervised loss, given strategy."""
    cfg = RunConfig.from_dict(base.to_dict())
    cfg.prompter.strategy = Strategy(strategy)
    cfg.prompter.textual_prompting = cfg.prompter.visual_prompting = True
    cfg.use_sc = cfg.use_idc = cfg.use_im = False
    return cfg


def shifted_spec(
    rotation_deg: float = 30.0,
    channel_gain: list[float] | None = None,
    **kwargs,
) -> DomainDatasetSpec:
    """Single-source spec whose target is rotated and channel-scaled."""
    gain = channel_gain if channel_gain is not None else [1.4, 0.7, 1.0]
    return DomainDatasetSpec(
        target=DomainShift(name="target", rotation_deg=rotation_deg, channel_gain=gain),
        **kwargs,
    )
