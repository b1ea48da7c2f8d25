"""Experiment configuration: one JSON file drives every pipeline stage.

Three top-level seeds cover the stochastic stages (corpus + attacks, expert
training, fusion subset + fusion training); everything else derives from them
with stable hashing, so a config fully pins the experiment.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .attacks import PRESET_NAMES
from .corpus import SynthConfig, SynthConfigError
from .experts import (
    EncoderConfig,
    ExpertError,
    SCALE_ALPHA_LITERAL,
    SCALE_ALPHA_OVER_R,
    TrainHyper,
)

SEED_NAMES = ("data", "training", "fusion")

# Conditions whose training-split attack differs from the evaluation attack
# (evaluation adds unseen noise colors / an unseen cutoff).
TRAIN_PRESET_OVERRIDES = {"T4": "T4_train", "T5": "T5_train"}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    out_dir: str
    seeds: dict
    synth: SynthConfig
    encoder: EncoderConfig
    roster: dict                 # expert id -> training condition
    eval_extra: list             # eval-only single-attack conditions (e.g. T6)
    mixed: list                  # eval-only mixed-attack conditions
    lora: dict
    expert_train: TrainHyper
    fusion_train: TrainHyper
    k_values: list
    subset_fraction: float
    renormalize: bool
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def train_conditions(self) -> list:
        return [self.roster[name] for name in self.expert_ids]

    @property
    def expert_ids(self) -> list:
        return sorted(self.roster)

    @property
    def single_conditions(self) -> list:
        return ["T0"] + self.train_conditions + list(self.eval_extra)

    def train_preset_name(self, condition: str) -> str:
        return TRAIN_PRESET_OVERRIDES.get(condition, condition)

    def attack_seed(self, condition: str) -> int:
        from .corpus import stable_seed

        return stable_seed(self.seeds["data"], "attack", condition)

    def resolved(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "seeds": dict(self.seeds),
            "synth": self.synth.to_dict(),
            "encoder": self.encoder.to_dict(),
            "roster": dict(self.roster),
            "eval_extra": list(self.eval_extra),
            "mixed": list(self.mixed),
            "lora": dict(self.lora),
            "expert_train": self.expert_train.to_dict(),
            "fusion_train": self.fusion_train.to_dict(),
            "k_values": list(self.k_values),
            "subset_fraction": self.subset_fraction,
            "renormalize": self.renormalize,
        }

    def fingerprint(self) -> str:
        import hashlib

        text = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def default_config_dict() -> dict:
    text = resources.files("amulet").joinpath("configs/default.json").read_text()
    return json.loads(text)


def resolve_config(raw: dict) -> tuple:
    """Fill defaults, check every cross-reference; returns (config, errors)."""
    errors = []
    defaults = {
        "out_dir": "runs/default",
        "seeds": {"data": 8101, "training": 8202, "fusion": 8303},
        "synth": {},
        "encoder": {"frame_len": 160, "hop": 160, "hidden_dims": [64, 64, 64]},
        "roster": {"E1": "T1", "E2": "T2", "E3": "T3", "E4": "T4", "E5": "T5"},
        "eval_extra": ["T6"],
        "mixed": [
            "noise_first",
            "filter_first",
            "rawboost4",
            "rawboost5",
            "rawboost6",
            "rawboost7",
            "rawboost8",
        ],
        "lora": {"rank": 4, "alpha": 16.0, "dropout": 0.1, "scale_mode": SCALE_ALPHA_OVER_R},
        "expert_train": {},
        "fusion_train": {},
        "k_values": [3, 4, 5],
        "subset_fraction": 0.25,
        "renormalize": False,
    }
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        errors.append(f"unknown config keys: {', '.join(unknown)}")
    merged = {**defaults, **{k: v for k, v in raw.items() if k in defaults}}

    seeds = dict(defaults["seeds"])
    seeds.update(merged["seeds"] if isinstance(merged["seeds"], dict) else {})
    for name in SEED_NAMES:
        if name not in seeds or not isinstance(seeds[name], int):
            errors.append(f"seeds.{name} must be an integer (every stochastic stage needs a seed)")

    try:
        synth = SynthConfig.from_dict({**SynthConfig().to_dict(), **merged["synth"]})
    except (SynthConfigError, TypeError) as exc:
        errors.append(f"synth: {exc}")
        synth = SynthConfig()

    try:
        encoder = EncoderConfig.from_dict({**defaults["encoder"], **merged["encoder"]})
    except (ExpertError, TypeError, KeyError) as exc:
        errors.append(f"encoder: {exc}")
        encoder = EncoderConfig()

    roster = dict(merged["roster"])
    if not roster:
        errors.append("roster must name at least one expert")
    for expert, condition in roster.items():
        train_name = TRAIN_PRESET_OVERRIDES.get(condition, condition)
        if train_name not in PRESET_NAMES:
            errors.append(
                f"roster.{expert}: condition {condition!r} has no attack preset; "
                f"valid conditions: {', '.join(sorted(set(PRESET_NAMES) - set(TRAIN_PRESET_OVERRIDES.values())))}"
            )

    for group in ("eval_extra", "mixed"):
        for name in merged[group]:
            if name not in PRESET_NAMES:
                errors.append(f"{group}: unknown attack preset {name!r}")

    lora = {**defaults["lora"], **merged["lora"]}
    if not isinstance(lora.get("rank"), int) or lora["rank"] < 1:
        errors.append("lora.rank must be an integer >= 1")
    if not 0.0 <= float(lora.get("dropout", 0.1)) < 1.0:
        errors.append("lora.dropout must be in [0, 1)")
    if lora.get("scale_mode") not in (SCALE_ALPHA_OVER_R, SCALE_ALPHA_LITERAL):
        errors.append(f"lora.scale_mode must be {SCALE_ALPHA_OVER_R!r} or {SCALE_ALPHA_LITERAL!r}")

    def hyper(key):
        try:
            return TrainHyper.from_dict({**TrainHyper().to_dict(), **merged[key]})
        except TypeError as exc:
            errors.append(f"{key}: {exc}")
            return TrainHyper()

    expert_train = hyper("expert_train")
    fusion_train = hyper("fusion_train")
    for key, h in (("expert_train", expert_train), ("fusion_train", fusion_train)):
        if h.lr <= 0 or h.batch_size < 1 or h.max_epochs < 1:
            errors.append(f"{key}: lr, batch_size, and max_epochs must be positive")

    k_values = list(merged["k_values"])
    n_experts = len(roster)
    for k in k_values:
        if not isinstance(k, int) or k < 1:
            errors.append(f"k_values: {k!r} is not a positive integer")
        elif k > n_experts:
            errors.append(f"k={k} exceeds expert count ({n_experts})")

    fraction = merged["subset_fraction"]
    if not isinstance(fraction, (int, float)) or not 0.0 < float(fraction) <= 1.0:
        errors.append("subset_fraction must be in (0, 1]")

    config = ExperimentConfig(
        out_dir=str(merged["out_dir"]),
        seeds={name: seeds.get(name) for name in SEED_NAMES},
        synth=synth,
        encoder=encoder,
        roster=roster,
        eval_extra=list(merged["eval_extra"]),
        mixed=list(merged["mixed"]),
        lora=lora,
        expert_train=expert_train,
        fusion_train=fusion_train,
        k_values=k_values,
        subset_fraction=float(fraction) if isinstance(fraction, (int, float)) else 0.25,
        renormalize=bool(merged["renormalize"]),
        raw=raw,
    )
    return config, errors


def validate_config(source) -> ExperimentConfig:
    """Load and validate a config file (or dict); raises with every violation."""
    if isinstance(source, dict):
        raw = source
    elif source == "default":
        raw = default_config_dict()
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError([f"config file {path} does not exist"])
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from exc
    config, errors = resolve_config(raw)
    if errors:
        raise ConfigError(errors)
    return config
