"""Experiment configuration: JSON schema validation, defaults, digests.

Configs are strict JSON (unknown keys rejected so typos fail loudly). Every
random stream in a run is derived from the single ``seed`` via labeled
hashing; ``seeds`` lists replicate runs. The resolved config's canonical
JSON is hashed into a digest that is embedded in every run report.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional

import jsonschema

from .errors import ConfigError

STRATEGIES = (
    "fettl", "fettl_local", "fettl_scratch", "fedavg", "fedprox", "fedbn",
    "adain_ablation", "dataalchemy_ablation", "fed_dataalchemy_ablation",
    "global_template_ablation",
)

# mirrors the benchmark's site-count and size-imbalance pattern
DEFAULT_SEG_SITES = [
    {"site_id": "A", "n": 50}, {"site_id": "B", "n": 98}, {"site_id": "C", "n": 47},
    {"site_id": "D", "n": 230}, {"site_id": "E", "n": 400},
]
DEFAULT_CLF_SITES = [
    {"site_id": "X", "n": 120, "class_balance": 0.40},
    {"site_id": "Y", "n": 80, "class_balance": 0.46},
]

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["task"],
    "properties": {
        "task": {"enum": ["segmentation", "classification"]},
        "strategy": {"enum": list(STRATEGIES)},
        "image_size": {"type": "integer", "minimum": 8, "multipleOf": 4},
        "sites": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["site_id", "n"],
                "properties": {
                    "site_id": {"type": "string", "minLength": 1},
                    "n": {"type": "integer", "minimum": 3},
                    "style_seed": {"type": "integer"},
                    "class_balance": {"type": "number", "exclusiveMinimum": 0,
                                      "exclusiveMaximum": 1},
                },
            },
        },
        "size_factor": {"type": "number", "exclusiveMinimum": 0},
        "class_balance": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "rounds": {"type": "integer", "minimum": 0},
        "local_iters": {"type": "integer", "minimum": 0},
        "local_epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "eta": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "minimum": 0},
        "mu": {"type": "number", "minimum": 0},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "ns_iterations": {"type": "integer", "minimum": 1},
        "optimizer": {"enum": ["adamw", "sgd"]},
        "weight_decay": {"type": "number", "minimum": 0},
        "augment": {"type": "boolean"},
        "seed": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0},
                  "minItems": 1},
        "output_dir": {"type": "string"},
        "dataset_dir": {"type": "string"},
        "checkpoint_dir": {"type": "string"},
        "init_site": {"type": "string"},
        "template_init": {"enum": ["encoded_image", "raw_image", "gaussian_noise"]},
        "strict": {"type": "boolean"},
        "dice_threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "parallel_clients": {"type": "integer", "minimum": 1},
        "pretrain": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "pool_images": {"type": "integer", "minimum": 1},
                "pool_epochs": {"type": "integer", "minimum": 0},
                "rounds": {"type": "integer", "minimum": 0},
                "local_steps": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "init_task": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
            },
        },
    },
}


@dataclass
class PretrainConfig:
    pool_images: int = 48
    pool_epochs: int = 40
    rounds: int = 5
    local_steps: int = 20
    batch_size: int = 8
    lr: float = 1e-3


@dataclass
class InitTaskConfig:
    epochs: int = 5
    lr: float = 5e-4
    batch_size: int = 16


@dataclass
class ExperimentConfig:
    task: str
    strategy: str = "fettl"
    image_size: int = 32
    sites: List[dict] = field(default_factory=list)
    size_factor: float = 1.0
    class_balance: float = 0.5
    rounds: int = 10
    local_iters: int = 200   # segmentation: minibatch steps per round
    local_epochs: int = 2    # classification: passes per round
    batch_size: int = 16
    eta: float = 1e-4        # template learning rate
    beta: float = 1e-4       # task-model learning rate
    mu: Optional[float] = None  # fedprox proximal weight
    epsilon: float = 1e-5
    ns_iterations: int = 20
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    augment: bool = True
    seed: int = 0
    seeds: List[int] = field(default_factory=list)
    output_dir: Optional[str] = None
    dataset_dir: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    init_site: Optional[str] = None
    template_init: str = "encoded_image"
    strict: bool = False
    dice_threshold: float = 0.5
    parallel_clients: int = 1
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    init_task: InitTaskConfig = field(default_factory=InitTaskConfig)

    def resolved_sites(self) -> List[dict]:
        sites = self.sites or (DEFAULT_SEG_SITES if self.task == "segmentation"
                               else DEFAULT_CLF_SITES)
        out = []
        for spec in sites:
            spec = dict(spec)
            spec["n"] = max(4 if self.task == "classification" else 3,
                            int(round(spec["n"] * self.size_factor)))
            out.append(spec)
        return out

    def effective_mu(self) -> float:
        if self.strategy == "fedprox" and self.mu is None:
            if self.strict:
                raise ConfigError("strict mode: fedprox requires an explicit 'mu'")
            return 0.01
        return self.mu if self.mu is not None else 0.0

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("pretrain", "init_task")}
        d["pretrain"] = dict(self.pretrain.__dict__)
        d["init_task"] = dict(self.init_task.__dict__)
        d["sites"] = self.resolved_sites()
        return d

    def digest(self) -> str:
        # execution-only knobs (where to write, how many processes) do not
        # change the experiment, so they stay out of the digest
        d = self.to_dict()
        for key in ("output_dir", "parallel_clients"):
            d.pop(key, None)
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = {k: v for k, v in self.__dict__.items()}
        d.update(kw)
        return ExperimentConfig(**d)


def validate_config(raw: dict) -> ExperimentConfig:
    """Validate a raw dict against the schema and apply defaults."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from exc
    data = dict(raw)
    pre = PretrainConfig(**data.pop("pretrain", {}))
    init_task = InitTaskConfig(**data.pop("init_task", {}))
    cfg = ExperimentConfig(pretrain=pre, init_task=init_task, **data)
    if not cfg.seeds:
        cfg.seeds = [cfg.seed]
    if cfg.task == "classification" and cfg.strategy == "fedbn":
        # the compact classifier has no norm layers, so fedbn would silently
        # degenerate to fedavg; refuse the pairing instead
        raise ConfigError("fedbn requires a norm-layer model; use the segmentation task")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: line {exc.lineno}: {exc.msg}") from exc
    return validate_config(raw)
