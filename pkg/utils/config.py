"""
Run configuration.

Configs are flat `key = value` files with `#` comments and `include <path>`
lines (resolved relative to the including file; later keys win). Every key
maps to a field of `RunConfig`; unknown keys are rejected.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from .vocab import MAX_LAYERS

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "INTROSPECT_OUTPUT_ROOT"


@dataclass
class RunConfig:
    seed: int = 0
    output_root: str = "data/processed"
    n_jobs: int = 1
    log_every: int = 50

    # world
    n_subjects: int = 24
    n_relations: int = 4
    n_objects: int = 12
    n_text: int = 400
    text_min: int = 6
    text_max: int = 14
    n_questions: int = 64

    # models
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    context_length: int = 96
    mlp_ratio: int = 4

    # target training
    target_steps: int = 3000
    target_lr: float = 3e-3
    target_batch_size: int = 32
    follow_fraction: float = 0.5
    fact_renderings: int = 4
    hinted_per_question: int = 4
    follow_sweep: Tuple[float, ...] = (0.2, 0.4, 0.5, 0.6, 0.8)

    # sparse autoencoders and feature sources
    sae_expansion: int = 4
    sae_l1: float = 1e-3
    sae_steps: int = 2000
    sae_lr: float = 1e-3
    sae_batch_size: int = 256
    act_per_layer: int = 16
    delta_pairs: int = 32

    # labeling
    min_label_score: float = 0.0
    held_out_per_layer: int = 16

    # patch / ablate data
    patch_max_pairs: int = 96
    patch_cap: int = 64
    ablate_cap: int = 0
    test_fraction: float = 0.2

    # explainers
    explainer_epochs: int = 10
    explainer_lr: float = 1e-3
    explainer_batch_size: int = 16
    projection_mode: str = "joint"
    fraction: float = 1.0
    ablate: Tuple[str, ...] = ()
    validation_size: int = 32
    probe_prompts: int = 48

    # experiments
    experiment_seeds: Tuple[int, ...] = (0, 1, 2)
    sweep_fractions: Tuple[float, ...] = (0.008, 0.03, 0.125, 0.5, 1.0)

    def __post_init__(self):
        # layer annotations are vocabulary tokens L0 .. L{MAX_LAYERS - 1}
        if not 1 <= self.n_layers <= MAX_LAYERS:
            raise ValueError(f"n_layers={self.n_layers} outside [1, {MAX_LAYERS}]; the vocabulary only has layer tokens "
                             f"for {MAX_LAYERS} layers")

    def to_dict(self) -> Dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in ("output_root", "n_jobs", "log_every")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(key: str, raw: str):
    default = _FIELDS[key].default
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"Config key {key} expects a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, tuple):
        items = [item.strip() for item in raw.split(",") if item.strip()]
        if key == "experiment_seeds":
            return tuple(int(i) for i in items)
        if key == "ablate":
            return tuple(items)
        return tuple(float(i) for i in items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config_file(path: str, _seen: Optional[set] = None) -> Dict[str, str]:
    """Raw key/value pairs with includes expanded in order."""
    path = os.path.abspath(path)
    seen = _seen if _seen is not None else set()
    if path in seen:
        raise ValueError(f"Config include cycle at {path}")
    seen.add(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")

    values: Dict[str, str] = {}
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("include "):
                included = os.path.join(os.path.dirname(path), line[len("include "):].strip())
                values.update(read_config_file(included, seen))
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{number}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = raw
    return values


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    values = {}
    if path:
        for key, raw in read_config_file(path).items():
            if key not in _FIELDS:
                raise ValueError(f"Unknown config key {key!r} in {path}")
            values[key] = _convert(key, raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ValueError(f"Unknown config override {key!r}")
        values[key] = value
    config = RunConfig(**values)
    env_root = os.getenv(OUTPUT_ROOT_ENV)
    if env_root and "output_root" not in (overrides or {}):
        config.output_root = env_root
    logger.info(f"Loaded config {path or '<defaults>'} (hash {config.hash()[:12]})")
    return config
