"""Flat sectioned config files for the pipeline.

INI format with [synth]/[embed]/[index]/[model]/[train]/[eval] sections; any
missing key falls back to the desk-scale default.  The only environment
override is the RNG seed (GENREC_SEED); a --seed flag beats both.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ModelConfig
from .embed import BehaviorConfig
from .indexer import IndexConfig
from .training import TrainConfig

SEED_ENV = "GENREC_SEED"


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (5, 10)
    beam_size: int = 20
    max_history: int = 20
    mode: str = "test"
    use_adapter: bool = True
    exclude_history: bool = True


@dataclass
class SynthConfig:
    pattern: str = "chain"
    n_items: int = 200
    n_users: int = 160
    seq_len: int = 8
    group_size: int = 10
    n_rows: int = 8
    n_cols: int = 30
    seed: int = 0


@dataclass
class EmbedConfig:
    d_s: int = 64
    n_buckets: int = 4096
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)


@dataclass
class AblateConfig:
    """Reduced per-variant budget: ablations train one model per plan cell."""

    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 2
    adapter_rank: int = 4
    epochs: int = 6
    anneal_epochs: int = 2
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    index: IndexConfig = field(default_factory=IndexConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def reseed(self, seed: int) -> None:
        """Propagate one pipeline seed into every stage config."""
        self.seed = seed
        self.synth.seed = seed
        self.embed.behavior.seed = seed
        self.index.seed = seed
        self.model.seed = seed
        self.train.seed = seed

    def fingerprint_payload(self) -> dict:
        return {
            "seed": self.seed,
            "synth": dataclasses.asdict(self.synth),
            "embed": dataclasses.asdict(self.embed),
            "index": dataclasses.asdict(self.index),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "eval": dataclasses.asdict(self.eval),
            "ablate": dataclasses.asdict(self.ablate),
        }


def _coerce(raw: str, current):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(type(current[0])(p) for p in parts) if current else tuple(parts)
    return raw


def _apply_section(obj, section: configparser.SectionProxy, path: str) -> None:
    for key, raw in section.items():
        if not hasattr(obj, key):
            raise KeyError(f"unknown config key [{path}] {key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            raise KeyError(f"[{path}] {key} is a nested section, not a key")
        setattr(obj, key, _coerce(raw, current))


def load_config(path=None, seed_override: int | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(Path(path))
        if not read:
            raise FileNotFoundError(f"config file {path} not found")
        # The pipeline-level seed propagates first; stage sections may then
        # override their own keys (including stage-local seeds).
        if parser.has_section("pipeline"):
            for key in parser["pipeline"]:
                if key != "seed":
                    raise KeyError(f"unknown config key [pipeline] {key}")
            if parser.has_option("pipeline", "seed"):
                cfg.reseed(parser.getint("pipeline", "seed"))
        sections = {
            "synth": cfg.synth,
            "embed": cfg.embed,
            "behavior": cfg.embed.behavior,
            "index": cfg.index,
            "model": cfg.model,
            "train": cfg.train,
            "eval": cfg.eval,
            "ablate": cfg.ablate,
        }
        for name in parser.sections():
            if name == "pipeline":
                continue
            if name not in sections:
                raise KeyError(f"unknown config section [{name}]")
            _apply_section(sections[name], parser[name], name)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        cfg.reseed(int(env_seed))
    if seed_override is not None:
        cfg.reseed(seed_override)
    return cfg
