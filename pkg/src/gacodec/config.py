"""JSON run configuration shared by the CLI subcommands."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .ic1 import ConfigError
from .stage1 import Stage1Config
from .stage2 import Stage2Config


@dataclass
class CorpusSection:
    n_clips: int = 2000
    stratified: bool = False


@dataclass
class CodecSection:
    ode_steps: int = 32
    decode_seed: int = 7


@dataclass
class EvalSection:
    split_seed: int = 0
    judge_seed: int = 0
    judge_steps: int = 3000
    mmd_frames: int = 2000
    ode_steps: int = 32


@dataclass
class ScalingSection:
    tiers: list = field(default_factory=lambda: ["small", "medium", "large"])
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    steps: int = 20000


SECTIONS = {
    "corpus": CorpusSection,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "codec": CodecSection,
    "eval": EvalSection,
    "scaling": ScalingSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    codec: CodecSection = field(default_factory=CodecSection)
    eval: EvalSection = field(default_factory=EvalSection)
    scaling: ScalingSection = field(default_factory=ScalingSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = doc.get("seed", 0)
        kw = {}
        for name, klass in SECTIONS.items():
            sec = doc.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            if name == "stage2" and "seed" not in sec:
                sec = dict(sec, seed=seed)
            try:
                kw[name] = klass(**sec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {name!r} section: {exc}") from exc
        return cls(seed=seed, **kw)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)


def defaults_text() -> str:
    lines = ["config defaults (JSON sections):", "  seed = 0"]
    for name, klass in SECTIONS.items():
        lines.append(f"  [{name}]")
        for k, v in asdict(klass()).items():
            if name == "stage2" and k == "seed":
                v = "<global seed>"
            lines.append(f"    {k} = {v}")
    return "\n".join(lines)
