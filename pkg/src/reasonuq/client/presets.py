"""Named decoding presets for the supported model families."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from importlib import resources

ALIASES = {
    "Gemma3-4B-IT": "Gemma3-Series",
    "gemma-3-4b-it": "Gemma3-Series",
    "google/gemma-3-4b-it": "Gemma3-Series",
    "Qwen/Qwen3-VL-8B-Instruct": "Qwen3-VL-8B-Instruct",
    "Qwen/Qwen3-VL-8B-Thinking": "Qwen3-VL-8B-Thinking",
    "Qwen/Qwen3-VL-32B-Instruct": "Qwen3-VL-32B-Instruct",
}


@dataclass(frozen=True)
class DecodingPreset:
    temperature: float
    top_p: float
    top_k: int
    presence_penalty: float
    max_tokens: int = 20000

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be ≥ 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be ≥ 1")

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=None)
def _table() -> dict[str, DecodingPreset]:
    raw = json.loads(resources.files("reasonuq").joinpath("assets").joinpath("presets.json").read_text(encoding="utf-8"))
    return {name: DecodingPreset(**values) for name, values in raw.items()}


def preset_names() -> list[str]:
    return sorted(_table())


def load_preset(name: str, **overrides) -> DecodingPreset:
    """Look up a preset by model name (or alias) and apply per-run overrides."""
    table = _table()
    key = ALIASES.get(name, name)
    if key not in table:
        raise KeyError(f"no decoding preset for {name!r}; known: {', '.join(sorted(table))}")
    preset = table[key]
    return replace(preset, **overrides) if overrides else preset
