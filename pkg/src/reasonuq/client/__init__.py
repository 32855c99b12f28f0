"""Client for chat-completions style inference backends, plus a local stub."""

from .backend import BackendConfig, BackendError, ContextOverflow, HttpBackend, UnsupportedBackend, canonical_json
from .client import (
    Generation,
    InferenceClient,
    Question,
    SequentialResult,
    derive_seed,
    locate_spans,
    record_from_generation,
    sample_from_generation,
)
from .presets import DecodingPreset, load_preset, preset_names
from .stub import StubBackend, StubServer, request_hash

__all__ = [
    "BackendConfig", "BackendError", "ContextOverflow", "HttpBackend", "UnsupportedBackend",
    "canonical_json", "Generation", "InferenceClient", "Question", "SequentialResult",
    "derive_seed", "locate_spans", "record_from_generation", "sample_from_generation",
    "DecodingPreset", "load_preset", "preset_names", "StubBackend", "StubServer", "request_hash",
]
