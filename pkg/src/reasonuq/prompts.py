"""Prompt templates for answering, self-reporting certainty and follow-up rounds.

Templates live as text files under ``assets/prompts``.  ``PROMPT_VERSION``
is recorded with every generated record so prompt edits stay traceable.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from typing import Sequence

PROMPT_VERSION = "v1"

DATASET_INSTRUCTIONS = {"okvqa": "dataset_okvqa", "mathvista": "dataset_mathvista"}
IMAGE_PLACEHOLDER = "<image>"


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    text = resources.files("reasonuq").joinpath("assets").joinpath("prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def format_options(options: Sequence[str]) -> str:
    return "; ".join(options)


def _reasoning_mode(mode: str) -> str:
    # reasoning-trained models get the plain prompt and think on their own
    return "cot" if mode == "cot" else "no_cot"


def answer_prompt(dataset: str, mode: str, question: str, options: Sequence[str] | None = None) -> str:
    kind = "mc" if options else "open"
    placeholder = "<option>" if options else "<short answer>"
    parts = [load_template(f"answer_shared_{kind}").format(
        question=question, options=format_options(options or ()))]
    if dataset in DATASET_INSTRUCTIONS:
        parts.append(load_template(DATASET_INSTRUCTIONS[dataset]))
    parts.append(load_template(f"answer_{_reasoning_mode(mode)}").format(placeholder=placeholder))
    parts.append(load_template(f"answer_rules_{kind}"))
    return "\n\n".join(parts)


def src_prompt(mode: str, question: str, answer: str, options: Sequence[str] | None = None) -> str:
    kind = "mc" if options else "open"
    parts = [
        load_template(f"src_shared_{kind}").format(
            question=question, answer=answer, mc_options=format_options(options or ())),
        load_template(f"src_{_reasoning_mode(mode)}"),
        load_template("src_rules"),
    ]
    return "\n\n".join(parts)


def followup_prompt(options: Sequence[str] | None = None) -> str:
    return load_template("followup").format(placeholder="<option>" if options else "<short answer>")


def user_message(prompt: str, image_ref: str | None = None) -> dict:
    """Chat message with the image placed where the template says ``<image>``."""
    before, sep, after = prompt.partition(IMAGE_PLACEHOLDER)
    if not sep:
        return {"role": "user", "content": [{"type": "text", "text": prompt}]}
    content = []
    if before.strip():
        content.append({"type": "text", "text": before.rstrip("\n")})
    if image_ref is not None:
        content.append({"type": "image_url", "image_url": {"url": image_ref}})
    if after.strip():
        content.append({"type": "text", "text": after.lstrip("\n")})
    return {"role": "user", "content": content}


def message_text(message: dict) -> str:
    """Concatenated text parts of a chat message."""
    content = message["content"]
    if isinstance(content, str):
        return content
    return "\n".join(p["text"] for p in content if p.get("type") == "text")
