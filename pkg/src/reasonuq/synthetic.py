"""Seeded synthetic questions and stub worlds for demos and tests."""

from __future__ import annotations

import numpy as np

VOCAB = (
    "cat", "dog", "horse", "zebra", "giraffe", "elephant", "bear", "sheep",
    "firetruck", "bus", "train", "bicycle", "boat", "airplane", "tractor", "taxi",
    "ceramic", "glass", "wood", "metal", "plastic", "stone", "paper", "leather",
    "standing", "running", "sitting", "surfing", "skiing", "cooking", "reading", "sleeping",
    "red", "blue", "green", "yellow", "orange", "purple", "white", "black",
)
NUMBERS = tuple(str(i) for i in range(2, 40))
DATASETS = {"okvqa": False, "mathvista": True, "mmmu": True, "mmmu_pro_vision": True}


def make_world(
    n_items: int,
    seed: int = 0,
    datasets: tuple[str, ...] = ("okvqa", "mathvista"),
    n_candidates: int = 4,
    gamma: float = 1.0,
    min_mentions: int = 0,
    max_mentions: int = 6,
    parse_fail_rate: float = 0.0,
    cot_gain: float = 0.05,
) -> tuple[dict, list[dict]]:
    """Build a stub world and the matching question list.

    Each question gets a hidden skill level that sets the probability of its
    gold answer; the remaining mass is spread over distractors.  Answer
    likelihood therefore tracks correctness, until reasoning traces start
    conditioning on the answer.  Multiple-choice datasets list the
    candidates as options.
    """
    rng = np.random.default_rng(seed)
    items, questions = [], []
    for i in range(n_items):
        dataset = datasets[i % len(datasets)]
        mc = DATASETS.get(dataset, False)
        pool = NUMBERS if dataset == "mathvista" else VOCAB
        cands = [str(c) for c in rng.choice(pool, size=n_candidates, replace=False)]
        gold = cands[0]
        p_gold = 0.1 + 0.85 * rng.beta(1.2, 1.2)
        rest = rng.dirichlet(np.ones(n_candidates - 1)) * (1 - p_gold)
        probs = np.concatenate(([p_gold], rest))
        p_cot = min(p_gold + cot_gain, 0.97)
        probs_cot = np.concatenate(([p_cot], rest * (1 - p_cot) / rest.sum()))
        order = rng.permutation(n_candidates)
        question = f"[{dataset} {i:04d}] Which answer best fits the image?"
        items.append({
            "question": question,
            "candidates": [cands[j] for j in order],
            "probs": [round(float(probs[j]), 6) for j in order],
            "probs_cot": [round(float(probs_cot[j]), 6) for j in order],
        })
        q = {"id": f"{dataset}-{i:04d}", "dataset": dataset, "question": question, "gold_answers": [gold]}
        if mc:
            q["options"] = sorted(cands)
        q["image_ref"] = f"synthetic://{dataset}/{i:04d}.png"
        questions.append(q)
    world = {
        "gamma": gamma,
        "min_mentions": min_mentions,
        "max_mentions": max_mentions,
        "parse_fail_rate": parse_fail_rate,
        "items": items,
    }
    return world, questions
