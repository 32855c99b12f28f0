"""
Reasoning that repeats the answer inflates confidence
=====================================================

A synthetic world served by the in-process stub backend.  Each mention of
the answer inside the reasoning trace makes the final answer tokens more
likely, whether or not the answer is right.  We generate with and without
reasoning, then re-score the answers with the mentions masked out.
"""

import tempfile
from pathlib import Path

from reasonuq import metrics, pipeline
from reasonuq.client import InferenceClient, Question, StubBackend, load_preset
from reasonuq.parsing import JudgeConfig
from reasonuq.synthetic import make_world

world, questions = make_world(300, seed=3)
client = InferenceClient(StubBackend(world), "Qwen3-VL-8B-Instruct", load_preset("Qwen3-VL-8B-Instruct"))
client.check_capabilities(require_score=True)
qs = [Question.from_dict(q) for q in questions]
work = Path(tempfile.mkdtemp())
judge = JudgeConfig()

# %%
# One answer per question in each mode, scored with the likelihood-based
# estimators only.
for mode in ("no_cot", "cot"):
    pipeline.generate_stage(qs, client, mode, work / mode, 1, 3, judge, src=False)
    pipeline.score_stage(work / mode, ["msp", "ppl", "mte"], judge)

# %%
# Mask every mention of the predicted answer in the trace, plus a control
# that masks the same number of random words, and re-score both.
pipeline.intervene_stage(work / "cot", work / "variants", 3, client)
for variant in ("masked", "random_masked"):
    pipeline.score_stage(work / "variants" / variant, ["msp", "ppl", "mte"], judge)

# %%
# PRR of sequence probability under each condition.
runs = {
    "no reasoning": work / "no_cot",
    "reasoning": work / "cot",
    "reasoning, answer masked": work / "variants" / "masked",
    "reasoning, random masked": work / "variants" / "random_masked",
}
for label, path in runs.items():
    rows = pipeline.read_scores(path / pipeline.SCORES)
    _, conf, corr, _, _ = pipeline.estimator_inputs(rows, "msp")
    print(f"{label:26s} PRR {metrics.prr(conf, corr):.3f}  accuracy {sum(corr) / len(corr):.3f}")

# %%
# The same comparison as files: report.csv / delta.csv as the CLI writes them.
pipeline.evaluate_stage([work / "cot" / pipeline.SCORES, work / "variants" / "masked" / pipeline.SCORES],
                        work / "report", ["msp", "ppl", "mte"])
print((work / "report" / "delta.csv").read_text())
