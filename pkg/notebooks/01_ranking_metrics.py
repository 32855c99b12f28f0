"""
Scoring confidence and ranking answers
======================================

Turn answer-token log-probabilities into confidence scores, then ask how
well each score separates right answers from wrong ones.
"""

import numpy as np

from reasonuq import estimators as est
from reasonuq import metrics

rng = np.random.default_rng(0)

# %%
# A toy batch: 200 answers, each a few tokens long.  Wrong answers get
# slightly less likely tokens on average, so likelihood carries signal.
n = 200
correct = (rng.random(n) < 0.6).astype(float)
lengths = rng.integers(1, 5, n)
answer_logprobs = [-rng.exponential(0.3 if c else 0.8, k) for c, k in zip(correct, lengths)]

# %%
# Sequence probability and perplexity per answer.  Perplexity is an
# uncertainty, so it is negated before ranking.
msp = np.array([est.log_msp(lp) for lp in answer_logprobs])
ppl = np.array([est.to_confidence("ppl", est.perplexity(lp)) for lp in answer_logprobs])

for name, conf in (("msp", msp), ("ppl", ppl)):
    m = metrics.evaluate(conf, correct)
    print(f"{name:4s} AUGRC {m.augrc:.4f}  PRR {m.prr:.3f}  AURC {m.aurc:.4f}  Spearman {m.spearman:.3f}")

# %%
# The rejection curve: error among the kept answers as the least confident
# ones are dropped.  A useful score pushes the curve down quickly.
curve = metrics.rejection_curve(msp, correct)
for frac in (0.0, 0.25, 0.5, 0.75):
    i = int(frac * n)
    print(f"rejected {curve.x[i]:.2f} -> error {curve.y[i]:.3f}")

# %%
# Reference points: a perfect ranking scores PRR 1, a constant score 0.
print("oracle PRR  ", metrics.prr(correct, correct))
print("constant PRR", metrics.prr(np.zeros(n), correct))

# %%
# Pooling per-dataset correlations with Fisher's z.
r, (lo, hi) = metrics.fisher_aggregate([(0.31, 120, 1), (0.18, 95, 1), (0.25, 140, 1)])
print(f"pooled r {r:.3f}, 95% CI [{lo:.3f}, {hi:.3f}]")
