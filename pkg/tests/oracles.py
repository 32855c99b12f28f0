"""Independent reference implementations used to check the library.

Written directly from the definitions, in plain Python with exact fractions
where it helps, and deliberately sharing no code with the package.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from fractions import Fraction


# -- estimators -------------------------------------------------------------------

def msp(lps):
    # joint probability of the answer tokens as a product of probabilities
    return math.prod(math.exp(lp) for lp in lps)


def ppl(lps):
    return math.prod(math.exp(lp) for lp in lps) ** (-1.0 / len(lps))


def mean_entropy(entropies):
    return sum(entropies) / len(entropies)


def truncated_entropy(alt_logprobs):
    ps = [math.exp(lp) for lp in alt_logprobs]
    z = sum(ps)
    return -sum((p / z) * math.log(p / z) for p in ps if p > 0)


def mc_se(seq_lps):
    return -sum(seq_lps) / len(seq_lps)


def mc_nse(seq_lps, lens):
    return -sum(lp / n for lp, n in zip(seq_lps, lens)) / len(seq_lps)


def src(lp_yes, lp_no):
    py, pn = math.exp(lp_yes), math.exp(lp_no)
    return py / (py + pn)


def majority(answers, seq_lps):
    counts = Counter(a for a in answers if a is not None)
    top = max(counts.values())
    best = None
    for i, (a, lp) in enumerate(zip(answers, seq_lps)):
        if a is None or counts[a] != top:
            continue
        if best is None or lp > best[1]:
            best = (a, lp, i)
    return best[0], top


def consistency(answers, seq_lps):
    winner, top = majority(answers, seq_lps)
    return top / len(answers)


# -- ranking metrics ----------------------------------------------------------------

def acceptance_probability(conf, i):
    """P(record j is among the i most confident), averaging over tie orders."""
    n = len(conf)
    out = []
    for c in conf:
        above = sum(1 for d in conf if d > c)
        same = sum(1 for d in conf if d == c)
        share = Fraction(min(max(i - above, 0), same), same)
        out.append(share)
    assert sum(out) == i or n == 0
    return out


def expected_accepted_loss(conf, correct, i):
    probs = acceptance_probability(conf, i)
    return sum(p * (1 - Fraction(c)) for p, c in zip(probs, correct))


def trapezoid(ys):
    n = len(ys) - 1
    return sum((ys[k] + ys[k + 1]) / 2 for k in range(n)) / n


def rejection_curve(conf, correct):
    n = len(conf)
    ys = []
    for j in range(n + 1):
        kept = n - j
        ys.append(expected_accepted_loss(conf, correct, kept) / kept if kept else Fraction(0))
    return ys


def prr(conf, correct):
    correct = [Fraction(c) for c in correct]
    unc = trapezoid(rejection_curve(conf, correct))
    base = trapezoid(rejection_curve([0] * len(conf), correct))
    orc = trapezoid(rejection_curve(correct, correct))
    return (base - unc) / (base - orc)


def augrc(conf, correct):
    n = len(conf)
    return trapezoid([expected_accepted_loss(conf, correct, i) / n for i in range(n + 1)])


def aurc(conf, correct):
    n = len(conf)
    risk = [None] + [expected_accepted_loss(conf, correct, i) / i for i in range(1, n + 1)]
    risk[0] = risk[1]
    return trapezoid(risk)


def brute_force_accepted_loss(conf, correct):
    """Average accepted loss over every ordering consistent with the ties (small n only)."""
    n = len(conf)
    totals = [Fraction(0)] * (n + 1)
    count = 0
    for perm in itertools.permutations(range(n)):
        if any(conf[perm[k]] < conf[perm[k + 1]] for k in range(n - 1)):
            continue
        count += 1
        acc = Fraction(0)
        for i in range(1, n + 1):
            acc += 1 - Fraction(correct[perm[i - 1]])
            totals[i] += acc
    return [t / count for t in totals]


# -- correlations -------------------------------------------------------------------

def average_ranks(xs):
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    k = 0
    while k < len(order):
        j = k
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[k]]:
            j += 1
        avg = (k + j) / 2 + 1
        for m in range(k, j + 1):
            ranks[order[m]] = avg
        k = j + 1
    return ranks


def pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def spearman(x, y):
    return pearson(average_ranks(x), average_ranks(y))


def partial_spearman(x, y, controls):
    """Recursive partial correlation formula on ranks (one or two controls)."""
    rx, ry = average_ranks(x), average_ranks(y)
    rz = [average_ranks(z) for z in controls]

    def first_order(a, b, c):
        rab, rac, rbc = pearson(a, b), pearson(a, c), pearson(b, c)
        return (rab - rac * rbc) / math.sqrt((1 - rac ** 2) * (1 - rbc ** 2))

    if len(rz) == 1:
        return first_order(rx, ry, rz[0])
    if len(rz) == 2:
        z1, z2 = rz
        rxy, rxz1, ryz1 = first_order(rx, ry, z2), first_order(rx, z1, z2), first_order(ry, z1, z2)
        return (rxy - rxz1 * ryz1) / math.sqrt((1 - rxz1 ** 2) * (1 - ryz1 ** 2))
    raise ValueError("oracle supports one or two controls")


def fisher(rs_ns_ks):
    ws = [n - 3 - k for _, n, k in rs_ns_ks]
    z = sum(w * math.atanh(r) for w, (r, _, _) in zip(ws, rs_ns_ks)) / sum(ws)
    se = 1 / math.sqrt(sum(ws))
    return math.tanh(z), (math.tanh(z - 1.96 * se), math.tanh(z + 1.96 * se))


# -- answer mentions ----------------------------------------------------------------

def count_mentions(trace, answer):
    """Character scan for standalone, case-insensitive occurrences of the answer."""
    words = answer.split()
    t = trace.lower()
    hits, i = 0, 0
    while i < len(t):
        j = _match_words(t, i, [w.lower() for w in words])
        if j is None:
            i += 1
            continue
        before = t[i - 1] if i > 0 else ""
        after = t[j] if j < len(t) else ""
        ok = not (before.isalnum()) and not (after.isalnum())
        if ok and words[0][0].isdigit() and before == ".":
            ok = False
        if ok and words[-1][-1].isdigit() and after == "." and j + 1 < len(t) and t[j + 1].isdigit():
            ok = False
        if ok:
            hits += 1
            i = j
        else:
            i += 1
    return hits


def _match_words(t, i, words):
    pos = i
    for k, w in enumerate(words):
        if k > 0:
            start = pos
            while pos < len(t) and t[pos].isspace():
                pos += 1
            if pos == start:
                return None
        if t[pos:pos + len(w)] != w:
            return None
        pos += len(w)
    return pos
