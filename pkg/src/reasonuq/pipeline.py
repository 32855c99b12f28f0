"""File-to-file pipeline stages.

Each stage reads its inputs from a run directory and writes its outputs next
to them, so any stage can be rerun on its own.  Output rows are ordered by
record id.  Run directory layout::

    records.jsonl    one primary generation per input
    samples.jsonl    K sampled generations per input
    probes.jsonl     self-report probes
    scores.jsonl     estimator values per record
    failed.json      ids that failed at some stage, with the error
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

from . import analysis
from . import estimators as est
from . import metrics
from .client import InferenceClient, Question, derive_seed, record_from_generation, sample_from_generation
from .interventions import (
    ScoringRequest,
    apply_rescore,
    build_rescore_request,
    mask_answer_mentions,
    mask_random_tokens,
    predicted_answer_text,
    reasoning_trace,
)
from .parsing import JudgeConfig, extract_tagged, judge_correct
from .prompts import answer_prompt
from .records import (
    DuplicateIdError,
    GenerationRecord,
    RecordValidationError,
    SampleSet,
    iter_jsonl,
    read_probes,
    read_records,
    read_sample_sets,
    write_jsonl,
    write_probes,
    write_records,
    write_sample_sets,
)

log = logging.getLogger(__name__)

RECORDS = "records.jsonl"
SAMPLES = "samples.jsonl"
PROBES = "probes.jsonl"
SCORES = "scores.jsonl"
FAILED = "failed.json"
REQUESTS = "requests.jsonl"
BASE_RECORDS = "base_records.jsonl"
UNDEFINED = "—"
CORRELATION_ESTIMATORS = ("msp", "ppl", "mte")
SHIFT_ESTIMATORS = ("msp", "ppl", "mte", "src")


class TotalFailure(RuntimeError):
    """Every record of a stage failed; nothing useful was produced."""


# -- small io helpers ---------------------------------------------------------------

def read_questions(path: str | os.PathLike) -> list[Question]:
    out, seen = [], set()
    for lineno, obj in iter_jsonl(path):
        try:
            q = Question.from_dict(obj)
        except KeyError as exc:
            raise RecordValidationError(str(exc.args[0]), "required field missing", lineno) from None
        if q.id in seen:
            raise DuplicateIdError(f"line {lineno}: duplicate id {q.id!r}")
        seen.add(q.id)
        out.append(q)
    return out


def write_json(path: str | os.PathLike, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    os.replace(tmp, path)


def fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return UNDEFINED
    if isinstance(value, int):
        return str(value)
    s = f"{value:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _failed_doc(stage: str, failures: dict[str, str]) -> dict:
    return {"stage": stage, "failed": sorted(failures), "errors": dict(sorted(failures.items()))}


# -- generate -----------------------------------------------------------------------

def generate_stage(
    questions: Sequence[Question],
    client: InferenceClient,
    mode: str,
    out_dir: str | os.PathLike,
    k: int = 10,
    seed: int = 0,
    judge: JudgeConfig | None = None,
    src: bool = True,
) -> dict[str, str]:
    """Primary generation, K samples and (optionally) a self-report probe per input."""
    judge = judge or JudgeConfig()
    out = Path(out_dir)

    def work(q: Question):
        prompt = answer_prompt(q.dataset, mode, q.question, q.options)
        gen = client.generate(prompt, q.image_ref, 1, derive_seed(seed, q.id, "primary"))[0]
        record = record_from_generation(q, gen, mode, client.model, judge)
        sample_set = None
        if k > 0:
            s = derive_seed(seed, q.id, "samples")
            gens = client.generate(prompt, q.image_ref, k, s)
            sample_set = SampleSet(q.id, tuple(sample_from_generation(g, judge) for g in gens), s)
        return record, sample_set

    results, failures = client.map_records(work, questions)
    if questions and not results:
        raise TotalFailure(f"all {len(questions)} inputs failed; first error: {next(iter(failures.values()))}")
    ids = sorted(results)
    records = [results[i][0] for i in ids]
    sets = [results[i][1] for i in ids if results[i][1] is not None]
    probes = []
    if src:
        parsed = [r for r in records if r.parse_ok]
        got, probe_failures = client.map_records(lambda r: client.probe_src(r, seed), parsed)
        probes = [got[i] for i in sorted(got)]
        failures.update({i: f"src probe: {msg}" for i, msg in probe_failures.items()})
    write_records(out / RECORDS, records)
    write_sample_sets(out / SAMPLES, sets)
    if src:
        write_probes(out / PROBES, probes)
    write_json(out / FAILED, _failed_doc("generate", failures))
    return failures


def src_probe_stage(run_dir: str | os.PathLike, client: InferenceClient, seed: int = 0) -> dict[str, str]:
    run = Path(run_dir)
    records = [r for r in read_records(run / RECORDS) if r.parse_ok]
    got, failures = client.map_records(lambda r: client.probe_src(r, seed), records)
    write_probes(run / PROBES, [got[i] for i in sorted(got)])
    write_json(run / "failed_src.json", _failed_doc("src-probe", failures))
    return failures


# -- score --------------------------------------------------------------------------

def _load_optional(path: Path, reader):
    return reader(path) if path.exists() else []


def score_stage(
    run_dir: str | os.PathLike,
    estimators: Sequence[str] = est.ESTIMATORS,
    judge: JudgeConfig | None = None,
    out_dir: str | os.PathLike | None = None,
) -> list[dict]:
    """Estimator values for every record; missing inputs are logged per estimator."""
    judge = judge or JudgeConfig()
    run = Path(run_dir)
    records = sorted(read_records(run / RECORDS), key=lambda r: r.id)
    sets = {s.record_id: s for s in _load_optional(run / SAMPLES, read_sample_sets)}
    probes = {p.record_id: p for p in _load_optional(run / PROBES, read_probes)}
    rows = []
    missing = defaultdict(int)
    for r in records:
        s = est.score_record(r, sets.get(r.id), probes.get(r.id), estimators)
        row = {"record_id": r.id, "dataset": r.dataset, "model": r.model, "mode": r.mode}
        if r.variant is not None:
            row["variant"] = r.variant
        row["parse_ok"] = r.parse_ok
        row["correct"] = float(r.correct or 0.0)
        if s.majority_answer is not None:
            row["majority_correct"] = judge_correct(s.majority_answer, r.gold_answers, r.options, judge)
        d = s.to_dict()
        d.pop("record_id")
        row.update(d)
        for name, reason in s.unavailable.items():
            missing[(name, reason)] += 1
        rows.append(row)
    for (name, reason), count in sorted(missing.items()):
        log.warning("%s unavailable for %d records (%s)", name, count, reason)
    write_jsonl(Path(out_dir or run) / SCORES, rows)
    return rows


def read_scores(path: str | os.PathLike) -> list[dict]:
    return [obj for _, obj in iter_jsonl(path)]


# -- evaluate -----------------------------------------------------------------------

REPORT_HEADER = ("dataset", "mode", "estimator", "augrc", "prr", "aurc", "spearman", "accuracy", "n")
DELTA_HEADER = ("dataset", "estimator", "from", "to", "d_augrc", "d_prr", "d_aurc", "d_spearman", "d_accuracy")


def condition(row: dict) -> str:
    return row["mode"] if "variant" not in row else f"{row['mode']}+{row['variant']}"


def estimator_inputs(rows: Sequence[dict], name: str, parse_failures: str = "min"):
    """Confidences and correctness for one estimator over score rows.

    Records the estimator could not score because the output did not parse
    are counted wrong with a confidence below every other record, unless
    ``parse_failures == "exclude"``.  Records lacking inputs for other
    reasons are left out.  Returns ``(ids, conf, correct, n_failed, n_missing)``.
    """
    multi = name in est.MULTI_GENERATION
    ids, conf, corr = [], [], []
    n_failed = n_missing = 0
    for row in rows:
        scores = est.UqScoreSet.from_dict(row)
        c = scores.confidence(name)
        if c is None:
            if row.get("unavailable", {}).get(name) == "parse failure":
                n_failed += 1
                if parse_failures == "min":
                    ids.append(row["record_id"])
                    conf.append(None)
                    corr.append(0.0)
            else:
                n_missing += 1
            continue
        ids.append(row["record_id"])
        conf.append(c)
        corr.append(row["majority_correct"] if multi else row["correct"])
    finite = [c for c in conf if c is not None]
    floor = (min(finite) - 1.0) if finite else 0.0
    return ids, [floor if c is None else c for c in conf], corr, n_failed, n_missing


def _evaluate_group(rows, estimators, parse_failures):
    out = {}
    for name in estimators:
        ids, conf, corr, n_failed, n_missing = estimator_inputs(rows, name, parse_failures)
        if len(ids) <= (n_failed if parse_failures == "min" else 0):
            # nothing but parse-failure filler: the estimator was never computed here
            continue
        out[name] = metrics.evaluate(conf, corr, n_failed, n_missing)
    return out


def evaluate_stage(
    score_files: Sequence[str | os.PathLike],
    out_dir: str | os.PathLike,
    estimators: Sequence[str] = est.ESTIMATORS,
    parse_failures: str = "min",
) -> list[list[str]]:
    """Per-condition, per-dataset metric table; Δ table when two conditions are given."""
    if parse_failures not in ("min", "exclude"):
        raise ValueError("parse_failures must be 'min' or 'exclude'")
    by_cond: dict[str, list[dict]] = {}
    for path in score_files:
        for row in read_scores(path):
            by_cond.setdefault(condition(row), []).append(row)
    table = []
    results = {}
    for cond, rows in by_cond.items():
        rows = sorted(rows, key=lambda r: r["record_id"])
        datasets = sorted({r["dataset"] for r in rows})
        groups = [(d, [r for r in rows if r["dataset"] == d]) for d in datasets]
        if len(datasets) > 1:
            groups.append(("all", rows))
        for dataset, group in groups:
            for name, m in _evaluate_group(group, estimators, parse_failures).items():
                results[(cond, dataset, name)] = m
                table.append([dataset, cond, name, fmt(m.augrc), fmt(m.prr), fmt(m.aurc),
                              fmt(m.spearman), fmt(m.accuracy), fmt(m.n)])
    out = Path(out_dir)
    write_csv(out / "report.csv", REPORT_HEADER, table)
    (out / "report.txt").write_text(render_table(REPORT_HEADER, table), encoding="utf-8")
    conds = list(by_cond)
    if len(conds) == 2:
        a, b = conds
        delta = []
        for (cond, dataset, name), mb in results.items():
            if cond != b or (a, dataset, name) not in results:
                continue
            ma = results[(a, dataset, name)]
            diffs = [None if x is None or y is None else y - x
                     for x, y in ((ma.augrc, mb.augrc), (ma.prr, mb.prr), (ma.aurc, mb.aurc),
                                  (ma.spearman, mb.spearman), (ma.accuracy, mb.accuracy))]
            delta.append([dataset, name, a, b] + [fmt(v) for v in diffs])
        write_csv(out / "delta.csv", DELTA_HEADER, delta)
    return table


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


# -- intervene / rescore ------------------------------------------------------------

def _has_reasoning(r: GenerationRecord) -> bool:
    if not r.parse_ok:
        return False
    return bool(extract_tagged(r.raw_text).think_text)


def intervene_stage(
    run_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    seed: int = 0,
    client: InferenceClient | None = None,
) -> dict[str, dict[str, str]]:
    """Write answer-masked and random-masked rescoring requests, and rescore them online.

    Each variant gets its own directory holding the request file and a copy
    of the source records.  Records without a reasoning trace are carried
    over unchanged, so the variant covers the same inputs as its source.
    """
    run, out = Path(run_dir), Path(out_dir)
    records = sorted(read_records(run / RECORDS), key=lambda r: r.id)
    requests = {"masked": [], "random_masked": []}
    for r in records:
        if not _has_reasoning(r):
            continue
        trace = reasoning_trace(r)
        answer = predicted_answer_text(r)
        masked = mask_answer_mentions(trace, answer)
        requests["masked"].append(build_rescore_request(r, masked, "masked"))
        rand = mask_random_tokens(trace, masked.mask_count, derive_seed(seed, r.id, "random_mask"))
        requests["random_masked"].append(build_rescore_request(r, rand, "random_masked"))
    failures = {}
    for variant, reqs in requests.items():
        vdir = out / variant
        write_jsonl(vdir / REQUESTS, (q.to_dict() for q in reqs))
        write_records(vdir / BASE_RECORDS, records)
        if client is not None:
            failures[variant] = rescore_stage(vdir, client)
    return failures


def rescore_stage(variant_dir: str | os.PathLike, client: InferenceClient) -> dict[str, str]:
    """Score each request's answer under its masked context and write the variant records."""
    vdir = Path(variant_dir)
    base = sorted(read_records(vdir / BASE_RECORDS), key=lambda r: r.id)
    reqs = {obj["record_id"]: ScoringRequest.from_dict(obj) for _, obj in iter_jsonl(vdir / REQUESTS)}
    variants = {q.variant for q in reqs.values()}
    if len(variants) > 1:
        raise RecordValidationError("variant", f"mixed variants in one request file: {sorted(variants)}")
    variant = variants.pop() if variants else vdir.name
    by_id = {r.id: r for r in base}

    def work(q: ScoringRequest):
        scored = client.score_forced(q.context_text, q.forced_continuation, q.image_ref, q.prompt)
        return apply_rescore(by_id[q.record_id], scored, variant, q)

    got, failures = client.map_records(work, reqs.values(), key=lambda q: q.record_id)
    out = []
    for r in base:
        if r.id in got:
            out.append(got[r.id])
        elif r.id not in reqs:
            out.append(_carry_over(r, variant))
    write_records(vdir / RECORDS, out)
    write_json(vdir / FAILED, _failed_doc("rescore", failures))
    return failures


def _carry_over(r: GenerationRecord, variant: str) -> GenerationRecord:
    meta = dict(r.meta or {})
    meta["mask_count"] = 0
    return replace(r, variant=variant, meta=meta)


# -- analyze ------------------------------------------------------------------------

SHIFT_HEADER = ("base", "variant", "estimator", "group", "increased", "decreased", "unchanged", "n")
CORR_HEADER = ("analysis", "condition", "dataset", "estimator", "filter", "r", "n", "ci_low", "ci_high", "note")
K_HEADER = ("condition", "k", "estimator", "augrc", "prr", "n")
LENGTH_HEADER = ("condition", "model", "dataset", "mode", "n", "answer_mean", "answer_std",
                 "reasoning_mean", "reasoning_std")


class Run:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.records = sorted(read_records(self.path / RECORDS), key=lambda r: r.id)
        self.scores = {row["record_id"]: row for row in read_scores(self.path / SCORES)}
        self.sample_sets = {s.record_id: s for s in _load_optional(self.path / SAMPLES, read_sample_sets)}
        first = next(iter(self.scores.values()), None)
        self.condition = condition(first) if first else self.path.name

    def confidences(self, name: str) -> dict[str, float]:
        out = {}
        for rid, row in self.scores.items():
            c = est.UqScoreSet.from_dict(row).confidence(name)
            if c is not None:
                out[rid] = c
        return out

    def correctness(self) -> dict[str, float]:
        return {rid: float(row["correct"]) for rid, row in self.scores.items()}


def _shift_rows(base: Run, other: Run, tolerance: float) -> list[list[str]]:
    rows = []
    cb, co = base.correctness(), other.correctness()
    for name in SHIFT_ESTIMATORS:
        fb, fo = base.confidences(name), other.confidences(name)
        common = sorted(set(fb) & set(fo))
        if not common:
            continue
        cells = analysis.partition_shift({i: (cb[i], fb[i]) for i in common},
                                         {i: (co[i], fo[i]) for i in common}, tolerance)
        for g in analysis.GROUPS:
            c = cells[g]
            rows.append([base.condition, other.condition, name, g, fmt(c.increased), fmt(c.decreased),
                         fmt(c.unchanged), fmt(c.n)])
    return rows


def _corr_row(analysis_name, cond, dataset, name, filt, compute, k_controls):
    try:
        r, n = compute()
    except (metrics.MetricError, analysis.AnalysisError) as exc:
        return [analysis_name, cond, dataset, name, filt, UNDEFINED, UNDEFINED, UNDEFINED, UNDEFINED, str(exc)], None
    try:
        _, (lo, hi) = metrics.fisher_aggregate([(r, n, k_controls)])
    except metrics.MetricError as exc:
        return [analysis_name, cond, dataset, name, filt, fmt(r), fmt(n), UNDEFINED, UNDEFINED, str(exc)], (r, n)
    return [analysis_name, cond, dataset, name, filt, fmt(r), fmt(n), fmt(lo), fmt(hi), ""], (r, n)


def _correlation_rows(run: Run) -> list[list[str]]:
    rows = []
    if not any(r.reasoning_len > 0 for r in run.records):
        return rows
    datasets = sorted({r.dataset for r in run.records})
    correctness = run.correctness()
    specs = [
        ("answer_frequency", "all", 0,
         lambda recs, conf: analysis.frequency_confidence_correlation(recs, conf, "all")),
        ("answer_frequency", "incorrect_only", 0,
         lambda recs, conf: analysis.frequency_confidence_correlation(recs, conf, "incorrect_only")),
        ("reasoning_length", "partial_correctness", 1,
         lambda recs, conf: analysis.reasoning_length_correlation(recs, conf, correctness)),
    ]
    for name in CORRELATION_ESTIMATORS:
        conf = run.confidences(name)
        if not conf:
            continue
        for analysis_name, filt, k, fn in specs:
            pooled = []
            for d in datasets:
                recs = [r for r in run.records if r.dataset == d]
                row, got = _corr_row(analysis_name, run.condition, d, name, filt, lambda: fn(recs, conf), k)
                rows.append(row)
                if got is not None and abs(got[0]) < 1 and got[1] - 3 - k > 0:
                    pooled.append((got[0], got[1], k))
            if len(datasets) > 1:
                if pooled:
                    r, (lo, hi) = metrics.fisher_aggregate(pooled)
                    n = sum(p[1] for p in pooled)
                    rows.append([analysis_name, run.condition, "pooled", name, filt, fmt(r), fmt(n),
                                 fmt(lo), fmt(hi), f"{len(pooled)} datasets"])
                else:
                    rows.append([analysis_name, run.condition, "pooled", name, filt, UNDEFINED, UNDEFINED,
                                 UNDEFINED, UNDEFINED, "no defined per-dataset correlation"])
    return rows


def analyze_stage(
    run_dirs: Sequence[str | os.PathLike],
    out_dir: str | os.PathLike,
    ks: Sequence[int] = (1, 2, 5, 10),
    seed: int = 0,
    judge: JudgeConfig | None = None,
    tolerance: float = 0.0,
) -> None:
    """Confidence shifts, correlations with Fisher intervals, k ablation and length summary.

    The first run is the reference for confidence shifts; every other run is
    compared against it on the records they share.
    """
    runs = [Run(p) for p in run_dirs]
    seen = defaultdict(int)
    for run in runs:
        seen[run.condition] += 1
    for run in runs:
        if seen[run.condition] > 1:
            run.condition = f"{run.condition}@{run.path.name}"
    out = Path(out_dir)

    shift = []
    for other in runs[1:]:
        shift += _shift_rows(runs[0], other, tolerance)
    write_csv(out / "shift.csv", SHIFT_HEADER, shift)

    corr = []
    for run in runs:
        corr += _correlation_rows(run)
    write_csv(out / "correlations.csv", CORR_HEADER, corr)

    k_rows = []
    for run in runs:
        if not run.sample_sets:
            continue
        kmax = min(len(s.samples) for s in run.sample_sets.values())
        usable = [k for k in ks if k <= kmax]
        for row in analysis.k_ablation(run.records, run.sample_sets, usable, seed, judge):
            k_rows.append([run.condition, fmt(row["k"]), row["estimator"], fmt(row["augrc"]),
                           fmt(row["prr"]), fmt(row["n"])])
    write_csv(out / "k_ablation.csv", K_HEADER, k_rows)

    lengths = []
    for run in runs:
        for row in analysis.length_summary(run.records):
            lengths.append([run.condition, row["model"], row["dataset"], row["mode"], fmt(row["n"]),
                            fmt(row["answer_mean"]), fmt(row["answer_std"]),
                            fmt(row["reasoning_mean"]), fmt(row["reasoning_std"])])
    write_csv(out / "lengths.csv", LENGTH_HEADER, lengths)


# -- sequential ---------------------------------------------------------------------

def sequential_stage(
    run_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    client: InferenceClient,
    rounds: int,
    seed: int = 0,
) -> dict[str, str]:
    records = [r for r in sorted(read_records(Path(run_dir) / RECORDS), key=lambda r: r.id) if r.parse_ok]
    got, failures = client.map_records(lambda r: client.run_sequential_rounds(r, rounds, seed), records)
    rows, summary = [], []
    for rid in sorted(got):
        res = got[rid]
        rows += [[rid, fmt(i + 1), fmt(v)] for i, v in enumerate(res.values)]
        summary.append([rid, fmt(res.completed), fmt(res.requested), res.stopped or ""])
    out = Path(out_dir)
    write_csv(out / "sequential.csv", ("record_id", "round", "answer_logprob"), rows)
    write_csv(out / "sequential_summary.csv", ("record_id", "completed", "requested", "stopped"), summary)
    write_json(out / FAILED, _failed_doc("sequential", failures))
    return failures
