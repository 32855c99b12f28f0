"""Command line entry point: ``reasonuq <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 backend failure, 3 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import estimators as est
from . import pipeline
from .client import BackendConfig, BackendError, InferenceClient, StubBackend, StubServer, load_preset
from .parsing import JUDGE_KINDS, JudgeConfig, JudgeConfigError, ParseFailure
from .records import MODES, RecordError

EXIT_OK, EXIT_USAGE, EXIT_BACKEND, EXIT_VALIDATION = 0, 1, 2, 3
ONLINE_COMMANDS = ("generate", "rescore", "src-probe", "sequential")
DEFAULT_PRESET = "Qwen3-VL-8B-Instruct"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _estimators(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    unknown = [n for n in names if n not in est.ESTIMATORS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown estimators {unknown}; choose from {', '.join(est.ESTIMATORS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--judge", choices=JUDGE_KINDS, default="open_ended_exact")
    common.add_argument("--offline", action="store_true", help="never contact a backend")
    common.add_argument("-v", "--verbose", action="store_true")

    backend = _Parser(add_help=False)
    backend.add_argument("--backend-url", help="http(s) URL of the backend, or stub:<world.json>")
    backend.add_argument("--preset", default=DEFAULT_PRESET, help="decoding preset (model name)")
    backend.add_argument("--model", help="model name sent to the backend (defaults to the preset name)")
    backend.add_argument("--auth-env", default="REASONUQ_API_KEY", help="env var holding the bearer token")
    backend.add_argument("--timeout", type=float, default=600.0)
    backend.add_argument("--max-in-flight", type=int, default=8)
    backend.add_argument("--retries", type=int, default=3)
    backend.add_argument("--temperature", type=float)
    backend.add_argument("--max-tokens", type=int)

    p = _Parser(prog="reasonuq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common, backend], help="sample answers, K samples and SRC probes")
    g.add_argument("--input", required=True, help="question file (JSON lines)")
    g.add_argument("--output", required=True, help="run directory")
    g.add_argument("--mode", choices=MODES, required=True)
    g.add_argument("--k", type=_int_list, default=[10], help="samples per input")
    g.add_argument("--no-src", action="store_true", help="skip self-report probes")

    s = sub.add_parser("score", parents=[common], help="compute estimator values for a run")
    s.add_argument("--input", required=True, help="run directory")
    s.add_argument("--output", help="directory for scores.jsonl (defaults to the run directory)")
    s.add_argument("--estimators", type=_estimators, default=list(est.ESTIMATORS))

    e = sub.add_parser("evaluate", parents=[common], help="metric report for one or two runs")
    e.add_argument("--input", required=True, nargs="+", help="run directories or score files")
    e.add_argument("--output", required=True, help="report directory")
    e.add_argument("--estimators", type=_estimators, default=list(est.ESTIMATORS))
    e.add_argument("--parse-failures", choices=("min", "exclude"), default="min")

    i = sub.add_parser("intervene", parents=[common, backend], help="masked and random-masked rescoring")
    i.add_argument("--input", required=True, help="run directory with reasoning traces")
    i.add_argument("--output", required=True, help="directory for the variant runs")

    r = sub.add_parser("rescore", parents=[common, backend], help="complete rescoring requests")
    r.add_argument("--input", required=True, help="variant directory written by intervene --offline")

    a = sub.add_parser("analyze", parents=[common], help="shifts, correlations, k ablation, lengths")
    a.add_argument("--input", required=True, nargs="+", help="run directories; the first is the reference")
    a.add_argument("--output", required=True)
    a.add_argument("--k", type=_int_list, default=[1, 2, 5, 10])
    a.add_argument("--tolerance", type=float, default=0.0)

    sp = sub.add_parser("src-probe", parents=[common, backend], help="self-report probes for a run")
    sp.add_argument("--input", required=True, help="run directory")

    sq = sub.add_parser("sequential", parents=[common, backend], help="repeated answering rounds")
    sq.add_argument("--input", required=True, help="run directory")
    sq.add_argument("--output", required=True)
    sq.add_argument("--rounds", type=int, default=5)

    ss = sub.add_parser("serve-stub", help="serve the stub backend over HTTP")
    ss.add_argument("--world", required=True)
    ss.add_argument("--host", default="127.0.0.1")
    ss.add_argument("--port", type=int, default=8000)
    return p


def _client(args, require_score: bool) -> InferenceClient:
    if not args.backend_url:
        raise UsageError(f"{args.command} needs --backend-url")
    overrides = {k: v for k, v in (("temperature", args.temperature), ("max_tokens", args.max_tokens)) if v is not None}
    try:
        preset = load_preset(args.preset, **overrides)
        config = BackendConfig(args.backend_url, args.auth_env, args.timeout, args.max_in_flight, args.retries)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return InferenceClient.connect(config, args.model or args.preset, preset, require_score=require_score)


def _score_files(inputs) -> list[Path]:
    out = []
    for p in map(Path, inputs):
        out.append(p / pipeline.SCORES if p.is_dir() else p)
    return out


def _report_failures(failures: dict) -> None:
    if failures:
        print(f"{len(failures)} records failed; see failed.json", file=sys.stderr)


def run(args) -> int:
    judge = JudgeConfig(kind=args.judge) if hasattr(args, "judge") else JudgeConfig()
    cmd = args.command
    if getattr(args, "offline", False) and cmd in ONLINE_COMMANDS:
        raise UsageError(f"{cmd} needs a backend and cannot run with --offline")

    if cmd == "generate":
        if len(args.k) != 1:
            raise UsageError("generate takes a single --k")
        questions = pipeline.read_questions(args.input)
        client = _client(args, require_score=not args.no_src)
        _report_failures(pipeline.generate_stage(questions, client, args.mode, args.output, args.k[0],
                                                 args.seed, judge, src=not args.no_src))
    elif cmd == "score":
        pipeline.score_stage(args.input, args.estimators, judge, args.output)
    elif cmd == "evaluate":
        pipeline.evaluate_stage(_score_files(args.input), args.output, args.estimators, args.parse_failures)
    elif cmd == "intervene":
        client = None if args.offline else _client(args, require_score=True)
        failures = pipeline.intervene_stage(args.input, args.output, args.seed, client)
        _report_failures({k: v for f in failures.values() for k, v in f.items()})
    elif cmd == "rescore":
        _report_failures(pipeline.rescore_stage(args.input, _client(args, require_score=True)))
    elif cmd == "analyze":
        pipeline.analyze_stage(args.input, args.output, args.k, args.seed, judge, args.tolerance)
    elif cmd == "src-probe":
        _report_failures(pipeline.src_probe_stage(args.input, _client(args, require_score=True), args.seed))
    elif cmd == "sequential":
        if args.rounds < 1:
            raise UsageError("--rounds must be ≥ 1")
        _report_failures(pipeline.sequential_stage(args.input, args.output, _client(args, False),
                                                   args.rounds, args.seed))
    elif cmd == "serve-stub":
        server = StubServer(StubBackend.from_file(args.world), args.host, args.port)
        print(f"stub backend listening on {server.url}", flush=True)
        try:
            server.httpd.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.httpd.server_close()
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except UsageError as exc:
        print(f"reasonuq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, pipeline.TotalFailure) as exc:
        print(f"reasonuq: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (RecordError, ParseFailure, JudgeConfigError) as exc:
        print(f"reasonuq: validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"reasonuq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
