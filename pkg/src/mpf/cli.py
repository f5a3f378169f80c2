"""Command-line entry point: ``mpf <subcommand> --config manifest.json``.

Exit codes: 0 success, 1 validation error, 2 stage failure, 3 oracle violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import ValidationError, validate_benchmark
from .pipeline import (
    OracleViolation,
    ScoreTable,
    StageError,
    benchmark_to_dict,
    check_oracle,
    load_manifest,
    load_records,
    load_weights,
    prepare,
    run_pipeline,
    run_sweep,
    save_weights,
    stage_decompose,
    stage_evaluate,
    stage_generate,
    write_json,
)

log = logging.getLogger("mpf")


def _manifest(args):
    return load_manifest(args.config, seed=args.seed, out=args.out, backend=args.backend)


def cmd_run(args) -> int:
    art = run_pipeline(_manifest(args))
    print(f"report written to {art.report}")
    return 0


def cmd_decompose(args) -> int:
    m = _manifest(args)
    prep = prepare(m)
    results = stage_decompose(prep, m.hyperparams)
    path = save_weights(m.output_dir / "weights.json", results, prep.benchmark.perspective_names, m.hyperparams)
    if m.aggregated_hyperparams is not None:
        agg = stage_decompose(prep, m.aggregated_hyperparams)
        save_weights(m.output_dir / "weights_aggregated.json", agg, prep.benchmark.perspective_names,
                     m.aggregated_hyperparams)
    for concept, r in results.items():
        weights = " ".join(f"{v:.3f}" for v in r.weights.tolist())
        print(f"{concept}\t{weights}\tobjective={r.objective_value:.6g}")
    if args.oracle_check:
        rows = check_oracle(prep.benchmark, prep.scored, m.hyperparams, results)
        write_json({"schema_version": 1, "kind": "oracle_check", "rows": rows}, m.output_dir / "oracle_check.json")
        print(f"oracle check passed for {len(rows)} concepts")
    print(f"weights written to {path}")
    return 0


def cmd_generate(args) -> int:
    m = _manifest(args)
    prep = prepare(m)
    _, _, results = load_weights(args.weights or m.output_dir / "weights.json")
    agg_path = m.output_dir / "weights_aggregated.json"
    agg = load_weights(agg_path)[2] if agg_path.is_file() else None
    suite = stage_generate(m, prep, results, agg, m.output_dir / "records.json")
    print(f"{len(suite.records)} records written to {m.output_dir / 'records.json'}")
    return 0


def cmd_score(args) -> int:
    m = _manifest(args)
    prep = prepare(m)
    records = m.output_dir / "records.json"
    if records.is_file():
        stage_evaluate(m, prep, load_records(records), m.output_dir / "scores.json", m.output_dir / "report.json")
    else:
        table = ScoreTable(
            baseline=prep.scored.baseline,
            perspective=prep.scored.perspective,
            splits={q.id: q.split for q in prep.benchmark.questions},
        )
        write_json(table.to_dict(), m.output_dir / "scores.json")
    print(f"scores written to {m.output_dir / 'scores.json'}")
    return 0


def cmd_evaluate(args) -> int:
    m = _manifest(args)
    prep = prepare(m)
    suite = load_records(args.records or m.output_dir / "records.json")
    _, evaluated = stage_evaluate(m, prep, suite, m.output_dir / "scores.json", m.output_dir / "report.json")
    print(f"{'split':<14}{'system':<16}{'KL':>10}{'calib':>10}")
    for c in evaluated.report.cells:
        print(f"{c.split:<14}{c.system:<16}{c.kl_divergence:>10.4f}{c.calibration_error:>10.4f}")
    return 0


def cmd_sweep(args) -> int:
    rows, path = run_sweep(_manifest(args))
    print(f"{len(rows)} grid cells written to {path}")
    return 0


def cmd_expand(args) -> int:
    if args.benchmark:
        source = Path(args.benchmark)
    elif args.config:
        source = _manifest(args).benchmark
    else:
        raise ValidationError("expand needs --benchmark or --config")
    raw = json.loads(source.read_text("utf-8"))
    benchmark = validate_benchmark(raw)
    target = Path(args.output) if args.output else Path(args.out or ".") / "benchmark_expanded.json"
    write_json(benchmark_to_dict(benchmark), target)
    print(f"{len(benchmark.questions)} questions written to {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run manifest (JSON)")
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed; overrides the manifest")
        p.add_argument("--out", default=None, help="output directory; overrides the manifest")
        p.add_argument("--backend", choices=("mock", "http"), default=None)
        return p

    p = common(sub.add_parser("run", help="decompose, generate, score and evaluate"))
    p.set_defaults(func=cmd_run)
    p = common(sub.add_parser("decompose", help="fit perspective weights per concept"))
    p.add_argument("--oracle-check", action="store_true", help="verify against exhaustive lattice search")
    p.set_defaults(func=cmd_decompose)
    p = common(sub.add_parser("generate", help="generate records from fitted weights"))
    p.add_argument("--weights", default=None)
    p.set_defaults(func=cmd_generate)
    p = common(sub.add_parser("score", help="score benchmark responses (and records, if present)"))
    p.set_defaults(func=cmd_score)
    p = common(sub.add_parser("evaluate", help="KL and calibration report for generated records"))
    p.add_argument("--records", default=None)
    p.set_defaults(func=cmd_evaluate)
    p = common(sub.add_parser("sweep", help="decompose over a hyperparameter grid"))
    p.set_defaults(func=cmd_sweep)
    p = common(sub.add_parser("expand", help="expand counterfactual templates into questions"), config_required=False)
    p.add_argument("--benchmark", default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_expand)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except OracleViolation as exc:
        print(f"oracle violation: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
