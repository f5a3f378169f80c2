"""File formats, counterfactual expansion, evaluation and the end-to-end run.

Artifacts are JSON with sorted keys, two-space indentation and a
``schema_version`` field. Floats are written in their shortest round-trip
form, so reruns are byte-identical and ``load(save(x)) == x``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import platform
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .core import (
    DEFAULT_PLACEHOLDER,
    MODES,
    SPLITS,
    Benchmark,
    DecompositionResult,
    EvaluationReport,
    GenerationRecord,
    HyperParams,
    MetricCell,
    ObjectiveBreakdown,
    Question,
    ValidationError,
    Weights,
    validate_benchmark,
)
from .generation import (
    AggregationPrompt,
    Backend,
    BackendConfig,
    BackendError,
    SuiteResult,
    generate_suite,
    make_backend,
)
from .metrics import kl_from_masses
from .mitigator import SweepGrid, decompose_benchmark, grid_search_oracle, sweep, write_sweep_table
from .scoring import ScorerConfig, ScoredBenchmark, Scorer, build_histogram, make_scorer, score_benchmark

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ORACLE_TOLERANCE = 1e-3
ORACLE_STEPS = (0.01, 0.02, 0.05, 0.1)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, exit_code: int = 2):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = exit_code


class OracleViolation(RuntimeError):
    pass


# -- counterfactual expansion -------------------------------------------------

def expand_counterfactual(
    templates: Iterable[Mapping[str, str]],
    concepts: Sequence[str],
    placeholder: str = DEFAULT_PLACEHOLDER,
) -> list[Question]:
    """Instantiate every template once per concept.

    Templates are mappings with ``id``, ``text`` and optionally ``split``
    (default ``decomposition``). The resulting id is ``<template id>::<concept>``.
    """
    if not concepts:
        raise ValidationError("need at least one concept to expand templates")
    out: list[Question] = []
    seen: set[str] = set()
    for t in templates:
        text = t["text"]
        if placeholder not in text:
            raise ValidationError(f"template {t['id']!r} does not contain placeholder {placeholder!r}")
        for concept in concepts:
            qid = f"{t['id']}::{concept}"
            if qid in seen:
                raise ValidationError(f"duplicate id {qid!r}")
            seen.add(qid)
            out.append(Question(qid, concept, text.replace(placeholder, concept), t.get("split", "decomposition")))
    return out


# -- JSON helpers -------------------------------------------------------------

def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(obj: Any, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def read_json(path, kind: str | None = None) -> dict:
    raw = json.loads(Path(path).read_text("utf-8"))
    if kind is not None and raw.get("kind") != kind:
        raise ValidationError(f"{path}: expected a {kind!r} file, found {raw.get('kind')!r}")
    if kind is not None and raw.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"{path}: unsupported schema_version {raw.get('schema_version')!r}")
    return raw


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# -- benchmark files ----------------------------------------------------------

def load_benchmark(path) -> Benchmark:
    return validate_benchmark(read_json(path))


def benchmark_to_dict(b: Benchmark) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "benchmark",
        "score_range": list(b.score_range),
        "perspectives": [{"name": p.name, "system_prompt": p.system_prompt} for p in b.perspectives],
        "concepts": list(b.concepts),
        "questions": [{"id": q.id, "concept": q.concept, "text": q.text, "split": q.split} for q in b.questions],
        "baseline_responses": dict(b.baseline_responses),
        "perspective_responses": {k: dict(v) for k, v in b.perspective_responses.items()},
    }


# -- weights files ------------------------------------------------------------

def weights_to_dict(results: Mapping[str, DecompositionResult], perspective_names: Sequence[str], hp: HyperParams) -> dict:
    concepts = {}
    for concept, r in results.items():
        b = r.breakdown
        concepts[concept] = {
            "weights": r.weights.tolist(),
            "objective": r.objective_value,
            "breakdown": {"kl": b.kl, "calibration": b.calibration, "l2": b.l2, "sparsity": b.sparsity, "total": b.total},
            "converged": r.converged,
            "iterations_used": r.iterations_used,
            "restart_index": r.restart_index,
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "weights",
        "perspectives": list(perspective_names),
        "hyperparams": hp.to_dict(),
        "concepts": concepts,
    }


def weights_from_dict(raw: Mapping) -> tuple[list[str], HyperParams, dict[str, DecompositionResult]]:
    results = {}
    for concept, c in raw["concepts"].items():
        results[concept] = DecompositionResult(
            concept=concept,
            weights=Weights(c["weights"]),
            objective_value=c["objective"],
            breakdown=ObjectiveBreakdown(**c["breakdown"]),
            converged=c["converged"],
            iterations_used=c["iterations_used"],
            restart_index=c["restart_index"],
        )
    return list(raw["perspectives"]), HyperParams.from_dict(raw["hyperparams"]), results


def save_weights(path, results, perspective_names, hp) -> Path:
    return write_json(weights_to_dict(results, perspective_names, hp), path)


def load_weights(path):
    return weights_from_dict(read_json(path, "weights"))


# -- records files ------------------------------------------------------------

def save_records(path, suite: SuiteResult) -> Path:
    return write_json({
        "schema_version": SCHEMA_VERSION,
        "kind": "records",
        "records": [r.to_dict() for r in suite.records],
        "failures": list(suite.failures),
    }, path)


def load_records(path) -> SuiteResult:
    raw = read_json(path, "records")
    return SuiteResult(
        records=[GenerationRecord.from_dict(r) for r in raw["records"]],
        failures=list(raw["failures"]),
    )


# -- scores files -------------------------------------------------------------

@dataclass
class ScoreTable:
    """Scores of benchmark responses and of generated records, with split tags."""

    baseline: dict[str, float] = field(default_factory=dict)
    perspective: dict[str, dict[str, float]] = field(default_factory=dict)
    systems: dict[str, dict[str, float]] = field(default_factory=dict)
    splits: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "scores",
            "baseline": self.baseline,
            "perspective": self.perspective,
            "systems": self.systems,
            "splits": self.splits,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ScoreTable":
        return cls(
            baseline=dict(raw["baseline"]),
            perspective={k: dict(v) for k, v in raw["perspective"].items()},
            systems={k: dict(v) for k, v in raw["systems"].items()},
            splits=dict(raw["splits"]),
        )

    def __eq__(self, other):
        return isinstance(other, ScoreTable) and self.to_dict() == other.to_dict()


def score_records(records: Sequence[GenerationRecord], scorer: Scorer) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for r in records:
        out.setdefault(r.system, {})[r.question_id] = scorer.score(r.final_text)
    return out


def system_order(perspective_names: Sequence[str], present: Iterable[str]) -> list[str]:
    present = set(present)
    order = list(perspective_names) + ["normal", "mpf_sampled", "mpf_aggregated"]
    return [s for s in order if s in present] + sorted(present - set(order))


# -- evaluation ---------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationOutput:
    report: EvaluationReport
    histograms: dict
    bin_edges: list[float]


def evaluate(
    system_scores: Mapping[str, Mapping[str, float]],
    baseline: Mapping[str, float],
    questions: Sequence[Question],
    config: ScorerConfig,
    systems: Sequence[str] | None = None,
    splits: Sequence[str] | None = None,
    smoothing_epsilon: float = 1e-9,
) -> EvaluationOutput:
    """KL(system || baseline) and mean absolute score gap for every (split, system).

    Headline numbers average per-concept values uniformly; pooled variants
    compute each metric once over all questions of the split.
    """
    systems = list(systems or system_order([], system_scores))
    if splits is None:
        splits = [s for s in SPLITS if any(q.split == s for q in questions)]
    cells = []
    histograms: dict[str, dict[str, list[float]]] = {}
    for split in splits:
        qs = [q for q in questions if q.split == split]
        if not qs:
            raise ValidationError(f"split {split!r} has no questions")
        missing = [q.id for q in qs if q.id not in baseline]
        if missing:
            raise ValidationError(f"missing baseline scores for {missing[:5]}")
        concepts = sorted({q.concept for q in qs})
        by_concept = {c: [q.id for q in qs if q.concept == c] for c in concepts}
        all_ids = [q.id for q in qs]
        base_all = np.array([baseline[i] for i in all_ids])
        histograms[split] = {"baseline": build_histogram(base_all, config).masses.tolist()}
        for system in systems:
            scores = system_scores.get(system, {})
            lacking = [i for i in all_ids if i not in scores]
            if lacking:
                raise ValidationError(f"missing scores for system {system!r} on {lacking[:5]}")
            kls, cals = [], []
            for c in concepts:
                s = np.array([scores[i] for i in by_concept[c]])
                b = np.array([baseline[i] for i in by_concept[c]])
                kls.append(_kl(s, b, config, smoothing_epsilon))
                cals.append(float(np.mean(np.abs(s - b))))
            s_all = np.array([scores[i] for i in all_ids])
            pooled_hist = build_histogram(s_all, config)
            histograms[split][system] = pooled_hist.masses.tolist()
            cells.append(MetricCell(
                split=split,
                system=system,
                kl_divergence=max(0.0, float(np.mean(kls))),
                calibration_error=float(np.mean(cals)),
                kl_pooled=max(0.0, _kl(s_all, base_all, config, smoothing_epsilon)),
                calibration_pooled=float(np.mean(np.abs(s_all - base_all))),
                n_questions=len(all_ids),
            ))
    return EvaluationOutput(EvaluationReport(tuple(cells)), histograms, config.bin_edges.tolist())


def _kl(system: np.ndarray, baseline: np.ndarray, config: ScorerConfig, eps: float) -> float:
    p = build_histogram(system, config).masses
    q = build_histogram(baseline, config).masses
    return float(kl_from_masses(p, q, eps))


def report_to_dict(out: EvaluationOutput, seed: int, config_sha256: str) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "report",
        "seed": seed,
        "config_sha256": config_sha256,
        "aggregation_mode": out.report.aggregation_mode,
        "cells": [
            {
                "split": c.split,
                "system": c.system,
                "kl_divergence": c.kl_divergence,
                "calibration_error": c.calibration_error,
                "kl_pooled": c.kl_pooled,
                "calibration_pooled": c.calibration_pooled,
                "n_questions": c.n_questions,
            }
            for c in out.report.cells
        ],
        "bin_edges": out.bin_edges,
        "histograms": out.histograms,
    }


def report_from_dict(raw: Mapping) -> EvaluationOutput:
    cells = tuple(MetricCell(**c) for c in raw["cells"])
    return EvaluationOutput(
        EvaluationReport(cells, raw["aggregation_mode"]), dict(raw["histograms"]), list(raw["bin_edges"])
    )


# -- manifest -----------------------------------------------------------------

@dataclass(frozen=True)
class RunManifest:
    benchmark: Path
    hyperparams: HyperParams
    scorer: ScorerConfig
    backend: BackendConfig
    rng_seed: int
    output_dir: Path
    aggregated_hyperparams: HyperParams | None = None
    modes: tuple[str, ...] = MODES
    k: int = 3
    normal_system_prompt: str = ""
    aggregation_template: Path | None = None
    sweep_grid: SweepGrid = field(default_factory=SweepGrid)
    source_sha256: str = ""

    def to_dict(self) -> dict:
        return {
            "benchmark": self.benchmark.name,
            "hyperparams": self.hyperparams.to_dict(),
            "aggregated_hyperparams": self.aggregated_hyperparams.to_dict() if self.aggregated_hyperparams else None,
            "scorer": self.scorer.to_dict(),
            "backend": {**self.backend.to_dict(), "fixture": Path(self.backend.fixture).name if self.backend.fixture else None},
            "rng_seed": self.rng_seed,
            "modes": list(self.modes),
            "k": self.k,
            "normal_system_prompt": self.normal_system_prompt,
        }


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load_hp(base: Path, value, seed: int) -> HyperParams:
    if isinstance(value, str):
        value = read_json(_resolve(base, value))
    return HyperParams.from_dict({**value, "rng_seed": seed})


def load_manifest(path, seed: int | None = None, out: str | None = None, backend: str | None = None) -> RunManifest:
    """Read a run manifest; command-line overrides take precedence over file values."""
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise StageError("load", f"cannot read manifest: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from exc
    if "benchmark" not in raw:
        raise ValidationError(f"manifest {path} names no benchmark file")
    base = path.parent
    rng_seed = int(seed if seed is not None else raw.get("rng_seed", 0))
    backend_raw = dict(raw.get("backend", {"kind": "mock"}))
    if backend:
        backend_raw["kind"] = backend
    if backend_raw.get("fixture"):
        backend_raw["fixture"] = str(_resolve(base, backend_raw["fixture"]))
    scorer_raw = dict(raw.get("scorer", {}))
    if scorer_raw.get("lexicon_path"):
        scorer_raw["lexicon_path"] = str(_resolve(base, scorer_raw["lexicon_path"]))
    grid_raw = raw.get("sweep")
    grid = SweepGrid(
        alphas=tuple(grid_raw["alphas"]),
        betas=tuple(grid_raw["betas"]),
        lambda_pairs=tuple(tuple(p) for p in grid_raw["lambda_pairs"]),
    ) if grid_raw else SweepGrid()
    agg = raw.get("aggregated_hyperparams")
    return RunManifest(
        benchmark=_resolve(base, raw["benchmark"]),
        hyperparams=_load_hp(base, raw.get("hyperparams", {}), rng_seed),
        aggregated_hyperparams=_load_hp(base, agg, rng_seed) if agg else None,
        scorer=ScorerConfig.from_dict(scorer_raw),
        backend=BackendConfig.from_dict(backend_raw),
        rng_seed=rng_seed,
        output_dir=Path(out) if out else _resolve(base, raw.get("output_dir", "out")),
        modes=tuple(raw.get("modes", MODES)),
        k=int(raw.get("k", 3)),
        normal_system_prompt=raw.get("normal_system_prompt", ""),
        aggregation_template=_resolve(base, raw["aggregation_template"]) if raw.get("aggregation_template") else None,
        sweep_grid=grid,
        source_sha256=sha256_text(text),
    )


# -- stages -------------------------------------------------------------------

@contextmanager
def _stage(name: str):
    """Tag any failure inside the block with the stage ``name``."""
    log.info("stage %s", name)
    try:
        yield
    except (StageError, OracleViolation):
        raise
    except Exception as exc:
        code = 1 if isinstance(exc, ValidationError) else 2
        raise StageError(name, f"{type(exc).__name__}: {exc}", code) from exc


def fill_perspective_responses(benchmark: Benchmark, backend: Backend) -> Benchmark:
    """Ask the backend for any perspective response the benchmark file lacks."""
    filled = {name: dict(benchmark.perspective_responses.get(name, {})) for name in benchmark.perspective_names}
    for p in benchmark.perspectives:
        for q in benchmark.questions:
            if q.id not in filled[p.name]:
                filled[p.name][q.id] = backend.complete(p.system_prompt, q.text)
    return replace(benchmark, perspective_responses={k: dict(sorted(v.items())) for k, v in filled.items()})


def build_backend(manifest: RunManifest, benchmark: Benchmark) -> Backend:
    kwargs = {}
    if manifest.backend.kind == "mock":
        kwargs = {"aggregation": aggregation_prompt(manifest), "normal_system_prompt": manifest.normal_system_prompt}
    return make_backend(manifest.backend, benchmark, **kwargs)


def aggregation_prompt(manifest: RunManifest) -> AggregationPrompt:
    if manifest.aggregation_template:
        return AggregationPrompt.from_file(manifest.aggregation_template)
    return AggregationPrompt.default()


def check_oracle(benchmark: Benchmark, scored: ScoredBenchmark, hp: HyperParams, results) -> list[dict]:
    """Compare every fitted objective to the finest feasible lattice search."""
    rows = []
    for concept, r in results.items():
        cd = scored.concepts[concept]
        for step in ORACLE_STEPS:
            try:
                w, value = grid_search_oracle(cd.components, cd.target, cd.scores, hp, step)
                break
            except ValidationError:
                continue
        else:
            raise ValidationError(f"no oracle lattice small enough for n={len(cd.components)}")
        ok = r.objective_value <= value + ORACLE_TOLERANCE
        rows.append({"concept": concept, "step": step, "oracle": value, "optimize": r.objective_value, "ok": ok})
        if not ok:
            raise OracleViolation(
                f"{concept}: optimize objective {r.objective_value:.6g} exceeds oracle {value:.6g} (step {step})"
            )
    return rows


def versions() -> dict:
    import scipy

    return {
        "mpf": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


@dataclass
class Prepared:
    benchmark: Benchmark
    benchmark_text: str
    backend: Backend
    scorer: Scorer
    scored: ScoredBenchmark


def prepare(manifest: RunManifest) -> Prepared:
    """Load and validate the benchmark, fill missing perspective responses, score everything."""
    with _stage("load"):
        if not manifest.benchmark.is_file():
            raise FileNotFoundError(f"benchmark file not found: {manifest.benchmark}")
        text = manifest.benchmark.read_text("utf-8")
        benchmark = validate_benchmark(json.loads(text))
        backend = build_backend(manifest, benchmark)
        scorer = make_scorer(manifest.scorer)
    with _stage("score"):
        benchmark = fill_perspective_responses(benchmark, backend)
        scored = score_benchmark(benchmark, manifest.scorer, scorer)
    return Prepared(benchmark, text, backend, scorer, scored)


@dataclass
class PipelineArtifacts:
    weights: Path
    records: Path
    scores: Path
    report: Path
    repro: Path
    weights_aggregated: Path | None = None


def stage_decompose(prep: Prepared, hp: HyperParams) -> dict[str, DecompositionResult]:
    with _stage("decompose"):
        return decompose_benchmark(prep.benchmark, prep.scored.concepts, hp)


def stage_generate(
    manifest: RunManifest,
    prep: Prepared,
    weights: Mapping[str, DecompositionResult],
    aggregated: Mapping[str, DecompositionResult] | None,
    path,
) -> SuiteResult:
    """Generate every requested mode and save the records, failures included."""
    with _stage("generate"):
        aggregated = aggregated or weights
        suite = generate_suite(
            prep.benchmark,
            {c: r.weights for c, r in weights.items()},
            prep.backend,
            modes=manifest.modes,
            rng_seed=manifest.rng_seed,
            k=manifest.k,
            aggregated_weights={c: r.weights for c, r in aggregated.items()},
            aggregation=aggregation_prompt(manifest),
            normal_system_prompt=manifest.normal_system_prompt,
            workers=manifest.backend.max_concurrent if manifest.backend.kind == "http" else 1,
        )
        save_records(path, suite)
        if suite.failures:
            raise BackendError(f"{len(suite.failures)} generation calls failed; see {path}")
    return suite


def stage_evaluate(manifest: RunManifest, prep: Prepared, suite: SuiteResult, scores_path, report_path):
    """Score the records, then write the scores file and the report."""
    with _stage("score"):
        table = ScoreTable(
            baseline=prep.scored.baseline,
            perspective=prep.scored.perspective,
            systems=score_records(suite.records, prep.scorer),
            splits={q.id: q.split for q in prep.benchmark.questions},
        )
        write_json(table.to_dict(), scores_path)
    with _stage("evaluate"):
        for r in suite.records:
            if table.splits.get(r.question_id) != r.split:
                raise ValidationError(f"record {r.question_id!r} carries split {r.split!r}, benchmark disagrees")
        evaluated = evaluate(
            table.systems, table.baseline, prep.benchmark.questions, manifest.scorer,
            systems=system_order(prep.benchmark.perspective_names, table.systems),
            smoothing_epsilon=manifest.hyperparams.smoothing_epsilon,
        )
        write_json(report_to_dict(evaluated, manifest.rng_seed, config_sha256(manifest)), report_path)
    return table, evaluated


def config_sha256(manifest: RunManifest) -> str:
    return sha256_text(dumps(manifest.to_dict()))


def run_pipeline(manifest: RunManifest) -> PipelineArtifacts:
    """Fit weights, generate, score and evaluate; writes every artifact under ``output_dir``.

    Artifacts of completed stages stay on disk when a later stage fails.
    """
    out = manifest.output_dir
    prep = prepare(manifest)
    out.mkdir(parents=True, exist_ok=True)
    names = prep.benchmark.perspective_names
    art = PipelineArtifacts(
        weights=out / "weights.json", records=out / "records.json", scores=out / "scores.json",
        report=out / "report.json", repro=out / "repro.json",
    )

    hp = manifest.hyperparams
    results = stage_decompose(prep, hp)
    save_weights(art.weights, results, names, hp)
    agg_results = None
    if manifest.aggregated_hyperparams is not None:
        agg_results = stage_decompose(prep, manifest.aggregated_hyperparams)
        art.weights_aggregated = save_weights(
            out / "weights_aggregated.json", agg_results, names, manifest.aggregated_hyperparams
        )

    suite = stage_generate(manifest, prep, results, agg_results, art.records)
    stage_evaluate(manifest, prep, suite, art.scores, art.report)

    write_json({
        "schema_version": SCHEMA_VERSION,
        "kind": "repro",
        "seed": manifest.rng_seed,
        "config_sha256": config_sha256(manifest),
        "manifest_sha256": manifest.source_sha256,
        "benchmark_sha256": sha256_text(prep.benchmark_text),
        "hyperparams": hp.to_dict(),
        "aggregated_hyperparams": manifest.aggregated_hyperparams.to_dict() if manifest.aggregated_hyperparams else None,
        "versions": versions(),
    }, art.repro)
    return art


def run_sweep(manifest: RunManifest, path=None):
    prep = prepare(manifest)
    with _stage("sweep"):
        rows = sweep(prep.benchmark, prep.scored.concepts, manifest.sweep_grid, manifest.hyperparams)
        target = Path(path or manifest.output_dir / "sweep.tsv")
        target.parent.mkdir(parents=True, exist_ok=True)
        write_sweep_table(rows, prep.benchmark.perspective_names, target)
    return rows, target
