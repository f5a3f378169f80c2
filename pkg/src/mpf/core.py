"""Domain types shared by the mitigator, generator, scorer and pipeline.

Every type is immutable after construction. Arrays are stored as read-only
numpy arrays, so instances can be shared freely between threads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping, Sequence

import numpy as np

SPLITS = ("decomposition", "validation")
MODES = ("sampled", "aggregated", "normal", "single_perspective")
DEFAULT_PLACEHOLDER = "X-University"
SUM_TOL = 1e-9


class ValidationError(ValueError):
    """Raised when input data violates a domain invariant."""


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Perspective:
    name: str
    system_prompt: str

    def __post_init__(self):
        if not self.name:
            raise ValidationError("perspective name must be non-empty")
        if not self.system_prompt or not self.system_prompt.strip():
            raise ValidationError(f"perspective {self.name!r} has an empty system prompt")


def check_registry(perspectives: Sequence[Perspective]) -> tuple[Perspective, ...]:
    names = [p.name for p in perspectives]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate perspective names in {names}")
    return tuple(perspectives)


def _load_registry_file() -> dict:
    text = resources.files("mpf").joinpath("data/perspectives.json").read_text("utf-8")
    return json.loads(text)


def default_perspectives() -> tuple[Perspective, ...]:
    """The five built-in fusion perspectives, in registry order."""
    raw = _load_registry_file()["perspectives"]
    return check_registry([Perspective(**p) for p in raw])


def baseline_personas() -> tuple[Perspective, ...]:
    """Personas used to synthesize a hypothetical baseline (not fusion perspectives)."""
    raw = _load_registry_file()["baseline_personas"]
    return check_registry([Perspective(**p) for p in raw])


@dataclass(frozen=True, eq=False)
class Weights:
    """A point on the probability simplex, aligned to a perspective registry."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.ndim != 1 or arr.size < 1:
            raise ValidationError(f"weights need a non-empty 1-d vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("weights must be finite")
        if np.any(arr < 0) or np.any(arr > 1):
            raise ValidationError(f"weights outside [0, 1]: {arr.tolist()}")
        if abs(arr.sum() - 1.0) > SUM_TOL:
            raise ValidationError(f"weights sum to {arr.sum()!r}, not 1")
        object.__setattr__(self, "values", arr)

    @classmethod
    def uniform(cls, n: int) -> "Weights":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def one_hot(cls, n: int, index: int) -> "Weights":
        v = np.zeros(n)
        v[index] = 1.0
        return cls(v)

    @property
    def n(self) -> int:
        return self.values.size

    def tolist(self) -> list[float]:
        return self.values.tolist()

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        return isinstance(other, Weights) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    def __repr__(self):
        return f"Weights({np.array2string(self.values, precision=4)})"


def normalize(values) -> Weights:
    """Map a non-negative, non-zero vector onto the simplex by rescaling."""
    arr = np.asarray(values, dtype=float)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValidationError("normalize needs finite non-negative values")
    total = arr.sum()
    if total <= 0:
        raise ValidationError("normalize needs at least one positive value")
    out = arr / total
    # rescaling can leave the sum an ulp away from 1; fold the residue into the largest entry
    out[np.argmax(out)] += 1.0 - out.sum()
    return Weights(np.clip(out, 0.0, 1.0))


def floor_weights(weights: Weights, epsilon: float) -> Weights:
    """Zero out entries below ``epsilon`` and renormalize."""
    arr = weights.values.copy()
    arr[arr < epsilon] = 0.0
    if arr.sum() == 0:
        return weights
    return normalize(arr)


@dataclass(frozen=True, eq=False)
class FeatureHistogram:
    bin_edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        edges = _frozen(self.bin_edges)
        masses = _frozen(self.masses)
        if edges.ndim != 1 or edges.size < 3:
            raise ValidationError("a histogram needs at least 2 bins")
        if np.any(np.diff(edges) <= 0):
            raise ValidationError("bin edges must be strictly ascending")
        if masses.shape != (edges.size - 1,):
            raise ValidationError(f"{edges.size - 1} bins but {masses.size} masses")
        if np.any(masses < 0) or not np.all(np.isfinite(masses)):
            raise ValidationError("masses must be finite and non-negative")
        if abs(masses.sum() - 1.0) > SUM_TOL:
            raise ValidationError(f"masses sum to {masses.sum()!r}, not 1")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "masses", masses)

    @property
    def bins(self) -> int:
        return self.masses.size

    def same_bins(self, other: "FeatureHistogram") -> bool:
        return np.array_equal(self.bin_edges, other.bin_edges)

    def __eq__(self, other):
        return (
            isinstance(other, FeatureHistogram)
            and self.same_bins(other)
            and np.array_equal(self.masses, other.masses)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FeatureScores:
    """Per-question feature scores of one concept.

    ``perspective_scores`` is an ``(n, d)`` matrix in registry order and
    ``baseline_scores`` has length ``d``.
    """

    concept: str
    question_ids: tuple[str, ...]
    perspective_scores: np.ndarray
    baseline_scores: np.ndarray
    score_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        qids = tuple(self.question_ids)
        ps = _frozen(self.perspective_scores)
        bs = _frozen(self.baseline_scores)
        if not qids:
            raise ValidationError(f"concept {self.concept!r} has no questions")
        if ps.ndim != 2 or ps.shape[1] != len(qids):
            raise ValidationError(f"perspective score matrix shape {ps.shape} does not match d={len(qids)}")
        if bs.shape != (len(qids),):
            raise ValidationError(f"baseline score shape {bs.shape} does not match d={len(qids)}")
        low, high = self.score_range
        for arr in (ps, bs):
            if not np.all(np.isfinite(arr)) or np.any(arr < low) or np.any(arr > high):
                raise ValidationError(f"scores for {self.concept!r} fall outside [{low}, {high}]")
        object.__setattr__(self, "question_ids", qids)
        object.__setattr__(self, "perspective_scores", ps)
        object.__setattr__(self, "baseline_scores", bs)
        object.__setattr__(self, "score_range", (float(low), float(high)))

    @property
    def n(self) -> int:
        return self.perspective_scores.shape[0]

    @property
    def d(self) -> int:
        return len(self.question_ids)


@dataclass(frozen=True)
class ConceptData:
    """Decomposition-split inputs for one concept: per-perspective histograms,
    the baseline histogram and the per-question score matrix."""

    components: tuple[FeatureHistogram, ...]
    target: FeatureHistogram
    scores: FeatureScores


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.0
    beta: float = 1.0
    lambda_kl: float = 0.2
    lambda_cal: float = 0.8
    nonzero_epsilon: float = 1e-3
    smoothing_epsilon: float = 1e-9
    restarts: int = 8
    max_iterations: int = 1000
    tolerance: float = 1e-6
    fd_step: float = 1e-6
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_kl", "lambda_cal"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"{name} must be a finite non-negative number, got {value!r}")
        if self.lambda_kl + self.lambda_cal + self.alpha + self.beta <= 0:
            raise ValidationError("objective is degenerate: every term has zero strength")
        if not 0 < self.nonzero_epsilon < 1:
            raise ValidationError("nonzero_epsilon must lie in (0, 1)")
        if not 0 < self.smoothing_epsilon < 1:
            raise ValidationError("smoothing_epsilon must lie in (0, 1)")
        if self.tolerance <= 0 or self.fd_step <= 0:
            raise ValidationError("tolerance and fd_step must be positive")
        if int(self.max_iterations) < 1 or int(self.restarts) < 1:
            raise ValidationError("max_iterations and restarts must be >= 1")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValidationError("rng_seed must be an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "HyperParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class Question:
    id: str
    concept: str
    text: str
    split: str


@dataclass(frozen=True)
class Benchmark:
    perspectives: tuple[Perspective, ...]
    concepts: tuple[str, ...]
    questions: tuple[Question, ...]
    baseline_responses: Mapping[str, str] = field(default_factory=dict)
    perspective_responses: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    score_range: tuple[float, float] = (0.0, 1.0)

    @property
    def perspective_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.perspectives)

    def questions_for(self, concept: str | None = None, split: str | None = None) -> list[Question]:
        return [
            q for q in self.questions
            if (concept is None or q.concept == concept) and (split is None or q.split == split)
        ]

    def question(self, qid: str) -> Question:
        for q in self.questions:
            if q.id == qid:
                return q
        raise KeyError(qid)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Unscaled objective terms plus the scaled total."""

    kl: float
    calibration: float
    l2: float
    sparsity: float
    total: float


@dataclass(frozen=True)
class DecompositionResult:
    concept: str
    weights: Weights
    objective_value: float
    breakdown: ObjectiveBreakdown
    converged: bool
    iterations_used: int
    # index of the Dirichlet restart that won; -1 when a polish candidate won
    restart_index: int


@dataclass(frozen=True)
class GenerationRecord:
    question_id: str
    mode: str
    chosen_perspectives: tuple[str, ...]
    sample_texts: tuple[str, ...]
    final_text: str
    rng_seed_used: int
    concept: str = ""
    split: str = ""
    system: str = ""
    template_sha256: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown generation mode {self.mode!r}")
        if self.mode == "sampled" and (len(self.chosen_perspectives) != 1 or len(self.sample_texts) != 1):
            raise ValidationError("a sampled record carries exactly one perspective and one sample")
        if self.mode == "aggregated" and len(self.sample_texts) < 1:
            raise ValidationError("an aggregated record needs at least one sample")
        object.__setattr__(self, "chosen_perspectives", tuple(self.chosen_perspectives))
        object.__setattr__(self, "sample_texts", tuple(self.sample_texts))

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "concept": self.concept,
            "split": self.split,
            "mode": self.mode,
            "system": self.system,
            "chosen_perspectives": list(self.chosen_perspectives),
            "sample_texts": list(self.sample_texts),
            "final_text": self.final_text,
            "rng_seed_used": self.rng_seed_used,
            "template_sha256": self.template_sha256,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "GenerationRecord":
        return cls(**raw)


@dataclass(frozen=True)
class MetricCell:
    split: str
    system: str
    kl_divergence: float
    calibration_error: float
    kl_pooled: float
    calibration_pooled: float
    n_questions: int


@dataclass(frozen=True)
class EvaluationReport:
    cells: tuple[MetricCell, ...]
    # headline numbers average per-concept values; pooled variants are kept alongside
    aggregation_mode: str = "averaged"

    def __post_init__(self):
        for c in self.cells:
            for v in (c.kl_divergence, c.calibration_error, c.kl_pooled, c.calibration_pooled):
                if not np.isfinite(v) or v < 0:
                    raise ValidationError(f"metric for {c.split}/{c.system} is not a finite non-negative number")

    def cell(self, split: str, system: str) -> MetricCell:
        for c in self.cells:
            if c.split == split and c.system == system:
                return c
        raise KeyError((split, system))


def validate_benchmark(raw: Mapping[str, Any]) -> Benchmark:
    """Validate a parsed benchmark document and normalize its ordering.

    Templates (``{"id", "text", "split"}`` entries containing the placeholder)
    are expanded against every declared concept; explicit ``questions`` are
    taken as-is. Concepts and questions are sorted lexicographically.
    """
    from .pipeline import expand_counterfactual

    if "perspectives" in raw:
        perspectives = check_registry([Perspective(p["name"], p["system_prompt"]) for p in raw["perspectives"]])
    else:
        perspectives = default_perspectives()
    if len(perspectives) < 2:
        raise ValidationError("a benchmark needs at least two perspectives")

    concepts = list(raw.get("concepts", []))
    if len(set(concepts)) != len(concepts):
        raise ValidationError("duplicate concept names")

    questions: list[Question] = []
    for q in raw.get("questions", []):
        questions.append(Question(str(q["id"]), q["concept"], q["text"], q.get("split", "decomposition")))
    if raw.get("templates"):
        questions.extend(expand_counterfactual(
            raw["templates"], concepts, placeholder=raw.get("placeholder", DEFAULT_PLACEHOLDER)
        ))
    if not questions:
        raise ValidationError("empty question set")

    seen: set[str] = set()
    declared = set(concepts)
    for q in questions:
        if q.id in seen:
            raise ValidationError(f"duplicate id {q.id!r}")
        seen.add(q.id)
        if q.concept not in declared:
            raise ValidationError(f"unknown concept {q.concept!r} in question {q.id!r}")
        if q.split not in SPLITS:
            raise ValidationError(f"unknown split {q.split!r} in question {q.id!r}")
        if not q.text.strip():
            raise ValidationError(f"question {q.id!r} has empty text")

    baseline = dict(raw.get("baseline_responses", {}))
    for qid in baseline:
        if qid not in seen:
            raise ValidationError(f"baseline response for unknown question id {qid!r}")

    names = {p.name for p in perspectives}
    persp_resp: dict[str, dict[str, str]] = {}
    for name, answers in raw.get("perspective_responses", {}).items():
        if name not in names:
            raise ValidationError(f"unknown perspective {name!r} in response map")
        for qid in answers:
            if qid not in seen:
                raise ValidationError(f"response for unknown question id {qid!r} under {name!r}")
        persp_resp[name] = {k: answers[k] for k in sorted(answers)}

    low, high = raw.get("score_range", (0.0, 1.0))
    if not low < high:
        raise ValidationError("score_range needs low < high")

    return Benchmark(
        perspectives=perspectives,
        concepts=tuple(sorted(concepts)),
        questions=tuple(sorted(questions, key=lambda q: q.id)),
        baseline_responses={k: baseline[k] for k in sorted(baseline)},
        perspective_responses={p.name: persp_resp[p.name] for p in perspectives if p.name in persp_resp},
        score_range=(float(low), float(high)),
    )
