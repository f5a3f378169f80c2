"""Turn response texts into feature scores and histograms.

The default scorer is a small sentiment lexicon so every test runs without a
network. An HTTP adapter covers model-based scorers served elsewhere.
"""
from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from .core import (
    Benchmark,
    ConceptData,
    FeatureHistogram,
    FeatureScores,
    ValidationError,
)

TOKEN_RE = re.compile(r"[a-z]+(?:'[a-z]+)?")
# entries shorter than this only match whole words plus one of these inflections
SHORT_STEM = 5
SHORT_SUFFIXES = frozenset({"", "s", "es", "ed", "ing", "er", "est", "ly", "ness", "ful", "y"})


class ScoringError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScorerConfig:
    scorer_kind: str = "lexicon"
    score_range: tuple[float, float] = (0.0, 1.0)
    bins: int = 10
    lexicon_path: str | None = None
    endpoint: str | None = None
    timeout: float = 10.0

    def __post_init__(self):
        low, high = self.score_range
        if not low < high:
            raise ValidationError("score_range needs low < high")
        if self.bins < 2:
            raise ValidationError("need at least 2 bins")
        if self.scorer_kind not in ("lexicon", "external"):
            raise ValidationError(f"unknown scorer kind {self.scorer_kind!r}")
        if self.scorer_kind == "external" and not self.endpoint:
            raise ValidationError("external scorer needs an endpoint")
        object.__setattr__(self, "score_range", (float(low), float(high)))

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ScorerConfig":
        raw = dict(raw)
        if "score_range" in raw:
            raw["score_range"] = tuple(raw["score_range"])
        return cls(**raw)

    def to_dict(self) -> dict:
        return {
            "scorer_kind": self.scorer_kind,
            "score_range": list(self.score_range),
            "bins": self.bins,
            "lexicon_path": self.lexicon_path,
            "endpoint": self.endpoint,
            "timeout": self.timeout,
        }

    @property
    def bin_edges(self) -> np.ndarray:
        low, high = self.score_range
        return np.linspace(low, high, self.bins + 1)


class Scorer(Protocol):
    def score(self, text: str) -> float: ...


def parse_lexicon(text: str) -> tuple[frozenset[str], frozenset[str]]:
    """Parse ``#positive`` / ``#negative`` sections, one entry per line."""
    sections: dict[str, set[str]] = {"positive": set(), "negative": set()}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        entry = line.strip().lower()
        if not entry:
            continue
        if entry.startswith("#"):
            name = entry[1:].strip()
            if name not in sections:
                raise ValidationError(f"line {lineno}: unknown lexicon section {entry!r}")
            current = name
            continue
        if current is None:
            raise ValidationError(f"line {lineno}: entry before any section header")
        sections[current].add(entry)
    both = sections["positive"] & sections["negative"]
    if both:
        raise ValidationError(f"entries listed as both positive and negative: {sorted(both)}")
    return frozenset(sections["positive"]), frozenset(sections["negative"])


class LexiconScorer:
    """Polarity from lexicon hits: ``(pos - neg) / max(1, pos + neg)`` mapped onto the score range.

    Entries act as stems: a token matches the longest entry it starts with.
    Entries shorter than five letters only match whole words or simple
    inflections (``good``/``goods``, but not ``pain`` in ``painting``).
    """

    def __init__(self, positive, negative, score_range=(0.0, 1.0)):
        self.table = {w: 1 for w in positive}
        self.table.update({w: -1 for w in negative})
        self.low, self.high = score_range
        self.max_len = max((len(w) for w in self.table), default=0)

    @classmethod
    def from_config(cls, config: ScorerConfig) -> "LexiconScorer":
        if config.lexicon_path is None:
            text = resources.files("mpf").joinpath("data/lexicon.txt").read_text("utf-8")
        else:
            path = Path(config.lexicon_path)
            if not path.is_file():
                raise ScoringError(f"lexicon file not found: {path}")
            text = path.read_text("utf-8")
        pos, neg = parse_lexicon(text)
        return cls(pos, neg, config.score_range)

    def polarity_of(self, token: str) -> int:
        for cut in range(min(len(token), self.max_len), 0, -1):
            stem = token[:cut]
            polarity = self.table.get(stem)
            if polarity is None:
                continue
            if cut >= SHORT_STEM or token[cut:] in SHORT_SUFFIXES:
                return polarity
        return 0

    def hits(self, text: str) -> tuple[int, int]:
        pos = neg = 0
        for token in TOKEN_RE.findall(text.lower()):
            p = self.polarity_of(token)
            if p > 0:
                pos += 1
            elif p < 0:
                neg += 1
        return pos, neg

    def score(self, text: str) -> float:
        if not text or not text.strip():
            raise ScoringError("cannot score empty text")
        pos, neg = self.hits(text)
        polarity = (pos - neg) / max(1, pos + neg)
        return self.low + (polarity + 1.0) / 2.0 * (self.high - self.low)


class ExternalScorer:
    """Scores through an HTTP service: POST ``{"text": ...}`` -> ``{"score": float}``."""

    def __init__(self, config: ScorerConfig, transport: httpx.BaseTransport | None = None):
        self.endpoint = config.endpoint
        self.low, self.high = config.score_range
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._lock = threading.Lock()

    def score(self, text: str) -> float:
        if not text or not text.strip():
            raise ScoringError("cannot score empty text")
        try:
            with self._lock:
                resp = self._client.post(self.endpoint, json={"text": text})
            resp.raise_for_status()
            value = float(resp.json()["score"])
        except (httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
            raise ScoringError(f"external scorer failed: {exc}") from exc
        if not self.low <= value <= self.high:
            raise ScoringError(f"external score {value} outside [{self.low}, {self.high}]")
        return value


def make_scorer(config: ScorerConfig) -> Scorer:
    if config.scorer_kind == "lexicon":
        return LexiconScorer.from_config(config)
    return ExternalScorer(config)


def score_text(text: str, config: ScorerConfig | None = None, scorer: Scorer | None = None) -> float:
    if scorer is None:
        scorer = make_scorer(config or ScorerConfig())
    return scorer.score(text)


def bin_index(scores, edges: np.ndarray) -> np.ndarray:
    """Right-open bins, except the last which also holds the top edge."""
    idx = np.searchsorted(edges, scores, side="right") - 1
    return np.minimum(idx, edges.size - 2)


def build_histogram(scores: Sequence[float], config: ScorerConfig) -> FeatureHistogram:
    arr = np.asarray(scores, dtype=float)
    if arr.size == 0:
        raise ValidationError("cannot build a histogram from no scores")
    low, high = config.score_range
    if np.any(arr < low) or np.any(arr > high) or not np.all(np.isfinite(arr)):
        raise ValidationError(f"score outside [{low}, {high}]")
    edges = config.bin_edges
    counts = np.bincount(bin_index(arr, edges), minlength=config.bins)
    return FeatureHistogram(edges, counts / arr.size)


@dataclass
class ScoredBenchmark:
    """Scores of every response in a benchmark, grouped for the mitigator.

    ``concepts`` holds decomposition-split inputs only; ``validation`` holds the
    validation-split score matrices (``None`` when perspective responses for
    that split are absent).
    """

    baseline: dict[str, float]
    perspective: dict[str, dict[str, float]]
    concepts: dict[str, ConceptData] = field(default_factory=dict)
    validation: dict[str, FeatureScores | None] = field(default_factory=dict)


def score_benchmark(benchmark: Benchmark, config: ScorerConfig, scorer: Scorer | None = None) -> ScoredBenchmark:
    if scorer is None:
        scorer = make_scorer(config)
    names = benchmark.perspective_names

    missing = []
    for q in benchmark.questions_for(split="decomposition"):
        if q.id not in benchmark.baseline_responses:
            missing.append(f"baseline/{q.id}")
        for name in names:
            if q.id not in benchmark.perspective_responses.get(name, {}):
                missing.append(f"{name}/{q.id}")
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise ValidationError(f"missing responses for {len(missing)} decomposition entries: {shown}")

    baseline = {qid: scorer.score(t) for qid, t in benchmark.baseline_responses.items()}
    perspective = {
        name: {qid: scorer.score(t) for qid, t in benchmark.perspective_responses.get(name, {}).items()}
        for name in names
    }

    out = ScoredBenchmark(baseline=baseline, perspective=perspective)
    for concept in benchmark.concepts:
        decomp = [q.id for q in benchmark.questions_for(concept, "decomposition")]
        if decomp:
            fs = _feature_scores(concept, decomp, names, perspective, baseline, config)
            out.concepts[concept] = ConceptData(
                components=tuple(build_histogram(row, config) for row in fs.perspective_scores),
                target=build_histogram(fs.baseline_scores, config),
                scores=fs,
            )
        valid = [q.id for q in benchmark.questions_for(concept, "validation")]
        complete = valid and all(
            qid in baseline and all(qid in perspective[name] for name in names) for qid in valid
        )
        out.validation[concept] = (
            _feature_scores(concept, valid, names, perspective, baseline, config) if complete else None
        )
    return out


def _feature_scores(concept, qids, names, perspective, baseline, config) -> FeatureScores:
    return FeatureScores(
        concept=concept,
        question_ids=qids,
        perspective_scores=[[perspective[name][q] for q in qids] for name in names],
        baseline_scores=[baseline[q] for q in qids],
        score_range=config.score_range,
    )
