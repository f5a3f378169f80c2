"""Generate responses with fitted perspective weights.

``sampled`` draws one perspective per question and answers with its system
prompt. ``aggregated`` draws ``k`` such answers and asks the backend to fuse
them. ``normal`` (no system prompt) and ``single_perspective`` provide the
comparison systems.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .core import (
    MODES,
    SPLITS,
    Benchmark,
    GenerationRecord,
    Perspective,
    Question,
    ValidationError,
    Weights,
)

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
SYSTEM_LABELS = {"sampled": "mpf_sampled", "aggregated": "mpf_aggregated", "normal": "normal"}
RETRY_STATUS = frozenset({408, 429, 500, 502, 503, 504})
SAMPLE_LINE = re.compile(r"^\[(\d+)\] (.*)$", re.MULTILINE)


class BackendError(RuntimeError):
    pass


class SplitMix64:
    """Portable 64-bit generator; identical streams on every platform."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def derive_seed(rng_seed: int, question_id: str, mode: str) -> int:
    digest = hashlib.sha256(f"{int(rng_seed)}\x1f{question_id}\x1f{mode}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def sample_perspective(weights: Weights, rng: SplitMix64) -> int:
    """Inverse-CDF draw over registry order; zero-weight entries are never chosen."""
    w = weights.values
    cdf = np.cumsum(w)
    u = rng.random()
    i = int(np.searchsorted(cdf, u, side="right"))
    if i >= w.size:
        # u landed in the rounding gap above cdf[-1]
        i = int(np.flatnonzero(w > 0)[-1])
    return i


def _read_data(name: str) -> str:
    return resources.files("mpf").joinpath(f"data/{name}").read_text("utf-8")


@dataclass(frozen=True)
class AggregationPrompt:
    system: str
    template: str

    def __post_init__(self):
        if "{samples}" not in self.template:
            raise ValidationError("aggregation template lacks a {samples} slot")

    @classmethod
    def default(cls) -> "AggregationPrompt":
        return cls(_read_data("aggregation_system.txt").strip(), _read_data("aggregation_template.txt"))

    @classmethod
    def from_file(cls, path, system: str | None = None) -> "AggregationPrompt":
        return cls(system or _read_data("aggregation_system.txt").strip(), Path(path).read_text("utf-8"))

    @property
    def sha256(self) -> str:
        return hashlib.sha256(f"{self.system}\x00{self.template}".encode("utf-8")).hexdigest()

    def render(self, question: str, samples: Sequence[str]) -> str:
        lines = "\n".join(f"[{i}] {' '.join(s.split())}" for i, s in enumerate(samples, 1))
        return self.template.replace("{question}", question).replace("{samples}", lines)


def parse_samples(user_prompt: str) -> list[str]:
    """Recover sample texts from a rendered aggregation prompt."""
    return [m.group(2) for m in SAMPLE_LINE.finditer(user_prompt)]


class Backend(Protocol):
    def complete(self, system_prompt: str, user_prompt: str) -> str: ...


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    fixture: str | None = None
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "MPF_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_concurrent: int = 4
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    temperature: float = 0.7

    def __post_init__(self):
        if self.kind == "http":
            if not self.endpoint or not self.model:
                raise ValidationError("http backend needs endpoint and model")
        elif self.kind == "mock":
            if not self.fixture:
                raise ValidationError("mock backend needs a fixture file")
        else:
            raise ValidationError(f"unknown backend kind {self.kind!r}")
        if self.max_retries < 0 or self.max_concurrent < 1:
            raise ValidationError("max_retries must be >= 0 and max_concurrent >= 1")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "BackendConfig":
        return cls(**raw)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class MockBackend:
    """Replays fixture texts keyed by (perspective name, question id).

    The empty system prompt maps to the name ``normal``. Aggregation calls are
    answered with the most frequent candidate (earliest on ties), which drops
    answers from rarely drawn perspectives; a single sample echoes back.
    """

    def __init__(
        self,
        responses: Mapping[str, Mapping[str, str]],
        perspectives: Sequence[Perspective],
        questions: Iterable[Question],
        aggregation: AggregationPrompt | None = None,
        normal_system_prompt: str = "",
    ):
        self.responses = {name: dict(v) for name, v in responses.items()}
        # replies are keyed by perspective, recovered from the system prompt
        self.prompt_names: dict[str, str] = {}
        pairs = [(p.system_prompt, p.name) for p in perspectives] + [(normal_system_prompt, "normal")]
        for prompt, name in pairs:
            if prompt in self.prompt_names:
                raise ValidationError(f"{name!r} and {self.prompt_names[prompt]!r} share a system prompt")
            self.prompt_names[prompt] = name
        self.question_ids: dict[str, str] = {}
        for q in questions:
            if q.text in self.question_ids:
                raise ValidationError(f"questions {self.question_ids[q.text]!r} and {q.id!r} share text")
            self.question_ids[q.text] = q.id
        self.aggregation = aggregation or AggregationPrompt.default()

    @classmethod
    def from_file(cls, path, benchmark: Benchmark, **kwargs) -> "MockBackend":
        raw = json.loads(Path(path).read_text("utf-8"))
        return cls(raw["responses"], benchmark.perspectives, benchmark.questions, **kwargs)

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        if system_prompt == self.aggregation.system:
            samples = parse_samples(user_prompt)
            if not samples:
                raise BackendError("aggregation prompt carries no samples")
            counts = Counter(samples)
            return max(samples, key=lambda t: counts[t])
        name = self.prompt_names.get(system_prompt)
        qid = self.question_ids.get(user_prompt)
        try:
            return self.responses[name][qid]
        except KeyError:
            raise BackendError(f"fixture miss for ({name}, {qid})") from None


class HttpBackend:
    """Chat-completion client with bounded concurrency and exponential backoff."""

    def __init__(
        self,
        config: BackendConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(config.max_concurrent)
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)

    def payload(self, system_prompt: str, user_prompt: str) -> dict:
        messages = []
        if system_prompt:
            messages.append({"role": "system", "content": system_prompt})
        messages.append({"role": "user", "content": user_prompt})
        return {"model": self.config.model, "messages": messages, "temperature": self.config.temperature}

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        cfg = self.config
        body = self.payload(system_prompt, user_prompt)
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self._sleep(cfg.backoff_base * cfg.backoff_factor ** (attempt - 1))
            try:
                with self._gate:
                    resp = self._client.post(cfg.endpoint, json=body)
            except httpx.TransportError as exc:
                last = exc
                log.warning("attempt %d: transport error: %s", attempt + 1, exc)
                continue
            if resp.status_code in RETRY_STATUS:
                last = BackendError(f"HTTP {resp.status_code}")
                log.warning("attempt %d: HTTP %d", attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed completion response: {exc}") from exc
            if not text or not text.strip():
                raise BackendError("empty completion")
            return text
        raise BackendError(f"gave up after {cfg.max_retries + 1} attempts: {last}")

    def close(self):
        self._client.close()


def make_backend(config: BackendConfig, benchmark: Benchmark, **kwargs) -> Backend:
    if config.kind == "mock":
        return MockBackend.from_file(config.fixture, benchmark, **kwargs)
    return HttpBackend(config)


def _complete(backend: Backend, system_prompt: str, question: Question) -> str:
    try:
        return backend.complete(system_prompt, question.text)
    except BackendError as exc:
        raise BackendError(f"question {question.id!r}: {exc}") from exc


def generate_sampled(
    question: Question,
    weights: Weights,
    perspectives: Sequence[Perspective],
    backend: Backend,
    rng: SplitMix64,
) -> GenerationRecord:
    if weights.n != len(perspectives):
        raise ValidationError(f"{weights.n} weights for {len(perspectives)} perspectives")
    p = perspectives[sample_perspective(weights, rng)]
    text = _complete(backend, p.system_prompt, question)
    return GenerationRecord(
        question_id=question.id, mode="sampled", chosen_perspectives=(p.name,), sample_texts=(text,),
        final_text=text, rng_seed_used=rng.seed, concept=question.concept, split=question.split,
        system=SYSTEM_LABELS["sampled"],
    )


def generate_aggregated(
    question: Question,
    weights: Weights,
    perspectives: Sequence[Perspective],
    backend: Backend,
    k: int,
    rng: SplitMix64,
    aggregation: AggregationPrompt | None = None,
) -> GenerationRecord:
    if k < 1:
        raise ValidationError("aggregation needs k >= 1 samples")
    aggregation = aggregation or AggregationPrompt.default()
    samples = [generate_sampled(question, weights, perspectives, backend, rng) for _ in range(k)]
    texts = [s.final_text for s in samples]
    try:
        final = backend.complete(aggregation.system, aggregation.render(question.text, texts))
    except BackendError as exc:
        raise BackendError(f"question {question.id!r}: aggregation failed: {exc}") from exc
    return GenerationRecord(
        question_id=question.id, mode="aggregated",
        chosen_perspectives=tuple(s.chosen_perspectives[0] for s in samples),
        sample_texts=tuple(texts), final_text=final, rng_seed_used=rng.seed,
        concept=question.concept, split=question.split, system=SYSTEM_LABELS["aggregated"],
        template_sha256=aggregation.sha256,
    )


@dataclass
class SuiteResult:
    records: list[GenerationRecord] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)


def generate_suite(
    benchmark: Benchmark,
    weights: Mapping[str, Weights],
    backend: Backend,
    modes: Sequence[str] = ("sampled", "aggregated", "normal", "single_perspective"),
    rng_seed: int = 0,
    splits: Sequence[str] = SPLITS,
    k: int = 3,
    aggregated_weights: Mapping[str, Weights] | None = None,
    aggregation: AggregationPrompt | None = None,
    normal_system_prompt: str = "",
    workers: int = 1,
) -> SuiteResult:
    """One record per (mode, question); single-perspective mode yields one per perspective.

    Backend failures are collected per question instead of aborting the run.
    Output order is fixed: mode, then perspective registry order, then question id.
    """
    unknown = set(modes) - set(MODES)
    if unknown:
        raise ValidationError(f"unknown modes {sorted(unknown)}")
    aggregated_weights = aggregated_weights or weights
    aggregation = aggregation or AggregationPrompt.default()
    questions = [q for q in benchmark.questions if q.split in splits]
    for mode, table in (("sampled", weights), ("aggregated", aggregated_weights)):
        if mode in modes:
            missing = sorted({q.concept for q in questions} - set(table))
            if missing:
                raise ValidationError(f"no {mode} weights for concepts {missing}")

    jobs: list[tuple[str, Perspective | None, Question]] = []
    for mode in MODES:
        if mode not in modes:
            continue
        if mode == "single_perspective":
            jobs.extend((mode, p, q) for p in benchmark.perspectives for q in questions)
        else:
            jobs.extend((mode, None, q) for q in questions)

    def run(job):
        mode, persp, q = job
        seed = derive_seed(rng_seed, q.id, mode if persp is None else f"{mode}:{persp.name}")
        rng = SplitMix64(seed)
        if mode == "sampled":
            return generate_sampled(q, weights[q.concept], benchmark.perspectives, backend, rng)
        if mode == "aggregated":
            return generate_aggregated(
                q, aggregated_weights[q.concept], benchmark.perspectives, backend, k, rng, aggregation
            )
        prompt = normal_system_prompt if mode == "normal" else persp.system_prompt
        text = _complete(backend, prompt, q)
        return GenerationRecord(
            question_id=q.id, mode=mode,
            chosen_perspectives=() if persp is None else (persp.name,),
            sample_texts=(text,), final_text=text, rng_seed_used=seed,
            concept=q.concept, split=q.split,
            system=SYSTEM_LABELS["normal"] if persp is None else persp.name,
        )

    def guarded(job):
        try:
            return run(job)
        except BackendError as exc:
            return exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(guarded, jobs))
    else:
        outcomes = [guarded(j) for j in jobs]

    result = SuiteResult()
    for (mode, persp, q), outcome in zip(jobs, outcomes):
        if isinstance(outcome, BackendError):
            result.failures.append({
                "mode": mode,
                "system": persp.name if persp else SYSTEM_LABELS[mode],
                "question_id": q.id,
                "error": str(outcome),
            })
        else:
            result.records.append(outcome)
    return result
