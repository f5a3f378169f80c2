"""Fit perspective weights by constrained minimization over the simplex.

The objective mixes smooth terms (KL, L2), a piecewise-linear term
(calibration), a concave term (``-max(w)``) and a piecewise-constant one
(the non-zero count). :func:`optimize` therefore runs SLSQP with
finite-difference gradients from several Dirichlet starts, then polishes:

* every one-hot vertex and the uniform point are evaluated directly;
* when ``beta > 0`` each face of the simplex is searched once per choice of
  leading coordinate. On a face the count term is constant and, with the
  leader fixed, ``-max(w)`` becomes the linear ``-w_leader``, so each of those
  subproblems is convex.

The candidate with the lowest exact objective wins.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .core import (
    Benchmark,
    ConceptData,
    DecompositionResult,
    FeatureHistogram,
    FeatureScores,
    HyperParams,
    ValidationError,
    Weights,
    floor_weights,
)
from .metrics import ArrayObjective

TIE_TOL = 1e-12
# faces are enumerated exhaustively up to this many perspectives; beyond it only
# edges and the full simplex are searched
MAX_EXHAUSTIVE_N = 8
# combinatorial explosion guard: n=4 at step 0.01 fits, n=5 at step 0.01 does not
ORACLE_MAX_POINTS = 1_000_000


@dataclass(frozen=True)
class SweepGrid:
    alphas: tuple[float, ...] = (0.0, 0.5)
    betas: tuple[float, ...] = (0.0, 0.1, 0.3, 1.0, 3.0)
    lambda_pairs: tuple[tuple[float, float], ...] = ((0.2, 0.8), (0.5, 0.5), (0.8, 0.2))

    def __post_init__(self):
        for name in ("alphas", "betas", "lambda_pairs"):
            if not getattr(self, name):
                raise ValidationError(f"sweep grid {name} must be non-empty")
        values = list(self.alphas) + list(self.betas) + [v for pair in self.lambda_pairs for v in pair]
        if any(v < 0 for v in values):
            raise ValidationError("sweep grid values must be non-negative")
        if any(len(pair) != 2 for pair in self.lambda_pairs):
            raise ValidationError("lambda_pairs entries must be (lambda_kl, lambda_cal)")

    def cells(self):
        """(alpha, beta, lambda_kl, lambda_cal) in declaration order."""
        for a, b, (lk, lc) in itertools.product(self.alphas, self.betas, self.lambda_pairs):
            yield a, b, lk, lc


@dataclass
class _Candidate:
    weights: np.ndarray
    value: float
    converged: bool
    iterations: int
    restart_index: int


def project_to_simplex(w: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and renormalize; falls back to uniform for an all-zero vector."""
    w = np.clip(np.asarray(w, dtype=float), 0.0, 1.0)
    s = w.sum()
    if s <= 0 or not np.isfinite(s):
        return np.full(w.size, 1.0 / w.size)
    return w / s


def _dirichlet_start(seed: int, restart: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), int(restart)])
    return rng.dirichlet(np.ones(n))


def _slsqp(fun, x0: np.ndarray, hp: HyperParams):
    k = x0.size
    return minimize(
        fun,
        x0,
        method="SLSQP",
        bounds=[(0.0, 1.0)] * k,
        constraints=[{"type": "eq", "fun": lambda x: np.sum(x) - 1.0, "jac": lambda x: np.ones(k)}],
        options={"ftol": hp.tolerance, "maxiter": int(hp.max_iterations), "eps": hp.fd_step},
    )


def _faces(n: int):
    if n <= MAX_EXHAUSTIVE_N:
        sizes = range(2, n + 1)
    else:
        sizes = (2, n)
    for size in sizes:
        yield from itertools.combinations(range(n), size)


def _finalize(obj: ArrayObjective, w: np.ndarray, hp: HyperParams, converged: bool, nit: int, idx: int) -> _Candidate:
    floored = floor_weights(Weights(project_to_simplex(w)), hp.nonzero_epsilon).values
    return _Candidate(floored, float(obj.total(floored)), converged, nit, idx)


def _better(a: _Candidate, b: _Candidate | None) -> bool:
    if b is None:
        return True
    if a.value < b.value - TIE_TOL:
        return True
    if a.value > b.value + TIE_TOL:
        return False
    return tuple(a.weights) > tuple(b.weights)


def _check_dims(components: Sequence[FeatureHistogram], target: FeatureHistogram, scores: FeatureScores):
    if len(components) != scores.n:
        raise ValidationError(f"{len(components)} component histograms for {scores.n} perspective score rows")
    if len(components) < 2:
        raise ValidationError("need at least two perspectives to fit weights")


def candidates(
    components: Sequence[FeatureHistogram],
    target: FeatureHistogram,
    scores: FeatureScores,
    hp: HyperParams,
) -> list[_Candidate]:
    """Every candidate :func:`optimize` considers: restarts first, then polish points."""
    _check_dims(components, target, scores)
    obj = ArrayObjective.from_domain(components, target, scores, hp)
    n = obj.n

    def exact(w):
        return float(obj.total(project_to_simplex(w)))

    out: list[_Candidate] = []
    for r in range(int(hp.restarts)):
        res = _slsqp(exact, _dirichlet_start(hp.rng_seed, r, n), hp)
        if not np.isfinite(res.fun):
            raise FloatingPointError("objective evaluated to a non-finite value; check smoothing_epsilon")
        out.append(_finalize(obj, res.x, hp, bool(res.success), int(res.nit), r))

    for i in range(n):
        out.append(_finalize(obj, np.eye(n)[i], hp, True, 0, -1))
    out.append(_finalize(obj, np.full(n, 1.0 / n), hp, True, 0, -1))

    if hp.beta > 0:
        for face in _faces(n):
            idx = np.array(face)
            for lead in range(idx.size):
                def sub(x, idx=idx, lead=lead):
                    w = np.zeros(n)
                    w[idx] = project_to_simplex(x)
                    return float(obj.smooth_part(w)) - hp.beta * w[idx[lead]]

                x0 = np.full(idx.size, 0.5 / idx.size)
                x0[lead] += 0.5
                res = _slsqp(sub, x0, hp)
                w = np.zeros(n)
                w[idx] = project_to_simplex(res.x)
                out.append(_finalize(obj, w, hp, bool(res.success), int(res.nit), -1))
    return out


def optimize(
    components: Sequence[FeatureHistogram],
    target: FeatureHistogram,
    scores: FeatureScores,
    hp: HyperParams,
) -> DecompositionResult:
    """Minimize the combined objective for one concept.

    Deterministic in ``hp.rng_seed``: restart ``r`` draws its start from
    ``Dirichlet(1, ..., 1)`` seeded by ``(rng_seed, r)``.
    """
    cands = candidates(components, target, scores, hp)
    best = None
    for c in cands:
        if _better(c, best):
            best = c
    obj = ArrayObjective.from_domain(components, target, scores, hp)
    breakdown = obj.breakdown(best.weights)
    return DecompositionResult(
        concept=scores.concept,
        weights=Weights(best.weights),
        objective_value=breakdown.total,
        breakdown=breakdown,
        converged=best.converged,
        iterations_used=best.iterations,
        restart_index=best.restart_index,
    )


def _divisions(step: float) -> int:
    m = round(1.0 / step)
    if m < 1 or abs(m * step - 1.0) > 1e-9:
        raise ValidationError(f"step {step} does not divide 1")
    return m


def lattice_size(n: int, step: float) -> int:
    return math.comb(_divisions(step) + n - 1, n - 1)


def simplex_lattice(n: int, step: float) -> np.ndarray:
    """All points of the n-simplex whose coordinates are multiples of ``step``."""
    m = _divisions(step)
    # stars and bars: choose n-1 bar positions among m + n - 1 slots
    rows = []
    for bars in itertools.combinations(range(m + n - 1), n - 1):
        edges = (-1,) + bars + (m + n - 1,)
        rows.append([edges[i + 1] - edges[i] - 1 for i in range(n)])
    return np.array(rows, dtype=float) / m


def grid_search_oracle(
    components: Sequence[FeatureHistogram],
    target: FeatureHistogram,
    scores: FeatureScores,
    hp: HyperParams,
    step: float = 0.01,
) -> tuple[Weights, float]:
    """Exhaustive search over the simplex lattice; the first minimizer in lattice order wins."""
    _check_dims(components, target, scores)
    n = len(components)
    size = lattice_size(n, step)
    if size > ORACLE_MAX_POINTS:
        raise ValidationError(f"n={n} too large for step {step}: {size} lattice points")
    obj = ArrayObjective.from_domain(components, target, scores, hp)
    points = simplex_lattice(n, step)
    values = obj.total(points)
    i = int(np.argmin(values))
    return Weights(points[i]), float(values[i])


def decompose_benchmark(
    benchmark: Benchmark,
    data: Mapping[str, ConceptData],
    hp: HyperParams,
) -> dict[str, DecompositionResult]:
    """Fit one weight vector per concept, in the benchmark's concept order."""
    results = {}
    for concept in benchmark.concepts:
        if concept not in data:
            raise ValidationError(f"concept {concept!r} is missing scores or histograms")
        cd = data[concept]
        if len(cd.components) != len(benchmark.perspectives):
            raise ValidationError(
                f"concept {concept!r} has {len(cd.components)} perspective histograms, "
                f"registry has {len(benchmark.perspectives)}"
            )
        results[concept] = optimize(cd.components, cd.target, cd.scores, hp)
    return results


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    beta: float
    lambda_kl: float
    lambda_cal: float
    results: dict = field(hash=False)
    mean_kl: float = math.nan
    mean_calibration: float = math.nan


def sweep(
    benchmark: Benchmark,
    data: Mapping[str, ConceptData],
    grid: SweepGrid,
    hp: HyperParams,
) -> list[SweepRow]:
    """Decompose the benchmark at every cell of the grid (full Cartesian product)."""
    rows = []
    base = hp.to_dict()
    for a, b, lk, lc in grid.cells():
        cell_hp = HyperParams(**{**base, "alpha": a, "beta": b, "lambda_kl": lk, "lambda_cal": lc})
        results = decompose_benchmark(benchmark, data, cell_hp)
        rows.append(SweepRow(
            alpha=a, beta=b, lambda_kl=lk, lambda_cal=lc, results=results,
            mean_kl=float(np.mean([r.breakdown.kl for r in results.values()])),
            mean_calibration=float(np.mean([r.breakdown.calibration for r in results.values()])),
        ))
    return rows


def write_sweep_table(rows: Sequence[SweepRow], perspective_names: Sequence[str], path, delimiter: str = "\t") -> int:
    """Write one line per (grid cell, concept); returns the number of data lines."""
    header = ["alpha", "beta", "lambda_kl", "lambda_cal", "concept"]
    header += [f"w_{name}" for name in perspective_names]
    header += ["kl", "calibration", "objective"]
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            for concept, res in row.results.items():
                writer.writerow(
                    [_fmt(row.alpha), _fmt(row.beta), _fmt(row.lambda_kl), _fmt(row.lambda_cal), concept]
                    + [_fmt(v) for v in res.weights.tolist()]
                    + [_fmt(res.breakdown.kl), _fmt(res.breakdown.calibration), _fmt(res.objective_value)]
                )
                count += 1
    return count


def _fmt(x: float) -> str:
    return f"{x:.9g}"
