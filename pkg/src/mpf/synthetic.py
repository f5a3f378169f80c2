"""Seeded synthetic decomposition problems for tests and experiment scripts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FeatureHistogram, FeatureScores, Weights


@dataclass(frozen=True)
class Instance:
    components: tuple[FeatureHistogram, ...]
    target: FeatureHistogram
    scores: FeatureScores
    true_weights: Weights | None = None

    @property
    def args(self):
        return self.components, self.target, self.scores


def edges(bins: int = 10, score_range=(0.0, 1.0)) -> np.ndarray:
    return np.linspace(score_range[0], score_range[1], bins + 1)


def random_instance(seed: int, n: int = 3, bins: int = 10, d: int = 10) -> Instance:
    """Independent random component and target histograms with uniform scores."""
    rng = np.random.default_rng(seed)
    e = edges(bins)
    comps = tuple(FeatureHistogram(e, rng.dirichlet(np.ones(bins))) for _ in range(n))
    target = FeatureHistogram(e, rng.dirichlet(np.ones(bins)))
    scores = FeatureScores("synthetic", [f"q{j}" for j in range(d)], rng.random((n, d)), rng.random(d))
    return Instance(comps, target, scores)


def mixture_instance(seed: int, n: int = 3, bins: int = 10, d: int = 10, min_weight: float = 0.05) -> Instance:
    """Target is an exact convex combination of the components.

    Components are drawn until their mass matrix has full rank, so the mixing
    weights are the unique zero-divergence point.
    """
    rng = np.random.default_rng(seed)
    e = edges(bins)
    while True:
        masses = rng.dirichlet(np.ones(bins), size=n)
        if np.linalg.matrix_rank(masses) == n:
            break
    w = rng.dirichlet(np.ones(n))
    w = min_weight + (1 - n * min_weight) * w
    w = w / w.sum()
    mix = w @ masses
    comps = tuple(FeatureHistogram(e, m) for m in masses)
    target = FeatureHistogram(e, mix / mix.sum())
    ps = rng.random((n, d))
    scores = FeatureScores("synthetic", [f"q{j}" for j in range(d)], ps, w @ ps)
    return Instance(comps, target, scores, Weights(w))
