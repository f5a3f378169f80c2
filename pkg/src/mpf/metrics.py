"""Objective terms for fitting perspective weights to a baseline.

The public functions take domain types and mirror the objective term by term.
:class:`ArrayObjective` evaluates the same quantities on raw arrays, batched
over any number of weight vectors; the optimizer and the grid oracle use it.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import (
    FeatureHistogram,
    FeatureScores,
    HyperParams,
    ObjectiveBreakdown,
    ValidationError,
    Weights,
)


def _check_components(components: Sequence[FeatureHistogram], n: int | None = None) -> None:
    if not components:
        raise ValidationError("need at least one component histogram")
    if n is not None and len(components) != n:
        raise ValidationError(f"{n} weights but {len(components)} components")
    first = components[0]
    for c in components[1:]:
        if not c.same_bins(first):
            raise ValidationError("component histograms have mismatched bin edges")


def compose_histogram(weights: Weights, components: Sequence[FeatureHistogram]) -> FeatureHistogram:
    _check_components(components, weights.n)
    masses = weights.values @ np.stack([c.masses for c in components])
    return FeatureHistogram(components[0].bin_edges, masses / masses.sum())


def smooth(masses: np.ndarray, epsilon: float) -> np.ndarray:
    """Add ``epsilon`` to every bin and renormalize along the last axis."""
    m = np.asarray(masses, dtype=float) + epsilon
    return m / m.sum(axis=-1, keepdims=True)


def kl_from_masses(p: np.ndarray, q: np.ndarray, smoothing_epsilon: float = 1e-9) -> np.ndarray:
    ps = smooth(p, smoothing_epsilon)
    qs = smooth(q, smoothing_epsilon)
    return np.sum(ps * np.log(ps / qs), axis=-1)


def kl_divergence(p: FeatureHistogram, q: FeatureHistogram, smoothing_epsilon: float = 1e-9) -> float:
    """Smoothed KL(p || q) in nats."""
    if not p.same_bins(q):
        raise ValidationError("KL needs histograms over identical bins")
    return float(kl_from_masses(p.masses, q.masses, smoothing_epsilon))


def calibration_error(weights: Weights, scores: FeatureScores) -> float:
    """Mean absolute gap between the weight-composed score and the baseline score."""
    if weights.n != scores.n:
        raise ValidationError(f"{weights.n} weights for {scores.n} perspectives")
    composed = weights.values @ scores.perspective_scores
    return float(np.mean(np.abs(composed - scores.baseline_scores)))


def l2_regularizer(weights: Weights) -> float:
    w = weights.values
    return float(np.sum((w - 1.0 / w.size) ** 2))


def sparsity_penalty(weights: Weights, nonzero_epsilon: float = 1e-3) -> float:
    w = weights.values
    return float(np.count_nonzero(w > nonzero_epsilon) / w.size + (1.0 - w.max()))


def objective(
    weights: Weights,
    components: Sequence[FeatureHistogram],
    target: FeatureHistogram,
    scores: FeatureScores,
    hp: HyperParams,
) -> ObjectiveBreakdown:
    _check_components(components, weights.n)
    composed = compose_histogram(weights, components)
    kl = kl_divergence(composed, target, hp.smoothing_epsilon)
    cal = calibration_error(weights, scores)
    l2 = l2_regularizer(weights)
    sp = sparsity_penalty(weights, hp.nonzero_epsilon)
    total = hp.lambda_kl * kl + hp.lambda_cal * cal + hp.alpha * l2 + hp.beta * sp
    return ObjectiveBreakdown(kl=kl, calibration=cal, l2=l2, sparsity=sp, total=total)


class ArrayObjective:
    """Vectorized objective over weight arrays of shape ``(..., n)``."""

    def __init__(
        self,
        components: np.ndarray,
        target: np.ndarray,
        perspective_scores: np.ndarray,
        baseline_scores: np.ndarray,
        hp: HyperParams,
    ):
        self.components = np.asarray(components, dtype=float)
        self.target = smooth(np.asarray(target, dtype=float), hp.smoothing_epsilon)
        self.log_target = np.log(self.target)
        self.perspective_scores = np.asarray(perspective_scores, dtype=float)
        self.baseline_scores = np.asarray(baseline_scores, dtype=float)
        self.hp = hp
        self.n = self.components.shape[0]
        if self.perspective_scores.shape[0] != self.n:
            raise ValidationError(
                f"{self.n} component histograms but {self.perspective_scores.shape[0]} score rows"
            )
        if self.components.shape[1] != self.target.shape[0]:
            raise ValidationError("component and target histograms have different bin counts")
        if self.perspective_scores.shape[1] != self.baseline_scores.shape[0]:
            raise ValidationError("perspective and baseline score vectors differ in length")

    @classmethod
    def from_domain(
        cls,
        components: Sequence[FeatureHistogram],
        target: FeatureHistogram,
        scores: FeatureScores,
        hp: HyperParams,
    ) -> "ArrayObjective":
        _check_components(components, scores.n)
        if not components[0].same_bins(target):
            raise ValidationError("target histogram bins differ from component bins")
        return cls(
            np.stack([c.masses for c in components]),
            target.masses,
            scores.perspective_scores,
            scores.baseline_scores,
            hp,
        )

    def kl(self, w: np.ndarray) -> np.ndarray:
        p = smooth(w @ self.components, self.hp.smoothing_epsilon)
        return np.sum(p * (np.log(p) - self.log_target), axis=-1)

    def calibration(self, w: np.ndarray) -> np.ndarray:
        return np.mean(np.abs(w @ self.perspective_scores - self.baseline_scores), axis=-1)

    def l2(self, w: np.ndarray) -> np.ndarray:
        return np.sum((w - 1.0 / self.n) ** 2, axis=-1)

    def sparsity(self, w: np.ndarray) -> np.ndarray:
        count = np.count_nonzero(w > self.hp.nonzero_epsilon, axis=-1)
        return count / self.n + (1.0 - np.max(w, axis=-1))

    def smooth_part(self, w: np.ndarray) -> np.ndarray:
        """Every term except the sparsity penalty."""
        hp = self.hp
        out = hp.alpha * self.l2(w)
        if hp.lambda_kl:
            out = out + hp.lambda_kl * self.kl(w)
        if hp.lambda_cal:
            out = out + hp.lambda_cal * self.calibration(w)
        return out

    def total(self, w: np.ndarray) -> np.ndarray:
        return self.smooth_part(w) + self.hp.beta * self.sparsity(w)

    def breakdown(self, w: np.ndarray) -> ObjectiveBreakdown:
        w = np.asarray(w, dtype=float)
        kl = float(self.kl(w))
        cal = float(self.calibration(w))
        l2 = float(self.l2(w))
        sp = float(self.sparsity(w))
        hp = self.hp
        total = hp.lambda_kl * kl + hp.lambda_cal * cal + hp.alpha * l2 + hp.beta * sp
        return ObjectiveBreakdown(kl=kl, calibration=cal, l2=l2, sparsity=sp, total=total)
