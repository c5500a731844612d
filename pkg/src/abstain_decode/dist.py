"""Numerical primitives: softmax, entropy and the logit-mixing rules.

Logit and probability vectors are plain 1-D float64 numpy arrays. Every
function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, InvalidInputError, ShapeError

PROB_TOL = 1e-9
WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class StepWeights:
    """Per-step weights for the parametric, contextual and abstention logits."""

    w_p: float
    w_c: float
    w_a: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_p, self.w_c, self.w_a)

    def total(self) -> float:
        return self.w_p + self.w_c + self.w_a

    def in_simplex(self, tol: float = WEIGHT_TOL) -> bool:
        return all(-tol <= w <= 1 + tol for w in self.as_tuple()) and abs(self.total() - 1) <= tol


def as_logits(values) -> np.ndarray:
    """Validate and convert to a finite 1-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"logit vector must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("logit vector contains non-finite entries")
    return arr


def as_probs(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError(f"probability vector must be non-empty 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise InvalidInputError("probability entries must lie in [0, 1]")
    if abs(arr.sum() - 1.0) > PROB_TOL:
        raise InvalidInputError(f"probabilities sum to {arr.sum()!r}, not 1")
    return arr


def _same_length(*vectors: np.ndarray) -> None:
    sizes = {v.shape[0] for v in vectors}
    if len(sizes) != 1:
        raise ShapeError(f"vector lengths differ: {sorted(sizes)}")


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    z = as_logits(logits) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def entropy(probs) -> float:
    """Shannon entropy in nats, with 0 * ln 0 taken as 0."""
    p = as_probs(probs)
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    # rounding can push a one-hot slightly negative or a uniform slightly past ln|V|
    return min(max(h, 0.0), float(np.log(p.size)))


def logit_entropy(logits) -> float:
    """Entropy of the softmax image of a logit vector (T = 1)."""
    return entropy(softmax(logits))


def mix_three(weights: StepWeights, d_p, d_c, d_a) -> np.ndarray:
    """Affine combination ``w_p*d_p + w_c*d_c + w_a*d_a`` in logit space."""
    d_p, d_c, d_a = as_logits(d_p), as_logits(d_c), as_logits(d_a)
    _same_length(d_p, d_c, d_a)
    if abs(weights.total() - 1.0) > WEIGHT_TOL:
        raise InvalidArgumentError(f"weights sum to {weights.total()!r}, not 1")
    return weights.w_p * d_p + weights.w_c * d_c + weights.w_a * d_a


def contrast(d_p, d_c, w_c: float) -> np.ndarray:
    """Two-source contrastive ensemble ``d_p + w_c * (d_c - d_p)``."""
    d_p, d_c = as_logits(d_p), as_logits(d_c)
    _same_length(d_p, d_c)
    return d_p + w_c * (d_c - d_p)


def cad_mix(d_p, d_c, w: float) -> np.ndarray:
    """Context-aware decoding: ``d_c + w * (d_c - d_p)``."""
    d_p, d_c = as_logits(d_p), as_logits(d_c)
    _same_length(d_p, d_c)
    return d_c + w * (d_c - d_p)


def acd_weight(h_p: float, h_c: float) -> float:
    """Contextual weight of adaptive contrastive decoding.

    ``1 - h_c / (h_p + h_c)``; when both entropies are zero neither source is
    preferred and 0.5 is returned.
    """
    if h_p < 0 or h_c < 0:
        raise InvalidArgumentError("entropies must be non-negative")
    total = h_p + h_c
    if total == 0:
        return 0.5
    return 1.0 - h_c / total


def acda_weights(h_p: float, h_c: float, h_a: float) -> StepWeights:
    """ACD extended with an abstention source, using the formulas as published.

    ``w_c = 1 - h_c/S`` and ``w_a = 1 - h_a/S`` with ``S = h_p + h_c + h_a``;
    ``w_p`` absorbs the remainder and goes negative whenever ``h_p > 0``.
    """
    if h_p < 0 or h_c < 0 or h_a < 0:
        raise InvalidArgumentError("entropies must be non-negative")
    total = h_p + h_c + h_a
    if total == 0:
        third = 1.0 / 3.0
        return StepWeights(third, third, 1.0 - 2 * third)
    w_c = 1.0 - h_c / total
    w_a = 1.0 - h_a / total
    return StepWeights(1.0 - w_c - w_a, w_c, w_a)
