"""Closed-form model of negative-domain comparison scores.

Let two positive templates of length L over alphabet {1..k} disagree at D
positions. After one of them is replaced by a uniform complement draw, the
equal positions can never collide, and each of the D differing positions
independently stays non-colliding with probability (k-2)/(k-1). The
negative-domain Hamming distance D' therefore satisfies

    D' = (L - D) + M,   M ~ Binomial(D, (k-2)/(k-1)),   D' in [L-D, L],

and the comparison score is nhd = D'/L. The functions here evaluate that
distribution (in log space, stable up to L = 10**6), transform whole
positive-domain distance distributions into predicted score distributions,
and provide exact rational evaluation for small-instance cross-checks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from math import comb

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ValidationError


def _check_params(length, distance, k):
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    if length < 0:
        raise ValidationError(f"L must be non-negative, got {length}")
    if not 0 <= distance <= length:
        raise ValidationError(f"D must lie in [0, {length}], got {distance}")


@dataclass(frozen=True)
class NegativeDistancePMF:
    """Distribution of the negative-domain distance D' given (L, D, k).

    ``d_primes`` spans exactly [L-D, L]; ``probabilities`` aligns with it and
    sums to 1 (entries may be 0, e.g. everything but D'=L-D when k=2).
    """

    length: int
    distance: int
    k: int
    d_primes: np.ndarray
    probabilities: np.ndarray

    def probability_of(self, d_prime):
        lo = self.length - self.distance
        if lo <= d_prime <= self.length:
            return float(self.probabilities[d_prime - lo])
        return 0.0

    def as_dict(self):
        return {int(d): float(p) for d, p in zip(self.d_primes, self.probabilities)}

    def mean(self):
        return float(np.dot(self.d_primes, self.probabilities))

    def variance(self):
        m = self.mean()
        return float(np.dot((self.d_primes - m) ** 2, self.probabilities))

    def mode(self):
        """Most probable D' (smallest one on a tie)."""
        return int(self.d_primes[int(np.argmax(self.probabilities))])


def pmf(length, distance, k):
    """Distribution of D' over [L-D, L], computed in log space."""
    _check_params(length, distance, k)
    mus = np.arange(distance + 1)
    if k == 2 or distance == 0:
        probs = np.zeros(distance + 1)
        probs[0] = 1.0  # non-collision probability (k-2)/(k-1) is 0
    else:
        log_p = np.log(k - 2.0) - np.log(k - 1.0)
        log_q = -np.log(k - 1.0)
        log_comb = (
            gammaln(distance + 1)
            - gammaln(mus + 1)
            - gammaln(distance - mus + 1)
        )
        log_probs = log_comb + mus * log_p + (distance - mus) * log_q
        probs = np.exp(log_probs - logsumexp(log_probs))
    return NegativeDistancePMF(
        length=length,
        distance=distance,
        k=k,
        d_primes=np.arange(length - distance, length + 1),
        probabilities=probs,
    )


def pmf_exact(length, distance, k):
    """Exact rational PMF as a dict D' -> Fraction (small instances)."""
    _check_params(length, distance, k)
    out = {}
    denom = (k - 1) ** distance
    for mu in range(distance + 1):
        numer = comb(distance, mu) * (k - 2) ** mu
        out[length - distance + mu] = Fraction(numer, denom)
    return out


def expected_nhd(length, distance, k):
    """Mean comparison score (L - D + D*(k-2)/(k-1)) / L."""
    _check_params(length, distance, k)
    if length == 0:
        raise ValidationError("expected score is undefined for L = 0")
    return (length - distance + distance * (k - 2) / (k - 1)) / length


@dataclass(frozen=True)
class ScoreDistribution:
    """Probability mass over the score lattice {0, 1/L, ..., 1}."""

    length: int
    k: int
    scores: np.ndarray  # (L+1,), d'/L
    probabilities: np.ndarray  # (L+1,), sums to 1

    def total_variation(self, other_probabilities):
        other = np.asarray(other_probabilities, dtype=np.float64)
        if other.shape != self.probabilities.shape:
            raise ValidationError(
                f"distribution supports differ: {other.shape} vs "
                f"{self.probabilities.shape}"
            )
        return 0.5 * float(np.abs(self.probabilities - other).sum())


def transform_score_distribution(positive_distances, length, k):
    """Predicted negative-domain score distribution for a set of
    positive-domain distances.

    Returns the full mixture sum_D weight(D) * pmf(L, D, k) rather than only
    each distance's most probable score; the mode view is still available
    per distance via ``pmf(...).mode()``.
    """
    distances = np.asarray(list(positive_distances), dtype=np.int64)
    if distances.size == 0:
        raise ValidationError("need at least one positive-domain distance")
    if distances.min() < 0 or distances.max() > length:
        raise ValidationError(f"distances must lie in [0, {length}]")
    mass = np.zeros(length + 1)
    values, counts = np.unique(distances, return_counts=True)
    for d, c in zip(values, counts):
        component = pmf(length, int(d), k)
        mass[length - int(d):] += (c / distances.size) * component.probabilities
    return ScoreDistribution(
        length=length,
        k=k,
        scores=np.arange(length + 1) / length,
        probabilities=mass,
    )


def empirical_score_distribution(scores, length, k):
    """Empirical mass over the same {0..L}/L lattice as the transform."""
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        raise ValidationError("need at least one score")
    d_primes = np.rint(scores * length).astype(np.int64)
    if d_primes.min() < 0 or d_primes.max() > length:
        raise ValidationError("scores must lie on the {0..L}/L lattice")
    mass = np.bincount(d_primes, minlength=length + 1) / scores.size
    return ScoreDistribution(
        length=length,
        k=k,
        scores=np.arange(length + 1) / length,
        probabilities=mass,
    )


def write_distribution_csv(path, scores, probabilities):
    """Export (score, probability) rows for plotting parity."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score", "probability"])
        for s, p in zip(scores, probabilities):
            col = int(s) if isinstance(s, (int, np.integer)) else repr(float(s))
            writer.writerow([col, repr(float(p))])
