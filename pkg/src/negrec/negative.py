"""Negative template generation and positive/negative template distances.

A negative template replaces every label of a positive template with a value
drawn uniformly from the other k-1 labels, so the two never agree at any
position. Verification scores a probe positive template against a stored
negative template with the normalized Hamming-like dissimilarity

    nhd(a, b) = 1 - (1/L) * |{i : a_i == b_i}|

which is high for genuine comparisons because complements of a template
similar to the probe rarely collide with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NegativeTemplate
from .errors import ValidationError


@dataclass
class RandomSource:
    """Randomness for negation: seeded (reproducible) or OS entropy.

    The ``policy`` string is recorded in gallery metadata. A seeded source
    reproduces identical streams for identical seeds; callers that
    parallelize must give each worker its own source.
    """

    generator: np.random.Generator
    policy: str

    @classmethod
    def seeded(cls, seed):
        return cls(np.random.default_rng(seed), "seeded")

    @classmethod
    def os_entropy(cls):
        return cls(np.random.default_rng(), "os-entropy")


def negate_labels(labels, k, generator):
    """Uniform complement draw for a (..., L) uint8 label array."""
    if k < 2:
        raise ValidationError(f"negation requires k >= 2, got {k}")
    labels = np.asarray(labels)
    # shift by r in 1..k-1 (mod k): uniform over the k-1 values != label
    r = generator.integers(1, k, size=labels.shape, dtype=np.int64)
    return ((labels.astype(np.int64) - 1 + r) % k + 1).astype(np.uint8)


def negate(t_plus, rng):
    """Generate a fresh negative template from a positive one."""
    labels = negate_labels(t_plus.labels, t_plus.k, rng.generator)
    return NegativeTemplate(subject_id=t_plus.subject_id, labels=labels, k=t_plus.k)


def _check_comparable(a, b):
    if a.length != b.length:
        raise ValidationError(
            f"template lengths differ: {a.length} vs {b.length}"
        )
    if a.k != b.k:
        raise ValidationError(f"template alphabets differ: k={a.k} vs k={b.k}")


def nhd(t_plus, t_minus):
    """Normalized Hamming-like dissimilarity in [0, 1]; genuine scores high."""
    _check_comparable(t_plus, t_minus)
    if t_plus.length == 0:
        raise ValidationError("cannot score zero-length templates")
    collisions = int(np.count_nonzero(t_plus.labels == t_minus.labels))
    return 1.0 - collisions / t_plus.length


def positive_hd(a, b):
    """Plain Hamming distance between two positive templates."""
    _check_comparable(a, b)
    return int(np.count_nonzero(a.labels != b.labels))


def nhd_matrix(probe_labels, gallery_labels):
    """Pairwise nhd between (n, L) probe and (m, L) gallery label matrices."""
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    if probe_labels.shape[1] != gallery_labels.shape[1]:
        raise ValidationError("label matrices must share L")
    length = probe_labels.shape[1]
    collisions = (probe_labels[:, None, :] == gallery_labels[None, :, :]).sum(axis=2)
    return 1.0 - collisions / length


def batch_score(probe, gallery):
    """Score one probe positive template against every gallery entry."""
    md = gallery.metadata
    if probe.k != md.k or probe.length != md.length:
        raise ValidationError(
            f"probe has k={probe.k}, L={probe.length}; gallery metadata says "
            f"k={md.k}, L={md.length}"
        )
    subjects = sorted(gallery.entries)
    if not subjects:
        return {}
    stored = np.stack([gallery.entries[s].labels for s in subjects])
    scores = nhd_matrix(probe.labels[None, :], stored)[0]
    return {s: float(v) for s, v in zip(subjects, scores)}
