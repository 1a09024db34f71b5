"""End-to-end template pipeline: enlarge -> discretize -> negate.

A fitted :class:`Pipeline` turns raw embeddings into positive templates
(probe side) and enrolls subjects by storing one freshly negated template
for a reference capture (gallery side). Re-enrolling draws a fresh negative
template by design.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .data import Gallery, GalleryMetadata, PositiveTemplate, group_by_subject
from .enlargement import (
    EnlargementNetwork,
    TrainingConfig,
    enlarge_batch,
    random_enlargement,
    train_enlargement,
)
from .errors import ValidationError
from .negative import negate
from .quantizer import Quantizer, discretize_matrix, fit_quantizer

ENLARGEMENT_KINDS = ("trained", "random")


@dataclass(frozen=True)
class PipelineConfig:
    """Template-generation parameters: bin count k, template length L,
    enlargement path and its training setup."""

    k: int = 3
    length: int = 512
    enlargement: str = "trained"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0

    def __post_init__(self):
        if self.enlargement not in ENLARGEMENT_KINDS:
            raise ValidationError(
                f"enlargement must be one of {ENLARGEMENT_KINDS}, "
                f"got {self.enlargement!r}"
            )


@dataclass(frozen=True)
class Pipeline:
    network: EnlargementNetwork
    quantizer: Quantizer

    @property
    def k(self):
        return self.quantizer.k

    @property
    def length(self):
        return self.quantizer.length

    def positive_templates(self, embeddings):
        """Positive templates for a list of embeddings, order preserved."""
        enlarged = enlarge_batch(self.network, embeddings)
        if not enlarged:
            return []
        labels = discretize_matrix(
            self.quantizer, np.stack([v.values for v in enlarged])
        )
        return [
            PositiveTemplate(e.subject_id, e.capture_id, row, self.k)
            for e, row in zip(embeddings, labels)
        ]

    def enroll_gallery(self, embeddings, rng, reference_policy="first-capture"):
        """Enroll one negative template per subject.

        The reference capture is the first by capture id. Returns the gallery
        plus a map subject_id -> reference capture_id so evaluation can skip
        self-comparisons.
        """
        if reference_policy != "first-capture":
            raise ValidationError(f"unknown reference policy {reference_policy!r}")
        groups = group_by_subject(embeddings)
        if not groups:
            raise ValidationError("cannot enroll an empty embedding set")
        references = [groups[sid][0] for sid in sorted(groups)]
        positives = self.positive_templates(references)
        entries = {}
        for tpl in positives:
            entries[tpl.subject_id] = negate(tpl, rng)
        metadata = GalleryMetadata(
            k=self.k,
            length=self.length,
            quantizer_fingerprint=self.quantizer.fingerprint,
            model_fingerprint=self.network.fingerprint,
            seed_policy=rng.policy,
        )
        gallery = Gallery(entries=entries, metadata=metadata)
        reference_ids = {e.subject_id: e.capture_id for e in references}
        return gallery, reference_ids


def build_pipeline(train_embeddings, config):
    """Fit the enlargement network and quantizer on training embeddings."""
    if not train_embeddings:
        raise ValidationError("cannot build a pipeline without training embeddings")
    d = train_embeddings[0].dim
    if config.enlargement == "trained":
        training = dataclasses.replace(config.training, seed=config.seed)
        network, _ = train_enlargement(train_embeddings, config.length, training)
    else:
        network = random_enlargement(d, config.length, config.seed)
    enlarged = enlarge_batch(network, train_embeddings)
    quantizer = fit_quantizer(enlarged, config.k)
    return Pipeline(network=network, quantizer=quantizer)
