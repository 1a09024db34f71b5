"""Per-feature quantile binning of enlarged embeddings into discrete labels.

A quantizer holds, for each of the L feature slots, k-1 sorted cut points
placed at the m/k quantiles (m = 1..k-1, linear-interpolation convention) of
the training values for that feature. Discretization assigns label
``1 + (number of edges strictly below the value)``; values equal to an edge
fall into the lower bin, so a constant feature maps everything to label 1.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .data import PositiveTemplate
from .errors import ParseError, ValidationError

QUANTIZER_MAGIC = b"NQNT"
QUANTIZER_VERSION = 1


@dataclass(frozen=True)
class Quantizer:
    k: int
    edges: np.ndarray  # float64, shape (L, k-1), non-decreasing per row

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        if not (2 <= self.k <= 255):
            raise ValidationError(f"k must be in [2, 255], got {self.k}")
        if edges.ndim != 2 or edges.shape[1] != self.k - 1:
            raise ValidationError(
                f"edges must have shape (L, k-1), got {edges.shape} for k={self.k}"
            )
        if edges.size and np.any(np.diff(edges, axis=1) < 0):
            raise ValidationError("edges must be non-decreasing per feature")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def length(self):
        return self.edges.shape[0]

    @property
    def fingerprint(self):
        return hashlib.sha256(self._payload()).digest()

    def _payload(self):
        header = QUANTIZER_MAGIC + struct.pack(
            "<HBI", QUANTIZER_VERSION, self.k, self.length
        )
        return header + self.edges.astype("<f8").tobytes()


def fit_quantizer(train, k):
    """Fit per-feature quantile edges on enlarged training vectors."""
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    if k > 255:
        raise ValidationError(f"k must be at most 255, got {k}")
    if not train:
        raise ValidationError("cannot fit a quantizer on an empty training set")
    matrix = np.stack([t.values for t in train])  # (n, L)
    qs = np.arange(1, k) / k
    edges = np.quantile(matrix, qs, axis=0, method="linear").T  # (L, k-1)
    return Quantizer(k=k, edges=edges)


def discretize(quantizer, enlarged):
    """Map an enlarged embedding to a positive template with labels 1..k."""
    values = enlarged.values
    if values.shape[0] != quantizer.length:
        raise ValidationError(
            f"enlarged embedding has length {values.shape[0]}, "
            f"quantizer expects {quantizer.length}"
        )
    labels = discretize_matrix(quantizer, values[None, :])[0]
    return PositiveTemplate(
        subject_id=enlarged.subject_id,
        capture_id=enlarged.capture_id,
        labels=labels,
        k=quantizer.k,
    )


def discretize_matrix(quantizer, values):
    """Vectorized discretization of a (n, L) value matrix to uint8 labels."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != quantizer.length:
        raise ValidationError(
            f"value matrix has shape {values.shape}, "
            f"quantizer expects (n, {quantizer.length})"
        )
    # label = 1 + count of edges strictly below the value (ties go low)
    labels = 1 + np.sum(quantizer.edges[None, :, :] < values[:, :, None], axis=2)
    return labels.astype(np.uint8)


def save_quantizer(quantizer, path):
    payload = quantizer._payload()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())


def load_quantizer(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != QUANTIZER_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}", path=path, offset=0)
    if len(data) < 11 + 32:
        raise ParseError("truncated quantizer file", path=path)
    version, k, length = struct.unpack("<HBI", data[4:11])
    if version != QUANTIZER_VERSION:
        raise ParseError(f"unsupported quantizer version {version}", path=path)
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ParseError("quantizer fingerprint does not match contents", path=path)
    body = payload[11:]
    expected = length * (k - 1) * 8
    if len(body) != expected:
        raise ParseError(
            f"edge block has {len(body)} bytes, expected {expected}", path=path
        )
    edges = np.frombuffer(body, dtype="<f8").reshape(length, k - 1)
    return Quantizer(k=k, edges=edges)
