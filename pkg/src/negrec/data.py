"""Core domain types, embedding file I/O, gallery persistence and fold splits.

File formats
------------
Embedding CSV: header ``subject_id,capture_id[,attr:<name>...],f0,...,f{d-1}``,
UTF-8, decimal floats. Attribute columns carry an ``attr:`` prefix and hold
opaque categorical strings.

Embedding binary (magic ``NEGT``): version u16, d u32, record count u64, then
per record: subject id and capture id (u16 length + UTF-8 bytes each),
attribute count u16, per attribute name/value (u16 length + UTF-8 bytes),
d little-endian float32 values.

Gallery binary (magic ``NGAL``): version u16, k u8, L u32, quantizer
fingerprint (32 bytes), model fingerprint (32 bytes), seed policy
(u16 length + UTF-8 bytes), then entries until EOF: subject id
(u16 length + UTF-8 bytes) + L label octets. Labels are 1..k, one octet
each, so k <= 255.

All integers are little-endian. Embedding values are float32 and are
L2-normalized on load; vectors whose norm is already within 1e-4 of 1 are
left untouched so that save/load round-trips are bit-exact.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

EMBEDDING_MAGIC = b"NEGT"
GALLERY_MAGIC = b"NGAL"
FORMAT_VERSION = 1

# Norm slack under which a vector counts as already unit-length. Wide enough
# for float32 rounding of a normalized vector at any d we support.
_UNIT_NORM_TOL = 1e-4


def _check_finite(values, context):
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{context}: values contain NaN or infinity")


def unit_normalize(values):
    """L2-normalize a vector, leaving already-unit vectors bit-untouched."""
    values = np.asarray(values, dtype=np.float32)
    norm = float(np.linalg.norm(values.astype(np.float64)))
    if norm == 0.0:
        raise ValidationError("cannot normalize an all-zero vector")
    if abs(norm - 1.0) <= _UNIT_NORM_TOL:
        return values
    return (values.astype(np.float64) / norm).astype(np.float32)


@dataclass(frozen=True)
class Embedding:
    """One real-valued feature vector for a single biometric capture."""

    subject_id: str
    capture_id: str
    values: np.ndarray  # float32, shape (d,)
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        _check_finite(values, f"embedding {self.subject_id}/{self.capture_id}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class EnlargedEmbedding:
    """Bounded higher-dimensional embedding; every entry lies in [-1, 1]."""

    subject_id: str
    capture_id: str
    values: np.ndarray  # float64, shape (L,)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        _check_finite(values, "enlarged embedding")
        if values.size and (values.min() < -1.0 or values.max() > 1.0):
            raise ValidationError("enlarged embedding entries must lie in [-1, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return self.values.shape[0]


def _validate_labels(labels, k, what):
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise ValidationError(f"{what}: labels must be integers")
    if not (2 <= k <= 255):
        raise ValidationError(f"{what}: k must be in [2, 255], got {k}")
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise ValidationError(f"{what}: labels must lie in 1..{k}")
    labels = labels.astype(np.uint8)
    labels.setflags(write=False)
    return labels


@dataclass(frozen=True)
class PositiveTemplate:
    """Discretized enlarged embedding: label vector over {1..k}."""

    subject_id: str
    capture_id: str
    labels: np.ndarray  # uint8, shape (L,)
    k: int

    def __post_init__(self):
        object.__setattr__(
            self, "labels", _validate_labels(self.labels, self.k, "positive template")
        )

    @property
    def length(self):
        return self.labels.shape[0]


@dataclass(frozen=True)
class NegativeTemplate:
    """Complementary label vector: never equals its source template anywhere."""

    subject_id: str
    labels: np.ndarray  # uint8, shape (L,)
    k: int

    def __post_init__(self):
        object.__setattr__(
            self, "labels", _validate_labels(self.labels, self.k, "negative template")
        )

    @property
    def length(self):
        return self.labels.shape[0]


@dataclass(frozen=True)
class GalleryMetadata:
    k: int
    length: int
    quantizer_fingerprint: bytes  # 32-byte hash
    model_fingerprint: bytes  # 32-byte hash
    format_version: int = FORMAT_VERSION
    seed_policy: str = "os-entropy"

    def __post_init__(self):
        for name in ("quantizer_fingerprint", "model_fingerprint"):
            fp = getattr(self, name)
            if not isinstance(fp, bytes) or len(fp) != 32:
                raise ValidationError(f"gallery metadata: {name} must be 32 bytes")


@dataclass(frozen=True)
class Gallery:
    """Per-subject stored negative templates plus pipeline provenance."""

    entries: dict  # subject_id -> NegativeTemplate
    metadata: GalleryMetadata

    def __post_init__(self):
        for sid, tpl in self.entries.items():
            if tpl.k != self.metadata.k or tpl.length != self.metadata.length:
                raise ValidationError(
                    f"gallery entry {sid!r} has k={tpl.k}, L={tpl.length}; "
                    f"metadata says k={self.metadata.k}, L={self.metadata.length}"
                )

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class DatasetSplit:
    """Subject-disjoint fold assignment: subject_id -> fold index."""

    assignments: dict
    n_folds: int

    def subjects_in_fold(self, fold):
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def split_embeddings(self, embeddings, test_fold):
        """Partition embeddings into (train, test) around one test fold."""
        train, test = [], []
        for e in embeddings:
            fold = self.assignments.get(e.subject_id)
            if fold is None:
                raise ValidationError(f"subject {e.subject_id!r} not in the split")
            (test if fold == test_fold else train).append(e)
        return train, test


# ---------------------------------------------------------------------------
# Embedding CSV I/O


def _parse_header(header, path):
    if header[:2] != ["subject_id", "capture_id"]:
        raise ParseError(
            "header must start with 'subject_id,capture_id'", path=path, line=1
        )
    attr_names = []
    i = 2
    while i < len(header) and header[i].startswith("attr:"):
        attr_names.append(header[i][len("attr:"):])
        i += 1
    feature_cols = header[i:]
    expected = [f"f{j}" for j in range(len(feature_cols))]
    if feature_cols != expected:
        raise ParseError(
            f"feature columns must be f0..f{len(feature_cols) - 1}", path=path, line=1
        )
    if not feature_cols:
        raise ParseError("no feature columns found", path=path, line=1)
    return attr_names, len(feature_cols)


def _load_embeddings_csv(path, normalize):
    embeddings = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=path) from None
        attr_names, d = _parse_header(header, path)
        n_cols = 2 + len(attr_names) + d
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise ValidationError(
                    f"{path}, line {lineno}: expected {n_cols} columns "
                    f"(d={d}), got {len(row)}"
                )
            try:
                values = np.array(row[2 + len(attr_names):], dtype=np.float32)
            except ValueError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
            if not np.all(np.isfinite(values)):
                raise ValidationError(
                    f"{path}, line {lineno}: non-finite feature value"
                )
            attrs = dict(zip(attr_names, row[2:2 + len(attr_names)]))
            if normalize:
                values = unit_normalize(values)
            embeddings.append(Embedding(row[0], row[1], values, attrs))
    return embeddings


def _attr_names_of(embeddings):
    names = sorted(embeddings[0].attributes) if embeddings else []
    for e in embeddings:
        if sorted(e.attributes) != names:
            raise ValidationError(
                f"embedding {e.subject_id}/{e.capture_id} has attribute set "
                f"{sorted(e.attributes)}, expected {names}"
            )
    return names


def _save_embeddings_csv(embeddings, path):
    names = _attr_names_of(embeddings)
    d = embeddings[0].dim if embeddings else 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = ["subject_id", "capture_id"]
        header += [f"attr:{n}" for n in names]
        header += [f"f{j}" for j in range(d)]
        writer.writerow(header)
        for e in embeddings:
            row = [e.subject_id, e.capture_id]
            row += [e.attributes[n] for n in names]
            # repr of float32 round-trips exactly through the CSV
            row += [str(v) for v in e.values]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Embedding binary I/O


def _write_str(fh, s):
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValidationError(f"string too long for format: {s[:32]!r}...")
    fh.write(struct.pack("<H", len(data)))
    fh.write(data)


def _read_exact(fh, n, path, what):
    data = fh.read(n)
    if len(data) != n:
        raise ParseError(f"truncated file while reading {what}", path=path)
    return data


def _read_str(fh, path, what):
    (n,) = struct.unpack("<H", _read_exact(fh, 2, path, what))
    return _read_exact(fh, n, path, what).decode("utf-8")


def _save_embeddings_binary(embeddings, path):
    if not embeddings:
        raise ValidationError("cannot save an empty embedding list to binary")
    d = embeddings[0].dim
    _attr_names_of(embeddings)
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<HIQ", FORMAT_VERSION, d, len(embeddings)))
        for e in embeddings:
            if e.dim != d:
                raise ValidationError(
                    f"embedding {e.subject_id}/{e.capture_id} has d={e.dim}, "
                    f"expected {d}"
                )
            _write_str(fh, e.subject_id)
            _write_str(fh, e.capture_id)
            fh.write(struct.pack("<H", len(e.attributes)))
            for name in sorted(e.attributes):
                _write_str(fh, name)
                _write_str(fh, e.attributes[name])
            fh.write(e.values.astype("<f4").tobytes())


def _load_embeddings_binary(path, normalize):
    embeddings = []
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBEDDING_MAGIC:
            raise ParseError(f"bad magic {magic!r}", path=path, offset=0)
        version, d, count = struct.unpack("<HIQ", _read_exact(fh, 14, path, "header"))
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported format version {version}", path=path)
        for i in range(count):
            sid = _read_str(fh, path, f"record {i} subject id")
            cid = _read_str(fh, path, f"record {i} capture id")
            (n_attrs,) = struct.unpack(
                "<H", _read_exact(fh, 2, path, f"record {i} attributes")
            )
            attrs = {}
            for _ in range(n_attrs):
                name = _read_str(fh, path, f"record {i} attribute name")
                attrs[name] = _read_str(fh, path, f"record {i} attribute value")
            raw = _read_exact(fh, 4 * d, path, f"record {i} values")
            values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            if not np.all(np.isfinite(values)):
                raise ValidationError(f"{path}: record {i} ({sid}/{cid}) is non-finite")
            if normalize:
                values = unit_normalize(values)
            embeddings.append(Embedding(sid, cid, values, attrs))
        if fh.read(1):
            raise ParseError("trailing bytes after final record", path=path)
    return embeddings


def load_embeddings(path, format="csv", normalize=True):
    """Load embeddings from ``path``; format is 'csv' or 'binary'.

    Vectors are L2-normalized unless ``normalize=False``; already-unit
    vectors are left bit-identical.
    """
    if format == "csv":
        return _load_embeddings_csv(path, normalize)
    if format == "binary":
        return _load_embeddings_binary(path, normalize)
    raise ValidationError(f"unknown embedding format {format!r}")


def save_embeddings(embeddings, path, format="csv"):
    """Write embeddings to ``path`` in the CSV or binary format."""
    dims = {e.dim for e in embeddings}
    if len(dims) > 1:
        raise ValidationError(f"embeddings have mixed dimensions {sorted(dims)}")
    if format == "csv":
        _save_embeddings_csv(embeddings, path)
    elif format == "binary":
        _save_embeddings_binary(embeddings, path)
    else:
        raise ValidationError(f"unknown embedding format {format!r}")


def guess_format(path):
    """Pick 'csv' or 'binary' from a file extension."""
    p = str(path).lower()
    return "csv" if p.endswith(".csv") else "binary"


# ---------------------------------------------------------------------------
# Gallery I/O


def save_gallery(gallery, path):
    md = gallery.metadata
    with open(path, "wb") as fh:
        fh.write(GALLERY_MAGIC)
        fh.write(struct.pack("<HBI", md.format_version, md.k, md.length))
        fh.write(md.quantizer_fingerprint)
        fh.write(md.model_fingerprint)
        _write_str(fh, md.seed_policy)
        for sid in sorted(gallery.entries):
            _write_str(fh, sid)
            fh.write(gallery.entries[sid].labels.tobytes())


def load_gallery(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GALLERY_MAGIC:
            raise ParseError(f"bad magic {magic!r}", path=path, offset=0)
        version, k, length = struct.unpack("<HBI", _read_exact(fh, 7, path, "header"))
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported gallery version {version}", path=path)
        q_fp = _read_exact(fh, 32, path, "quantizer fingerprint")
        m_fp = _read_exact(fh, 32, path, "model fingerprint")
        seed_policy = _read_str(fh, path, "seed policy")
        entries = {}
        while True:
            prefix = fh.read(2)
            if not prefix:
                break
            if len(prefix) != 2:
                raise ParseError("truncated entry header", path=path)
            (n,) = struct.unpack("<H", prefix)
            sid = _read_exact(fh, n, path, "entry subject id").decode("utf-8")
            raw = fh.read(length)
            if len(raw) != length:
                raise ParseError(
                    f"entry {sid!r} has {len(raw)} labels, expected {length}",
                    path=path,
                )
            labels = np.frombuffer(raw, dtype=np.uint8)
            entries[sid] = NegativeTemplate(sid, labels, k)
    metadata = GalleryMetadata(
        k=k,
        length=length,
        quantizer_fingerprint=q_fp,
        model_fingerprint=m_fp,
        format_version=version,
        seed_policy=seed_policy,
    )
    return Gallery(entries=entries, metadata=metadata)


# ---------------------------------------------------------------------------
# Fold splitting


def make_subject_disjoint_folds(embeddings, n_folds, seed):
    """Assign each subject to exactly one of ``n_folds`` folds.

    Fold sizes differ by at most one subject; the assignment is a pure
    function of (subject set, n_folds, seed).
    """
    if n_folds < 2:
        raise ValidationError(f"need at least 2 folds, got {n_folds}")
    subjects = sorted({e.subject_id for e in embeddings})
    if len(subjects) < n_folds:
        raise ValidationError(
            f"need at least {n_folds} distinct subjects, got {len(subjects)}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    assignments = {subjects[idx]: i % n_folds for i, idx in enumerate(order)}
    return DatasetSplit(assignments=assignments, n_folds=n_folds)


def group_by_subject(embeddings):
    """Map subject_id -> list of embeddings, captures sorted by capture_id."""
    groups = {}
    for e in embeddings:
        groups.setdefault(e.subject_id, []).append(e)
    for sid in groups:
        groups[sid].sort(key=lambda e: e.capture_id)
    return groups
