"""Embedding matrices, paired datasets and their on-disk formats.

Two matrix formats are supported:

* ``emb1``: little-endian binary. 24-byte header (``b"EMB1"``, u16 version=1,
  u8 dtype, u8 reserved, u64 n, u64 d) followed by ``n*d`` row-major values.
  dtype 0 is float32 (the default), dtype 1 is float64.
* ``csv``: no header, one embedding per line, comma separated.

Everything is held in float64 in memory regardless of the storage dtype.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gapkit.errors import (
    BadMagicError,
    DataError,
    DimensionMismatchError,
    NonFiniteError,
    TruncatedPayloadError,
    UnsupportedFormatError,
    ZeroNormRowError,
)

MAGIC = b"EMB1"
VERSION = 1
HEADER = struct.Struct("<4sHBBQQ")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
FORMATS = ("emb1", "csv")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EmbeddingMatrix:
    """n x d matrix of embeddings, one per row. Immutable once built."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim == 1:
            a = a[None, :]
        if a.ndim != 2:
            raise DimensionMismatchError(f"expected a 2-D matrix, got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise DimensionMismatchError(f"empty matrix of shape {a.shape}")
        bad = ~np.isfinite(a)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise NonFiniteError(f"non-finite value at row {r}, column {c}")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.n

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def take(self, idx) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.data[np.asarray(idx)])


def as_array(m) -> np.ndarray:
    """Float64 view of an EmbeddingMatrix or anything array-like."""
    if isinstance(m, EmbeddingMatrix):
        return m.data
    a = np.asarray(m, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


@dataclass(frozen=True)
class PairedDataset:
    """Row-aligned image and text embeddings with stable item ids."""

    images: EmbeddingMatrix
    texts: EmbeddingMatrix
    ids: tuple = None

    def __post_init__(self):
        images = self.images if isinstance(self.images, EmbeddingMatrix) else EmbeddingMatrix(self.images)
        texts = self.texts if isinstance(self.texts, EmbeddingMatrix) else EmbeddingMatrix(self.texts)
        if images.n != texts.n:
            raise DimensionMismatchError(f"{images.n} images but {texts.n} texts")
        if images.d != texts.d:
            raise DimensionMismatchError(f"image dim {images.d} != text dim {texts.d}")
        ids = tuple(str(i) for i in range(images.n)) if self.ids is None else tuple(map(str, self.ids))
        if len(ids) != images.n:
            raise DimensionMismatchError(f"{len(ids)} ids for {images.n} pairs")
        if len(set(ids)) != len(ids):
            raise DataError("pair ids are not unique")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "texts", texts)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.images.n

    @property
    def d(self) -> int:
        return self.images.d

    def take(self, idx) -> "PairedDataset":
        idx = np.asarray(idx)
        return PairedDataset(self.images.take(idx), self.texts.take(idx), [self.ids[i] for i in idx])


@dataclass(frozen=True)
class Judgment:
    image_id: str
    candidate: int
    score: float


@dataclass(frozen=True)
class HumanJudgmentSet:
    """Mean human scores for (image, candidate caption) pairs.

    ``candidates`` holds the caption embeddings; ``Judgment.candidate`` indexes
    its rows.
    """

    records: tuple
    candidates: EmbeddingMatrix = None

    def validate(self, ds: PairedDataset) -> None:
        known = set(ds.ids)
        for r in self.records:
            if r.image_id not in known:
                raise DataError(f"judgment references unknown image id {r.image_id!r}")
            if not np.isfinite(r.score):
                raise NonFiniteError(f"non-finite human score for {r.image_id!r}")
            if self.candidates is not None and not 0 <= r.candidate < self.candidates.n:
                raise DataError(f"candidate index {r.candidate} out of range")

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=np.float64)


@dataclass(frozen=True)
class ClassTemplateSet:
    """Per-class template text embeddings plus the label of every image."""

    class_names: tuple
    class_text_embeddings: tuple  # one (k_c, d) array per class
    image_labels: np.ndarray = field(default=None)

    def __post_init__(self):
        embs = tuple(as_array(e) for e in self.class_text_embeddings)
        if len(embs) != len(self.class_names):
            raise DimensionMismatchError("one template block is needed per class")
        for name, e in zip(self.class_names, embs):
            if e.shape[0] < 1:
                raise DataError(f"class {name!r} has no template embeddings")
        if len({e.shape[1] for e in embs}) > 1:
            raise DimensionMismatchError("template embeddings disagree on dimension")
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "class_text_embeddings", embs)
        if self.image_labels is not None:
            labels = np.asarray(self.image_labels, dtype=np.int64)
            if labels.size and (labels.min() < 0 or labels.max() >= len(embs)):
                raise DataError("image label outside the class range")
            object.__setattr__(self, "image_labels", labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def unit_rows(a: np.ndarray, context="row") -> np.ndarray:
    """Row-normalize a raw float array; ``context`` names rows in the error."""
    norms = np.linalg.norm(a, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormRowError(zero[0], context)
    return a / norms[:, None]


def normalize_rows(m) -> EmbeddingMatrix:
    """Scale every row to unit Euclidean norm.

    Raises ZeroNormRowError naming the first zero row.
    """
    return EmbeddingMatrix(unit_rows(as_array(m)))


def infer_format(path) -> str:
    ext = Path(path).suffix.lower().lstrip(".")
    if ext in ("emb1", "emb", "bin"):
        return "emb1"
    if ext in ("csv", "txt"):
        return "csv"
    raise UnsupportedFormatError(f"cannot infer format from {path!r}; pass format explicitly")


def load_embeddings(path, format=None) -> EmbeddingMatrix:
    fmt = format or infer_format(path)
    if fmt == "emb1":
        return _load_emb1(path)
    if fmt == "csv":
        return _load_csv(path)
    raise UnsupportedFormatError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def _load_emb1(path) -> EmbeddingMatrix:
    with open(path, "rb") as f:
        head = f.read(HEADER.size)
        if len(head) < 4 or head[:4] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {head[:4]!r}")
        if len(head) < HEADER.size:
            raise TruncatedPayloadError(f"{path}: truncated header")
        _, version, dtype_code, _, n, d = HEADER.unpack(head)
        if version != VERSION:
            raise UnsupportedFormatError(f"{path}: unsupported EMB1 version {version}")
        if dtype_code not in DTYPES:
            raise UnsupportedFormatError(f"{path}: unsupported dtype code {dtype_code}")
        dtype = DTYPES[dtype_code]
        expected = n * d * dtype.itemsize
        payload = f.read(expected + 1)
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: truncated payload ({len(payload)} of {expected} bytes for n={n}, d={d})"
        )
    if len(payload) > expected:
        raise DimensionMismatchError(f"{path}: trailing bytes after n={n}, d={d} payload")
    a = np.frombuffer(payload, dtype=dtype).reshape(n, d)
    return EmbeddingMatrix(a)


def _load_csv(path) -> EmbeddingMatrix:
    try:
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not a text file") from e
    rows = []
    for i, ln in enumerate(lines):
        try:
            rows.append([float(v) for v in ln.split(",")])
        except ValueError as e:
            raise DataError(f"{path}: unparseable value on line {i + 1}") from e
    if not rows:
        raise DataError(f"{path}: empty csv")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DimensionMismatchError(f"{path}: ragged rows with widths {sorted(widths)}")
    return EmbeddingMatrix(np.array(rows))


def save_embeddings(m, path, format=None, dtype="f4") -> None:
    """Write ``m`` to ``path``. ``dtype`` applies to emb1 only (f4 or f8)."""
    a = as_array(m)
    fmt = format or infer_format(path)
    try:
        if fmt == "emb1":
            code = {"f4": 0, "f8": 1}[dtype]
            with open(path, "wb") as f:
                f.write(HEADER.pack(MAGIC, VERSION, code, 0, a.shape[0], a.shape[1]))
                f.write(np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes())
        elif fmt == "csv":
            np.savetxt(path, a, delimiter=",", fmt="%.17g")
        else:
            raise UnsupportedFormatError(f"unknown format {fmt!r}")
    except OSError as e:
        raise DataError(f"cannot write {path}: {e.strerror or e}") from e


def load_ids(path) -> list:
    with open(path) as f:
        return [ln.rstrip("\n") for ln in f if ln.strip()]


def load_paired(images_path, texts_path, ids_path=None, format=None) -> PairedDataset:
    ids = load_ids(ids_path) if ids_path else None
    return PairedDataset(load_embeddings(images_path, format), load_embeddings(texts_path, format), ids)


def load_judgments(path, candidates=None) -> HumanJudgmentSet:
    """Read the JSONL sidecar: one ``{"image_id", "candidate", "score"}`` per line."""
    records = []
    with open(path) as f:
        for lineno, ln in enumerate(f, 1):
            if not ln.strip():
                continue
            try:
                obj = json.loads(ln)
                records.append(Judgment(str(obj["image_id"]), int(obj["candidate"]), float(obj["score"])))
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad judgment record ({e})") from e
    return HumanJudgmentSet(tuple(records), candidates)


def save_judgments(js: HumanJudgmentSet, path) -> None:
    with open(path, "w") as f:
        for r in js.records:
            f.write(json.dumps({"image_id": r.image_id, "candidate": r.candidate, "score": r.score}) + "\n")


def load_class_templates(path) -> ClassTemplateSet:
    """Read a class-template manifest.

    JSON object with ``class_names``, ``templates`` (path to a matrix file,
    relative to the manifest), ``template_class`` (class index of each template
    row) and optionally ``image_labels``.
    """
    with open(path) as f:
        spec = json.load(f)
    try:
        names = spec["class_names"]
        tpl = load_embeddings(Path(path).parent / spec["templates"], spec.get("format"))
        owner = np.asarray(spec["template_class"], dtype=np.int64)
    except KeyError as e:
        raise DataError(f"{path}: missing key {e}") from e
    if owner.shape[0] != tpl.n:
        raise DimensionMismatchError(f"{path}: {owner.shape[0]} template labels for {tpl.n} rows")
    blocks = [tpl.data[owner == c] for c in range(len(names))]
    return ClassTemplateSet(tuple(names), tuple(blocks), spec.get("image_labels"))


def save_class_templates(ts: ClassTemplateSet, path, templates_name=None) -> None:
    path = Path(path)
    templates_name = templates_name or path.stem + ".templates.emb1"
    rows = np.concatenate(ts.class_text_embeddings, axis=0)
    owner = np.concatenate([np.full(len(e), c) for c, e in enumerate(ts.class_text_embeddings)])
    save_embeddings(rows, path.parent / templates_name, "emb1", dtype="f8")
    spec = {
        "class_names": list(ts.class_names),
        "templates": templates_name,
        "template_class": owner.tolist(),
    }
    if ts.image_labels is not None:
        spec["image_labels"] = ts.image_labels.tolist()
    with open(path, "w") as f:
        json.dump(spec, f)
