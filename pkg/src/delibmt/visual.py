"""Visual feature ingestion and the two conditioning mechanisms.

Additive conditioning projects one image vector and adds it to every
encoder memory row; attention conditioning projects visual rows (spatial
cells or object-category embeddings) to d_model and lets a decoder
cross-attention sublayer use them as keys/values.

Features arrive from files: a binary spatial container, a plain-text
detection list per image, and a plain-text category embedding table.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, VocabularyError
from .layers import MultiHeadAttention
from .model import EncoderMemory
from .tensor import Tensor, matmul

OBJECT_VOCAB_SIZE = 545
OBJECT_EMBED_DIM = 50

SPATIAL_MAGIC = b"MMTF"
SPATIAL_VERSION = 1


class VisualFeatures:
    """Exactly one of: spatial map [N^2 x K], bag counts [545], object
    embeddings [M x 50]."""

    SPATIAL, BAG, OBJ = "spatial", "bag", "obj"

    def __init__(self, kind: str, data: np.ndarray):
        if kind == self.SPATIAL:
            data = np.asarray(data, dtype=np.float32)
            if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
                raise ShapeError(f"spatial features must be [N^2, K], got {data.shape}")
        elif kind == self.BAG:
            data = np.asarray(data)
            if data.shape != (OBJECT_VOCAB_SIZE,):
                raise ShapeError(
                    f"bag of objects must have {OBJECT_VOCAB_SIZE} entries, "
                    f"got {data.shape}"
                )
            if np.any(data < 0):
                raise ShapeError("bag of objects counts must be non-negative")
            data = data.astype(np.int64)
        elif kind == self.OBJ:
            data = np.asarray(data, dtype=np.float32)
            if data.ndim != 2 or data.shape[1] != OBJECT_EMBED_DIM:
                raise ShapeError(
                    f"object embeddings must be [M, {OBJECT_EMBED_DIM}], "
                    f"got {data.shape}"
                )
        else:
            raise ValueError(f"unknown feature kind {kind!r}")
        self.kind = kind
        self.data = data

    @classmethod
    def spatial(cls, rows) -> "VisualFeatures":
        return cls(cls.SPATIAL, rows)

    @classmethod
    def bag(cls, counts) -> "VisualFeatures":
        return cls(cls.BAG, counts)

    @classmethod
    def object_embeds(cls, rows) -> "VisualFeatures":
        return cls(cls.OBJ, np.asarray(rows, dtype=np.float32).reshape(-1, OBJECT_EMBED_DIM))


class ObjectVocabulary:
    """The fixed 545 detector categories, optionally with an embedding table."""

    def __init__(self, names: list[str], embeddings: np.ndarray | None = None):
        if len(names) != OBJECT_VOCAB_SIZE:
            raise ShapeError(
                f"object vocabulary must have exactly {OBJECT_VOCAB_SIZE} "
                f"categories, got {len(names)}"
            )
        if len(set(names)) != len(names):
            raise ShapeError("object vocabulary names are not unique")
        self.names = list(names)
        self.index = {n: i for i, n in enumerate(names)}
        self.embeddings = None
        if embeddings is not None:
            embeddings = np.asarray(embeddings, dtype=np.float32)
            if embeddings.shape != (OBJECT_VOCAB_SIZE, OBJECT_EMBED_DIM):
                raise ShapeError(
                    f"embedding table must be [{OBJECT_VOCAB_SIZE}, "
                    f"{OBJECT_EMBED_DIM}], got {embeddings.shape}"
                )
            self.embeddings = embeddings

    @classmethod
    def load(cls, names_path, embeddings_path=None) -> "ObjectVocabulary":
        with open(names_path, encoding="utf-8") as fh:
            names = [line.strip() for line in fh if line.strip()]
        embeddings = None
        if embeddings_path is not None:
            table = load_embedding_table(embeddings_path)
            missing = [n for n in names if n not in table]
            if missing:
                raise VocabularyError(
                    f"embedding table lacks {len(missing)} categories, "
                    f"first missing: {missing[0]!r}"
                )
            embeddings = np.stack([table[n] for n in names])
        return cls(names, embeddings)


def bag_of_objects(detections, vocab: ObjectVocabulary) -> np.ndarray:
    """Count detected category names into the fixed 545-dim vector."""
    counts = np.zeros(OBJECT_VOCAB_SIZE, dtype=np.int64)
    for name in detections:
        if name not in vocab.index:
            raise VocabularyError(f"unknown object category {name!r}")
        counts[vocab.index[name]] += 1
    return counts


def object_embeddings(detections, vocab: ObjectVocabulary) -> np.ndarray:
    """One embedding row per detection, in detection order; [M, 50]."""
    if vocab.embeddings is None:
        raise VocabularyError("object vocabulary has no embedding table loaded")
    rows = []
    for name in detections:
        if name not in vocab.index:
            raise VocabularyError(f"unknown object category {name!r}")
        rows.append(vocab.embeddings[vocab.index[name]])
    if not rows:
        return np.zeros((0, OBJECT_EMBED_DIM), dtype=np.float32)
    return np.stack(rows)


# ------------------------------------------------------------- conditioning


def condition_aic(mem: EncoderMemory, image_vec, projection: Tensor) -> EncoderMemory:
    """Add the projected image vector to every encoder memory row."""
    vec = image_vec if isinstance(image_vec, Tensor) else Tensor(np.asarray(image_vec, dtype=np.float64))
    if vec.ndim == 1:
        vec = vec.reshape(1, -1)
    if vec.shape[1] != projection.shape[0]:
        raise ShapeError(
            f"image vector width {vec.shape[1]} does not match projection "
            f"input {projection.shape[0]}"
        )
    if projection.shape[1] != mem.states.shape[1]:
        raise ShapeError(
            f"projection output {projection.shape[1]} does not match memory "
            f"width {mem.states.shape[1]}"
        )
    shift = matmul(vec, projection)          # [1, d_model]
    return EncoderMemory(states=mem.states + shift, pad_mask=mem.pad_mask)


def project_visual(features: VisualFeatures, projection: Tensor) -> Tensor | None:
    """Project visual rows to model width; None signals "no visual keys"."""
    if features.kind == VisualFeatures.BAG:
        raise ShapeError(
            "bag-of-objects features pair with additive conditioning, "
            "not row projection"
        )
    rows = features.data
    if rows.shape[0] == 0:
        return None
    if rows.shape[1] != projection.shape[0]:
        raise ShapeError(
            f"visual row width {rows.shape[1]} does not match projection "
            f"input {projection.shape[0]}"
        )
    return matmul(Tensor(rows), projection)


def visual_cross_attention(x: Tensor, vkeys: Tensor,
                           weights: MultiHeadAttention, **kw) -> Tensor:
    """Attend from decoder states to visual rows (keys = values = vkeys)."""
    if vkeys.shape[0] < 1:
        raise ShapeError("no visual keys")
    return weights(x, vkeys, vkeys, **kw)


# ------------------------------------------------------------ feature files


def write_spatial_features(path, feature_maps: dict[str, np.ndarray]) -> None:
    """Binary container; each map is [K, N, N] float32, filter-major."""
    with open(path, "wb") as fh:
        fh.write(SPATIAL_MAGIC)
        fh.write(bytes([SPATIAL_VERSION]))
        for image_id, arr in feature_maps.items():
            arr = np.asarray(arr, dtype=np.float32)
            if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
                raise ShapeError(
                    f"spatial map for {image_id!r} must be [K, N, N], got {arr.shape}"
                )
            encoded = image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<iii", arr.shape[0], arr.shape[1], arr.shape[2]))
            fh.write(arr.astype("<f4").tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated spatial feature file reading {what}",
                          offset=fh.tell() - len(data))
    return data


def load_spatial_features(path, image_id: str) -> np.ndarray:
    """Fetch one image's map, reshaped to N^2 rows of width K.

    Row r is spatial cell (r // N, r % N) across all K filters.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SPATIAL_MAGIC:
            raise FormatError(
                f"bad magic {magic!r}, expected {SPATIAL_MAGIC!r}", offset=0
            )
        version = _read_exact(fh, 1, "version")[0]
        if version != SPATIAL_VERSION:
            raise FormatError(
                f"unsupported spatial file version {version}", offset=4
            )
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated id length", offset=fh.tell() - len(head))
            (id_len,) = struct.unpack("<I", head)
            rec_id = _read_exact(fh, id_len, "image id").decode("utf-8")
            k, n1, n2 = struct.unpack("<iii", _read_exact(fh, 12, "header"))
            if k <= 0 or n1 <= 0 or n1 != n2:
                raise FormatError(
                    f"corrupt header for {rec_id!r}: K={k}, N={n1}x{n2}",
                    offset=fh.tell() - 12,
                )
            nbytes = 4 * k * n1 * n2
            payload = _read_exact(fh, nbytes, f"features of {rec_id!r}")
            if rec_id == image_id:
                arr = np.frombuffer(payload, dtype="<f4").reshape(k, n1, n2)
                # [K, N, N] -> [N^2, K]
                return np.ascontiguousarray(
                    arr.reshape(k, n1 * n2).T
                ).astype(np.float32)
    raise FormatError(f"image id {image_id!r} not present in {path}")


def load_detections(path) -> dict[str, list[str]]:
    """Per line: image_id<TAB>category,category,... (empty list allowed)."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(
                    f"{path}: line {lineno + 1} is not 'image_id<TAB>categories'"
                )
            cats = [c for c in parts[1].split(",") if c]
            out[parts[0]] = cats
    return out


def load_embedding_table(path) -> dict[str, np.ndarray]:
    """Per line: category then 50 space-separated reals."""
    table: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 1 + OBJECT_EMBED_DIM:
                raise FormatError(
                    f"{path}: line {lineno + 1} must be a category and "
                    f"{OBJECT_EMBED_DIM} reals, got {len(parts) - 1} values"
                )
            table[parts[0]] = np.asarray([float(x) for x in parts[1:]],
                                         dtype=np.float32)
    return table


def write_embedding_table(path, table: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, vec in table.items():
            vals = " ".join(repr(float(x)) for x in np.asarray(vec).ravel())
            fh.write(f"{name} {vals}\n")


def write_detections(path, detections: dict[str, list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, cats in detections.items():
            fh.write(f"{image_id}\t{','.join(cats)}\n")


@dataclass
class FeatureStore:
    """Per-sentence feature lookup used by the pipeline.

    mode sum -> bag counts; att -> spatial rows; obj -> object embeddings.
    Returns None where a sentence has no usable features (empty detections
    under obj), which callers treat as text-only.
    """

    mode: str
    image_ids: list[str]
    detections: dict[str, list[str]] | None = None
    vocab: ObjectVocabulary | None = None
    spatial_path: str | None = None

    def features_for(self, index: int) -> VisualFeatures | None:
        image_id = self.image_ids[index]
        if self.mode == "sum":
            return VisualFeatures.bag(
                bag_of_objects(self.detections.get(image_id, []), self.vocab)
            )
        if self.mode == "obj":
            rows = object_embeddings(self.detections.get(image_id, []), self.vocab)
            if rows.shape[0] == 0:
                return None
            return VisualFeatures.object_embeds(rows)
        if self.mode == "att":
            return VisualFeatures.spatial(
                load_spatial_features(self.spatial_path, image_id)
            )
        raise ValueError(f"unknown feature mode {self.mode!r}")
