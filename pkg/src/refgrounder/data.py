"""Annotation ingestion, tokenization, vocabulary and batch iteration.

The on-disk manifest is a single JSON array of objects::

    {"image_id": ..., "image_path": "...", "expression": "...",
     "bbox": [x1, y1, w, h], "split": "train", "width": W, "height": H}

``bbox`` is top-left + size in absolute pixels of the original image.
``width``/``height`` are optional; when present they let the loader enforce
the inside-the-image invariant without touching the image file.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass

import numpy as np

from .boxes import BoundingBox, BoxError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "testA", "testB", "test")

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1

_TOKEN_RE = re.compile(r"[^a-z0-9]+")


class DataError(Exception):
    pass


class ManifestFormatError(DataError):
    pass


class EmbeddingFormatError(DataError):
    pass


class EmptyExpressionError(DataError):
    pass


@dataclass(frozen=True)
class RefSample:
    """One (image, expression, ground-truth box) example."""

    image_id: str
    image_path: str
    expression: str
    gt_box: BoundingBox
    split: str
    width: int | None = None
    height: int | None = None


@dataclass
class ManifestLoad:
    samples: list[RefSample]
    skipped: int


@dataclass(frozen=True)
class TokenSequence:
    indices: tuple[int, ...]
    valid_len: int

    @property
    def max_len(self) -> int:
        return len(self.indices)


def tokenize(expression: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return _TOKEN_RE.sub(" ", expression.lower()).split()


def _image_size(entry: dict) -> tuple[int, int] | None:
    if "width" in entry and "height" in entry:
        return int(entry["width"]), int(entry["height"])
    try:
        from PIL import Image

        with Image.open(entry["image_path"]) as im:
            return im.size
    except Exception:
        return None


def _parse_entry(entry: dict) -> RefSample:
    required = ("image_id", "image_path", "expression", "bbox", "split")
    for key in required:
        if key not in entry:
            raise ManifestFormatError(f"missing key {key!r}")
    if entry["split"] not in SPLITS:
        raise ManifestFormatError(f"unknown split {entry['split']!r}")
    expression = str(entry["expression"])
    if not expression.strip():
        raise ManifestFormatError("empty expression")
    bbox = entry["bbox"]
    if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
        raise ManifestFormatError(f"bbox must be [x1, y1, w, h], got {bbox!r}")
    try:
        box = BoundingBox.from_xywh(*[float(v) for v in bbox])
    except (BoxError, TypeError, ValueError) as exc:
        raise ManifestFormatError(f"bad bbox {bbox!r}: {exc}") from exc
    size = _image_size(entry)
    if size is not None:
        w, h = size
        if not box.inside(w, h):
            raise ManifestFormatError(
                f"box {bbox!r} extends past image bounds {w}x{h}"
            )
    else:
        w = h = None
        if box.x1 < 0 or box.y1 < 0:
            raise ManifestFormatError(f"box {bbox!r} has negative corner")
    return RefSample(
        image_id=str(entry["image_id"]),
        image_path=str(entry["image_path"]),
        expression=expression,
        gt_box=box,
        split=str(entry["split"]),
        width=w,
        height=h,
    )


def load_manifest(path, split: str) -> ManifestLoad:
    """Load all well-formed entries of one split; count the rest.

    A missing file raises.  If more than half of the entries are malformed
    the whole file is rejected as a format error.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            entries = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise ManifestFormatError(f"{path}: top level must be a JSON array")

    samples: list[RefSample] = []
    skipped = 0
    bad = 0
    for entry in entries:
        try:
            sample = _parse_entry(entry)
        except ManifestFormatError as exc:
            bad += 1
            skipped += 1
            log.warning("skipping manifest entry: %s", exc)
            continue
        if sample.split == split:
            samples.append(sample)
    if entries and bad * 2 > len(entries):
        raise ManifestFormatError(
            f"{path}: {bad}/{len(entries)} entries malformed, rejecting file"
        )
    if skipped:
        log.info("%s: %d malformed entries skipped", path, skipped)
    return ManifestLoad(samples=samples, skipped=skipped)


class Vocabulary:
    """Token/index bijection with PAD pinned to 0 and UNK to 1."""

    def __init__(self, tokens=()):
        self._index_to_token: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self._token_to_index: dict[str, int] = {PAD_TOKEN: PAD_INDEX, UNK_TOKEN: UNK_INDEX}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def from_samples(cls, samples) -> "Vocabulary":
        """Build from training-split tokens only; other splits map to UNK."""
        vocab = cls()
        for sample in samples:
            if sample.split != "train":
                continue
            for tok in tokenize(sample.expression):
                vocab.add(tok)
        return vocab

    def add(self, token: str) -> int:
        idx = self._token_to_index.get(token)
        if idx is None:
            idx = len(self._index_to_token)
            self._token_to_index[token] = idx
            self._index_to_token.append(token)
        return idx

    def index(self, token: str) -> int:
        return self._token_to_index.get(token, UNK_INDEX)

    def token(self, index: int) -> str:
        return self._index_to_token[index]

    def __len__(self) -> int:
        return len(self._index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_index

    @property
    def tokens(self) -> list[str]:
        return list(self._index_to_token)

    def to_json(self) -> list[str]:
        return self.tokens

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Vocabulary":
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DataError("vocabulary json must start with PAD, UNK")
        return cls(tokens[2:])


def encode_expression(tokens: list[str], vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Map tokens to indices, truncate to max_len, pad with PAD."""
    if not tokens:
        raise EmptyExpressionError("expression has no tokens after normalization")
    kept = tokens[:max_len]
    indices = [vocab.index(t) for t in kept]
    indices.extend([PAD_INDEX] * (max_len - len(indices)))
    return TokenSequence(indices=tuple(indices), valid_len=len(kept))


@dataclass
class EmbeddingTable:
    """|V| x dim matrix; row 0 (PAD) is all zeros."""

    matrix: np.ndarray
    source: str = "random"

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise DataError("embedding matrix must be 2-d")
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        self.matrix[PAD_INDEX] = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def random_embeddings(vocab: Vocabulary, dim: int = 300, seed: int = 0) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.1, 0.1, size=(len(vocab), dim)).astype(np.float32)
    matrix[PAD_INDEX] = 0.0
    return EmbeddingTable(matrix=matrix, source="random")


def load_embeddings(vocab: Vocabulary, glove_path, seed: int = 0, dim: int = 300) -> EmbeddingTable:
    """Copy vectors for tokens found in the file; OOV rows are uniform in
    [-0.1, 0.1] from the seeded generator, so a rerun reproduces them."""
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.1, 0.1, size=(len(vocab), dim)).astype(np.float32)
    found = 0
    with open(glove_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            token, values = parts[0], parts[1:]
            if token not in vocab:
                continue
            if len(values) != dim:
                raise EmbeddingFormatError(
                    f"{glove_path}:{lineno}: expected {dim} values, got {len(values)}"
                )
            matrix[vocab.index(token)] = np.asarray(values, dtype=np.float32)
            found += 1
    matrix[PAD_INDEX] = 0.0
    log.info("embeddings: %d/%d vocabulary tokens found in %s", found, len(vocab), glove_path)
    return EmbeddingTable(matrix=matrix, source="glove")


def iterate_batches(samples, batch_size: int, shuffle: bool = True, seed: int = 0):
    """Yield lists of samples; order is a pure function of (samples, seed)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]
