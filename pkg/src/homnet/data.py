"""Karyotype sequence data model, preprocessing and JSONL persistence.

A chromosome arrives as a pre-cropped, vertically oriented grayscale image.
Its two sister chromatids occupy the left and right halves, so the image is
reduced to a pair of row-wise gray-mean sequences. Sequences are inverted to
[0, 1] (white background -> 0, dark band -> 1), top-aligned and zero-padded
to a fixed length d so that absolute-length changes stay visible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidBand,
    InvalidType,
    InvariantViolation,
    ParseError,
    TooLong,
    TooSmall,
)

N_CHROM_TYPES = 24
BAND_LEVELS = (300, 400, 550, 700)
DEFAULT_SEQ_LEN = 512
MIN_IMAGE_HEIGHT = 8


def _as_float_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvariantViolation(f"{name}: expected a non-empty 1-D sequence")
    if not np.isfinite(arr).all():
        raise InvariantViolation(f"{name}: non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class RawSequencePair:
    """Pre-normalization gray-mean sequences of the left/right halves."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        left = _as_float_vector(self.left, "left")
        right = _as_float_vector(self.right, "right")
        if left.shape != right.shape:
            raise InvariantViolation("left/right lengths differ")
        for name, arr in (("left", left), ("right", right)):
            if arr.min() < 0.0 or arr.max() > 255.0:
                raise InvariantViolation(f"{name}: values outside [0, 255]")
            arr.setflags(write=False)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def __len__(self) -> int:
        return int(self.left.shape[0])


@dataclass(frozen=True, eq=False)
class ChromosomeSequence:
    """Normalized 2 x d intensity matrix (row 0 = left, row 1 = right).

    Entries live in [0, 1]; positions at or beyond ``valid_len`` are exactly
    zero, which makes padding indistinguishable from white background.
    """

    values: np.ndarray
    valid_len: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.shape[0] != 2:
            raise InvariantViolation(f"values: expected shape (2, d), got {values.shape}")
        if not np.isfinite(values).all():
            raise InvariantViolation("values: non-finite entries")
        if values.min() < 0.0 or values.max() > 1.0:
            raise InvariantViolation("values: entries outside [0, 1]")
        valid = int(self.valid_len)
        if not (0 <= valid <= values.shape[1]):
            raise InvariantViolation(f"valid_len {valid} outside [0, {values.shape[1]}]")
        if valid < values.shape[1] and np.any(values[:, valid:] != 0.0):
            raise InvariantViolation("values: non-zero entries beyond valid_len")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid_len", valid)

    @property
    def d(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, eq=False)
class ChromosomePair:
    """One homologous pair; both chromosomes share the same padded length."""

    a: ChromosomeSequence
    b: ChromosomeSequence

    def __post_init__(self):
        if self.a.d != self.b.d:
            raise InvariantViolation(f"pair d mismatch: {self.a.d} vs {self.b.d}")

    @property
    def d(self) -> int:
        return self.a.d


@dataclass(frozen=True, eq=False)
class BagRecord:
    """m homologous pairs from one subject plus query metadata and label."""

    pairs: tuple[ChromosomePair, ...]
    chrom_type: int
    band_level: int
    label: int
    subject_id: str
    record_id: str

    def __post_init__(self):
        pairs = tuple(self.pairs)
        if len(pairs) == 0:
            raise InvariantViolation("pairs: empty bag")
        d = pairs[0].d
        if any(p.d != d for p in pairs):
            raise InvariantViolation("pairs: inconsistent d across pairs")
        if not (0 <= int(self.chrom_type) < N_CHROM_TYPES):
            raise InvariantViolation(f"chrom_type {self.chrom_type} outside [0, {N_CHROM_TYPES})")
        if int(self.band_level) not in BAND_LEVELS:
            raise InvariantViolation(f"band_level {self.band_level} not in {BAND_LEVELS}")
        if int(self.label) not in (0, 1):
            raise InvariantViolation(f"label {self.label} not in {{0, 1}}")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "chrom_type", int(self.chrom_type))
        object.__setattr__(self, "band_level", int(self.band_level))
        object.__setattr__(self, "label", int(self.label))

    @property
    def m(self) -> int:
        return len(self.pairs)

    @property
    def d(self) -> int:
        return self.pairs[0].d


@dataclass(frozen=True, eq=False)
class ConditionEncoding:
    """One-hot chromosome type (24) and band level (4)."""

    c_onehot: np.ndarray
    b_onehot: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c_onehot, dtype=np.float64)
        b = np.asarray(self.b_onehot, dtype=np.float64)
        for name, vec, size in (("c_onehot", c, N_CHROM_TYPES), ("b_onehot", b, len(BAND_LEVELS))):
            if vec.shape != (size,) or not np.all(np.isin(vec, (0.0, 1.0))) or vec.sum() != 1.0:
                raise InvariantViolation(f"{name}: not a {size}-long one-hot vector")
            vec.setflags(write=False)
        object.__setattr__(self, "c_onehot", c)
        object.__setattr__(self, "b_onehot", b)

    def concat(self) -> np.ndarray:
        return np.concatenate([self.c_onehot, self.b_onehot])


# ---------------------------------------------------------------------------
# preprocessing

def image_to_raw_pair(image, min_height: int = MIN_IMAGE_HEIGHT) -> RawSequencePair:
    """Reduce a cropped chromosome image to left/right half gray means.

    Row i contributes left[i] = mean over columns [0, W//2) and
    right[i] = mean over [W//2, W).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise TooSmall(f"expected a 2-D grayscale image, got ndim={img.ndim}")
    h, w = img.shape
    if h < min_height or w < 2:
        raise TooSmall(f"image {h}x{w} below minimum {min_height}x2")
    half = w // 2
    return RawSequencePair(left=img[:, :half].mean(axis=1), right=img[:, half:].mean(axis=1))


def resample_raw(raw: RawSequencePair, target_len: int) -> RawSequencePair:
    """Linearly resample both halves to ``target_len``, endpoints preserved."""
    if target_len < 2:
        raise InvariantViolation(f"target_len {target_len} < 2")
    n = len(raw)
    if n == target_len:
        return RawSequencePair(left=raw.left.copy(), right=raw.right.copy())
    old_grid = np.arange(n, dtype=np.float64)
    new_grid = np.linspace(0.0, float(n - 1), target_len)
    return RawSequencePair(
        left=np.interp(new_grid, old_grid, raw.left),
        right=np.interp(new_grid, old_grid, raw.right),
    )


def normalize_fit(raw: RawSequencePair, d: int = DEFAULT_SEQ_LEN) -> ChromosomeSequence:
    """Invert intensities to [0, 1], top-align and zero-pad to length d.

    White background (255) maps to exactly 0 so padding and background agree;
    the darkest possible band (0) maps to exactly 1.
    """
    n = len(raw)
    if n > d:
        raise TooLong(f"sequence length {n} exceeds d={d}; resample_raw first")
    values = np.zeros((2, d), dtype=np.float32)
    values[0, :n] = (255.0 - raw.left) / 255.0
    values[1, :n] = (255.0 - raw.right) / 255.0
    return ChromosomeSequence(values=values, valid_len=n)


def encode_condition(chrom_type: int, band_level: int) -> ConditionEncoding:
    if not (0 <= chrom_type < N_CHROM_TYPES):
        raise InvalidType(f"chrom_type {chrom_type} outside [0, {N_CHROM_TYPES})")
    if band_level not in BAND_LEVELS:
        raise InvalidBand(f"band_level {band_level} not in {BAND_LEVELS}")
    c = np.zeros(N_CHROM_TYPES, dtype=np.float64)
    c[chrom_type] = 1.0
    b = np.zeros(len(BAND_LEVELS), dtype=np.float64)
    b[BAND_LEVELS.index(band_level)] = 1.0
    return ConditionEncoding(c_onehot=c, b_onehot=b)


# ---------------------------------------------------------------------------
# JSON Lines persistence

def _record_to_obj(record: BagRecord) -> dict:
    pairs = []
    for pair in record.pairs:
        pairs.append({
            "a_left": pair.a.values[0].tolist(),
            "a_right": pair.a.values[1].tolist(),
            "b_left": pair.b.values[0].tolist(),
            "b_right": pair.b.values[1].tolist(),
            "a_valid": pair.a.valid_len,
            "b_valid": pair.b.valid_len,
        })
    return {
        "record_id": record.record_id,
        "subject_id": record.subject_id,
        "chrom_type": record.chrom_type,
        "band_level": record.band_level,
        "label": record.label,
        "pairs": pairs,
    }


def record_to_json(record: BagRecord) -> str:
    return json.dumps(_record_to_obj(record))


def _require(obj: dict, key: str, line_no: int):
    if key not in obj:
        raise InvariantViolation(f"line {line_no}: missing field '{key}'")
    return obj[key]


def _pair_from_obj(obj: dict, line_no: int) -> ChromosomePair:
    seqs = {}
    for side in ("a", "b"):
        left = _require(obj, f"{side}_left", line_no)
        right = _require(obj, f"{side}_right", line_no)
        valid = _require(obj, f"{side}_valid", line_no)
        try:
            values = np.asarray([left, right], dtype=np.float32)
            if values.ndim != 2:
                raise InvariantViolation(f"line {line_no}: ragged {side}_left/{side}_right")
            seqs[side] = ChromosomeSequence(values=values, valid_len=int(valid))
        except InvariantViolation as exc:
            raise InvariantViolation(f"line {line_no}: field '{side}_*': {exc}") from None
        except (TypeError, ValueError) as exc:
            raise InvariantViolation(f"line {line_no}: field '{side}_*': {exc}") from None
    return ChromosomePair(a=seqs["a"], b=seqs["b"])


def record_from_json(text: str, line_no: int = 0) -> BagRecord:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {line_no}: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError(f"line {line_no}: expected a JSON object")
    raw_pairs = _require(obj, "pairs", line_no)
    if not isinstance(raw_pairs, list) or not raw_pairs:
        raise InvariantViolation(f"line {line_no}: field 'pairs' must be a non-empty list")
    pairs = tuple(_pair_from_obj(p, line_no) for p in raw_pairs)
    try:
        return BagRecord(
            pairs=pairs,
            chrom_type=_require(obj, "chrom_type", line_no),
            band_level=_require(obj, "band_level", line_no),
            label=_require(obj, "label", line_no),
            subject_id=str(_require(obj, "subject_id", line_no)),
            record_id=str(_require(obj, "record_id", line_no)),
        )
    except InvariantViolation as exc:
        raise InvariantViolation(f"line {line_no}: {exc}") from None


def save_dataset(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record))
            fh.write("\n")


def load_dataset(path) -> list[BagRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            records.append(record_from_json(line, line_no))
    return records


# ---------------------------------------------------------------------------
# structural equality helpers (numpy fields defeat dataclass eq)

def sequences_equal(x: ChromosomeSequence, y: ChromosomeSequence) -> bool:
    return x.valid_len == y.valid_len and np.array_equal(x.values, y.values)


def records_equal(x: BagRecord, y: BagRecord) -> bool:
    if (x.record_id, x.subject_id, x.chrom_type, x.band_level, x.label, x.m) != (
        y.record_id, y.subject_id, y.chrom_type, y.band_level, y.label, y.m
    ):
        return False
    return all(
        sequences_equal(p.a, q.a) and sequences_equal(p.b, q.b)
        for p, q in zip(x.pairs, y.pairs)
    )
