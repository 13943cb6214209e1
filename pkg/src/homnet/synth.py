"""Synthetic chromosomes and artificial structural abnormalities.

Real abnormal karyotypes are scarce, so pretraining data is manufactured:
each chromosome type gets a banded intensity template; rendering adds
per-chromatid warp and noise (sister chromatids never photograph perfectly
alike); five splice operators then fabricate the structural-abnormality
classes seen in practice — deletions, foreign insertions, self duplications,
inversions/balanced translocations, and whole-chromosome mirrored fusions.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import (
    BAND_LEVELS,
    N_CHROM_TYPES,
    BagRecord,
    ChromosomePair,
    RawSequencePair,
    normalize_fit,
    resample_raw,
)
from .errors import InvariantViolation, MissingDonor, SpanOutOfRange

N_LENGTH_GROUPS = 7
# length-group membership by chromosome type (22 = X, 23 = Y), following the
# conventional size groups of a karyogram
_GROUP_OF_TYPE = (
    1, 1, 1,
    2, 2,
    3, 3, 3, 3, 3, 3, 3,
    4, 4, 4,
    5, 5, 5,
    6, 6,
    7, 7,
    3,  # X sits with the medium group
    7,  # Y with the shortest
)
# rendered length at band level 700, before per-type jitter
_GROUP_BASE_LEN = (440, 390, 340, 290, 240, 190, 140)
_BASE_LEN_JITTER = 15

_GRAY_LIGHT_CEIL = 250.0
_GRAY_SPAN = 190.0


@dataclass(frozen=True)
class LengthGroupTable:
    """chrom_type -> length group in 1..7."""

    groups: tuple[int, ...]

    def __post_init__(self):
        if len(self.groups) != N_CHROM_TYPES:
            raise InvariantViolation(f"expected {N_CHROM_TYPES} group entries")
        if set(self.groups) != set(range(1, N_LENGTH_GROUPS + 1)):
            raise InvariantViolation("length groups must cover exactly 1..7")

    def group_of(self, chrom_type: int) -> int:
        return self.groups[chrom_type]

    def types_in_group(self, group: int) -> list[int]:
        return [t for t, g in enumerate(self.groups) if g == group]


@dataclass(frozen=True, eq=False)
class IdeogramTemplate:
    """Banded intensity profile of one chromosome type.

    ``bands`` is a sorted, gap-free partition of [0, 1] into
    (start_frac, end_frac, intensity) stripes; intensity 0 is unstained,
    1 is the darkest stain.
    """

    chrom_type: int
    base_len: int
    bands: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        if not (0 <= self.chrom_type < N_CHROM_TYPES):
            raise InvariantViolation(f"chrom_type {self.chrom_type} out of range")
        if self.base_len < 8:
            raise InvariantViolation(f"base_len {self.base_len} too short")
        if not self.bands:
            raise InvariantViolation("bands empty")
        prev_end = 0.0
        for start, end, intensity in self.bands:
            if start != prev_end or end <= start:
                raise InvariantViolation("bands must tile [0, 1] without gaps or overlap")
            if not (0.0 <= intensity <= 1.0):
                raise InvariantViolation("band intensity outside [0, 1]")
            prev_end = end
        if prev_end != 1.0:
            raise InvariantViolation("bands must end at 1.0")

    def intensity_at(self, fracs: np.ndarray) -> np.ndarray:
        edges = np.array([b[1] for b in self.bands[:-1]])
        values = np.array([b[2] for b in self.bands])
        return values[np.searchsorted(edges, fracs, side="right")]


class Abnormality(enum.Enum):
    DELETED = "deleted"
    ADDED_FOREIGN = "added_foreign"
    DUPLICATED_SELF = "duplicated_self"
    REPLACED = "replaced"
    ROBERTSONIAN = "robertsonian"


DEFAULT_MIN_SPAN_FRAC = 0.1


@dataclass(frozen=True)
class AbnormalityKind:
    """An abnormality operator plus its span parameters.

    Fractions are relative to the target sequence length. For foreign
    material (``ADDED_FOREIGN``, donor-backed ``REPLACED``),
    ``donor_start_frac`` locates the fragment inside the donor sequence.
    ``ROBERTSONIAN`` ignores the span; it always mirrors the whole sequence.
    """

    kind: Abnormality
    start_frac: float = 0.0
    len_frac: float = 0.0
    donor_start_frac: float = 0.0
    min_frac: float = DEFAULT_MIN_SPAN_FRAC

    def __post_init__(self):
        if self.kind is Abnormality.ROBERTSONIAN:
            return
        if self.start_frac < 0.0:
            raise InvariantViolation(f"start_frac {self.start_frac} < 0")
        if self.start_frac + self.len_frac > 1.0:
            raise InvariantViolation(
                f"span [{self.start_frac}, {self.start_frac + self.len_frac}] exceeds 1.0")
        if self.len_frac < self.min_frac:
            raise InvariantViolation(f"len_frac {self.len_frac} below minimum {self.min_frac}")
        if not (0.0 <= self.donor_start_frac <= 1.0):
            raise InvariantViolation(f"donor_start_frac {self.donor_start_frac} outside [0, 1]")


@dataclass(frozen=True)
class RenderNoise:
    """Per-chromatid rendering perturbations."""

    sigma: float = 6.0
    warp_amp: float = 0.02


def flip_raw(raw: RawSequencePair) -> RawSequencePair:
    """An upside-down crop: 180-degree rotation reverses the sequences and
    swaps the two chromatid sides."""
    return RawSequencePair(left=raw.right[::-1].copy(), right=raw.left[::-1].copy())


# ---------------------------------------------------------------------------
# templates

def make_templates(seed: int) -> tuple[list[IdeogramTemplate], LengthGroupTable]:
    """24 deterministic banded templates; lengths strictly decrease by group."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7e3a]))
    table = LengthGroupTable(groups=_GROUP_OF_TYPE)
    templates = []
    for chrom_type in range(N_CHROM_TYPES):
        group = table.group_of(chrom_type)
        base = _GROUP_BASE_LEN[group - 1] + int(rng.integers(-_BASE_LEN_JITTER,
                                                             _BASE_LEN_JITTER + 1))
        n_bands = int(rng.integers(4, 13))
        widths = rng.random(n_bands) + 0.3
        edges = np.concatenate([[0.0], np.cumsum(widths) / widths.sum()])
        edges[-1] = 1.0
        start_dark = bool(rng.integers(2))
        bands = []
        for i in range(n_bands):
            dark = (i % 2 == 0) == start_dark
            intensity = rng.uniform(0.65, 0.95) if dark else rng.uniform(0.05, 0.25)
            bands.append((float(edges[i]), float(edges[i + 1]), float(intensity)))
        templates.append(IdeogramTemplate(chrom_type=chrom_type, base_len=base,
                                          bands=tuple(bands)))
    return templates, table


# ---------------------------------------------------------------------------
# rendering

def rendered_length(template: IdeogramTemplate, band_level: int) -> int:
    return int(round(template.base_len * band_level / 700.0))


def render_chromosome(template: IdeogramTemplate, band_level: int,
                      noise: RenderNoise, rng: np.random.Generator) -> RawSequencePair:
    """Render left/right gray-mean sequences of one chromosome.

    Both chromatids share the band profile; each gets its own smooth
    positional warp and additive noise. Gray values are clipped to [0, 255]
    with dark bands mapping low (stained) and light bands high.
    """
    if band_level not in BAND_LEVELS:
        raise InvariantViolation(f"band_level {band_level} not in {BAND_LEVELS}")
    length = rendered_length(template, band_level)
    fracs = (np.arange(length) + 0.5) / length

    def chromatid() -> np.ndarray:
        phase = rng.uniform(0.0, 1.0)
        cycles = int(rng.integers(1, 4))
        warped = fracs + noise.warp_amp * np.sin(2.0 * np.pi * (cycles * fracs + phase))
        warped = np.clip(warped, 0.0, 1.0)
        gray = _GRAY_LIGHT_CEIL - _GRAY_SPAN * template.intensity_at(warped)
        gray = gray + rng.normal(0.0, noise.sigma, size=length)
        return np.clip(gray, 0.0, 255.0)

    return RawSequencePair(left=chromatid(), right=chromatid())


# ---------------------------------------------------------------------------
# abnormality operators

def _span_indices(kind: AbnormalityKind, length: int) -> tuple[int, int]:
    start = int(np.floor(kind.start_frac * length))
    span = int(round(kind.len_frac * length))
    if start + span > length:
        raise SpanOutOfRange(f"span [{start}, {start + span}) exceeds length {length}")
    return start, span


def _donor_fragment(donor: RawSequencePair, kind: AbnormalityKind,
                    frag_len: int) -> tuple[np.ndarray, np.ndarray]:
    donor_len = len(donor)
    donor_start = int(np.floor(kind.donor_start_frac * donor_len))
    if donor_start + frag_len > donor_len:
        raise SpanOutOfRange(
            f"donor fragment [{donor_start}, {donor_start + frag_len}) exceeds donor "
            f"length {donor_len}")
    sl = slice(donor_start, donor_start + frag_len)
    return donor.left[sl], donor.right[sl]


def apply_abnormality(seq: RawSequencePair, kind: AbnormalityKind,
                      donor: RawSequencePair | None = None) -> RawSequencePair:
    """Apply one structural-abnormality operator to a raw sequence pair.

    Both halves are edited at identical indices. Length contract per kind:
    deletion shrinks by the span, insertions grow by exactly the fragment,
    replacement preserves length, and the mirrored fusion doubles it.
    """
    length = len(seq)
    op = kind.kind
    if op is Abnormality.ROBERTSONIAN:
        return RawSequencePair(
            left=np.concatenate([seq.left[::-1], seq.left]),
            right=np.concatenate([seq.right[::-1], seq.right]),
        )

    start, span = _span_indices(kind, length)
    if op is Abnormality.DELETED:
        keep = np.r_[0:start, start + span:length]
        return RawSequencePair(left=seq.left[keep], right=seq.right[keep])

    if op is Abnormality.DUPLICATED_SELF:
        ins = start + span
        return RawSequencePair(
            left=np.concatenate([seq.left[:ins], seq.left[start:ins], seq.left[ins:]]),
            right=np.concatenate([seq.right[:ins], seq.right[start:ins], seq.right[ins:]]),
        )

    if op is Abnormality.ADDED_FOREIGN:
        if donor is None:
            raise MissingDonor("foreign insertion requires a donor sequence")
        frag_left, frag_right = _donor_fragment(donor, kind, span)
        return RawSequencePair(
            left=np.concatenate([seq.left[:start], frag_left, seq.left[start:]]),
            right=np.concatenate([seq.right[:start], frag_right, seq.right[start:]]),
        )

    if op is Abnormality.REPLACED:
        left = seq.left.copy()
        right = seq.right.copy()
        if donor is None:  # inversion: the span flips in place
            left[start:start + span] = left[start:start + span][::-1]
            right[start:start + span] = right[start:start + span][::-1]
        else:  # balanced translocation: equal-length donor material
            frag_left, frag_right = _donor_fragment(donor, kind, span)
            left[start:start + span] = frag_left
            right[start:start + span] = frag_right
        return RawSequencePair(left=left, right=right)

    raise InvariantViolation(f"unknown abnormality {op!r}")


# ---------------------------------------------------------------------------
# pretraining corpus

@dataclass(frozen=True)
class CorpusConfig:
    """Generator knobs for the self-supervised pretraining corpus."""

    n_subjects: int
    m: int = 5
    d: int = 512
    abnormal_ratio: float = 0.5
    mixed_type_ratio: float = 0.2
    sigma: float = 6.0
    warp_amp: float = 0.02
    flip_prob: float = 0.3
    val_fraction: float = 0.1
    min_span_frac: float = DEFAULT_MIN_SPAN_FRAC
    max_span_frac: float = 0.3

    def __post_init__(self):
        if self.n_subjects < 1 or self.m < 1 or self.d < 8:
            raise InvariantViolation("n_subjects, m, d out of range")
        for name in ("abnormal_ratio", "mixed_type_ratio", "val_fraction", "flip_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvariantViolation(f"{name}={v} outside [0, 1]")
        if self.abnormal_ratio + self.mixed_type_ratio > 1.0:
            raise InvariantViolation("abnormal_ratio + mixed_type_ratio exceeds 1")
        if not (0.0 < self.min_span_frac <= self.max_span_frac <= 1.0):
            raise InvariantViolation("span fraction bounds out of order")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "CorpusConfig":
        return cls(**obj)


@dataclass
class CorpusBuild:
    train: list[BagRecord]
    val: list[BagRecord]
    kind_counts: dict[str, int] = field(default_factory=dict)
    # per-record provenance: {"role": normal|operator|mixed, "kind": op value or
    # None, "partner_type": mixed-pair partner or None}
    roles: dict[str, dict] = field(default_factory=dict)


def _fit_to_d(raw: RawSequencePair, d: int):
    if len(raw) > d:
        raw = resample_raw(raw, d)
    return normalize_fit(raw, d)


def _finish_pair(a: RawSequencePair, b: RawSequencePair, d: int, flip_prob: float,
                 rng: np.random.Generator) -> ChromosomePair:
    """Imaging stage: each chromosome lands upside-down with prob flip_prob."""
    if rng.random() < flip_prob:
        a = flip_raw(a)
    if rng.random() < flip_prob:
        b = flip_raw(b)
    return ChromosomePair(a=_fit_to_d(a, d), b=_fit_to_d(b, d))


def _sample_kind(rng: np.random.Generator, cfg: CorpusConfig) -> AbnormalityKind:
    op = Abnormality(rng.choice([a.value for a in Abnormality]))
    len_frac = float(rng.uniform(cfg.min_span_frac, cfg.max_span_frac))
    start_frac = float(rng.uniform(0.0, 1.0 - len_frac))
    return AbnormalityKind(kind=op, start_frac=start_frac, len_frac=len_frac,
                           min_frac=cfg.min_span_frac)


def _donor_kind(kind: AbnormalityKind, target_len: int, donor_len: int,
                rng: np.random.Generator) -> AbnormalityKind:
    """Re-draw donor_start_frac so the fragment fits inside the donor."""
    frag = int(round(kind.len_frac * target_len))
    max_start = max(donor_len - frag, 0)
    donor_start = float(rng.uniform(0.0, max_start / donor_len)) if max_start else 0.0
    return AbnormalityKind(kind=kind.kind, start_frac=kind.start_frac,
                           len_frac=kind.len_frac, donor_start_frac=donor_start,
                           min_frac=kind.min_frac)


def build_pretrain_corpus(templates: list[IdeogramTemplate], table: LengthGroupTable,
                          config: CorpusConfig, seed: int) -> CorpusBuild:
    """Generate a label-balanced corpus, one bag per synthetic subject.

    Abnormal bags are either operator-driven (one abnormality kind and span
    per subject, applied to exactly one chromosome of every pair) or
    mixed-type (the pair joins two different chromosome types from the same
    length group). Subjects split 9:1 into train/val with no overlap, and
    every subject draws from its own spawned RNG stream, so output is
    independent of generation order.
    """
    root = np.random.SeedSequence(int(seed))
    children = root.spawn(config.n_subjects + 1)
    assign_rng = np.random.default_rng(children[0])
    noise = RenderNoise(sigma=config.sigma, warp_amp=config.warp_amp)

    n = config.n_subjects
    n_abnormal = int(round(n * config.abnormal_ratio))
    n_mixed = int(round(n_abnormal * config.mixed_type_ratio))
    roles = np.array(["mixed"] * n_mixed + ["operator"] * (n_abnormal - n_mixed)
                     + ["normal"] * (n - n_abnormal))
    roles = roles[assign_rng.permutation(n)]
    n_val = int(round(n * config.val_fraction))
    val_ids = set(assign_rng.permutation(n)[:n_val].tolist())

    counts: Counter = Counter()
    train: list[BagRecord] = []
    val: list[BagRecord] = []
    roles_info: dict[str, dict] = {}
    for idx in range(n):
        rng = np.random.default_rng(children[idx + 1])
        role = roles[idx]
        chrom_type = int(rng.integers(0, N_CHROM_TYPES))
        band_level = int(rng.choice(BAND_LEVELS))
        template = templates[chrom_type]
        pairs = []
        if role == "mixed":
            peers = [t for t in table.types_in_group(table.group_of(chrom_type))
                     if t != chrom_type]
            partner = templates[int(rng.choice(peers))]
            for _ in range(config.m):
                a = render_chromosome(template, band_level, noise, rng)
                b = render_chromosome(partner, band_level, noise, rng)
                pairs.append(_finish_pair(a, b, config.d, config.flip_prob, rng))
            label = 1
            counts["mixed_type"] += 1
            info = {"role": "mixed", "kind": None, "partner_type": partner.chrom_type}
        elif role == "operator":
            kind = _sample_kind(rng, config)
            needs_donor = kind.kind is Abnormality.ADDED_FOREIGN or (
                kind.kind is Abnormality.REPLACED and rng.random() < 0.5)
            donor_template = None
            if needs_donor:
                peers = [t for t in table.types_in_group(table.group_of(chrom_type))
                         if t != chrom_type]
                donor_template = templates[int(rng.choice(peers))]
            for _ in range(config.m):
                a = render_chromosome(template, band_level, noise, rng)
                b = render_chromosome(template, band_level, noise, rng)
                donor = None
                pair_kind = kind
                if donor_template is not None:
                    donor = render_chromosome(donor_template, band_level, noise, rng)
                    target_len = len(a)  # a and b render to the same length
                    pair_kind = _donor_kind(kind, target_len, len(donor), rng)
                if rng.integers(2) == 0:
                    a = apply_abnormality(a, pair_kind, donor)
                else:
                    b = apply_abnormality(b, pair_kind, donor)
                pairs.append(_finish_pair(a, b, config.d, config.flip_prob, rng))
            label = 1
            counts[kind.kind.value] += 1
            info = {"role": "operator", "kind": kind.kind.value, "partner_type": None}
        else:
            for _ in range(config.m):
                a = render_chromosome(template, band_level, noise, rng)
                b = render_chromosome(template, band_level, noise, rng)
                pairs.append(_finish_pair(a, b, config.d, config.flip_prob, rng))
            label = 0
            counts["normal"] += 1
            info = {"role": "normal", "kind": None, "partner_type": None}

        subject_id = f"sub{idx:06d}"
        record = BagRecord(pairs=tuple(pairs), chrom_type=chrom_type, band_level=band_level,
                           label=label, subject_id=subject_id, record_id=f"{subject_id}-b0")
        roles_info[record.record_id] = info
        (val if idx in val_ids else train).append(record)
    return CorpusBuild(train=train, val=val, kind_counts=dict(counts), roles=roles_info)
