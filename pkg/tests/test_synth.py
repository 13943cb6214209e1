import numpy as np
import pytest

from homnet.data import BAND_LEVELS, RawSequencePair, sequences_equal
from homnet.errors import InvariantViolation, MissingDonor, SpanOutOfRange
from homnet.synth import (
    Abnormality,
    AbnormalityKind,
    CorpusConfig,
    IdeogramTemplate,
    RenderNoise,
    apply_abnormality,
    build_pretrain_corpus,
    flip_raw,
    make_templates,
    render_chromosome,
    rendered_length,
)

QUIET = RenderNoise(sigma=0.0, warp_amp=0.0)


def seq(values):
    arr = np.asarray(values, dtype=float)
    return RawSequencePair(left=arr, right=arr.copy())


class TestTemplates:
    def test_deterministic_in_seed(self):
        t1, g1 = make_templates(99)
        t2, g2 = make_templates(99)
        assert g1 == g2
        for a, b in zip(t1, t2):
            assert a.base_len == b.base_len and a.bands == b.bands

    def test_all_types_present(self):
        templates, table = make_templates(0)
        assert [t.chrom_type for t in templates] == list(range(24))
        assert len(table.groups) == 24
        assert set(table.groups) == set(range(1, 8))

    def test_lengths_strictly_decrease_across_groups(self):
        templates, table = make_templates(7)
        for g in range(1, 7):
            shortest_here = min(templates[t].base_len for t in table.types_in_group(g))
            longest_next = max(templates[t].base_len for t in table.types_in_group(g + 1))
            assert shortest_here > longest_next

    def test_band_structure(self):
        templates, _ = make_templates(3)
        for t in templates:
            assert 4 <= len(t.bands) <= 12
            intensities = [b[2] for b in t.bands]
            for prev, cur in zip(intensities, intensities[1:]):
                assert (prev > 0.5) != (cur > 0.5)  # alternating dark/light

    def test_template_invariants_enforced(self):
        with pytest.raises(InvariantViolation):
            IdeogramTemplate(chrom_type=0, base_len=100,
                             bands=((0.0, 0.4, 0.2), (0.5, 1.0, 0.8)))  # gap


class TestRender:
    def test_noise_free_chromatids_identical(self):
        templates, _ = make_templates(1)
        raw = render_chromosome(templates[0], 550, QUIET, np.random.default_rng(0))
        assert np.array_equal(raw.left, raw.right)

    def test_length_scales_with_band_level(self):
        templates, _ = make_templates(2)
        t = templates[5]
        rng = np.random.default_rng(0)
        n700 = len(render_chromosome(t, 700, QUIET, rng))
        n300 = len(render_chromosome(t, 300, QUIET, rng))
        assert abs(n300 - n700 * 300 / 700) <= 1
        assert n700 == t.base_len

    def test_dark_band_renders_darker(self):
        templates, _ = make_templates(4)
        t = templates[0]
        raw = render_chromosome(t, 700, QUIET, np.random.default_rng(0))
        n = len(raw)
        bands = sorted(t.bands, key=lambda b: b[2])
        lightest, darkest = bands[0], bands[-1]

        def segment_mean(band):
            lo, hi = int(band[0] * n), max(int(band[1] * n), int(band[0] * n) + 1)
            return raw.left[lo:hi].mean()

        assert segment_mean(darkest) < segment_mean(lightest)

    def test_invalid_band_level(self):
        templates, _ = make_templates(0)
        with pytest.raises(InvariantViolation):
            render_chromosome(templates[0], 450, QUIET, np.random.default_rng(0))


class TestAbnormalityOperators:
    def test_deleted(self):
        kind = AbnormalityKind(Abnormality.DELETED, start_frac=0.25, len_frac=0.5, min_frac=0.0)
        out = apply_abnormality(seq([1, 2, 3, 4]), kind)
        assert out.left.tolist() == [1, 4]

    def test_replaced_inversion(self):
        kind = AbnormalityKind(Abnormality.REPLACED, start_frac=0.25, len_frac=0.5, min_frac=0.0)
        out = apply_abnormality(seq([1, 2, 3, 4]), kind)
        assert out.left.tolist() == [1, 3, 2, 4]

    def test_robertsonian(self):
        out = apply_abnormality(seq([1, 2, 3]), AbnormalityKind(Abnormality.ROBERTSONIAN))
        assert out.left.tolist() == [3, 2, 1, 1, 2, 3]

    def test_duplicated_self(self):
        kind = AbnormalityKind(Abnormality.DUPLICATED_SELF, start_frac=0.0, len_frac=2 / 3,
                               min_frac=0.0)
        out = apply_abnormality(seq([1, 2, 3]), kind)
        assert out.left.tolist() == [1, 2, 1, 2, 3]

    def test_added_foreign(self):
        kind = AbnormalityKind(Abnormality.ADDED_FOREIGN, start_frac=0.5, len_frac=0.5,
                               donor_start_frac=0.0, min_frac=0.0)
        out = apply_abnormality(seq([1, 2]), kind, donor=seq([9]))
        assert out.left.tolist() == [1, 9, 2]

    def test_replaced_with_donor(self):
        kind = AbnormalityKind(Abnormality.REPLACED, start_frac=0.0, len_frac=0.5,
                               donor_start_frac=0.5, min_frac=0.0)
        out = apply_abnormality(seq([1, 2, 3, 4]), kind, donor=seq([5, 6, 7, 8]))
        assert out.left.tolist() == [7, 8, 3, 4]

    def test_missing_donor(self):
        kind = AbnormalityKind(Abnormality.ADDED_FOREIGN, start_frac=0.0, len_frac=0.5,
                               min_frac=0.0)
        with pytest.raises(MissingDonor):
            apply_abnormality(seq([1, 2]), kind)

    def test_donor_fragment_out_of_range(self):
        kind = AbnormalityKind(Abnormality.ADDED_FOREIGN, start_frac=0.0, len_frac=1.0,
                               donor_start_frac=0.9, min_frac=0.0)
        with pytest.raises(SpanOutOfRange):
            apply_abnormality(seq([1, 2, 3, 4]), kind, donor=seq([5, 6]))

    def test_empty_span_is_identity(self):
        for op in (Abnormality.DELETED, Abnormality.DUPLICATED_SELF, Abnormality.REPLACED):
            kind = AbnormalityKind(op, start_frac=0.5, len_frac=0.0, min_frac=0.0)
            out = apply_abnormality(seq([1, 2, 3, 4]), kind)
            assert out.left.tolist() == [1, 2, 3, 4]

    def test_span_invariants(self):
        with pytest.raises(InvariantViolation):
            AbnormalityKind(Abnormality.DELETED, start_frac=0.8, len_frac=0.3)
        with pytest.raises(InvariantViolation):
            AbnormalityKind(Abnormality.DELETED, start_frac=0.0, len_frac=0.05)  # below min

    def test_length_laws_random_spans(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            n = int(rng.integers(20, 120))
            x = RawSequencePair(left=rng.uniform(0, 255, n), right=rng.uniform(0, 255, n))
            op = Abnormality(rng.choice([a.value for a in Abnormality]))
            len_frac = float(rng.uniform(0.1, 0.5))
            start_frac = float(rng.uniform(0.0, 1.0 - len_frac))
            kind = AbnormalityKind(op, start_frac=start_frac, len_frac=len_frac,
                                   donor_start_frac=0.0)
            donor = RawSequencePair(left=rng.uniform(0, 255, 2 * n),
                                    right=rng.uniform(0, 255, 2 * n))
            needs_donor = op is Abnormality.ADDED_FOREIGN
            out = apply_abnormality(x, kind, donor if needs_donor else None)
            span = int(round(len_frac * n))
            expected = {
                Abnormality.DELETED: n - span,
                Abnormality.ADDED_FOREIGN: n + span,
                Abnormality.DUPLICATED_SELF: n + span,
                Abnormality.REPLACED: n,
                Abnormality.ROBERTSONIAN: 2 * n,
            }[op]
            assert len(out) == expected
            if op is Abnormality.ROBERTSONIAN:
                assert np.array_equal(out.left, np.concatenate([x.left[::-1], x.left]))
                assert np.array_equal(out.right, np.concatenate([x.right[::-1], x.right]))

    def test_both_rows_edited_identically(self):
        rng = np.random.default_rng(23)
        x = RawSequencePair(left=rng.uniform(0, 255, 40), right=rng.uniform(0, 255, 40))
        kind = AbnormalityKind(Abnormality.DELETED, start_frac=0.2, len_frac=0.3)
        out = apply_abnormality(x, kind)
        keep = np.r_[0:8, 20:40]
        assert np.array_equal(out.left, x.left[keep])
        assert np.array_equal(out.right, x.right[keep])


class TestFlip:
    def test_flip_is_rotation(self):
        raw = RawSequencePair(left=[1.0, 2.0, 3.0], right=[4.0, 5.0, 6.0])
        out = flip_raw(raw)
        assert out.left.tolist() == [6.0, 5.0, 4.0]
        assert out.right.tolist() == [3.0, 2.0, 1.0]

    def test_double_flip_is_identity(self):
        rng = np.random.default_rng(0)
        raw = RawSequencePair(left=rng.uniform(0, 255, 9), right=rng.uniform(0, 255, 9))
        out = flip_raw(flip_raw(raw))
        assert np.array_equal(out.left, raw.left)
        assert np.array_equal(out.right, raw.right)


@pytest.fixture(scope="module")
def built():
    templates, table = make_templates(5)
    config = CorpusConfig(n_subjects=400, m=2, d=256)
    return build_pretrain_corpus(templates, table, config, seed=8), table


class TestCorpus:
    def test_label_balance(self, built):
        build, _ = built
        records = build.train + build.val
        positives = sum(r.label for r in records)
        assert abs(positives / len(records) - 0.5) <= 0.02

    def test_split_ratio_and_subject_disjointness(self, built):
        build, _ = built
        assert len(build.val) == round(0.1 * 400)
        train_subjects = {r.subject_id for r in build.train}
        val_subjects = {r.subject_id for r in build.val}
        assert not train_subjects & val_subjects

    def test_mixed_type_pairs_same_length_group(self, built):
        build, table = built
        records = build.train + build.val
        mixed = [r for r in records if build.roles[r.record_id].get("partner_type") is not None]
        assert len(mixed) == build.kind_counts["mixed_type"] > 0
        for rec in mixed:
            partner = build.roles[rec.record_id]["partner_type"]
            assert table.group_of(partner) == table.group_of(rec.chrom_type)
            assert partner != rec.chrom_type

    def test_kind_counts_cover_all_records(self, built):
        build, _ = built
        assert sum(build.kind_counts.values()) == 400

    def test_band_levels_valid(self, built):
        build, _ = built
        assert {r.band_level for r in build.train} <= set(BAND_LEVELS)

    def test_deterministic(self):
        templates, table = make_templates(5)
        config = CorpusConfig(n_subjects=40, m=2, d=128)
        b1 = build_pretrain_corpus(templates, table, config, seed=8)
        b2 = build_pretrain_corpus(templates, table, config, seed=8)
        from homnet.data import record_to_json
        lines1 = [record_to_json(r) for r in b1.train + b1.val]
        lines2 = [record_to_json(r) for r in b2.train + b2.val]
        assert lines1 == lines2

    def test_operator_bags_alter_exactly_one_side(self):
        # with rendering noise off, the unaltered chromosome must equal a
        # clean re-render of its template; the altered one must differ
        # (except inversion, which may hit a palindromic span)
        templates, table = make_templates(5)
        config = CorpusConfig(n_subjects=60, m=2, d=512, sigma=0.0, warp_amp=0.0,
                              flip_prob=0.0, mixed_type_ratio=0.0)
        build = build_pretrain_corpus(templates, table, config, seed=4)
        from homnet.synth import _fit_to_d
        operator_records = [r for r in build.train + build.val
                            if build.roles[r.record_id]["role"] == "operator"]
        assert operator_records
        checked = 0
        for rec in operator_records:
            clean = _fit_to_d(render_chromosome(templates[rec.chrom_type], rec.band_level,
                                                QUIET, np.random.default_rng(0)), 512)
            for pair in rec.pairs:
                a_clean = sequences_equal(pair.a, clean)
                b_clean = sequences_equal(pair.b, clean)
                assert a_clean or b_clean  # the untouched side is pristine
                if build.roles[rec.record_id]["kind"] != Abnormality.REPLACED.value:
                    assert a_clean != b_clean  # and exactly one side was altered
                    checked += 1
        assert checked > 0

    def test_ratio_validation(self):
        with pytest.raises(InvariantViolation):
            CorpusConfig(n_subjects=10, abnormal_ratio=0.9, mixed_type_ratio=0.2)
        with pytest.raises(InvariantViolation):
            CorpusConfig(n_subjects=10, abnormal_ratio=1.5)
