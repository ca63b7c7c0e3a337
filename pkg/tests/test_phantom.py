import dataclasses

import numpy as np
import pytest

from flowup import phantom
from flowup.phantom import ChemoArm, SliceLabel, TreatmentContext


@pytest.fixture(scope="module")
def cohort():
    return phantom.generate_cohort(25, 32, seed=7)


def diseased_of(records):
    return [r for r in records if r.slice_label == SliceLabel.DISEASED]


class TestGenerateCohort:
    def test_shapes_and_range(self, cohort):
        assert len(cohort) == 25
        for rec in cohort:
            assert rec.baseline.shape == (32, 32, 3)
            assert rec.baseline.dtype == np.float32
            assert rec.baseline.min() >= 0.0 and rec.baseline.max() <= 1.0
            assert rec.dose.shape == (32, 32)
            assert rec.dose.min() >= 0.0 and rec.dose.max() <= 1.0

    def test_cohort_dose_peak_is_exactly_one(self, cohort):
        assert max(r.dose.max() for r in cohort) == 1.0

    def test_deterministic(self):
        a = phantom.generate_cohort(1, 32, seed=7)[0]
        b = phantom.generate_cohort(1, 32, seed=7)[0]
        assert a.params == b.params
        assert np.array_equal(a.baseline, b.baseline)
        assert np.array_equal(a.dose, b.dose)
        assert a.followup_days == b.followup_days

    def test_followup_day_counts(self):
        for rec in phantom.generate_cohort(4, 32, seed=7):
            assert 3 <= len(rec.followup_days) <= 19
            assert all(30 <= d <= phantom.MAX_FOLLOWUP_DAY for d in rec.followup_days)
            assert rec.followup_days == sorted(rec.followup_days)

    def test_label_matches_lesion_radius(self, cohort):
        for rec in cohort:
            diseased = rec.params.lesion_radius > 0
            assert (rec.slice_label == SliceLabel.DISEASED) == diseased

    def test_both_labels_present(self, cohort):
        labels = {r.slice_label for r in cohort}
        assert labels == {SliceLabel.HEALTHY_APPEARING, SliceLabel.DISEASED}

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            phantom.generate_cohort(0, 32, seed=1)
        with pytest.raises(ValueError):
            phantom.generate_cohort(4, 8, seed=1)


class TestParamsInvariants:
    def test_ventricle_inside_brain(self, cohort):
        for rec in cohort:
            for i in range(2):
                assert rec.params.vent_axes[i] < rec.params.brain_axes[i]

    def test_lesion_inside_brain(self, cohort):
        for rec in diseased_of(cohort):
            p = rec.params
            off = np.hypot(p.lesion_center[0] - p.brain_center[0],
                           p.lesion_center[1] - p.brain_center[1])
            assert off + p.lesion_radius <= min(p.brain_axes)

    def test_bad_params_rejected(self, cohort):
        p = cohort[0].params
        with pytest.raises(ValueError):
            dataclasses.replace(p, vent_axes=p.brain_axes)
        with pytest.raises(ValueError):
            dataclasses.replace(p, lesion_radius=min(p.brain_axes) * 2,
                                lesion_center=p.brain_center)


class TestOracle:
    def test_day_zero_is_baseline(self, cohort):
        for rec in cohort[:5]:
            fu = phantom.oracle_followup(rec, TreatmentContext(0))
            assert np.array_equal(fu, rec.baseline)

    def test_ventricle_monotone_in_dose_scale(self, cohort):
        scales = [0.5, 0.8, 1.0, 1.2, 1.5]
        for rec in cohort[:8]:
            for days in (90, 360, 720):
                for chemo in ChemoArm:
                    areas = []
                    for ds in scales:
                        st = phantom.dynamics_state(
                            rec.params, rec.dose, TreatmentContext(days, chemo, ds))
                        areas.append(st.vent_axes[0] * st.vent_axes[1])
                    assert all(a2 >= a1 - 1e-12 for a1, a2 in zip(areas, areas[1:]))

    def test_lesion_monotone_in_dose_scale(self, cohort):
        scales = [0.3, 0.6, 0.9, 1.2, 1.5]
        for rec in diseased_of(cohort)[:6]:
            for days in (90, 360, 720):
                radii = []
                for ds in scales:
                    st = phantom.dynamics_state(
                        rec.params, rec.dose, TreatmentContext(days, ChemoArm.NONE, ds))
                    radii.append(st.lesion_radius)
                assert all(r2 <= r1 + 1e-12 for r1, r2 in zip(radii, radii[1:]))

    def test_lesion_regrows_at_low_dose(self, cohort):
        rec = diseased_of(cohort)[0]
        ctx = lambda d: TreatmentContext(d, ChemoArm.NONE, 0.05)
        late = phantom.dynamics_state(rec.params, rec.dose, ctx(700)).lesion_radius
        at_latency = phantom.dynamics_state(
            rec.params, rec.dose, ctx(int(phantom.REGROWTH_LATENCY_DAYS))).lesion_radius
        assert late > at_latency

    def test_edema_gated_by_chemo(self, cohort):
        rec = diseased_of(cohort)[0]
        days = int(rec.params.edema_onset_day) + 120
        ring_none = phantom.edema_ring_mask(rec, TreatmentContext(days, ChemoArm.NONE))
        ring_tmz = phantom.edema_ring_mask(rec, TreatmentContext(days, ChemoArm.ADJUVANT_TMZ))
        assert ring_none.sum() > 0
        assert ring_tmz.sum() == 0

    def test_edema_appears_right_after_onset(self, cohort):
        rec = diseased_of(cohort)[0]
        just_after = int(rec.params.edema_onset_day) + 2
        ring = phantom.edema_ring_mask(rec, TreatmentContext(just_after, ChemoArm.NONE))
        assert ring.sum() > 0
        before = phantom.edema_ring_mask(
            rec, TreatmentContext(int(rec.params.edema_onset_day) - 1, ChemoArm.NONE))
        assert before.sum() == 0

    def test_edema_flair_up_t1_down(self, cohort):
        rec = diseased_of(cohort)[0]
        days = int(rec.params.edema_onset_day) + 150
        fu = phantom.oracle_followup(rec, TreatmentContext(days, ChemoArm.NONE))
        ref = phantom.oracle_followup(rec, TreatmentContext(days, ChemoArm.ADJUVANT_TMZ))
        ring = phantom.edema_ring_mask(rec, TreatmentContext(days, ChemoArm.NONE))
        assert fu[ring][:, 2].mean() > ref[ring][:, 2].mean()  # FLAIR-like up
        assert fu[ring][:, 0].mean() < ref[ring][:, 0].mean()  # T1-like down

    def test_outputs_in_unit_range(self, cohort):
        for rec in cohort[:4]:
            for days in (30, 400, 720):
                fu = phantom.oracle_followup(rec, TreatmentContext(days, ChemoArm.NONE, 1.3))
                assert fu.min() >= 0.0 and fu.max() <= 1.0


def sorted_percentile(values, pct):
    """Independent sort-based linear-interpolation percentile."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    q = pct / 100.0 * (len(v) - 1)
    k = int(np.floor(q))
    f = q - k
    if k + 1 < len(v):
        return v[k] * (1 - f) + v[k + 1] * f
    return v[k]


class TestNormalizePercentile:
    def test_constant_image_maps_to_zero(self):
        img = np.full((10, 10), 5.0)
        assert np.array_equal(phantom.normalize_percentile(img), np.zeros((10, 10)))

    def test_thousand_value_oracle(self):
        values = np.arange(1000) / 1000.0
        p_lo = sorted_percentile(values, 0.5)
        p_hi = sorted_percentile(values, 99.5)
        assert p_lo == pytest.approx(0.004995, abs=1e-12)
        assert p_hi == pytest.approx(0.994005, abs=1e-12)
        expected = (np.clip(values, p_lo, p_hi) - p_lo) / (p_hi - p_lo)
        out = phantom.normalize_percentile(values.reshape(25, 40))
        np.testing.assert_allclose(out.ravel(), expected, atol=1e-12)

    def test_random_image_matches_sort_oracle(self):
        rng = np.random.default_rng(3)
        img = rng.normal(size=(17, 13, 3)) * 40 + 7
        p_lo = sorted_percentile(img, 0.5)
        p_hi = sorted_percentile(img, 99.5)
        expected = (np.clip(img, p_lo, p_hi) - p_lo) / (p_hi - p_lo)
        np.testing.assert_allclose(phantom.normalize_percentile(img), expected, atol=1e-12)

    def test_identity_when_range_is_unit(self):
        # 201 values: the 0.5/99.5 percentile indices are integral, so the
        # percentiles are exact order statistics.
        values = np.linspace(0.0, 1.0, 201)
        out = phantom.normalize_percentile(values)
        clipped = np.clip(values, values[1], values[199])
        expected = (clipped - values[1]) / (values[199] - values[1])
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_idempotent_on_own_output(self):
        rng = np.random.default_rng(11)
        img = rng.normal(size=401) * 3.0   # integral percentile indices
        once = phantom.normalize_percentile(img)
        twice = phantom.normalize_percentile(once)
        np.testing.assert_allclose(twice, once, atol=1e-12)
        assert once.min() >= 0.0 and once.max() <= 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            phantom.normalize_percentile(np.zeros((0,)))
        with pytest.raises(ValueError):
            phantom.normalize_percentile(np.ones((4, 4)), lo_pct=50, hi_pct=10)


class TestRescaleDose:
    def test_two_patient_maxima(self):
        a = np.full((4, 4), 30.0)
        b = np.full((4, 4), 60.0)
        out = phantom.rescale_dose_cohort([a, b])
        assert out[0].max() == pytest.approx(0.5)
        assert out[1].max() == 1.0

    def test_single_map_peak_is_one(self):
        out = phantom.rescale_dose_cohort([np.array([[1.0, 17.3]])])
        assert out[0].max() == 1.0

    def test_ratios_preserved(self):
        rng = np.random.default_rng(0)
        maps = [rng.random((6, 6)) * s for s in (20, 55)]
        out = phantom.rescale_dose_cohort(maps)
        before = maps[0][0, 0] / maps[1][3, 3]
        after = float(out[0][0, 0]) / float(out[1][3, 3])
        assert after == pytest.approx(before, rel=1e-6)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            phantom.rescale_dose_cohort([np.zeros((3, 3))])


class TestBalancedSampler:
    def test_imbalanced_pools_draw_evenly(self, cohort):
        healthy = [r for r in cohort if r.slice_label == SliceLabel.HEALTHY_APPEARING][:10]
        diseased = diseased_of(cohort)[:2]
        it = phantom.balanced_sampler(healthy + diseased, seed=5)
        n = 10000
        draws = [next(it).slice_label for _ in range(n)]
        frac = draws.count(SliceLabel.DISEASED) / n
        assert 0.48 <= frac <= 0.52

    def test_every_window_has_both(self, cohort):
        pair = [diseased_of(cohort)[0],
                next(r for r in cohort if r.slice_label == SliceLabel.HEALTHY_APPEARING)]
        it = phantom.balanced_sampler(pair, seed=1)
        window = [next(it).id for _ in range(100)]
        assert set(window) == {pair[0].id, pair[1].id}

    def test_deterministic(self, cohort):
        ids1 = [r.id for r, _ in zip(phantom.balanced_sampler(cohort, seed=3), range(50))]
        ids2 = [r.id for r, _ in zip(phantom.balanced_sampler(cohort, seed=3), range(50))]
        assert ids1 == ids2

    def test_empty_pool_rejected(self, cohort):
        with pytest.raises(ValueError):
            phantom.balanced_sampler(diseased_of(cohort), seed=0)


class TestPersistence:
    def test_roundtrip_bit_exact(self, cohort, tmp_path):
        out = tmp_path / "cohort"
        cohort_id = phantom.save_cohort(cohort, out, cohort_id="c-test")
        assert cohort_id == "c-test"
        loaded_id, records = phantom.load_cohort(out)
        assert loaded_id == "c-test"
        assert len(records) == len(cohort)
        for a, b in zip(cohort, records):
            assert a.id == b.id
            assert a.params == b.params
            assert np.array_equal(a.baseline, b.baseline)
            assert np.array_equal(a.dose, b.dose)
            assert a.followup_days == b.followup_days
            assert a.slice_label == b.slice_label

    def test_loaded_oracle_matches(self, cohort, tmp_path):
        out = tmp_path / "cohort"
        phantom.save_cohort(cohort, out)
        _, records = phantom.load_cohort(out)
        ctx = TreatmentContext(365, ChemoArm.NONE, 1.1)
        np.testing.assert_array_equal(
            phantom.oracle_followup(records[1], ctx),
            phantom.oracle_followup(cohort[1], ctx))


class TestTreatmentContext:
    def test_validation(self):
        with pytest.raises(ValueError):
            TreatmentContext(-1)
        with pytest.raises(ValueError):
            TreatmentContext(10, dose_scale=0.0)

    def test_chemo_coercion(self):
        ctx = TreatmentContext(5, "none", 1.0)
        assert ctx.chemo is ChemoArm.NONE
