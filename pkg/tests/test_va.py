import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdcml.errors import EmptyCorpusError, InvalidScaleError, OutOfRangeError
from cdcml.va import (
    SigmaProvenance,
    SimilarityScale,
    VAPoint,
    compute_sigma,
    normalize_va,
    similarity,
    va_distance,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


class TestNormalize:
    def test_endpoints_and_midpoint(self):
        assert normalize_va(1, 1, 9) == 0.0
        assert normalize_va(9, 1, 9) == 1.0
        assert normalize_va(5, 1, 9) == pytest.approx(0.5, abs=1e-15)

    def test_degenerate_scale_rejected(self):
        with pytest.raises(InvalidScaleError):
            normalize_va(2, 3, 3)
        with pytest.raises(InvalidScaleError):
            normalize_va(2, 5, 3)

    def test_out_of_range_rejected(self):
        with pytest.raises(OutOfRangeError):
            normalize_va(0.5, 1, 9)
        with pytest.raises(OutOfRangeError):
            normalize_va(9.5, 1, 9)

    @given(
        st.floats(-50, 50, allow_nan=False),
        st.floats(-50, 50, allow_nan=False),
        st.floats(0.1, 100, allow_nan=False),
    )
    def test_affine_and_order_preserving(self, lo, raw_frac, width):
        hi = lo + width
        r1 = lo + 0.25 * width
        r2 = lo + 0.75 * width
        assert normalize_va(r1, lo, hi) < normalize_va(r2, lo, hi)
        # affine: normalized value equals the interpolation fraction
        assert normalize_va(r1, lo, hi) == pytest.approx(0.25, abs=1e-9)


class TestVAPoint:
    def test_rejects_out_of_range(self):
        with pytest.raises(OutOfRangeError):
            VAPoint(-0.01, 0.5)
        with pytest.raises(OutOfRangeError):
            VAPoint(0.5, 1.01)
        with pytest.raises(OutOfRangeError):
            VAPoint(float("nan"), 0.5)

    def test_distance_examples(self):
        assert va_distance(VAPoint(0.5, 0.5), VAPoint(0.5, 0.5)) == 0.0
        assert va_distance(VAPoint(0, 0), VAPoint(1, 1)) == pytest.approx(
            1.41421356, abs=1e-8
        )
        assert va_distance(VAPoint(0.2, 0.4), VAPoint(0.5, 0.8)) == pytest.approx(
            0.5, abs=1e-12
        )

    @given(unit, unit, unit, unit)
    def test_distance_symmetric_and_zero_iff_equal(self, v1, a1, v2, a2):
        p, q = VAPoint(v1, a1), VAPoint(v2, a2)
        assert va_distance(p, q) == va_distance(q, p)
        if (v1, a1) == (v2, a2):
            assert va_distance(p, q) == 0.0
        else:
            assert va_distance(p, q) > 0.0


class TestSigma:
    def test_single_pair(self):
        scale = compute_sigma([VAPoint(0, 0)], [VAPoint(1, 1)])
        assert scale.sigma == pytest.approx(math.sqrt(2), abs=1e-12)
        assert scale.provenance.kind == "exact"

    def test_identical_labels_rejected(self):
        with pytest.raises(InvalidScaleError):
            compute_sigma([VAPoint(0, 0)], [VAPoint(0, 0)])

    def test_empty_pool_rejected(self):
        with pytest.raises(EmptyCorpusError):
            compute_sigma([], [VAPoint(0, 0)])

    def test_matches_brute_force_3x2(self):
        imgs = [VAPoint(0.1, 0.2), VAPoint(0.5, 0.9), VAPoint(0.8, 0.3)]
        mus = [VAPoint(0.4, 0.4), VAPoint(0.9, 0.1)]
        expected = np.mean(
            [va_distance(i, m) for i in imgs for m in mus]
        )
        scale = compute_sigma(imgs, mus)
        assert scale.sigma == pytest.approx(expected, rel=1e-14)

    def test_sampled_mode_deterministic_with_provenance(self):
        rng = np.random.default_rng(5)
        imgs = [VAPoint(v, a) for v, a in rng.uniform(0, 1, size=(40, 2))]
        mus = [VAPoint(v, a) for v, a in rng.uniform(0, 1, size=(30, 2))]
        s1 = compute_sigma(imgs, mus, mode="sampled", seed=7, sample_count=500)
        s2 = compute_sigma(imgs, mus, mode="sampled", seed=7, sample_count=500)
        exact = compute_sigma(imgs, mus)
        assert s1.sigma == s2.sigma
        assert s1.provenance == SigmaProvenance("sampled", seed=7, sample_count=500)
        assert s1.sigma == pytest.approx(exact.sigma, rel=0.2)

    def test_sampled_mode_needs_seed_and_count(self):
        with pytest.raises(InvalidScaleError):
            compute_sigma([VAPoint(0, 0)], [VAPoint(1, 1)], mode="sampled")


class TestSimilarity:
    scale = SimilarityScale(0.5, SigmaProvenance("exact"))

    def test_examples(self):
        assert similarity(0.0, self.scale) == 1.0
        assert similarity(0.5, self.scale) == pytest.approx(0.36787944, abs=1e-8)
        assert similarity(1.0, self.scale) == pytest.approx(0.13533528, abs=1e-8)

    def test_negative_distance_rejected(self):
        with pytest.raises(OutOfRangeError):
            similarity(-0.1, self.scale)

    @given(st.floats(0, 10, allow_nan=False), st.floats(0.01, 5, allow_nan=False))
    def test_bounded(self, d, sigma):
        s = similarity(d, SimilarityScale(sigma, SigmaProvenance("exact")))
        assert 0.0 < s <= 1.0
        assert (s == 1.0) == (d == 0.0)

    @given(
        st.floats(0, 5, allow_nan=False),
        st.floats(1e-6, 5, allow_nan=False),
        st.floats(0.01, 5, allow_nan=False),
    )
    def test_strictly_decreasing(self, d, gap, sigma):
        scale = SimilarityScale(sigma, SigmaProvenance("exact"))
        assert similarity(d, scale) > similarity(d + gap, scale)

    def test_provenance_round_trip(self):
        for p in (SigmaProvenance("exact"), SigmaProvenance("sampled", 3, 99)):
            assert SigmaProvenance.parse(p.format()) == p
