import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudoseg.errors import ContractError, ValidationError
from pseudoseg.modelmath import (
    EPS,
    Checkpoint,
    GainCoefficients,
    LossComponents,
    average_checkpoints,
    bce,
    composite_loss,
    dfl,
    iou_loss,
)

nonneg = st.floats(0, 100, allow_nan=False, allow_infinity=False)


class TestBce:
    def test_values(self):
        assert bce(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
        assert bce(1 - EPS, 1) <= 1.1e-7
        assert bce(1.0, 1) <= 1.1e-7
        assert bce(EPS, 1) == pytest.approx(-math.log(1e-7), abs=1e-9)
        assert bce(0.0, 1) == pytest.approx(16.1181, abs=1e-4)

    def test_vector_mean(self):
        assert bce([0.5, 1.0], [1, 1]) == pytest.approx((math.log(2) - math.log1p(-EPS)) / 2, abs=1e-12)

    @pytest.mark.parametrize("y", [0.5, 2, -1])
    def test_bad_label(self, y):
        with pytest.raises(ContractError):
            bce(0.3, y)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone_for_positive_label(self, a, b):
        lo, hi = sorted((a, b))
        assert bce(lo, 1) >= bce(hi, 1) >= 0


class TestDfl:
    def test_integer_target(self):
        assert dfl([0, 0, 0, 1.0, 0], 3) <= 1.1e-7

    def test_symmetric(self):
        assert dfl([0, 0, 0.5, 0.5], 2.5) == pytest.approx(math.log(2), abs=1e-12)

    def test_quarter(self):
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert dfl([0, 0, 0.75, 0.25], 2.25) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.562335, abs=1e-6)

    def test_continuity_at_bins(self):
        d = [0.1, 0.2, 0.3, 0.4]
        for k in range(1, 3):
            at = dfl(d, k)
            assert abs(dfl(d, k - 1e-12) - at) < 1e-9
            assert abs(dfl(d, k + 1e-12) - at) < 1e-9
            assert at == pytest.approx(-math.log(d[k]), abs=1e-15)

    @pytest.mark.parametrize("dist, target", [([0.5, 0.6], 0.5), ([1.5, -0.5], 0.5), ([0.5, 0.5], 1.5), ([[1.0]], 0)])
    def test_malformed(self, dist, target):
        with pytest.raises(ContractError):
            dfl(dist, target)


class TestIouLoss:
    def test_values(self):
        assert iou_loss([0, 0, 1, 1], [0, 0, 1, 1]) == 0
        assert iou_loss([0, 0, 1, 1], [5, 5, 1, 1]) == 1
        assert iou_loss([0, 0, 1, 1], [0.5, 0, 1, 1]) == pytest.approx(2 / 3, abs=1e-15)
        assert iou_loss([0, 0, 0, 0], [0, 0, 0, 0]) == 1

    def test_negative_size(self):
        with pytest.raises(ContractError):
            iou_loss([0, 0, -1, 1], [0, 0, 1, 1])

    @given(st.lists(st.floats(0, 10), min_size=8, max_size=8))
    def test_symmetric_and_bounded(self, v):
        a, b = v[:4], v[4:]
        x = iou_loss(a, b)
        assert x == iou_loss(b, a)
        assert 0 <= x <= 1


class TestComposite:
    def test_default_gains(self):
        g = GainCoefficients()
        assert (g.lambda_b, g.lambda_c, g.lambda_s, g.lambda_f) == (7.5, 0.5, 0.468, 2.0)
        assert abs(composite_loss(LossComponents(1, 1, 1, 1), g) - 10.468) <= 1e-12

    def test_zero(self):
        assert composite_loss(LossComponents(0, 0, 0, 0)) == 0

    @settings(max_examples=200)
    @given(st.tuples(nonneg, nonneg, nonneg, nonneg), st.tuples(nonneg, nonneg, nonneg, nonneg))
    def test_doubling_gains(self, comps, gains):
        c = LossComponents(*comps)
        g = GainCoefficients(*gains)
        g2 = GainCoefficients(*(2 * x for x in gains))
        assert composite_loss(c, g2) == pytest.approx(2 * composite_loss(c, g), rel=1e-12, abs=1e-12)

    def test_zero_gain_annihilates(self):
        c = LossComponents(3.0, 5.0, 7.0, 11.0)
        assert composite_loss(c, GainCoefficients(0, 0, 0, 1)) == 5.0
        assert composite_loss(c, GainCoefficients(1, 0, 0, 0)) == 11.0

    @pytest.mark.parametrize("bad", [-1.0, math.nan, math.inf])
    def test_validation(self, bad):
        with pytest.raises(ValidationError):
            LossComponents(bad, 0, 0, 0)
        with pytest.raises(ValidationError):
            GainCoefficients(bad, 0, 0, 0)


def random_ckpt(rng, shapes=None):
    shapes = shapes or {"w": (2, 2), "b": (3,)}
    return Checkpoint({k: rng.normal(size=s) for k, s in shapes.items()})


class TestAverage:
    def test_identical(self):
        rng = np.random.default_rng(1)
        c = random_ckpt(rng)
        assert average_checkpoints([c] * 5) == c
        p = Checkpoint({"x": np.full(7, 0.1)})
        assert average_checkpoints([p] * 3) == p

    def test_two(self):
        out = average_checkpoints([Checkpoint({"t": [0.0]}), Checkpoint({"t": [2.0]})])
        assert out.tensors["t"].tolist() == [1.0]

    def test_mean_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            cks = [random_ckpt(rng, {"w": (2, 2)}) for _ in range(3)]
            out = average_checkpoints(cks).tensors["w"]
            for idx in np.ndindex(2, 2):
                assert abs(out[idx] - sum(float(c.tensors["w"][idx]) for c in cks) / 3) <= 1e-12

    def test_permutation_exact(self):
        rng = np.random.default_rng(3)
        cks = [random_ckpt(rng) for _ in range(5)]
        base = average_checkpoints(cks)
        for _ in range(10):
            order = rng.permutation(5)
            assert average_checkpoints([cks[i] for i in order]) == base

    def test_mismatch_names_tensor(self):
        a = Checkpoint({"w": [1.0], "b": [0.0]})
        with pytest.raises(ContractError, match="'b'"):
            average_checkpoints([a, Checkpoint({"w": [1.0]})])
        with pytest.raises(ContractError, match="'w'"):
            average_checkpoints([a, Checkpoint({"w": [1.0, 2.0], "b": [0.0]})])

    def test_empty(self):
        with pytest.raises(ContractError):
            average_checkpoints([])

    def test_json_round_trip(self):
        c = random_ckpt(np.random.default_rng(0))
        back = Checkpoint.from_json(c.to_json())
        assert back == c and back.to_json() == c.to_json()

    def test_json_shape_mismatch(self):
        with pytest.raises(ValidationError):
            Checkpoint.from_json('{"tensors": {"w": {"shape": [2, 2], "data": [1, 2, 3]}}}')

    def test_non_finite(self):
        with pytest.raises(ValidationError):
            Checkpoint({"w": [math.nan]})
