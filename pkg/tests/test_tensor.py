import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dynact.errors import ContractViolation
from dynact.tensor import (
    F32,
    activation,
    as_vector,
    l2_norm,
    matvec,
    rms_norm,
    softmax,
)

# bounded so f32 rounding stays far below the asserted tolerances
finite_f32 = st.floats(-1e3, 1e3, width=32, allow_nan=False, allow_infinity=False)
small_f32 = st.floats(-10, 10, width=32, allow_nan=False, allow_infinity=False)


def vec(data):
    return np.asarray(data, dtype=F32)


def mat(data):
    return np.asarray(data, dtype=F32)


class TestMatvec:
    def test_identity(self):
        assert np.array_equal(matvec(np.eye(3, dtype=F32), vec([1, 2, 3])), vec([1, 2, 3]))

    def test_annihilator(self):
        out = matvec(np.zeros((2, 3), dtype=F32), vec([5, 5, 5]))
        assert np.array_equal(out, vec([0, 0]))

    def test_hand_computed(self):
        # [[1,2],[3,4]] @ [1,1] = [1+2, 3+4]
        out = matvec(mat([[1, 2], [3, 4]]), vec([1, 1]))
        assert np.array_equal(out, vec([3, 7]))

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            matvec(np.eye(3, dtype=F32), vec([1, 2]))

    @given(
        hnp.arrays(F32, (4, 3), elements=small_f32),
        hnp.arrays(F32, 3, elements=small_f32),
        hnp.arrays(F32, 3, elements=small_f32),
        st.floats(-3, 3), st.floats(-3, 3),
    )
    @settings(max_examples=50)
    def test_linearity(self, m, u, v, a, b):
        lhs = matvec(m, (F32(a) * u + F32(b) * v).astype(F32))
        rhs = F32(a) * matvec(m, u) + F32(b) * matvec(m, v)
        assert np.allclose(lhs, rhs, rtol=1e-4, atol=1e-3)


class TestL2Norm:
    def test_zero_vector(self):
        assert l2_norm(vec([0, 0, 0])) == 0.0

    def test_three_four_five(self):
        assert l2_norm(vec([3, 4])) == pytest.approx(5.0)

    def test_unit(self):
        assert l2_norm(vec([1])) == 1.0

    def test_empty_forbidden(self):
        with pytest.raises(ContractViolation):
            l2_norm(vec([]))

    @given(hnp.arrays(F32, 5, elements=finite_f32), st.floats(-10, 10))
    @settings(max_examples=50)
    def test_homogeneity(self, v, c):
        assert l2_norm((F32(c) * v).astype(F32)) == pytest.approx(
            abs(c) * l2_norm(v), rel=1e-5, abs=1e-4
        )


class TestActivation:
    def test_relu_sign_split(self):
        assert np.array_equal(activation("relu", vec([-1, 0, 2])), vec([0, 0, 2]))

    def test_relu_squared(self):
        assert np.array_equal(activation("relu_squared", vec([-1, 3])), vec([0, 9]))

    def test_silu_zero(self):
        assert activation("silu", vec([0]))[0] == 0.0

    def test_silu_value(self):
        # silu(1) = 1 / (1 + e^-1)
        assert activation("silu", vec([1.0]))[0] == pytest.approx(
            1.0 / (1.0 + np.exp(-1.0)), rel=1e-6
        )

    def test_silu_extremes_finite(self):
        out = activation("silu", vec([-100.0, 100.0]))
        assert np.all(np.isfinite(out))

    def test_unknown_kind(self):
        with pytest.raises(ContractViolation):
            activation("gelu", vec([1.0]))

    @given(hnp.arrays(F32, 8, elements=finite_f32))
    @settings(max_examples=50)
    def test_relu_squared_is_relu_squared_exactly(self, v):
        r = activation("relu", v)
        assert np.array_equal(activation("relu_squared", v), r * r)


class TestRmsNorm:
    def test_unit_rms(self):
        out = rms_norm(vec([1, 1, 1, 1]), np.ones(4, dtype=F32), eps=1e-12)
        assert np.allclose(out, 1.0, atol=1e-6)

    def test_rms_two(self):
        out = rms_norm(vec([2, 2]), np.ones(2, dtype=F32), eps=1e-12)
        assert np.allclose(out, 1.0, atol=1e-6)

    def test_zero_input(self):
        out = rms_norm(vec([0, 0]), np.ones(2, dtype=F32), eps=1e-6)
        assert np.array_equal(out, vec([0, 0]))

    def test_gain_mismatch(self):
        with pytest.raises(ContractViolation):
            rms_norm(vec([1, 2]), np.ones(3, dtype=F32))


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(vec([0, 0])), [0.5, 0.5])

    def test_stability_under_large_values(self):
        out = softmax(vec([1000, 1000]))
        assert np.all(np.isfinite(out))
        assert np.allclose(out, [0.5, 0.5])

    def test_closed_form(self):
        # [0, ln 3] -> [1/(1+3), 3/(1+3)]
        out = softmax(vec([0.0, np.log(3.0)]))
        assert np.allclose(out, [0.25, 0.75], atol=1e-6)

    def test_sums_to_one(self):
        out = softmax(vec([0.3, -1.2, 2.5]))
        assert abs(float(out.sum()) - 1.0) < 1e-6
        assert np.all(out > 0)

    @given(hnp.arrays(F32, 6, elements=st.floats(-4, 4, width=32)), st.floats(-4, 4))
    @settings(max_examples=50)
    def test_shift_invariance(self, v, c):
        shifted = (v + F32(c)).astype(F32)
        assert np.allclose(softmax(shifted), softmax(v), atol=1e-6)


def test_as_vector_rejects_matrix():
    with pytest.raises(ContractViolation):
        as_vector(np.zeros((2, 2)))
