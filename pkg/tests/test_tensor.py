import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, rel_err
from faircpd.errors import DegenerateInputError, DimensionError, FormatError, InvalidModeError
from faircpd.tensor import (
    FactorModel, gram_hadamard, khatri_rao, load_array, load_model, mode1_refold, mode1_unfold,
    mttkrp, reconstruct, relative_residual, residual_grad, save_array, save_model,
    squared_residual, unfold,
)


def loop_reconstruct(a, b, c):
    i, j, k = a.shape[0], b.shape[0], c.shape[0]
    out = np.zeros((i, j, k))
    for p in range(i):
        for q in range(j):
            for t in range(k):
                for r in range(a.shape[1]):
                    out[p, q, t] += a[p, r] * b[q, r] * c[t, r]
    return out


def random_model(rng, dims, rank):
    return FactorModel(*(rng.random((d, rank)) for d in dims))


def test_rank_one_ones():
    ones = np.ones((2, 1))
    np.testing.assert_array_equal(reconstruct(FactorModel(ones, ones, ones)), np.ones((2, 2, 2)))


def test_zero_factor_gives_zero(rng):
    m = random_model(rng, (3, 4, 2), 2).replace(a=np.zeros((3, 2)))
    assert not reconstruct(m).any()


def test_reconstruct_matches_loop_oracle(rng):
    m = random_model(rng, (3, 4, 2), 2)
    assert np.abs(reconstruct(m) - loop_reconstruct(*m.factors)).max() < 1e-12


def test_matrix_model_reconstruct(rng):
    m = random_model(rng, (5, 3), 2)
    np.testing.assert_allclose(reconstruct(m), m.a @ m.b.T, atol=1e-15)
    assert m.is_matrix and m.shape == (5, 3)


def test_factor_rank_mismatch():
    with pytest.raises(DimensionError):
        FactorModel(np.ones((2, 2)), np.ones((3, 3)))
    with pytest.raises(DimensionError):
        FactorModel(np.ones((2, 2)), np.ones((3, 2)), np.ones((4, 1)))


def test_nonfinite_factor_rejected():
    with pytest.raises(ValueError):
        FactorModel(np.array([[np.nan]]), np.ones((1, 1)))


def test_khatri_rao_ones_and_rows(rng):
    np.testing.assert_array_equal(khatri_rao(np.ones((2, 1)), np.ones((3, 1))), np.ones((6, 1)))
    u, v = rng.random((3, 2)), rng.random((4, 2))
    kr = khatri_rao(u, v)
    assert kr.shape == (12, 2)
    for p in range(3):
        for q in range(4):
            np.testing.assert_array_equal(kr[p * 4 + q], u[p] * v[q])
    with pytest.raises(DimensionError):
        khatri_rao(np.ones((2, 1)), np.ones((2, 2)))


def test_unfold_convention(rng):
    x = rng.random((2, 3, 4))
    u = mode1_unfold(x)
    for i, j, k in np.ndindex(x.shape):
        assert u[i, k * 3 + j] == x[i, j, k]
    np.testing.assert_array_equal(mode1_refold(u, x.shape), x)
    u2, u3 = unfold(x, 1), unfold(x, 2)
    for i, j, k in np.ndindex(x.shape):
        assert u2[j, k * 2 + i] == x[i, j, k]
        assert u3[k, j * 2 + i] == x[i, j, k]
    with pytest.raises(InvalidModeError):
        unfold(x, 3)


def test_unfolded_reconstruction_identity(rng):
    m = random_model(rng, (3, 4, 5), 2)
    lhs = mode1_unfold(reconstruct(m))
    rhs = m.a @ khatri_rao(m.c, m.b).T
    assert np.abs(lhs - rhs).max() < 1e-12


def test_relative_residual_cases(rng):
    m = random_model(rng, (4, 3, 3), 2)
    x = reconstruct(m)
    assert relative_residual(x, m) == 0.0
    zero = m.replace(a=np.zeros_like(m.a))
    assert relative_residual(x, zero) == pytest.approx(1.0, abs=1e-15)
    y = rng.random(x.shape)
    oracle = np.sqrt(sum((y[idx] - x[idx]) ** 2 for idx in np.ndindex(y.shape))
                     / sum(y[idx] ** 2 for idx in np.ndindex(y.shape)))
    assert relative_residual(y, m) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(DegenerateInputError):
        relative_residual(np.zeros(x.shape), m)
    with pytest.raises(DimensionError):
        relative_residual(np.ones((4, 3, 2)), m)


@pytest.mark.parametrize("dims", [(4, 3, 3), (5, 4)])
@pytest.mark.parametrize("normalize", [False, True])
def test_residual_grad_finite_differences(rng, dims, normalize):
    m = random_model(rng, dims, 2)
    x = rng.random(dims)
    scale = 1.0 / x.size if normalize else 1.0
    for mode in range(len(dims)):
        def f(fac, mode=mode):
            facs = list(m.factors)
            facs[mode] = fac
            return scale * squared_residual(x, FactorModel(*facs))

        num = central_diff(f, m.factors[mode])
        assert rel_err(residual_grad(x, m, mode, normalize=normalize), num) < 1e-6


def test_residual_grad_zero_at_exact_fit(rng):
    m = random_model(rng, (3, 3, 3), 2)
    x = reconstruct(m)
    for mode in "ABC":
        assert np.abs(residual_grad(x, m, mode)).max() < 1e-12


def test_residual_grad_hand_case():
    a = b = c = np.ones((2, 1))
    m = FactorModel(a, b, c)
    x = 2.0 * reconstruct(m)
    # X_(1)(C kr B) = 2 * 4 per row; A (B^T B * C^T C) = 4 per row
    np.testing.assert_allclose(residual_grad(x, m, "A"), -2 * 8 + 2 * 4 * np.ones((2, 1)))


def test_mode_c_on_matrix_model(rng):
    m = random_model(rng, (3, 2), 1)
    with pytest.raises(InvalidModeError):
        residual_grad(np.ones((3, 2)), m, "C")
    with pytest.raises(InvalidModeError):
        gram_hadamard(m, 2)


def test_mttkrp_matches_unfolding(rng):
    m = random_model(rng, (3, 4, 5), 2)
    x = rng.random((3, 4, 5))
    np.testing.assert_allclose(mttkrp(x, m, 1), unfold(x, 1) @ khatri_rao(m.c, m.a))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(-3, 3), r=st.integers(0, 2))
def test_multilinear_in_columns(seed, alpha, r):
    rng = np.random.default_rng(seed)
    m = random_model(rng, (3, 2, 4), 3)
    a = m.a.copy()
    a[:, r] *= alpha
    scaled = reconstruct(m.replace(a=a))
    single = np.einsum("i,j,k->ijk", m.a[:, r], m.b[:, r], m.c[:, r])
    np.testing.assert_allclose(scaled, reconstruct(m) + (alpha - 1) * single, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_residual_invariant_to_column_permutation(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, (3, 4, 2), 3)
    x = rng.random((3, 4, 2))
    perm = rng.permutation(3)
    pm = FactorModel(*(f[:, perm] for f in m.factors))
    assert relative_residual(x, pm) == pytest.approx(relative_residual(x, m), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), dims=st.tuples(*(st.integers(1, 5),) * 3))
def test_unfold_refold_roundtrip(seed, dims):
    x = np.random.default_rng(seed).standard_normal(dims)
    np.testing.assert_array_equal(mode1_refold(mode1_unfold(x), dims), x)


def test_array_roundtrip_exact(tmp_path, rng):
    for shape in [(3, 4), (2, 3, 4)]:
        x = rng.standard_normal(shape) * 1e-7
        save_array(tmp_path / "x.txt", x)
        assert (tmp_path / "x.txt").read_text().splitlines()[0] == "dims: " + " ".join(map(str, shape))
        np.testing.assert_array_equal(load_array(tmp_path / "x.txt"), x)


def test_array_format_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("shape: 2 2\n1\n2\n3\n4\n")
    with pytest.raises(FormatError):
        load_array(p)
    p.write_text("dims: 2 2\n1\n2\n3\n")
    with pytest.raises(FormatError):
        load_array(p)


def test_model_roundtrip(tmp_path, rng):
    for dims in [(3, 4, 2), (5, 3)]:
        m = random_model(rng, dims, 2)
        save_model(tmp_path / str(len(dims)), m)
        back = load_model(tmp_path / str(len(dims)))
        for f, g in zip(m.factors, back.factors):
            np.testing.assert_array_equal(f, g)
        assert back.is_matrix == m.is_matrix
