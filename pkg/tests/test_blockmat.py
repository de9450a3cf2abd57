import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from nbdkalman.blockmat import (
    BandProfile,
    BlockStructure,
    DegenerateSpectrumWarning,
    NbdMatrix,
    NotPositiveDefiniteError,
    StructureMismatchError,
    cross_term,
    first_order_inverse,
    inv_first_order,
    inverse_update,
    invert_factor,
    lower_block_part,
    mul_first_order,
    perturb_eigen,
    redecompose,
    spectral_first_order,
    spectral_stabilize,
    stabilize,
    sym_product_first_order,
    t1_stabilize,
    t2_stabilize,
    tb_stabilize,
)
from nbdkalman.blockmat import counts
from nbdkalman.blockmat.structure import AsymmetricError, NbdError

from conftest import EPS_GRID, halving_ratios, indefinite_truncation, random_nbd

S11 = BlockStructure([1, 1])


def nbd(p0, p1, eps=1.0, s=S11, p2=None, symmetric=True):
    return NbdMatrix(s, eps, tuple(np.atleast_2d(b) for b in p0), np.asarray(p1, float), p2, symmetric)


# -- structure -----------------------------------------------------------------

def test_moments_equal_blocks():
    s = BlockStructure.equal(4, 3)
    assert s.N == 12 and s.offsets == (0, 3, 6, 9)
    assert s.N2 == pytest.approx(12) and s.N3 == pytest.approx(12)


def test_structure_rejects_bad_sizes():
    with pytest.raises(NbdError):
        BlockStructure([])
    with pytest.raises(NbdError):
        BlockStructure([2, 0])


def test_symmetric_flag_symmetrizes():
    P = nbd([[1.0], [2.0]], [[0, 1.0], [3.0, 0]])
    assert_allclose(P.p1, [[0, 2], [2, 0]])


def test_block_shape_mismatch():
    with pytest.raises(StructureMismatchError):
        NbdMatrix(S11, 0.1, (np.eye(2), np.eye(1)), np.zeros((2, 2)))


def test_json_roundtrip(rng):
    P = random_nbd(rng, BlockStructure([2, 1]), 0.3, p2=True)
    Q = NbdMatrix.from_json(json.loads(json.dumps(P.to_json())))
    assert_allclose(Q.dense(), P.dense(), rtol=0, atol=0)


# -- lower block part ------------------------------------------------------------

def test_lower_block_part_examples():
    assert_allclose(lower_block_part(np.array([[2.0, 3], [5, 8]]), S11), [[1, 0], [5, 4]])
    A = np.array([[2.0, 3], [5, 8]])
    assert_allclose(lower_block_part(A, BlockStructure([2])), A / 2)
    P = np.array([[0.0, 1], [1, 0]])
    L = lower_block_part(P, S11)
    assert_allclose(L, [[0, 0], [1, 0]])
    assert_allclose(L + L.T, P)


def test_lower_block_part_dimension_mismatch():
    with pytest.raises(StructureMismatchError):
        lower_block_part(np.eye(3), S11)


# -- stabilizers ---------------------------------------------------------------------

def test_t1_example():
    f = t1_stabilize(nbd([1, 1], [[0, 0.5], [0.5, 0]]))
    assert_allclose(f.value(), [[1, 0.5], [0.5, 1.25]], atol=1e-15)
    assert_allclose(f.value() - nbd([1, 1], [[0, 0.5], [0.5, 0]]).dense(), [[0, 0], [0, 0.25]],
                    atol=1e-15)


def test_t1_eps_zero_is_p0(rng):
    P = random_nbd(rng, BlockStructure([2, 3]), 0.0)
    assert_allclose(t1_stabilize(P).value(), P.p0_dense(), atol=1e-14)


def test_t1_rejects_asymmetric_and_non_pd(rng):
    with pytest.raises(AsymmetricError):
        t1_stabilize(nbd([1, 1], [[0, 1], [0, 0]], symmetric=False))
    with pytest.raises(NotPositiveDefiniteError) as exc:
        t1_stabilize(nbd([1, -1], [[0, 1], [1, 0]]), step=7)
    assert exc.value.block == 1 and exc.value.step == 7


def test_t1_identity_and_psd_difference(rng):
    s = BlockStructure([2, 1, 3])
    for _ in range(20):
        P = random_nbd(rng, s, rng.uniform(0, 1.0))
        f = t1_stabilize(P)
        G = cross_term(P)
        diff = f.value() - (P.p0_dense() + P.eps * P.p1)
        assert_allclose(diff, P.eps**2 * G, rtol=1e-12, atol=1e-12 * np.abs(f.value()).max())
        assert np.linalg.eigvalsh(diff).min() >= -1e-10 * np.linalg.norm(diff, 2) - 1e-15


def test_t2_requires_p2(rng):
    with pytest.raises(NbdError):
        t2_stabilize(random_nbd(rng, S11, 0.1))


def test_t2_with_p2_equal_cross_term_matches_t1(rng):
    s = BlockStructure([2, 2])
    P = random_nbd(rng, s, 0.4)
    P2 = P.with_p2(cross_term(P))
    assert_allclose(t2_stabilize(P2).l, t1_stabilize(P).l, atol=1e-14)


def test_t2_third_order_example():
    errs = []
    for eps in (0.3, 0.15, 0.075, 0.0375):
        P = nbd([1, 1], [[0, 1], [1, 0]], eps, p2=np.zeros((2, 2)))
        errs.append(np.linalg.norm(t2_stabilize(P).value() - P.dense()))
    assert np.all(halving_ratios(errs) >= 6.0)


def test_t2_order_of_accuracy_random(rng):
    s = BlockStructure([2, 1, 2])
    P = random_nbd(rng, s, 1.0, p2=True)
    errs = []
    for eps in EPS_GRID:
        Q = NbdMatrix(s, eps, P.p0, P.p1, P.p2, True)
        errs.append(np.linalg.norm(t2_stabilize(Q).value() - Q.dense()))
    assert np.all(halving_ratios(errs) >= 6.0)


def test_tb_upper_bound_and_p2_zero_matches_t1(rng):
    s = BlockStructure([1, 2, 2])
    for _ in range(20):
        P = random_nbd(rng, s, rng.uniform(0, 1.5), p2=True)
        d = tb_stabilize(P).value() - P.dense()
        assert np.linalg.eigvalsh(d).min() >= -1e-10 * max(1.0, np.linalg.norm(d, 2))
    P = random_nbd(rng, s, 0.5)
    assert_allclose(tb_stabilize(P.with_p2(np.zeros((5, 5)))).value(), t1_stabilize(P).value(),
                    atol=1e-14)


def test_eps_zero_second_order(rng):
    P = random_nbd(rng, BlockStructure([2, 2]), 0.0, p2=True)
    assert_allclose(t2_stabilize(P).value(), P.p0_dense(), atol=1e-14)
    assert_allclose(tb_stabilize(P).value(), P.p0_dense(), atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(sizes=st.lists(st.integers(1, 3), min_size=1, max_size=4),
       eps=st.floats(0.0, 2.0), seed=st.integers(0, 2**31 - 1),
       method=st.sampled_from(["t1", "t2", "tb"]))
def test_stabilized_value_is_psd(sizes, eps, seed, method):
    P = random_nbd(np.random.default_rng(seed), BlockStructure(sizes), eps, p2=True)
    v = stabilize(P, method).value()
    assert np.linalg.eigvalsh(v).min() >= -1e-10 * np.linalg.norm(v, 2)


def test_stabilizers_repair_indefinite_truncation():
    P = indefinite_truncation(delta=-0.2)
    assert np.linalg.eigvalsh(P.dense()).min() == pytest.approx(-0.2)
    for m in ("t1", "t2", "tb", "spectral", "spectral-first-order"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateSpectrumWarning)  # P0 = I
            v = stabilize(P, m).value()
        assert np.linalg.eigvalsh(v).min() >= -1e-10 * np.linalg.norm(v, 2), m


@pytest.mark.parametrize("method", ["t1", "t2"])
def test_idempotence(rng, method):
    s = BlockStructure([2, 1, 2])
    P = random_nbd(rng, s, 0.7, p2=(method == "t2"))
    once = stabilize(P, method)
    again = stabilize(redecompose(once), method)
    assert_allclose(again.value(), once.value(), rtol=0, atol=1e-12 * np.abs(once.value()).max())


def test_factor_apply_matches_value(rng):
    P = random_nbd(rng, BlockStructure([3, 2]), 0.4)
    x = rng.standard_normal(5)
    f = t1_stabilize(P)
    assert_allclose(f.apply(x), f.value() @ x, rtol=1e-12, atol=1e-12)
    g = inv_first_order(P)
    assert_allclose(g.apply(x), g.value() @ x, rtol=1e-10, atol=1e-12)


# -- spectral ------------------------------------------------------------------------

def test_spectral_exact_examples(rng):
    P = random_nbd(rng, BlockStructure([2, 2]), 0.05)
    assert_allclose(spectral_stabilize(P), P.dense(), atol=1e-12)
    D = nbd([1, -0.2], np.zeros((2, 2)), 0.0)
    assert_allclose(spectral_stabilize(D), np.diag([1.0, 0.0]), atol=1e-15)


def test_spectral_first_order_close_to_exact():
    errs = []
    for eps in (0.2, 0.1, 0.05):
        P = nbd([1, 0.1], [[0, 1], [1, 0]], eps)
        errs.append(np.linalg.norm(spectral_stabilize(P, "first-order") - spectral_stabilize(P)))
    assert errs[0] < 0.2**2 * 10
    assert np.all(halving_ratios(errs) >= 3.5)


def test_spectral_rejects_asymmetric():
    with pytest.raises(AsymmetricError):
        spectral_stabilize(nbd([1, 1], [[0, 1], [0, 0]], symmetric=False))


# -- first-order algebra ------------------------------------------------------------

def test_mul_examples(rng):
    P = random_nbd(rng, BlockStructure([2, 1]), 0.3, symmetric=False)
    I = NbdMatrix.identity(P.structure, 0.3)
    R = mul_first_order(P, I)
    assert_allclose(R.p0_dense(), P.p0_dense())
    assert_allclose(R.p1, P.p1)
    R = mul_first_order(nbd([2, 3], [[0, 1], [1, 0]], symmetric=False),
                        nbd([5, 7], np.zeros((2, 2)), symmetric=False))
    assert_allclose(R.p0_dense(), np.diag([10, 21]))
    assert_allclose(R.p1, [[0, 7], [5, 0]])


def test_mul_mismatch(rng):
    A = random_nbd(rng, S11, 0.1)
    with pytest.raises(StructureMismatchError):
        mul_first_order(A, random_nbd(rng, S11, 0.2))
    with pytest.raises(StructureMismatchError):
        mul_first_order(A, random_nbd(rng, BlockStructure([2]), 0.1))


def test_sym_product_examples(rng):
    Q = random_nbd(rng, BlockStructure([2, 2]), 0.2)
    S = sym_product_first_order(NbdMatrix.identity(Q.structure, 0.2), Q)
    assert_allclose(S.dense(), Q.dense(), atol=1e-14)
    R = nbd([2, 1], [[0, 1], [0, 0]], 0.1, symmetric=False)
    S = sym_product_first_order(R, nbd([1, 1], np.zeros((2, 2)), 0.1))
    assert_allclose(S.p0_dense(), np.diag([4, 1]))
    # dense oracle: R R^T = [[4 + eps^2, eps], [eps, 1]]
    assert_allclose(S.p1, [[0, 1], [1, 0]])
    assert_allclose(S.dense() - R.dense() @ R.dense().T, [[-0.01, 0], [0, 0]], atol=1e-15)
    assert S.symmetric
    skew = NbdMatrix(Q.structure, 0.2, Q.p0, np.triu(np.ones((4, 4)), 2))
    with pytest.raises(AsymmetricError):
        sym_product_first_order(Q, skew)


def _scaled(P, eps):
    return NbdMatrix(P.structure, eps, P.p0, P.p1, P.p2, P.symmetric)


def test_products_order_of_accuracy(rng):
    s = BlockStructure([2, 1, 2])
    A = random_nbd(rng, s, 1.0, symmetric=False)
    B = random_nbd(rng, s, 1.0)
    e_mul, e_sym = [], []
    for eps in EPS_GRID:
        a, b = _scaled(A, eps), _scaled(B, eps)
        e_mul.append(np.linalg.norm(mul_first_order(a, b).dense() - a.dense() @ b.dense()))
        e_sym.append(np.linalg.norm(sym_product_first_order(a, b).dense()
                                    - a.dense() @ b.dense() @ a.dense().T))
    assert np.all(halving_ratios(e_mul) >= 3.5)
    assert np.all(halving_ratios(e_sym) >= 3.5)


def test_banded_closure(rng):
    s = BlockStructure([2, 1, 2, 3])
    bi = s.block_index
    nn = np.abs(bi[:, None] - bi[None, :]) <= 1
    A = random_nbd(rng, s, 0.1, symmetric=False)
    B = random_nbd(rng, s, 0.1, symmetric=False)
    A = NbdMatrix(s, 0.1, A.p0, np.where(nn, A.p1, 0))
    B = NbdMatrix(s, 0.1, B.p0, np.where(nn, B.p1, 0))
    assert A.band_profile() is BandProfile.NEAREST_NEIGHBOR
    assert mul_first_order(A, B).band_profile() is BandProfile.NEAREST_NEIGHBOR


# -- inverses ------------------------------------------------------------------------

def test_inv_examples(rng):
    P = random_nbd(rng, BlockStructure([2, 2]), 0.0)
    assert_allclose(inv_first_order(P).value(), np.linalg.inv(P.p0_dense()), atol=1e-12)
    f = inv_first_order(nbd([1, 1], [[0, 0.4], [0.4, 0]]))
    assert_allclose(f.value(), [[1, -0.4], [-0.4, 1.16]], atol=1e-15)


def test_inv_order_of_accuracy(rng):
    P = random_nbd(rng, BlockStructure([2, 3]), 1.0)
    errs = []
    for eps in EPS_GRID:
        Q = _scaled(P, eps)
        errs.append(np.linalg.norm(inv_first_order(Q).value() @ Q.dense() - np.eye(5)))
    assert np.all(halving_ratios(errs) >= 3.5)


def test_inv_involution_and_commutation(rng):
    P = random_nbd(rng, BlockStructure([1, 2, 2]), 0.6)
    T = t1_stabilize(P)
    assert_allclose(invert_factor(invert_factor(T)).value(), T.value(), atol=1e-10)
    # Inv[T[P]] equals T applied to the first-order inverse
    assert_allclose(invert_factor(T).value(), t1_stabilize(first_order_inverse(P)).value(),
                    atol=1e-10)
    assert_allclose(inv_first_order(P).value(), invert_factor(T).value(), atol=1e-12)
    # the two factors are inverse to first order
    errs = []
    for eps in EPS_GRID:
        Q = _scaled(P, eps)
        errs.append(np.linalg.norm(inv_first_order(Q).value() @ t1_stabilize(Q).value() - np.eye(5)))
    assert np.all(halving_ratios(errs) >= 3.5)


def test_inverse_update_examples(rng):
    M = random_nbd(rng, BlockStructure([2, 1]), 0.3)
    P = inverse_update(M, NbdMatrix.zeros(M.structure, 0.3), form="A1")
    assert_allclose(P.p0_dense(), M.p0_dense(), atol=1e-12)
    assert_allclose(P.p1, M.p1, atol=1e-12)
    P = inverse_update(nbd([1, 1], np.zeros((2, 2)), 0.1),
                       nbd([1, 1], [[0, 1], [1, 0]], 0.1))
    assert_allclose(P.p0_dense(), 0.5 * np.eye(2))
    assert_allclose(P.p1, -0.25 * np.array([[0, 1], [1, 0]]))


def _fd_derivative(M, J, h=1e-5):
    def exact(e):
        Me = M.p0_dense() + e * M.p1
        Je = J.p0_dense() + e * J.p1
        return np.linalg.inv(np.linalg.inv(Me) + Je)
    return (exact(h) - exact(-h)) / (2 * h)


@pytest.mark.parametrize("form", ["A1", "A2", "auto"])
def test_inverse_update_matches_finite_differences(rng, form):
    s = BlockStructure([2, 3, 1])
    M = random_nbd(rng, s, 0.1)
    J = random_nbd(rng, s, 0.1)
    P = inverse_update(M, J, form=form)
    assert_allclose(P.p1, _fd_derivative(M, J), atol=1e-6)


def test_inverse_update_a2_selected_for_small_information(rng):
    from nbdkalman.blockmat import select_update_form
    s = BlockStructure([2, 2])
    M = random_nbd(rng, s, 0.1)
    J = random_nbd(rng, s, 0.1)
    small = NbdMatrix(s, 0.1, tuple(1e-3 * b for b in J.p0), J.p1, None, True)
    assert select_update_form(M, small) == "A2"
    assert select_update_form(M, J) == "A1"
    # A2 needs no inverse of J0: a singular J0 block is fine
    sing = NbdMatrix(s, 0.1, (np.zeros((2, 2)), 1e-3 * np.eye(2)), J.p1, None, True)
    assert_allclose(inverse_update(M, sing, "A2").p1, _fd_derivative(M, sing), atol=1e-6)


def test_inverse_update_order_of_accuracy(rng):
    s = BlockStructure([2, 2])
    M, J = random_nbd(rng, s, 1.0), random_nbd(rng, s, 1.0)
    errs = []
    for eps in EPS_GRID:
        m, j = _scaled(M, eps), _scaled(J, eps)
        exact = np.linalg.inv(np.linalg.inv(m.dense()) + j.dense())
        errs.append(np.linalg.norm(inverse_update(m, j).dense() - exact))
    assert np.all(halving_ratios(errs) >= 3.5)


# -- eigen perturbation ------------------------------------------------------------------

def test_perturb_eigen_examples():
    S0 = np.diag([1.0, 2.0])
    S1 = np.array([[0.0, 1], [1, 0]])
    ep = perturb_eigen(S0, np.zeros((2, 2)), 0.1)
    assert_allclose(ep.eigenvalues(), [1, 2])
    assert_allclose(ep.eigenvectors(), np.eye(2))
    ep = perturb_eigen(S0, S1, 0.1)
    assert_allclose(ep.eigenvalues(), [1, 2])
    err = np.abs(ep.eigenvalues() - np.linalg.eigvalsh(S0 + 0.1 * S1)).max()
    assert err == pytest.approx(0.0099, abs=1e-4)
    assert np.linalg.norm(spectral_first_order(S0, S1, 0.1) - (S0 + 0.1 * S1), 2) <= 0.02 + 1e-12
    assert_allclose(spectral_first_order(S0, S1, 0.0), S0, atol=1e-15)


def test_perturb_eigen_invariants(rng):
    s = BlockStructure([2, 3])
    P = random_nbd(rng, s, 0.1)
    ep = perturb_eigen(P.p0_dense(), P.p1, 0.1, s)
    V = ep.vectors0
    assert_allclose(V.T @ V, np.eye(5), atol=1e-12)
    assert np.abs(np.sum(V * ep.vectors1, axis=0)).max() <= 1e-10
    out = spectral_first_order(P.p0_dense(), P.p1, 0.1, s)
    assert_allclose(out, out.T, atol=1e-12)


def separated_spectrum(rng, s, gap=1.0):
    """Block-diagonal S0 with eigenvalues gap, 2*gap, ... and a unit-norm S1."""
    lam = gap * (1 + rng.permutation(s.N))
    blocks = []
    for sl in s.slices:
        q, _ = np.linalg.qr(rng.standard_normal((sl.stop - sl.start,) * 2))
        blocks.append((q * lam[sl]) @ q.T)
    S1 = rng.standard_normal((s.N, s.N))
    S1 = S1 + S1.T
    return s.block_diag(blocks), S1 / np.linalg.norm(S1, 2)


def test_perturb_eigen_order_of_accuracy(rng):
    s = BlockStructure([2, 2, 1])
    S0, S1 = separated_spectrum(rng, s)
    ev, rec = [], []
    for eps in EPS_GRID:
        ep = perturb_eigen(S0, S1, eps, s)
        exact = S0 + eps * S1
        ev.append(np.abs(np.sort(ep.eigenvalues()) - np.linalg.eigvalsh(exact)).max())
        rec.append(np.linalg.norm(spectral_first_order(S0, S1, eps, s) - exact))
    assert np.all(halving_ratios(ev) >= 3.5)
    assert np.all(halving_ratios(rec) >= 3.5)


def test_perturb_eigen_flags_degeneracy():
    with pytest.warns(DegenerateSpectrumWarning):
        ep = perturb_eigen(np.eye(2), np.array([[0.0, 1], [1, 0]]), 0.1)
    assert ep.degenerate == ((0, 1),)


def test_perturb_eigen_rejects_asymmetric():
    with pytest.raises(NbdError):
        perturb_eigen(np.eye(2), np.array([[0.0, 1], [0, 0]]), 0.1)


# -- counts --------------------------------------------------------------------------------

STRUCTURES = [(2, 2, 2), (1, 2, 3), (3, 1, 4, 2), (5,), (2, 3, 2, 3, 1)]


@pytest.mark.parametrize("sizes", STRUCTURES)
def test_instrumented_counts_match_closed_forms(sizes):
    from nbdkalman.harness.counting import count_table
    rows = count_table([sizes])
    assert len(rows) == 6
    for r in rows:
        assert r["instrumented"] == r["closed_form"], r


@pytest.mark.parametrize("sizes", STRUCTURES)
def test_moment_forms_agree(sizes):
    s = BlockStructure(sizes)
    assert counts.mul_count_moments(s) == pytest.approx(counts.mul_count(s))
    assert counts.sym_product_count_moments(s) == pytest.approx(counts.sym_product_count(s))


def test_equal_block_formulas():
    for nb, n in [(4, 2), (3, 5), (8, 4)]:
        s = BlockStructure.equal(nb, n)
        N = nb * n
        assert counts.mul_count(s) == pytest.approx(2 * N**3 / nb - N**3 / nb**2)
        assert counts.mul_count(s, "nearest-neighbor") == pytest.approx(counts.mul_count_equal_nn(nb, n))
        assert counts.storage_count(s, "nearest-neighbor") == (3 * nb - 2) * n**2
        assert counts.storage_count(s, "nearest-neighbor", symmetric=True) == pytest.approx(
            (1.5 * nb - 1) * n**2 + nb * n / 2)


def test_storage_examples():
    assert counts.storage_count(BlockStructure.equal(4, 2), "nearest-neighbor") == 40
    assert counts.equal_block_storage(4, 2) == 40
    s = BlockStructure([3])
    assert counts.storage_count(s) == counts.storage_count(s, "nearest-neighbor") == 9
    assert counts.storage_count(BlockStructure.equal(2, 2), "nearest-neighbor", symmetric=True) == 10
    assert counts.storage_count(BlockStructure([2, 3]), symmetric=True) == 15
