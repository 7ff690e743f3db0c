import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delayfb import zeros as Z
from delayfb.model import FeedbackConfig, PlantModel, PlantParams, assemble_ddae, case_study
from tests.conftest import random_plant

FREQS = (4.0, 8.0, 12.0, 16.0)


@pytest.fixture(scope="module")
def case():
    sys, dist = case_study(0)
    return sys, Z.select_dependent_params(sys, dist.frequencies)


def _random_KL(part, rng, scale=1.0):
    return part.K_L_from_free(scale * rng.normal(size=part.n_free))


def test_partition_counts(case):
    sys, part = case
    assert len(part.positions) == 8
    assert part.n_free == 8
    assert {i for i, _ in part.positions} == {0}
    assert part.B11(sys).shape == (25,)
    assert part.Cg(sys).shape == (8, 25)


def test_static_undelayed_controller_is_insufficient():
    plant = case_study(0)[0].plant
    sys = assemble_ddae(plant, FeedbackConfig((0.0,), 0))
    with pytest.raises(Z.InsufficientParameters):
        Z.select_dependent_params(sys, FREQS)


def test_exactly_enough_parameters():
    rng = np.random.default_rng(0)
    sys = assemble_ddae(random_plant(rng, n=4, n_y=2), FeedbackConfig((0.1,), 0))
    part = Z.select_dependent_params(sys, (3.0,))
    assert len(part.positions) == 2 and part.n_free == 0


@settings(max_examples=30, deadline=None)
@given(n_y=st.integers(1, 4), N=st.integers(1, 3), n_c=st.integers(0, 2), m=st.integers(1, 4))
def test_counting_law(n_y, N, n_c, m):
    rng = np.random.default_rng(n_y + 10 * N + 100 * n_c)
    sys = assemble_ddae(random_plant(rng, n=4, n_y=n_y), FeedbackConfig(tuple(0.05 * (i + 1) for i in range(N)), n_c))
    freqs = tuple(1.0 + 2.0 * k for k in range(m))
    if n_c + n_y * N < 2 * m:
        with pytest.raises(Z.InsufficientParameters):
            Z.select_dependent_params(sys, freqs)
    else:
        part = Z.select_dependent_params(sys, freqs)
        assert part.n_free == (n_c + 1) * (n_c + n_y * N) - 2 * m


def test_build_R_open_loop_and_conjugation(case):
    sys, part = case
    w = 2 * np.pi * 4
    R0 = Z.build_R(sys, np.zeros(part.shape), w)
    n = sys.dim
    assert np.allclose(R0[:n, :n], Z.characteristic_matrix(sys, np.zeros(part.shape), 1j * w))
    assert np.allclose(R0[:n, n], -sys.B2t[:, 0]) and np.allclose(R0[n, :n], sys.C2t[0])
    KL = _random_KL(part, np.random.default_rng(1))
    assert np.allclose(Z.build_R(sys, KL, -w), Z.build_R(sys, KL, w).conj())
    assert abs(np.linalg.det(R0)) > 0


def test_eval_z_properties(case):
    sys, part = case
    KL = _random_KL(part, np.random.default_rng(2))
    w = 2 * np.pi * 4
    z = Z.eval_z(sys, part, KL, w)
    assert np.all(np.isfinite(z)) and np.linalg.norm(z) > 0
    assert np.allclose(Z.eval_z(sys, part, KL, -w), z.conj())
    # oracle: z from an explicit inverse of R
    R = Z.build_R(sys, KL, w)
    rhs = np.r_[part.B11(sys), 0.0]
    z_ref = np.c_[part.Cg(sys), np.zeros(8)] @ np.linalg.inv(R) @ rhs
    assert np.allclose(z, z_ref, rtol=1e-9)
    g = Z.solve_dependent_gains(sys, part, KL)
    for wk in part.omegas:
        assert abs(1 - g @ Z.eval_z(sys, part, KL, wk)) < 1e-10


def test_identity_P_solve():
    # z = (1, j): P = I, Q = (1, 0)
    g = Z._solve_P(np.eye(2), np.array([1.0, 0.0]), Z.COND_MAX)
    assert g.tolist() == [1.0, 0.0]
    with pytest.raises(Z.PSingular):
        Z._solve_P(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([1.0, 0.0]), Z.COND_MAX)
    with pytest.raises(Z.PIllConditioned):
        Z._solve_P(np.diag([1.0, 1e-12]), np.array([1.0, 0.0]), Z.COND_MAX)


@pytest.mark.parametrize("seed", range(5))
def test_rank_one_determinant_identity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=7), rng.normal(size=7)
    assert np.linalg.det(np.eye(7) + np.outer(a, b)) == pytest.approx(1 + b @ a, rel=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_elimination_zeroes_determinant(case, seed):
    sys, part = case
    KL = _random_KL(part, np.random.default_rng(seed), scale=20.0)
    g = Z.solve_dependent_gains(sys, part, KL)
    K = Z.compose_full_gain(part, KL, g)
    for w in part.omegas:
        assert abs(Z.constraint_residual(sys, K, w, part)) <= 1e-8
        # brute-force determinants, no slogdet
        h = np.linalg.det(Z.build_R(sys, K.K, w)) / abs(np.linalg.det(Z.build_R(sys, KL, w)))
        assert abs(h) <= 1e-8


def test_open_loop_has_no_zero_at_4hz(case):
    sys, part = case
    K0 = np.zeros(part.shape)
    w = 2 * np.pi * 4
    assert abs(np.linalg.det(Z.build_R(sys, K0, w))) > 0
    assert abs(Z.constraint_residual(sys, K0, w)) == pytest.approx(1.0)
    assert abs(Z.transfer_value(sys, K0, 1j * w)) > 1e-5


def test_one_mass_bordered_determinant():
    a, b, c = -2.0, 3.0, 5.0
    plant = PlantModel([[a]], [[1.0]], [[b]], [[1.0]], [[c]], 0.0)
    sys = assemble_ddae(plant, FeedbackConfig((0.1,), 0))
    w = 1.7
    # slack rows are identities, so the bordered determinant is det[[jw - a, -b], [c, 0]] = c b
    assert np.linalg.det(Z.build_R(sys, np.zeros((1, 1)), w)) == pytest.approx(c * b)
    assert Z.transfer_value(sys, np.zeros((1, 1)), 1j * w) == pytest.approx(c * b / (1j * w - a))


def test_static_compliance():
    p = PlantParams()
    # stiffness network: k0 ground-m0, k1 m0-m1, k2 m1-m2, k3 m2-ground, k4 m0-m2, ka m0-ma
    springs = [(p.k_0, 0, None), (p.k_1, 0, 1), (p.k_2, 1, 2), (p.k_3, 2, None), (p.k_4, 0, 2), (p.k_a, 0, 3)]
    Ks = np.zeros((4, 4))
    for k, i, j in springs:
        Ks[i, i] += k
        if j is not None:
            Ks[j, j] += k
            Ks[i, j] -= k
            Ks[j, i] -= k
    x = np.linalg.solve(Ks, [0, 0, 1.0, 0])
    sys, _ = case_study(0)
    assert Z.transfer_value(sys, sys.zero_gain(), 0.0).real == pytest.approx(x[1], rel=1e-10)


def test_severed_target_path():
    sys0, _ = case_study(0)
    p = sys0.plant
    plant = PlantModel(p.A, p.B1, p.B2, p.C1, np.zeros((1, 8)), p.tau_u)
    sys = assemble_ddae(plant, sys0.feedback)
    K = np.random.default_rng(0).normal(size=sys.gain_shape())
    for s in (0.3, 2j, 1 + 5j):
        assert Z.transfer_value(sys, K, s) == 0


def test_transfer_singular_at_root():
    from tests.conftest import scalar_system
    sys = scalar_system(a=-1.0, delays=(0.0,))
    with pytest.raises(Z.SingularAtS):
        Z.transfer_value(sys, np.zeros((1, 1)), -1.0)


@pytest.mark.parametrize("seed", range(3))
def test_designed_gain_blocks_transmission(case, seed):
    sys, part = case
    KL = _random_KL(part, np.random.default_rng(100 + seed), scale=10.0)
    K = Z.compose_full_gain(part, KL, Z.solve_dependent_gains(sys, part, KL))
    for w in part.omegas:
        G_ol = Z.transfer_value(sys, np.zeros(part.shape), 1j * w)
        assert abs(Z.transfer_value(sys, K, 1j * w)) <= 1e-6 * abs(G_ol)


def test_compose_identities(case):
    sys, part = case
    rng = np.random.default_rng(3)
    KL = _random_KL(part, rng)
    assert np.array_equal(Z.compose_full_gain(part, KL, np.zeros(8)).K, KL)
    g = rng.normal(size=8)
    K = Z.compose_full_gain(part, np.zeros(part.shape), g).K
    assert set(zip(*np.nonzero(K))) == set(part.positions)
    K = Z.compose_full_gain(part, KL, g).K
    lhs = sys.B1t @ K @ sys.C1t
    rhs = sys.B1t @ KL @ sys.C1t + np.outer(part.B11(sys), g @ part.Cg(sys))
    assert np.allclose(lhs, rhs, atol=1e-13)
    assert np.array_equal(part.strip(K), KL)


def test_dependent_gain_jacobian_fd(case):
    sys, part = case
    rng = np.random.default_rng(4)
    p = 5.0 * rng.normal(size=part.n_free)
    g, dg = Z.dependent_gain_jacobian(sys, part, part.K_L_from_free(p))
    assert np.allclose(g, Z.solve_dependent_gains(sys, part, part.K_L_from_free(p)))
    h = 1e-6
    for j in range(part.n_free):
        e = np.zeros(part.n_free)
        e[j] = h
        fd = (Z.solve_dependent_gains(sys, part, part.K_L_from_free(p + e))
              - Z.solve_dependent_gains(sys, part, part.K_L_from_free(p - e))) / (2 * h)
        assert np.allclose(dg[:, j], fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())


def test_column_partition_elimination():
    rng = np.random.default_rng(9)
    plant = random_plant(rng, n=4, n_y=1, tau_u=0.01)
    sys = assemble_ddae(plant, FeedbackConfig((0.1,), 1))
    part = Z.column_partition(sys, (2.0,), column=1, rows=(0, 1))
    KL = part.strip(rng.normal(size=sys.gain_shape()))
    g, dg = Z.dependent_gain_jacobian(sys, part, KL)
    K = Z.compose_full_gain(part, KL, g)
    assert abs(Z.constraint_residual(sys, K, part.omegas[0], part)) <= 1e-8
    h = 1e-6
    p = part.free_values(KL)
    for j in range(part.n_free):
        e = np.zeros(part.n_free)
        e[j] = h
        fd = (Z.solve_dependent_gains(sys, part, part.K_L_from_free(p + e))
              - Z.solve_dependent_gains(sys, part, part.K_L_from_free(p - e))) / (2 * h)
        assert np.allclose(dg[:, j], fd, rtol=1e-5, atol=1e-8)


def test_partition_rejects_mixed_rows():
    with pytest.raises(ValueError):
        Z.GainPartition(((0, 1), (1, 2)), (2, 4), (1, 1, 1, 3), (1.0,))


def test_P_is_real_and_Q_pattern(case):
    sys, part = case
    es = Z.elimination_system(sys, part, _random_KL(part, np.random.default_rng(5)))
    assert es.P.dtype == float and es.P.shape == (8, 8)
    assert es.Q.tolist() == [1, 0, 1, 0, 1, 0, 1, 0]
    assert np.isfinite(es.cond)
