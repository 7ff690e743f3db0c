import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from delayfb.model import (
    DisturbanceSpec,
    FeedbackConfig,
    GainMatrix,
    PlantModel,
    PlantParams,
    assemble_ddae,
    build_plant,
    case_study,
    embed_controller,
    realize_controller,
)


def test_plant_entries_match_table():
    p = build_plant(PlantParams())
    assert p.A[1, 0] == pytest.approx(-2534 / 1.1750)
    assert p.A[1, 0] == pytest.approx(-2156.6, abs=0.05)
    assert p.A[7, 6] == pytest.approx(-407 / 0.52)
    assert p.A[7, 6] == pytest.approx(-782.69, abs=0.01)
    assert p.B1[:, 0] == pytest.approx([0, -1 / 1.175, 0, 0, 0, 0, 0, 1 / 0.52])
    assert p.B2[:, 0] == pytest.approx([0, 0, 0, 0, 0, 1 / 0.729, 0, 0])
    assert np.flatnonzero(p.C2[0]).tolist() == [2]
    assert [np.flatnonzero(r)[0] for r in p.C1] == [0, 1, 6, 7]
    assert p.tau_u == 0.002


def test_undamped_plant_has_no_velocity_coupling():
    params = PlantParams(m_a=1, m_0=1, m_1=1, m_2=1, k_a=1, k_0=1, k_1=1, k_2=1, k_3=1, k_4=1,
                         c_a=0, c_0=0, c_1=0, c_2=0, c_3=0, c_4=0)
    A = build_plant(params).A
    velocity_cols = [1, 3, 5, 7]
    accel_rows = [1, 3, 5, 7]
    assert np.all(A[np.ix_(accel_rows, velocity_cols)] == 0)


@pytest.mark.parametrize("field", ["m_a", "m_0", "m_1", "m_2"])
def test_non_positive_mass_rejected(field):
    with pytest.raises(ValueError, match=field):
        PlantParams(**{field: 0.0})


def test_negative_damping_rejected():
    with pytest.raises(ValueError):
        PlantParams(c_2=-1.0)


def test_ddae_dimensions_case_study():
    sys, _ = case_study(n_c=2)
    assert sys.dim == 27
    assert np.linalg.matrix_rank(sys.E) == 10
    assert len(sys.delay_terms) == 5
    assert sys.delays.tolist() == [0.002, 0.05, 0.1, 0.15, 0.2]
    assert sys.gain_shape() == (3, 18)


def test_static_controller_dimensions():
    sys, _ = case_study(n_c=0)
    assert sys.C1t.shape == (16, 25)
    K = sys.zero_gain()
    assert K.K.shape == (1, 16)
    assert K.n_p == 16


def test_delay_matrix_sparsity():
    sys, _ = case_study(n_c=2)
    idx = sys.index
    tau_u, Au = sys.delay_terms[0]
    rows, cols = np.nonzero(Au)
    assert set(rows) <= set(range(idx.x.start, idx.x.stop))
    assert set(cols) <= set(range(idx.zeta_u.start, idx.zeta_u.stop))
    for i, (_, Ai) in enumerate(sys.delay_terms[1:]):
        rows, cols = np.nonzero(Ai)
        blk = idx.zeta_y_block(i, 4)
        assert set(rows) <= set(range(blk.start, blk.stop))
        assert set(cols) <= set(range(idx.x.start, idx.x.stop))


def test_E_structure():
    sys, _ = case_study(n_c=3)
    E, idx = sys.E, sys.index
    assert np.array_equal(E @ E, E)
    assert np.array_equal(E, np.diag(np.diag(E)))
    zero_rows = np.flatnonzero(np.diag(E) == 0)
    expected = list(range(idx.zeta_u.start, idx.zeta_u.stop)) + list(range(idx.zeta_y.start, idx.zeta_y.stop))
    assert zero_rows.tolist() == expected


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), n_u=st.integers(1, 2), n_y=st.integers(1, 3), N=st.integers(1, 4),
       n_c=st.integers(0, 3))
def test_dimension_law(n, n_u, n_y, N, n_c):
    rng = np.random.default_rng(n * 1000 + n_u * 100 + n_y * 10 + N)
    plant = PlantModel(rng.normal(size=(n, n)), rng.normal(size=(n, n_u)), rng.normal(size=(n, 1)),
                       rng.normal(size=(n_y, n)), rng.normal(size=(1, n)), 0.01)
    sys = assemble_ddae(plant, FeedbackConfig(tuple(0.1 * (i + 1) for i in range(N)), n_c))
    assert sys.dim == n + n_u + n_c + n_y * N
    assert np.linalg.matrix_rank(sys.E) == n + n_c
    assert sys.gain_shape() == (n_c + n_u, n_c + n_y * N)


def test_realize_static():
    K = GainMatrix(np.arange(16.0), 0, 1, 4, 4)
    A_c, B_c, C_c, D_c = realize_controller(K)
    assert A_c.size == B_c.size == C_c.size == 0
    assert np.array_equal(D_c, K.K)


def test_realize_dynamic_blocks():
    K = GainMatrix(np.arange(54.0).reshape(3, 18), 2, 1, 4, 4)
    A_c, B_c, C_c, D_c = realize_controller(K)
    assert A_c.shape == (2, 2) and B_c.shape == (2, 16)
    assert C_c.shape == (1, 2) and D_c.shape == (1, 16)
    assert A_c[1, 1] == 19 and D_c[0, 0] == 38


@settings(max_examples=25, deadline=None)
@given(n_c=st.integers(0, 3), n_u=st.integers(1, 2), n_y=st.integers(1, 4), N=st.integers(1, 4),
       seed=st.integers(0, 2**31))
def test_realize_round_trip(n_c, n_u, n_y, N, seed):
    K = np.random.default_rng(seed).normal(size=(n_c + n_u, n_c + n_y * N))
    G = GainMatrix(K, n_c, n_u, n_y, N)
    back = embed_controller(*realize_controller(G), n_y=n_y, N=N)
    assert np.array_equal(back.K, K)


def test_delay_free_pencil_matches_static_loop():
    rng = np.random.default_rng(3)
    plant = PlantModel(rng.normal(size=(5, 5)), rng.normal(size=(5, 1)), rng.normal(size=(5, 1)),
                       rng.normal(size=(2, 5)), rng.normal(size=(1, 5)), 0.0)
    sys = assemble_ddae(plant, FeedbackConfig((0.0,), 0))
    D_c = rng.normal(size=(1, 2))
    A = sys.A0 + sum(Ad for _, Ad in sys.delay_terms) + sys.B1t @ D_c @ sys.C1t
    ev = sla.eigvals(A, sys.E)
    ev = np.sort_complex(ev[np.isfinite(ev)])
    ref = np.sort_complex(np.linalg.eigvals(plant.A + plant.B1 @ D_c @ plant.C1))
    assert np.allclose(ev, ref, rtol=1e-8, atol=1e-10)


def test_disturbance_validation_and_force():
    d = DisturbanceSpec(3.0, (4, 8))
    assert d.phases == (0.0, 0.0)
    assert d.force(0.0) == pytest.approx(6.0)
    assert d.force(0.125) == pytest.approx(3.0 * np.cos(np.pi) + 3.0 * np.cos(2 * np.pi))
    with pytest.raises(ValueError):
        DisturbanceSpec(1.0, (4, 4))
    with pytest.raises(ValueError):
        DisturbanceSpec(1.0, ())
    with pytest.raises(ValueError):
        DisturbanceSpec(1.0, (-1.0,))


def test_feedback_config_validation():
    with pytest.raises(ValueError):
        FeedbackConfig((0.1, 0.05))
    with pytest.raises(ValueError):
        FeedbackConfig(())
    with pytest.raises(ValueError):
        FeedbackConfig((0.1,), n_c=-1)
