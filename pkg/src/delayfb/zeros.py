"""Imaginary-axis transmission-zero constraints and their affine elimination.

With the dependent gains ``g`` confined to one row (or one column) of ``K`` the
zero condition at ``j w`` is rank-one in ``g``:

    det(R(w, K_L) - [b g^T c, 0; 0, 0]) = det R(w, K_L) * (1 - g^T z(w, K_L))

so the ``m`` frequency constraints become the real linear system ``P g = Q``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from delayfb.model import DdaeSystem, GainMatrix
from delayfb.spectrum import characteristic_matrix, _gain_array


class InsufficientParameters(ValueError):
    """Fewer candidate gains than the ``2m`` needed to place ``m`` zero pairs."""


class EliminationError(ArithmeticError):
    """The dependent gains cannot be computed at this ``K_L``."""


class RSingular(EliminationError):
    pass


class PSingular(EliminationError):
    pass


class PIllConditioned(PSingular):
    pass


class SingularAtS(ArithmeticError):
    """The evaluation point is a characteristic root."""


COND_MAX = 1e10


@dataclass(frozen=True)
class GainPartition:
    """Which entries of ``K`` are dependent (``positions``) and which are free.

    All dependent entries share one row (``orientation == "row"``) or one
    column, so the dependent feedback is rank one.
    """

    positions: tuple
    shape: tuple
    dims: tuple
    frequencies: tuple
    orientation: str = "row"

    def __post_init__(self):
        pos = tuple((int(i), int(j)) for i, j in self.positions)
        if len(set(pos)) != len(pos):
            raise ValueError("dependent positions must be distinct")
        key = 0 if self.orientation == "row" else 1
        if len({p[key] for p in pos}) > 1:
            raise ValueError(f"dependent gains must share one {self.orientation}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))

    @property
    def m(self) -> int:
        return len(self.frequencies)

    @property
    def omegas(self) -> np.ndarray:
        return 2 * np.pi * np.asarray(self.frequencies)

    @property
    def dep_rows(self) -> np.ndarray:
        return np.array([i for i, _ in self.positions], dtype=int)

    @property
    def dep_cols(self) -> np.ndarray:
        return np.array([j for _, j in self.positions], dtype=int)

    @property
    def row(self) -> int:
        return self.positions[0][0]

    @property
    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        mask[self.dep_rows, self.dep_cols] = False
        return mask

    @property
    def n_free(self) -> int:
        return int(self.free_mask.sum())

    def B11(self, sys: DdaeSystem) -> np.ndarray:
        return sys.B1t[:, self.row]

    def Cg(self, sys: DdaeSystem) -> np.ndarray:
        return sys.C1t[self.dep_cols, :]

    def free_values(self, K_L) -> np.ndarray:
        return _gain_array(K_L)[self.free_mask]

    def K_L_from_free(self, values) -> np.ndarray:
        K_L = np.zeros(self.shape)
        K_L[self.free_mask] = values
        return K_L

    def strip(self, K) -> np.ndarray:
        """``K_L``: the gain with its dependent entries set to zero."""
        K_L = np.array(_gain_array(K), dtype=float)
        K_L[self.dep_rows, self.dep_cols] = 0.0
        return K_L


def build_R(sys: DdaeSystem, K_L, omega: float) -> np.ndarray:
    """Bordered matrix ``[[M(j w; K_L), -B2t], [C2t, 0]]``."""
    n = sys.dim
    R = np.zeros((n + 1, n + 1), dtype=complex)
    R[:n, :n] = characteristic_matrix(sys, K_L, 1j * omega)
    R[:n, n] = -sys.B2t[:, 0]
    R[n, :n] = sys.C2t[0]
    return R


def _closed_loop_T(sys: DdaeSystem, K_L, omega: float) -> np.ndarray:
    """``T = [C1t 0] R^{-1} [B1t; 0]``; ``z_l = T[col_l, row_l]``."""
    R = build_R(sys, K_L, omega)
    n = sys.dim
    rhs = np.zeros((n + 1, sys.B1t.shape[1]), dtype=complex)
    rhs[:n] = sys.B1t
    try:
        X = np.linalg.solve(R, rhs)
    except np.linalg.LinAlgError as exc:
        raise RSingular(f"bordered matrix singular at w={omega:.6g}") from exc
    if not np.all(np.isfinite(X)):
        raise RSingular(f"bordered matrix singular at w={omega:.6g}")
    return sys.C1t @ X[:n]


def eval_z(sys: DdaeSystem, partition: GainPartition, K_L, omega: float) -> np.ndarray:
    """``z(w, K_L) = [Cg 0] R^{-1} [B11; 0]`` (one entry per dependent gain)."""
    T = _closed_loop_T(sys, K_L, omega)
    return T[partition.dep_cols, partition.dep_rows]


def assemble_P(sys: DdaeSystem, partition: GainPartition, K_L, omegas=None):
    omegas = partition.omegas if omegas is None else np.asarray(omegas)
    Z = np.array([eval_z(sys, partition, K_L, w) for w in omegas])
    P = np.empty((2 * len(omegas), Z.shape[1]))
    P[0::2], P[1::2] = Z.real, Z.imag
    Q = np.zeros(2 * len(omegas))
    Q[0::2] = 1.0
    return P, Q


@dataclass(frozen=True)
class EliminationSystem:
    P: np.ndarray
    Q: np.ndarray
    cond: float


def elimination_system(sys, partition, K_L, omegas=None) -> EliminationSystem:
    P, Q = assemble_P(sys, partition, K_L, omegas)
    return EliminationSystem(P, Q, float(np.linalg.cond(P)) if P.size else 1.0)


def _solve_P(P, Q, cond_max):
    if P.shape[0] != P.shape[1]:
        raise PSingular(f"P is {P.shape[0]}x{P.shape[1]}, must be square")
    cond = np.linalg.cond(P)
    if not np.isfinite(cond):
        raise PSingular("P(K_L) is singular")
    if cond > cond_max:
        raise PIllConditioned(f"cond(P) = {cond:.3g} exceeds {cond_max:.3g}")
    return np.linalg.solve(P, Q)


def solve_dependent_gains(sys: DdaeSystem, partition: GainPartition, K_L, frequencies=None,
                          cond_max: float = COND_MAX) -> np.ndarray:
    """Dependent gains ``g(K_L) = P(K_L)^{-1} Q``."""
    omegas = None if frequencies is None else 2 * np.pi * np.asarray(frequencies)
    P, Q = assemble_P(sys, partition, K_L, omegas)
    return _solve_P(P, Q, cond_max)


def dependent_gain_jacobian(sys: DdaeSystem, partition: GainPartition, K_L, omegas=None,
                            cond_max: float = COND_MAX):
    """``g(K_L)`` and ``dg/dK_L`` over the free entries (``2m x n_free``)."""
    omegas = partition.omegas if omegas is None else np.asarray(omegas)
    rows, cols = partition.dep_rows, partition.dep_cols
    free = np.argwhere(partition.free_mask)
    Ts = [_closed_loop_T(sys, K_L, w) for w in omegas]
    P = np.empty((2 * len(omegas), len(rows)))
    for k, T in enumerate(Ts):
        z = T[cols, rows]
        P[2 * k], P[2 * k + 1] = z.real, z.imag
    Q = np.zeros(2 * len(omegas))
    Q[0::2] = 1.0
    g = _solve_P(P, Q, cond_max)
    # dz_l/dK_ab = T[col_l, a] T[b, row_l]  =>  (dz/dK_ab)^T g = (g^T T[cols, a]) T[b, rows]
    dPg = np.empty((2 * len(omegas), len(free)))
    for k, T in enumerate(Ts):
        w = (g[:, None] * T[cols][:, free[:, 0]] * T[free[:, 1]][:, rows].T).sum(axis=0)
        dPg[2 * k], dPg[2 * k + 1] = w.real, w.imag
    dg = -np.linalg.solve(P, dPg)
    return g, dg


def compose_full_gain(partition: GainPartition, K_L, g) -> GainMatrix:
    """``K = K_L`` with ``g`` written into the dependent positions."""
    K = np.array(_gain_array(K_L), dtype=float)
    K[partition.dep_rows, partition.dep_cols] = g
    return GainMatrix(K, *partition.dims)


def select_dependent_params(sys: DdaeSystem, frequencies, row: int = None, columns=None,
                            K_init=None) -> GainPartition:
    """Choose ``2m`` dependent gains in the actuator row of ``K``.

    Columns are picked greedily to maximise the smallest singular value of
    the partial ``P`` at ``K_init`` unless ``columns`` is given explicitly.
    """
    frequencies = tuple(float(f) for f in frequencies)
    m = len(frequencies)
    n_rows, n_cols = sys.gain_shape()
    row = n_rows - 1 if row is None else row
    if n_cols < 2 * m:
        raise InsufficientParameters(
            f"{n_cols} gains available in the controller row, {2 * m} needed for {m} zero pairs")
    dims = sys.zero_gain().dims
    K0 = np.zeros((n_rows, n_cols)) if K_init is None else np.array(_gain_array(K_init), dtype=float)
    if columns is None:
        K0[row] = 0.0
        Z = np.array([_closed_loop_T(sys, K0, w)[:, row] for w in 2 * np.pi * np.asarray(frequencies)])
        Pall = np.empty((2 * m, n_cols))
        Pall[0::2], Pall[1::2] = Z.real, Z.imag
        chosen = []
        for _ in range(2 * m):
            best, best_score = None, -np.inf
            for c in range(n_cols):
                if c in chosen:
                    continue
                sub = Pall[:, chosen + [c]]
                norms = np.linalg.norm(sub, axis=0)
                # columns with no influence at K_init (e.g. x_c before it is wired) rank last
                score = -np.inf if norms.min() == 0 else np.linalg.svd(sub / norms, compute_uv=False)[-1]
                if best is None or score > best_score:
                    best, best_score = c, score
            chosen.append(best)
        columns = sorted(chosen)
    columns = tuple(int(c) for c in columns)
    if len(columns) != 2 * m:
        raise InsufficientParameters(f"need exactly {2 * m} dependent columns, got {len(columns)}")
    return GainPartition(tuple((row, c) for c in columns), (n_rows, n_cols), dims, frequencies)


def column_partition(sys: DdaeSystem, frequencies, column: int, rows) -> GainPartition:
    """Alternative partition with the dependent gains in one column of ``K``."""
    frequencies = tuple(float(f) for f in frequencies)
    if len(rows) != 2 * len(frequencies):
        raise InsufficientParameters(f"need {2 * len(frequencies)} rows in column {column}")
    n_rows, n_cols = sys.gain_shape()
    return GainPartition(tuple((r, column) for r in rows), (n_rows, n_cols),
                         sys.zero_gain().dims, frequencies, orientation="column")


def _slogdet_bordered(sys, K, omega):
    return np.linalg.slogdet(build_R(sys, K, omega))


def constraint_residual(sys: DdaeSystem, K, omega: float, partition: GainPartition = None) -> complex:
    """Bordered determinant at ``j w`` for the full gain, divided by ``|det R|``.

    ``R`` is the bordered matrix with the independent part ``K_L`` of ``K``
    (dependent entries zeroed per ``partition``) or the open loop if no
    partition is given.
    """
    Kmat = _gain_array(K)
    ref = np.zeros_like(Kmat) if partition is None else partition.strip(Kmat)
    sign, logdet = _slogdet_bordered(sys, Kmat, omega)
    _, logref = _slogdet_bordered(sys, ref, omega)
    if sign == 0:
        return 0j
    return complex(sign * np.exp(logdet - logref))


def transfer_value(sys: DdaeSystem, K, s: complex) -> complex:
    """Disturbance-to-target transfer ``G(s) = C2t M(s)^{-1} B2t``."""
    M = characteristic_matrix(sys, K, complex(s))
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] <= 1e-14 * sv[0]:
        raise SingularAtS(f"s = {s} is a characteristic root")
    return complex((sys.C2t @ np.linalg.solve(M, sys.B2t))[0, 0])
