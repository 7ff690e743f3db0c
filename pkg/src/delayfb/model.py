"""Plant model of the four-mass rig and the delay-differential algebraic closed loop.

The closed loop is written in descriptor form with augmented state

    xt = [x; zeta_u; x_c; zeta_y]

where ``zeta_u`` is a slack for the (delayed) control input and ``zeta_y``
stacks the delayed measurements ``C1 x(t - tau_i)``.  The dynamic controller
then becomes a static gain ``ut = K yt`` with ``yt = [x_c; zeta_y]`` and
``ut = [xdot_c input; u]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PlantParams:
    """Masses (kg), stiffnesses (N/m), dampings (N s/m) and input delay (s)."""

    m_a: float = 0.52
    m_0: float = 1.1750
    m_1: float = 0.5050
    m_2: float = 0.7290
    k_a: float = 407.0
    k_0: float = 1001.0
    k_1: float = 749.0
    k_2: float = 711.0
    k_3: float = 950.0
    k_4: float = 377.0
    c_a: float = 1.8
    c_0: float = 4.35
    c_1: float = 0.85
    c_2: float = 1.85
    c_3: float = 4.95
    c_4: float = 0.0
    tau_u: float = 0.002

    def __post_init__(self):
        for name in ("m_a", "m_0", "m_1", "m_2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("k_a", "k_0", "k_1", "k_2", "k_3", "k_4",
                     "c_a", "c_0", "c_1", "c_2", "c_3", "c_4", "tau_u"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class PlantModel:
    """State-space plant ``xdot = A x + B1 u(t - tau_u) + B2 f_d``, ``y = C1 x``, ``z = C2 x``."""

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    tau_u: float = 0.0

    def __post_init__(self):
        A, B1, B2 = _frozen(self.A), _frozen(self.B1), _frozen(self.B2)
        C1, C2 = _frozen(self.C1), _frozen(self.C2)
        B1 = B1.reshape(A.shape[0], -1)
        B2 = B2.reshape(A.shape[0], 1)
        C1 = C1.reshape(-1, A.shape[0])
        C2 = C2.reshape(1, A.shape[0])
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise ValueError("A has non-finite entries")
        if self.tau_u < 0:
            raise ValueError("tau_u must be >= 0")
        for name, val in (("A", A), ("B1", B1), ("B2", B2), ("C1", C1), ("C2", C2)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B1.shape[1]

    @property
    def n_y(self) -> int:
        return self.C1.shape[0]


@dataclass(frozen=True)
class DisturbanceSpec:
    """Multi-harmonic force ``f_d(t) = sum_k F_d cos(2 pi f_k t + phi_k)``."""

    amplitude: float
    frequencies: tuple
    phases: tuple = None

    def __post_init__(self):
        freqs = tuple(float(f) for f in self.frequencies)
        if len(freqs) < 1:
            raise ValueError("at least one disturbance frequency is required")
        if any(f <= 0 for f in freqs):
            raise ValueError("disturbance frequencies must be > 0")
        if len(set(freqs)) != len(freqs):
            raise ValueError("disturbance frequencies must be distinct")
        phases = (0.0,) * len(freqs) if self.phases is None else tuple(float(p) for p in self.phases)
        if len(phases) != len(freqs):
            raise ValueError("need one phase per frequency")
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "phases", phases)

    @property
    def m(self) -> int:
        return len(self.frequencies)

    @property
    def omegas(self) -> np.ndarray:
        return 2 * np.pi * np.asarray(self.frequencies)

    def force(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for w, ph in zip(self.omegas, self.phases):
            out = out + self.amplitude * np.cos(w * t + ph)
        return out


@dataclass(frozen=True)
class FeedbackConfig:
    """Output delays ``tau_1 < ... < tau_N`` and controller order ``n_c``."""

    delays: tuple
    n_c: int = 0

    def __post_init__(self):
        delays = tuple(float(d) for d in self.delays)
        if len(delays) < 1:
            raise ValueError("at least one feedback delay is required")
        if any(d < 0 for d in delays):
            raise ValueError("feedback delays must be >= 0")
        if any(b <= a for a, b in zip(delays, delays[1:])):
            raise ValueError("feedback delays must be strictly increasing")
        if int(self.n_c) != self.n_c or self.n_c < 0:
            raise ValueError("controller order n_c must be a non-negative integer")
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "n_c", int(self.n_c))

    @property
    def N(self) -> int:
        return len(self.delays)


@dataclass(frozen=True)
class BlockIndex:
    """Slices of the blocks ``x, zeta_u, x_c, zeta_y`` inside the augmented state."""

    x: slice
    zeta_u: slice
    x_c: slice
    zeta_y: slice

    def zeta_y_block(self, i: int, n_y: int) -> slice:
        start = self.zeta_y.start + i * n_y
        return slice(start, start + n_y)


@dataclass(frozen=True)
class DdaeSystem:
    """Descriptor closed loop ``E xt' = A0 xt + sum_k A_k xt(t - d_k) + B2t w + B1t ut``.

    ``delay_terms`` lists ``(delay, matrix)`` pairs: first the input delay
    ``tau_u`` then one per feedback delay.  ``yt = C1t xt`` is fed back through
    ``ut = K yt`` and ``z = C2t xt`` is the target output.
    """

    plant: PlantModel
    feedback: FeedbackConfig
    E: np.ndarray
    A0: np.ndarray
    delay_terms: tuple
    B1t: np.ndarray
    B2t: np.ndarray
    C1t: np.ndarray
    C2t: np.ndarray
    index: BlockIndex = field(repr=False)

    @property
    def dim(self) -> int:
        return self.E.shape[0]

    @property
    def n_c(self) -> int:
        return self.feedback.n_c

    @property
    def delays(self) -> np.ndarray:
        return np.array([d for d, _ in self.delay_terms])

    def gain_shape(self) -> tuple:
        return self.B1t.shape[1], self.C1t.shape[0]

    def zero_gain(self) -> "GainMatrix":
        p, f = self.plant, self.feedback
        return GainMatrix(np.zeros(self.gain_shape()), f.n_c, p.n_u, p.n_y, f.N)


def build_plant(params: PlantParams) -> PlantModel:
    """Eight-state chain model of the rig with state ``[x0, v0, x1, v1, x2, v2, xa, va]``."""
    p = params
    A = np.zeros((8, 8))
    A[0, 1] = A[2, 3] = A[4, 5] = A[6, 7] = 1.0
    A[1] = np.array([
        -(p.k_0 + p.k_1 + p.k_a + p.k_4), -(p.c_0 + p.c_1 + p.c_a + p.c_4),
        p.k_1, p.c_1, p.k_4, p.c_4, p.k_a, p.c_a,
    ]) / p.m_0
    A[3] = np.array([
        p.k_1, p.c_1, -(p.k_1 + p.k_2), -(p.c_1 + p.c_2), p.k_2, p.c_2, 0, 0,
    ]) / p.m_1
    A[5] = np.array([
        p.k_4, p.c_4, p.k_2, p.c_2, -(p.k_2 + p.k_3 + p.k_4), -(p.c_2 + p.c_3 + p.c_4), 0, 0,
    ]) / p.m_2
    A[7] = np.array([p.k_a, p.c_a, 0, 0, 0, 0, -p.k_a, -p.c_a]) / p.m_a

    B1 = np.zeros((8, 1))
    B1[1, 0] = -1.0 / p.m_0
    B1[7, 0] = 1.0 / p.m_a
    B2 = np.zeros((8, 1))
    B2[5, 0] = 1.0 / p.m_2
    C1 = np.zeros((4, 8))
    C1[0, 0] = C1[1, 1] = C1[2, 6] = C1[3, 7] = 1.0
    C2 = np.zeros((1, 8))
    C2[0, 2] = 1.0
    return PlantModel(A, B1, B2, C1, C2, p.tau_u)


def assemble_ddae(plant: PlantModel, fb: FeedbackConfig) -> DdaeSystem:
    """Embed plant, output delays and controller of order ``fb.n_c`` into one DDAE."""
    n, n_u, n_y = plant.n, plant.n_u, plant.n_y
    n_c, N = fb.n_c, fb.N
    dim = n + n_u + n_c + n_y * N
    idx = BlockIndex(
        x=slice(0, n),
        zeta_u=slice(n, n + n_u),
        x_c=slice(n + n_u, n + n_u + n_c),
        zeta_y=slice(n + n_u + n_c, dim),
    )

    E = np.zeros((dim, dim))
    E[idx.x, idx.x] = np.eye(n)
    E[idx.x_c, idx.x_c] = np.eye(n_c)

    A0 = np.zeros((dim, dim))
    A0[idx.x, idx.x] = plant.A
    A0[idx.zeta_u, idx.zeta_u] = -np.eye(n_u)
    A0[idx.zeta_y, idx.zeta_y] = -np.eye(n_y * N)

    Au = np.zeros((dim, dim))
    Au[idx.x, idx.zeta_u] = plant.B1
    terms = [(plant.tau_u, _frozen(Au))]
    for i, tau in enumerate(fb.delays):
        Ai = np.zeros((dim, dim))
        Ai[idx.zeta_y_block(i, n_y), idx.x] = plant.C1
        terms.append((tau, _frozen(Ai)))

    B1t = np.zeros((dim, n_c + n_u))
    B1t[idx.x_c, :n_c] = np.eye(n_c)
    B1t[idx.zeta_u, n_c:] = np.eye(n_u)
    B2t = np.zeros((dim, 1))
    B2t[idx.x] = plant.B2

    C1t = np.zeros((n_c + n_y * N, dim))
    C1t[:n_c, idx.x_c] = np.eye(n_c)
    C1t[n_c:, idx.zeta_y] = np.eye(n_y * N)
    C2t = np.zeros((1, dim))
    C2t[:, idx.x] = plant.C2

    return DdaeSystem(
        plant=plant, feedback=fb, E=_frozen(E), A0=_frozen(A0), delay_terms=tuple(terms),
        B1t=_frozen(B1t), B2t=_frozen(B2t), C1t=_frozen(C1t), C2t=_frozen(C2t), index=idx,
    )


@dataclass(frozen=True)
class GainMatrix:
    """Static gain ``K = [[A_c, B_c], [C_c, D_c]]`` of the remodelled loop."""

    K: np.ndarray
    n_c: int
    n_u: int
    n_y: int
    N: int

    def __post_init__(self):
        K = _frozen(self.K)
        shape = (self.n_c + self.n_u, self.n_c + self.n_y * self.N)
        K = K.reshape(shape) if K.size == shape[0] * shape[1] else K
        if K.shape != shape:
            raise ValueError(f"gain has shape {K.shape}, expected {shape}")
        object.__setattr__(self, "K", K)

    @property
    def n_p(self) -> int:
        return self.K.size

    @property
    def dims(self) -> tuple:
        return self.n_c, self.n_u, self.n_y, self.N

    def with_K(self, K) -> "GainMatrix":
        return GainMatrix(K, *self.dims)


def realize_controller(K: GainMatrix):
    """Split ``K`` into the controller realization ``(A_c, B_c, C_c, D_c)``."""
    nc = K.n_c
    M = K.K
    return M[:nc, :nc], M[:nc, nc:], M[nc:, :nc], M[nc:, nc:]


def embed_controller(A_c, B_c, C_c, D_c, n_y: int, N: int) -> GainMatrix:
    """Inverse of :func:`realize_controller`."""
    D_c = np.atleast_2d(np.asarray(D_c, dtype=float))
    n_u = D_c.shape[0]
    n_c = np.asarray(A_c).shape[0] if np.asarray(A_c).size else 0
    K = np.zeros((n_c + n_u, n_c + n_y * N))
    if n_c:
        K[:n_c, :n_c] = A_c
        K[:n_c, n_c:] = B_c
        K[n_c:, :n_c] = C_c
    K[n_c:, n_c:] = D_c
    return GainMatrix(K, n_c, n_u, n_y, N)


def case_study(n_c: int = 0, delays=(0.05, 0.1, 0.15, 0.2)):
    """Four-mass rig with its measured 2 ms input delay and 4/8/12/16 Hz, 3 N disturbance."""
    plant = build_plant(PlantParams())
    sys = assemble_ddae(plant, FeedbackConfig(delays, n_c))
    dist = DisturbanceSpec(3.0, (4.0, 8.0, 12.0, 16.0))
    return sys, dist
