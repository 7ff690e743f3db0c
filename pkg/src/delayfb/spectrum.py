"""Characteristic roots, spectral abscissa and its sensitivity for the DDAE closed loop.

Roots are located with a Chebyshev collocation of the infinitesimal generator of
the equivalent retarded system and then polished by Newton's method on
``det M(lambda) = 0``.  Every returned root carries a residual certificate
``sigma_min(M(lambda)) / ||M(0)||_F``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from delayfb.model import DdaeSystem, GainMatrix


class DiscretizationTooCoarse(RuntimeError):
    """A candidate that could be rightmost did not converge under Newton refinement."""


class EmptyRegion(ValueError):
    """No characteristic root lies to the right of the region bound."""


class NonSmoothPoint(ArithmeticError):
    """The rightmost root is not unique; ``gradient`` holds a subgradient."""

    def __init__(self, message, gradient=None):
        super().__init__(message)
        self.gradient = gradient


def _gain_array(K) -> np.ndarray:
    return K.K if isinstance(K, GainMatrix) else np.asarray(K, dtype=float)


def characteristic_matrix(sys: DdaeSystem, K, lam: complex) -> np.ndarray:
    """``M(lam) = lam E - A0 - sum_k A_k exp(-lam d_k) - B1t K C1t``."""
    Kmat = _gain_array(K)
    M = lam * sys.E - sys.A0 - sys.B1t @ Kmat @ sys.C1t
    for d, Ad in sys.delay_terms:
        M = M - Ad * np.exp(-lam * d)
    return M


def characteristic_derivative(sys: DdaeSystem, lam: complex) -> np.ndarray:
    """``dM/dlam = E + sum_k d_k A_k exp(-lam d_k)``."""
    Mp = sys.E.astype(complex)
    for d, Ad in sys.delay_terms:
        Mp = Mp + d * Ad * np.exp(-lam * d)
    return Mp


@dataclass(frozen=True)
class CharMatrixEval:
    lam: complex
    M: np.ndarray
    sigma_min: float


def char_matrix(sys: DdaeSystem, K, lam: complex) -> CharMatrixEval:
    M = characteristic_matrix(sys, K, complex(lam))
    smin = np.linalg.svd(M, compute_uv=False)[-1]
    return CharMatrixEval(complex(lam), M, float(smin))


@dataclass(frozen=True)
class RetardedSystem:
    """``xdot = sum_k A_k x(t - d_k)`` with ``d_0 = 0`` always present (state ``[x; x_c]``)."""

    terms: tuple

    @property
    def n(self) -> int:
        return self.terms[0][1].shape[0]

    @property
    def delays(self) -> np.ndarray:
        return np.array([d for d, _ in self.terms])

    @property
    def tau_max(self) -> float:
        return float(max(d for d, _ in self.terms))

    def char_matrix(self, lam: complex) -> np.ndarray:
        M = lam * np.eye(self.n, dtype=complex)
        for d, Ad in self.terms:
            M = M - Ad * np.exp(-lam * d)
        return M


def _merge_terms(terms, tol=1e-14):
    merged = []
    for d, Ad in sorted(terms, key=lambda t: t[0]):
        if not np.any(Ad):
            if d == 0 and not merged:
                merged.append([0.0, Ad.copy()])
            continue
        if merged and abs(merged[-1][0] - d) <= tol * max(1.0, d):
            merged[-1][1] = merged[-1][1] + Ad
        else:
            merged.append([d, Ad.copy()])
    if not merged or merged[0][0] != 0.0:
        merged.insert(0, [0.0, np.zeros_like(terms[0][1])])
    return tuple((float(d), Ad) for d, Ad in merged)


def reduce_to_retarded(sys: DdaeSystem, K) -> RetardedSystem:
    """Eliminate the slack blocks, leaving a retarded DDE in ``[x; x_c]``."""
    Kmat = _gain_array(K)
    plant, fb = sys.plant, sys.feedback
    n, n_c, n_y = plant.n, fb.n_c, plant.n_y
    nr = n + n_c
    A_c, B_c = Kmat[:n_c, :n_c], Kmat[:n_c, n_c:]
    C_c, D_c = Kmat[n_c:, :n_c], Kmat[n_c:, n_c:]
    tau_u = plant.tau_u

    A0 = np.zeros((nr, nr))
    A0[:n, :n] = plant.A
    A0[n:, n:] = A_c
    terms = [(0.0, A0)]

    Au = np.zeros((nr, nr))
    Au[:n, n:] = plant.B1 @ C_c
    terms.append((tau_u, Au))
    for i, tau in enumerate(fb.delays):
        cols = slice(i * n_y, (i + 1) * n_y)
        Ai = np.zeros((nr, nr))
        Ai[n:, :n] = B_c[:, cols] @ plant.C1
        terms.append((tau, Ai))
        Aui = np.zeros((nr, nr))
        Aui[:n, :n] = plant.B1 @ D_c[:, cols] @ plant.C1
        terms.append((tau_u + tau, Aui))
    return RetardedSystem(_merge_terms(terms))


def _cheb(npts: int, tau_max: float):
    """Chebyshev points on ``[-tau_max, 0]`` (first point 0) and differentiation matrix."""
    N = npts
    x = np.cos(np.pi * np.arange(N + 1) / N)
    c = np.hstack([2.0, np.ones(N - 1), 2.0]) * (-1.0) ** np.arange(N + 1)
    X = np.tile(x, (N + 1, 1)).T
    dX = X - X.T
    D = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    D = D - np.diag(D.sum(axis=1))
    theta = tau_max * (x - 1.0) / 2.0
    return theta, D * (2.0 / tau_max)


def _lagrange_row(nodes: np.ndarray, t: float) -> np.ndarray:
    """Barycentric Lagrange weights evaluating the interpolant on ``nodes`` at ``t``."""
    N = len(nodes) - 1
    w = (-1.0) ** np.arange(N + 1)
    w[0] *= 0.5
    w[-1] *= 0.5
    diff = t - nodes
    hit = np.isclose(diff, 0.0, rtol=0.0, atol=1e-14 * max(1.0, abs(t)))
    if hit.any():
        out = np.zeros(N + 1)
        out[np.argmax(hit)] = 1.0
        return out
    q = w / diff
    return q / q.sum()


def discretized_generator(rs: RetardedSystem, npts: int) -> np.ndarray:
    """Spectral collocation matrix whose eigenvalues approximate the rightmost roots.

    Only the state components that actually appear delayed (nonzero columns
    of the delayed coefficient matrices) get a collocated history, so the
    matrix has size ``n + n_s * npts`` with ``n_s`` the number of such
    components.  Node 0 of the history is the current state itself.
    """
    n = rs.n
    delayed = [(d, Ad) for d, Ad in rs.terms if d > 0]
    A0 = sum((Ad for d, Ad in rs.terms if d == 0), np.zeros((n, n)))
    if not delayed:
        return A0
    S = np.flatnonzero(np.any([Ad != 0 for _, Ad in delayed], axis=(0, 1)))
    ns = S.size
    theta, D = _cheb(npts, rs.tau_max)
    dim = n + ns * npts
    A = np.zeros((dim, dim))
    A[:n, :n] = A0
    # history nodes 1..npts of the selected components; node 0 is x[S]
    for d, Ad in delayed:
        w = _lagrange_row(theta, -d)
        B = Ad[:, S]
        A[:n, S] += w[0] * B
        A[:n, n:] += np.kron(w[1:], B)
    A[n:, n:] = np.kron(D[1:, 1:], np.eye(ns))
    A[n:, S] += np.kron(D[1:, :1], np.eye(ns))
    return A


@dataclass
class SpectrumOptions:
    """Root-finding knobs; ``npts=None`` applies the default grid rule."""

    npts: int = None
    f_max: float = None
    margin: float = 0.5
    region_offset: float = 1.0
    root_tol: float = 1e-10
    tie_tol: float = 1e-6
    newton_maxit: int = 40
    max_refinements: int = 3
    max_npts: int = 400

    def grid_size(self, sys: DdaeSystem, rs: RetardedSystem) -> int:
        if self.npts is not None:
            return int(self.npts)
        f_max = self.f_max
        if f_max is None:
            f_max = np.abs(np.linalg.eigvals(sys.plant.A)).max() / (2 * np.pi)
        return 20 + 10 * math.ceil(rs.tau_max * f_max)


@dataclass(frozen=True)
class Spectrum:
    roots: np.ndarray
    residuals: np.ndarray
    multiple: np.ndarray
    region: float
    npts: int = 0
    tie_tol: float = 1e-6
    scale: float = field(default=1.0, repr=False)

    @property
    def abscissa(self) -> float:
        return spectral_abscissa(self)

    def rightmost(self) -> complex:
        """Rightmost root, taking the upper half-plane member of a conjugate pair."""
        re = self.roots.real
        top = np.flatnonzero(re >= re.max() - 1e-14 * max(1.0, abs(re.max())))
        return complex(self.roots[top[np.argmax(self.roots[top].imag)]])

    def ties(self) -> np.ndarray:
        """Roots (Im >= 0) whose real part is within ``tie_tol`` of the abscissa."""
        a = self.roots.real.max()
        sel = self.roots[(self.roots.real >= a - self.tie_tol) & (self.roots.imag >= 0)]
        return sel

    @property
    def is_tied(self) -> bool:
        return len(self.ties()) > 1

    def to_csv(self, path) -> None:
        data = np.column_stack([self.roots.real, self.roots.imag, self.residuals])
        np.savetxt(path, data, delimiter=",", header="re,im,residual", comments="", fmt="%.17g")


def _newton(sys, Kmat, lam0, tol, maxit):
    """Newton on ``det M`` via ``lam -= 1 / trace(M^{-1} M')``; returns ``(lam, converged)``.

    Stops once the step is below ``tol`` relative or stagnates at roundoff
    level; acceptance is left to the residual certificate.
    """
    lam = complex(lam0)
    real = lam.imag == 0.0
    prev = np.inf
    for _ in range(maxit):
        M = characteristic_matrix(sys, Kmat, lam)
        Mp = characteristic_derivative(sys, lam)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu = sla.lu_factor(M, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return lam, True
        if np.any(np.diag(lu[0]) == 0):
            return lam, True
        tr = np.trace(sla.lu_solve(lu, Mp, check_finite=False))
        if not np.isfinite(tr) or tr == 0:
            return lam, False
        step = 1.0 / tr
        if real:
            step = complex(step.real, 0.0)
        lam = lam - step
        if not np.isfinite(lam):
            return lam, False
        size = abs(step) / max(1.0, abs(lam))
        if size <= tol or (size <= 1e-10 and abs(step) >= 0.5 * prev):
            return lam, True
        prev = abs(step)
    return lam, False


def residual(sys: DdaeSystem, K, lam: complex, scale: float = None) -> float:
    """Residual certificate ``sigma_min(M(lam)) / ||M(0)||_F``."""
    Kmat = _gain_array(K)
    if scale is None:
        scale = np.linalg.norm(characteristic_matrix(sys, Kmat, 0.0))
    smin = np.linalg.svd(characteristic_matrix(sys, Kmat, lam), compute_uv=False)[-1]
    return float(smin / scale)


def _roots_in_region(sys, Kmat, eigs, r, opts, scale):
    """Refine candidates with ``Re >= r - margin``; raise if an unconverged one could matter."""
    cand = eigs[(eigs.real >= r - opts.margin) & (eigs.imag >= -1e-8 * (1 + np.abs(eigs)))]
    found, failed = [], []
    for c in cand:
        if abs(c.imag) <= 1e-8 * (1 + abs(c)):
            c = complex(c.real, 0.0)
        lam, ok = _newton(sys, Kmat, c, 1e-14, opts.newton_maxit)
        if np.isfinite(lam):
            lam = complex(lam.real, abs(lam.imag)) if lam.imag != 0 else lam
            res = residual(sys, Kmat, lam, scale)
            ok = res <= opts.root_tol and abs(lam - c) <= 0.5 * (1 + abs(c))
        if ok:
            found.append((lam, res))
        else:
            failed.append(c)
    return found, failed


def compute_spectrum(sys: DdaeSystem, K, region: float = None, opts: SpectrumOptions = None) -> Spectrum:
    """All characteristic roots with ``Re >= region`` (region defaults to estimate - 1)."""
    opts = opts or SpectrumOptions()
    Kmat = _gain_array(K)
    rs = reduce_to_retarded(sys, Kmat)
    npts = opts.grid_size(sys, rs)
    scale = np.linalg.norm(characteristic_matrix(sys, Kmat, 0.0))
    for _ in range(opts.max_refinements + 1):
        eigs = np.linalg.eigvals(discretized_generator(rs, npts))
        eigs = eigs[np.isfinite(eigs)]
        r = region if region is not None else eigs.real.max() - opts.region_offset
        found, failed = _roots_in_region(sys, Kmat, eigs, r, opts, scale)
        best = max((lam.real for lam, _ in found), default=-np.inf)
        if not any(c.real >= best - opts.margin for c in failed):
            break
        if npts * 2 > opts.max_npts or rs.tau_max == 0.0:
            raise DiscretizationTooCoarse(
                f"{len(failed)} candidate(s) near Re={best:.4g} failed to converge at npts={npts}")
        npts *= 2

    roots, res, mult = _dedupe(found)
    keep = roots.real >= r
    roots, res, mult = roots[keep], res[keep], mult[keep]
    if roots.size == 0:
        raise EmptyRegion(f"no characteristic roots with Re >= {r:.6g}")
    # close under conjugation
    cplx = roots.imag > 0
    roots = np.concatenate([roots, roots[cplx].conj()])
    res = np.concatenate([res, res[cplx]])
    mult = np.concatenate([mult, mult[cplx]])
    order = np.lexsort((-roots.imag, -roots.real))
    return Spectrum(roots[order], res[order], mult[order], float(r), npts, opts.tie_tol, scale)


def _dedupe(found, tol=1e-8):
    roots, res, mult = [], [], []
    for lam, rr in sorted(found, key=lambda t: -t[0].real):
        for j, other in enumerate(roots):
            if abs(lam - other) <= tol * max(1.0, abs(lam)):
                mult[j] = True
                break
        else:
            roots.append(lam)
            res.append(rr)
            mult.append(False)
    return np.array(roots, dtype=complex), np.array(res), np.array(mult, dtype=bool)


def spectral_abscissa(sp: Spectrum) -> float:
    if sp.roots.size == 0:
        raise EmptyRegion("spectrum is empty")
    return float(sp.roots.real.max())


def root_sensitivity(sys: DdaeSystem, K, lam: complex) -> np.ndarray:
    """``d lam / d K`` for a simple root ``lam`` (complex matrix shaped like ``K``)."""
    Kmat = _gain_array(K)
    M = characteristic_matrix(sys, Kmat, lam)
    U, _, Vh = np.linalg.svd(M)
    v = Vh[-1].conj()
    u = U[:, -1]
    denom = u.conj() @ characteristic_derivative(sys, lam) @ v
    return np.outer(u.conj() @ sys.B1t, sys.C1t @ v) / denom


def abscissa_gradient(sys: DdaeSystem, K_L, partition, sp: Spectrum, frequencies=None,
                      allow_nonsmooth: bool = False) -> np.ndarray:
    """Gradient of the abscissa with respect to the free entries of ``K_L``.

    Dependent gains follow ``K_L`` through ``P(K_L) g = Q`` and contribute via
    the implicit derivative ``dg/dK_L``.  Raises :class:`NonSmoothPoint` when the
    rightmost root is tied, unless ``allow_nonsmooth``.
    """
    from delayfb import zeros

    omegas = partition.omegas if frequencies is None else 2 * np.pi * np.asarray(frequencies)
    KL = _gain_array(K_L)
    g, dg = zeros.dependent_gain_jacobian(sys, partition, KL, omegas)
    Kfull = zeros.compose_full_gain(partition, KL, g).K
    lam = sp.rightmost()
    dlam = root_sensitivity(sys, Kfull, lam)
    free = partition.free_mask
    direct = dlam[free]
    dep = dlam[partition.row, list(partition.dep_cols)]
    grad = np.real(direct + dep @ dg)
    if sp.is_tied and not allow_nonsmooth:
        raise NonSmoothPoint(f"{len(sp.ties())} roots tie for the abscissa", grad)
    return grad
