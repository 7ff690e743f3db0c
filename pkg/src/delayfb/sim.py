"""Time-domain simulation of the delayed closed loop (fixed-step RK4, method of steps).

Delayed states are read from the stored trajectory by cubic Hermite
interpolation (values and derivatives at grid points); history before
``t = 0`` is identically zero.  The controller is hard-gated: its state is
frozen at zero and its output is zero before the switch-on time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from delayfb.model import DisturbanceSpec, GainMatrix, PlantModel, realize_controller

OVERFLOW_GUARD = 1e9
MAX_DB = 160.0


class InstabilityDetected(RuntimeError):
    def __init__(self, time):
        super().__init__(f"state norm exceeded {OVERFLOW_GUARD:g} at t = {time:.6g} s")
        self.time = time


class WindowTooShort(ValueError):
    pass


@dataclass(frozen=True)
class SimScenario:
    plant: PlantModel
    gain: GainMatrix
    delays: tuple
    disturbance: DisturbanceSpec
    t_end: float = 30.0
    t_on: float = 5.0
    h: float = None

    def __post_init__(self):
        delays = tuple(float(d) for d in self.delays)
        object.__setattr__(self, "delays", delays)
        bound = self.step_bound()
        h = bound if self.h is None else float(self.h)
        if h > bound * (1 + 1e-12):
            raise ValueError(f"step {h:g} exceeds bound {bound:g}")
        if not self.t_on < self.t_end:
            raise ValueError("t_on must be before t_end")
        object.__setattr__(self, "h", h)

    def step_bound(self) -> float:
        positive = [d for d in (self.plant.tau_u, *self.delays) if d > 0]
        bound = 1.0 / (40.0 * max(self.disturbance.frequencies))
        if positive:
            bound = min(bound, min(positive) / 20.0)
        return bound


@dataclass(frozen=True)
class SimTrace:
    t: np.ndarray
    x: np.ndarray
    x_c: np.ndarray
    u: np.ndarray
    z: np.ndarray
    f_d: np.ndarray
    t_on: float

    def to_csv(self, path, every: int = 1, full_state: bool = False) -> None:
        cols = [self.t, self.f_d, self.u, self.z]
        names = ["t", "f_d", "u", "x_1"]
        if full_state:
            cols += list(self.x.T) + list(self.x_c.T)
            names += [f"x{i}" for i in range(self.x.shape[1])] + [f"xc{i}" for i in range(self.x_c.shape[1])]
        data = np.column_stack(cols)[::every]
        np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.12g")


@numba.njit(cache=True)
def _hermite(S, dS, dL, h, q, out):
    """Cubic Hermite value of the stored trajectory at time ``q`` (zero for ``q < 0``).

    ``dS`` holds right derivatives and ``dL`` left derivatives; they differ only
    where a gate switches.
    """
    if q < 0.0:
        out[:] = 0.0
        return
    r = q / h
    k = int(np.floor(r + 1e-9))
    th = r - k
    if th <= 1e-9:
        out[:] = S[k]
        return
    h00 = (1 + 2 * th) * (1 - th) ** 2
    h10 = th * (1 - th) ** 2
    h01 = th * th * (3 - 2 * th)
    h11 = th * th * (th - 1)
    out[:] = h00 * S[k] + h10 * h * dS[k] + h01 * S[k + 1] + h11 * h * dL[k + 1]


@numba.njit(cache=True)
def _rhs(t, s, t_step, S, dS, dL, h, A0, Ms, delays, offsets, gated, t_on, b, amps, omegas, phases, buf, out):
    out[:] = A0 @ s
    f = 0.0
    for j in range(amps.size):
        f += amps[j] * np.cos(omegas[j] * t + phases[j])
    out += b * f
    for k in range(delays.size):
        # switch instants lie on the grid, so the gate is constant over a step
        if gated[k] and t_step - offsets[k] < t_on - 1e-9 * h:
            continue
        if delays[k] == 0.0:
            out += Ms[k] @ s
        else:
            _hermite(S, dS, dL, h, t - delays[k], buf)
            out += Ms[k] @ buf


@numba.njit(cache=True)
def _rk4(nsteps, h, A0, Ms, delays, offsets, gated, t_on, b, amps, omegas, phases, guard):
    n = A0.shape[0]
    S = np.zeros((nsteps + 1, n))
    dS = np.zeros((nsteps + 1, n))
    dL = np.zeros((nsteps + 1, n))
    switched = np.zeros(nsteps + 1, dtype=np.bool_)
    buf = np.zeros(n)
    k1 = np.zeros(n)
    k2 = np.zeros(n)
    k3 = np.zeros(n)
    k4 = np.zeros(n)
    buf2 = np.zeros(n)
    args = (A0, Ms, delays, offsets, gated, t_on, b, amps, omegas, phases, buf)
    for i in range(nsteps):
        t = i * h
        s = S[i]
        _rhs(t, s, t, S, dS, dL, h, *args, k1)
        dS[i] = k1
        if not switched[i]:
            dL[i] = k1
        _rhs(t + h / 2, s + h / 2 * k1, t, S, dS, dL, h, *args, k2)
        _rhs(t + h / 2, s + h / 2 * k2, t, S, dS, dL, h, *args, k3)
        _rhs(t + h, s + h * k3, t, S, dS, dL, h, *args, k4)
        S[i + 1] = s + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(S[i + 1])) or np.sqrt(np.sum(S[i + 1] ** 2)) > guard:
            return S, dS, dL, i + 1
        for k in range(delays.size):
            if gated[k] and (t - offsets[k] < t_on - 1e-9 * h) != (t + h - offsets[k] < t_on - 1e-9 * h):
                switched[i + 1] = True
        if switched[i + 1]:
            # derivative jumps here: keep the left limit for interpolation from the left
            _rhs(t + h, S[i + 1], t, S, dS, dL, h, *args, buf2)
            dL[i + 1] = buf2
    _rhs(nsteps * h, S[nsteps], nsteps * h, S, dS, dL, h, *args, k1)
    dS[nsteps] = k1
    if not switched[nsteps]:
        dL[nsteps] = k1
    return S, dS, dL, -1


def _terms(plant: PlantModel, gain: GainMatrix, delays):
    """``(delay, gate offset, gated, matrix)`` for each term of ``[x; x_c]`` dynamics."""
    A_c, B_c, C_c, D_c = realize_controller(gain)
    n, n_c, n_y = plant.n, gain.n_c, plant.n_y
    nr = n + n_c
    tau_u = plant.tau_u
    terms = []
    M = np.zeros((nr, nr))
    M[n:, n:] = A_c
    terms.append((0.0, 0.0, True, M))
    M = np.zeros((nr, nr))
    M[:n, n:] = plant.B1 @ C_c
    terms.append((tau_u, tau_u, True, M))
    for i, tau in enumerate(delays):
        cols = slice(i * n_y, (i + 1) * n_y)
        M = np.zeros((nr, nr))
        M[n:, :n] = B_c[:, cols] @ plant.C1
        terms.append((tau, 0.0, True, M))
        M = np.zeros((nr, nr))
        M[:n, :n] = plant.B1 @ D_c[:, cols] @ plant.C1
        terms.append((tau_u + tau, tau_u, True, M))
    return [t for t in terms if np.any(t[3])]


def _interp_many(S, dS, dL, h, times):
    times = np.asarray(times)
    out = np.zeros((times.size, S.shape[1]))
    r = times / h
    k = np.floor(r + 1e-9).astype(int)
    th = r - k
    valid = times >= 0
    k = np.clip(k, 0, S.shape[0] - 2)
    th = np.where(valid, th, 0.0)[:, None]
    h00 = (1 + 2 * th) * (1 - th) ** 2
    h10 = th * (1 - th) ** 2
    h01 = th * th * (3 - 2 * th)
    h11 = th * th * (th - 1)
    val = h00 * S[k] + h10 * h * dS[k] + h01 * S[k + 1] + h11 * h * dL[k + 1]
    out[valid] = val[valid]
    return out


def simulate_closed_loop(scn: SimScenario) -> SimTrace:
    """Integrate plant plus gated controller; raises :class:`InstabilityDetected` on blow-up."""
    plant, gain = scn.plant, scn.gain
    n, n_c = plant.n, gain.n_c
    nr = n + n_c
    h = scn.h
    nsteps = int(round(scn.t_end / h))
    terms = _terms(plant, gain, scn.delays)
    A0 = np.zeros((nr, nr))
    A0[:n, :n] = plant.A
    if terms:
        Ms = np.array([t[3] for t in terms])
        delays = np.array([t[0] for t in terms])
        offsets = np.array([t[1] for t in terms])
        gated = np.array([t[2] for t in terms])
    else:
        Ms, delays, offsets, gated = np.zeros((0, nr, nr)), np.zeros(0), np.zeros(0), np.zeros(0, bool)
    b = np.zeros(nr)
    b[:n] = plant.B2[:, 0]
    dist = scn.disturbance
    S, dS, dL, blow = _rk4(nsteps, h, A0, Ms, delays, offsets, gated, float(scn.t_on), b,
                       np.full(dist.m, float(dist.amplitude)), dist.omegas, np.asarray(dist.phases), OVERFLOW_GUARD)
    if blow >= 0:
        raise InstabilityDetected(blow * h)
    t = np.arange(nsteps + 1) * h
    A_c, B_c, C_c, D_c = realize_controller(gain)
    u = (S[:, n:] @ C_c.T)[:, 0] if n_c else np.zeros(t.size)
    n_y = plant.n_y
    for i, tau in enumerate(scn.delays):
        xd = _interp_many(S, dS, dL, h, t - tau)[:, :n]
        u = u + (xd @ plant.C1.T @ D_c[:, i * n_y:(i + 1) * n_y].T)[:, 0]
    u = np.where(t >= scn.t_on - 1e-12, u, 0.0)
    z = S[:, :n] @ plant.C2[0]
    return SimTrace(t, S[:, :n], S[:, n:], u, z, dist.force(t), scn.t_on)


def harmonic_amplitude(t, signal, freq, start, stop) -> float:
    """Amplitude of ``signal`` at ``freq`` over the last whole periods in ``[start, stop]``."""
    periods = int(np.floor((stop - start) * freq + 1e-9))
    if periods < 1:
        raise WindowTooShort(f"window shorter than one period of {freq} Hz")
    lo = stop - periods / freq
    sel = (t >= lo - 1e-9) & (t < stop - 1e-9)
    ts, ys = t[sel], signal[sel]
    return float(2.0 / ts.size * abs(np.sum(ys * np.exp(-2j * np.pi * freq * ts))))


def _default_windows(trace: SimTrace, freqs):
    f_min = min(freqs)
    t_end = trace.t[-1]
    pre_span, post_span = trace.t_on, t_end - trace.t_on
    need = 8.0 / f_min
    if pre_span < need or post_span < need:
        raise WindowTooShort(f"need {need:g} s (8 periods of {f_min} Hz) before and after switch-on")
    pre_len = max(0.25 * pre_span, need)
    post_len = max(0.25 * post_span, need)
    return (trace.t_on - pre_len, trace.t_on), (t_end - post_len, t_end)


def steady_state_attenuation(trace: SimTrace, freqs, window=None, signal=None) -> np.ndarray:
    """Per-frequency attenuation (dB) of the target displacement, pre vs post switch-on.

    ``window`` is ``((pre_start, pre_stop), (post_start, post_stop))``.
    """
    freqs = list(freqs)
    pre, post = _default_windows(trace, freqs) if window is None else window
    for lo, hi in (pre, post):
        if hi - lo < 8.0 / min(freqs) - 1e-9:
            raise WindowTooShort(f"window [{lo:g}, {hi:g}] holds fewer than 8 periods of {min(freqs)} Hz")
    y = trace.z if signal is None else signal
    out = []
    for f in freqs:
        a_pre = harmonic_amplitude(trace.t, y, f, *pre)
        a_post = harmonic_amplitude(trace.t, y, f, *post)
        if a_post == 0.0:
            out.append(MAX_DB if a_pre > 0 else 0.0)
        else:
            out.append(min(MAX_DB, 20.0 * np.log10(a_pre / a_post)) if a_pre > 0 else -MAX_DB)
    return np.array(out)
