"""Nonsmooth BFGS minimisation of the eliminated spectral abscissa and staged order design."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from delayfb import spectrum as spec
from delayfb import zeros
from delayfb.model import DdaeSystem, FeedbackConfig, GainMatrix, PlantModel, assemble_ddae

log = logging.getLogger(__name__)


class LineSearchFailure(RuntimeError):
    pass


@dataclass
class OptimizerOptions:
    maxit: int = 500
    gradient_sampling: bool = False
    c1: float = 1e-4
    c2: float = 0.5
    multistart: int = 5
    seed: int = 0
    tol_grad: float = 1e-8
    tol_step: float = 1e-12
    stat_radius: float = 1e-6
    init_noise: float = 1e-3
    warm_noise: float = 1e-2
    cond_max: float = zeros.COND_MAX
    max_bisections: int = 40
    max_doublings: int = 30
    n_jobs: int = 1
    spectrum: spec.SpectrumOptions = field(default_factory=spec.SpectrumOptions)

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("weak Wolfe constants need 0 < c1 < c2 < 1")


@dataclass
class Trace:
    rows: list = field(default_factory=list)
    message: str = ""
    nfev: int = 0

    @property
    def iterations(self) -> int:
        return max(len(self.rows) - 1, 0)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,alpha,step,grad_norm\n")
            for it, f, t, gn in self.rows:
                fh.write(f"{it},{f:.17g},{t:.17g},{gn:.17g}\n")


def _weak_wolfe(fun, x, f, g, d, opts, trace):
    """Bracketing line search for the weak Wolfe conditions (bisection / doubling)."""
    gd = float(g @ d)
    lo, hi, t = 0.0, np.inf, 1.0
    nbisect = ndouble = 0
    while True:
        xt = x + t * d
        ft, gt = fun(xt)
        trace.nfev += 1
        if not np.isfinite(ft) or ft > f + opts.c1 * t * gd:
            hi = t
        elif gt is not None and float(gt @ d) < opts.c2 * gd:
            lo = t
        else:
            return t, xt, ft, gt
        if hi < np.inf:
            if nbisect >= opts.max_bisections:
                break
            t = 0.5 * (lo + hi)
            nbisect += 1
        else:
            if ndouble >= opts.max_doublings:
                break
            t = 2.0 * lo
            ndouble += 1
    if lo > 0:
        # sufficient decrease holds at lo; accept it rather than stall
        xt = x + lo * d
        ft, gt = fun(xt)
        trace.nfev += 1
        return lo, xt, ft, gt
    raise LineSearchFailure(f"no weak Wolfe step after {nbisect} bisections, {ndouble} doublings")


def min_norm_convex(G: np.ndarray) -> np.ndarray:
    """Smallest-norm element of the convex hull of the columns of ``G``."""
    k = G.shape[1]
    if k == 1:
        return G[:, 0]
    H = G.T @ G
    res = minimize(lambda w: w @ H @ w, np.full(k, 1.0 / k), jac=lambda w: 2 * H @ w,
                   bounds=[(0, None)] * k,
                   constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0, "jac": lambda w: np.ones(k)}],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 200})
    return G @ res.x


def _gradient_sampling_step(fun, x, f, opts, rng, radius):
    """Descent step along minus the min-norm gradient sampled in a ball."""
    n = x.size
    grads = []
    for _ in range(n + 1):
        y = x + radius * rng.uniform(-1, 1, n)
        fy, gy = fun(y)
        if np.isfinite(fy) and gy is not None:
            grads.append(gy)
    _, g0 = fun(x)
    if g0 is not None:
        grads.append(g0)
    if not grads:
        return None
    d = -min_norm_convex(np.array(grads).T)
    dn = np.linalg.norm(d)
    if dn == 0:
        return None
    t = radius / dn
    for _ in range(30):
        ft, gt = fun(x + t * d)
        if np.isfinite(ft) and ft < f - 1e-8 * t * dn ** 2:
            return x + t * d, ft, gt
        t *= 0.5
    return None


def bfgs_weak_wolfe(fun, x0, opts: OptimizerOptions = None):
    """BFGS with weak Wolfe line search for nonsmooth, nonconvex ``fun``.

    ``fun(x)`` returns ``(value, gradient)``; an infinite value marks an
    infeasible point.  Returns ``(x_best, f_best, trace)``.
    """
    opts = opts or OptimizerOptions()
    rng = np.random.default_rng(opts.seed)
    x = np.array(x0, dtype=float)
    trace = Trace()
    f, g = fun(x)
    trace.nfev += 1
    if not np.isfinite(f):
        trace.message = "infeasible starting point"
        return x, f, trace
    trace.rows.append((0, f, 0.0, float(np.linalg.norm(g)) if x.size else 0.0))
    if x.size == 0:
        trace.message = "no free parameters"
        return x, f, trace
    n = x.size
    H = np.eye(n)
    first = True
    recent = [(x, g)]
    for it in range(1, opts.maxit + 1):
        gnorm = np.linalg.norm(g)
        if gnorm <= opts.tol_grad:
            trace.message = "gradient tolerance reached"
            break
        d = -H @ g
        if float(g @ d) >= 0:
            if first:
                trace.message = "not a descent direction"
                break
            H, first = np.eye(n), True
            d = -g
        try:
            t, xn, fn, gn = _weak_wolfe(fun, x, f, g, d, opts, trace)
        except LineSearchFailure as exc:
            if opts.gradient_sampling:
                radius = max(1e-6, 1e-3 * np.linalg.norm(x))
                moved = None
                while radius > 1e-10 and moved is None:
                    moved = _gradient_sampling_step(fun, x, f, opts, rng, radius)
                    radius *= 0.1
                if moved is not None:
                    xn, fn, gn = moved
                    t = np.linalg.norm(xn - x) / max(np.linalg.norm(d), 1e-300)
                    H = np.eye(n)
                    first = True
                    x, f, g = xn, fn, gn
                    trace.rows.append((it, f, t, float(np.linalg.norm(g))))
                    continue
            trace.message = f"line search failed: {exc}"
            break
        s, y = xn - x, gn - g
        x, f, g = xn, fn, gn
        trace.rows.append((it, f, t, float(np.linalg.norm(g))))
        recent = (recent + [(x, g)])[-min(n + 1, 10):]
        if np.linalg.norm(s) <= opts.tol_step * max(1.0, np.linalg.norm(x)):
            trace.message = "step tolerance reached"
            break
        # only gradients sampled close to x certify approximate Clarke stationarity
        near = [gi for xi, gi in recent if np.linalg.norm(xi - x) <= opts.stat_radius * max(1.0, np.linalg.norm(x))]
        if len(near) > 1 and np.linalg.norm(min_norm_convex(np.array(near).T)) <= opts.tol_grad:
            trace.message = "stationarity measure below tolerance"
            break
        sty = float(s @ y)
        if sty > 0:
            if first:
                H = (sty / float(y @ y)) * np.eye(n)
                first = False
            rho = 1.0 / sty
            V = np.eye(n) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
    else:
        trace.message = "iteration limit"
    return x, f, trace


class EliminatedObjective:
    """``K_L -> alpha(compose(K_L, g(K_L)))`` with gradient through ``g``."""

    def __init__(self, sys: DdaeSystem, partition: zeros.GainPartition, opts: OptimizerOptions = None):
        self.sys = sys
        self.partition = partition
        self.opts = opts or OptimizerOptions()
        self.nonsmooth_hits = 0
        self._cache = None

    def full_gain(self, p) -> GainMatrix:
        K_L = self.partition.K_L_from_free(p)
        g = zeros.solve_dependent_gains(self.sys, self.partition, K_L, cond_max=self.opts.cond_max)
        return zeros.compose_full_gain(self.partition, K_L, g)

    def evaluate(self, p):
        """``(alpha, gradient, spectrum)``; raises on elimination failure."""
        part = self.partition
        K_L = part.K_L_from_free(p)
        g, dg = zeros.dependent_gain_jacobian(self.sys, part, K_L, cond_max=self.opts.cond_max)
        K = zeros.compose_full_gain(part, K_L, g)
        sp = spec.compute_spectrum(self.sys, K, opts=self.opts.spectrum)
        lam = sp.rightmost()
        dlam = spec.root_sensitivity(self.sys, K, lam)
        grad = np.real(dlam[part.free_mask] + dlam[part.dep_rows, part.dep_cols] @ dg)
        if sp.is_tied:
            self.nonsmooth_hits += 1
        return sp.abscissa, grad, sp

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        if self._cache is not None and np.array_equal(self._cache[0], p):
            return self._cache[1]
        try:
            a, grad, _ = self.evaluate(p)
            out = (a, grad)
        except (zeros.EliminationError, spec.DiscretizationTooCoarse, spec.EmptyRegion,
                np.linalg.LinAlgError) as exc:
            log.debug("objective penalty at |p|=%.3g: %s", np.linalg.norm(p), exc)
            out = (np.inf, None)
        self._cache = (p.copy(), out)
        return out


@dataclass
class DesignRecord:
    """Outcome of one controller order (one row of the design table)."""

    n_c: int
    delays: tuple
    K: GainMatrix
    alpha: float
    residual_max: float
    iterations: int
    wall_time: float
    partition: zeros.GainPartition = field(repr=False)
    trace: Trace = field(default=None, repr=False)
    start: int = 0


def max_constraint_residual(sys, K, partition) -> float:
    return max(abs(zeros.constraint_residual(sys, K, w, partition)) for w in partition.omegas)


def _initial_point(sys, partition, opts, rng, scale, base=None, mask=None, tries=50):
    base = np.zeros(partition.n_free) if base is None else base
    mask = np.ones(partition.n_free, dtype=bool) if mask is None else mask
    for _ in range(tries):
        p = base + np.where(mask, rng.uniform(-scale, scale, base.size), 0.0)
        try:
            zeros.solve_dependent_gains(sys, partition, partition.K_L_from_free(p), cond_max=opts.cond_max)
            return p
        except zeros.EliminationError:
            continue
    raise zeros.PIllConditioned("could not find a starting point with well-conditioned P")


def _run_start(sys, partition, p0, run_opts):
    return bfgs_weak_wolfe(EliminatedObjective(sys, partition, run_opts), p0, run_opts)


def optimize_order(sys: DdaeSystem, partition: zeros.GainPartition, starts, opts: OptimizerOptions):
    """Run BFGS from each start; return the best feasible ``(p, alpha, trace, start_index)``.

    Starts are independent; with ``opts.n_jobs > 1`` they run in worker processes.
    """
    run_opts = [OptimizerOptions(**{**opts.__dict__, "seed": opts.seed + k}) for k in range(len(starts))]
    args = [(sys, partition, p0, o) for p0, o in zip(starts, run_opts)]
    if opts.n_jobs > 1 and len(starts) > 1:
        with ProcessPoolExecutor(min(opts.n_jobs, len(starts))) as pool:
            results = list(pool.map(_run_start, *zip(*args)))
    else:
        results = [_run_start(*a) for a in args]
    best = None
    for k, (p, f, trace) in enumerate(results):
        log.info("n_c=%d start %d: alpha=%.6f after %d iterations (%s)",
                 sys.n_c, k, f, trace.iterations, trace.message)
        if np.isfinite(f) and (best is None or f < best[1]):
            best = (p, f, trace, k)
    if best is None:
        raise zeros.PSingular("every start was infeasible")
    return best


def embed_next_order(K: GainMatrix, new_pole: float = -1.0) -> GainMatrix:
    """Order ``n_c + 1`` gain realizing the same loop plus a decoupled pole at ``new_pole``."""
    n_c, n_u, n_y, N = K.dims
    Kn = np.zeros((n_c + 1 + n_u, n_c + 1 + n_y * N))
    rows = np.r_[np.arange(n_c), np.arange(n_c + 1, n_c + 1 + n_u)]
    cols = np.r_[np.arange(n_c), np.arange(n_c + 1, n_c + 1 + n_y * N)]
    Kn[np.ix_(rows, cols)] = K.K
    Kn[n_c, n_c] = new_pole
    return GainMatrix(Kn, n_c + 1, n_u, n_y, N)


def shift_partition(partition: zeros.GainPartition, n_c: int) -> zeros.GainPartition:
    """Partition of the embedded order-``n_c + 1`` gain matching ``partition``."""
    pos = tuple((i + (i >= n_c), j + (j >= n_c)) for i, j in partition.positions)
    n_rows, n_cols = partition.shape
    n_c_old, n_u, n_y, N = partition.dims
    return zeros.GainPartition(pos, (n_rows + 1, n_cols + 1), (n_c_old + 1, n_u, n_y, N),
                               partition.frequencies, partition.orientation)


def design_order(sys: DdaeSystem, frequencies, opts: OptimizerOptions, warm: DesignRecord = None,
                 rng=None) -> DesignRecord:
    """Optimise one controller order, cold (random near zero) or warm-started."""
    rng = rng if rng is not None else np.random.default_rng(opts.seed)
    t0 = time.perf_counter()
    if warm is None:
        partition = zeros.select_dependent_params(sys, frequencies)
        starts = [_initial_point(sys, partition, opts, rng, opts.init_noise) for _ in range(opts.multistart)]
    else:
        K_warm = warm.K
        partition = warm.partition
        while K_warm.n_c < sys.n_c:
            partition = shift_partition(partition, K_warm.n_c)
            K_warm = embed_next_order(K_warm)
        base = partition.free_values(partition.strip(K_warm))
        new = np.ones(partition.shape, dtype=bool)
        new[: warm.K.n_c, : warm.K.n_c] = False
        new[: warm.K.n_c, sys.n_c:] = False
        new[sys.n_c:, : warm.K.n_c] = False
        new[sys.n_c:, sys.n_c:] = False
        new_mask = new[partition.free_mask]
        starts = [base]
        if new_mask.any():
            starts += [_initial_point(sys, partition, opts, rng, opts.warm_noise, base, new_mask)
                       for _ in range(opts.multistart - 1)]
    if partition.n_free == 0:
        starts = starts[:1]
    p, f, trace, k = optimize_order(sys, partition, starts, opts)
    K = EliminatedObjective(sys, partition, opts).full_gain(p)
    return DesignRecord(
        n_c=sys.n_c, delays=sys.feedback.delays, K=K, alpha=float(f),
        residual_max=max_constraint_residual(sys, K, partition),
        iterations=trace.iterations, wall_time=time.perf_counter() - t0,
        partition=partition, trace=trace, start=k,
    )


def staged_design(plant: PlantModel, delays, orders, frequencies, opts: OptimizerOptions = None):
    """Design for each order in turn, warm-starting order ``n_c + 1`` from order ``n_c``."""
    opts = opts or OptimizerOptions()
    orders = list(orders)
    if not orders or orders[0] != 0 or any(b < a for a, b in zip(orders, orders[1:])):
        raise ValueError("orders must be non-decreasing and start at 0")
    rng = np.random.default_rng(opts.seed)
    records = []
    for n_c in orders:
        if records and records[-1].n_c == n_c:
            records.append(records[-1])
            continue
        sys = assemble_ddae(plant, FeedbackConfig(delays, n_c))
        warm = records[-1] if records else None
        records.append(design_order(sys, frequencies, opts, warm=warm, rng=rng))
    return records
