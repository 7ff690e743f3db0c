"""Command-line front end: ``delayfb analyze | design | simulate``.

Config files are flat YAML mappings.  Recognised keys:

``schema_version``
    must be 1.
``m_a m_0 m_1 m_2 k_a k_0 k_1 k_2 k_3 k_4 c_a c_0 c_1 c_2 c_3 c_4 tau_u``
    physical parameters of the four-mass test rig (defaults: the reference rig).
``A B1 B2 C1 C2``
    explicit plant matrices (lists of rows); replaces the mass-spring model.
    ``tau_u`` still applies.  Mixing these with mass-spring keys is an error.
``delays``
    output-feedback delays in seconds, strictly increasing.
``n_c``
    controller order.  ``design`` runs every order from 0 to ``n_c``.
``frequencies F_d phases``
    disturbance harmonics in Hz, common amplitude in N, optional phases in rad.
``seed maxit multistart gradient_sampling n_jobs npts``
    optimizer and spectrum settings (``n_jobs`` worker processes for multistarts).
``t_end t_on h trace_every``
    simulation horizon, switch-on time, RK4 step and CSV decimation.

Gain files hold one header line ``# n_c n_u n_y N`` followed by the rows of
``K = [[A_c, B_c], [C_c, D_c]]`` printed with 17 significant digits.

Exit codes: 2 config error, 3 numerical failure, 4 too few parameters,
5 elimination failure, 6 gain dimension mismatch, 7 unstable simulation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys as _sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from delayfb import __version__
from delayfb import optimizer as opt
from delayfb import sim, spectrum, zeros
from delayfb.model import (
    DisturbanceSpec, FeedbackConfig, GainMatrix, PlantModel, PlantParams, assemble_ddae, build_plant,
)

log = logging.getLogger("delayfb")

SCHEMA_VERSION = 1
PLANT_KEYS = tuple(f.name for f in fields(PlantParams) if f.name != "tau_u")
MATRIX_KEYS = ("A", "B1", "B2", "C1", "C2")
OTHER_KEYS = {
    "schema_version", "tau_u", "delays", "n_c", "frequencies", "F_d", "phases",
    "seed", "maxit", "multistart", "gradient_sampling", "npts", "n_jobs",
    "t_end", "t_on", "h", "trace_every",
}
KNOWN_KEYS = set(PLANT_KEYS) | set(MATRIX_KEYS) | OTHER_KEYS

EXIT_CONFIG, EXIT_NUMERIC, EXIT_INSUFFICIENT, EXIT_ELIMINATION, EXIT_DIMS, EXIT_UNSTABLE = 2, 3, 4, 5, 6, 7


class ConfigError(ValueError):
    pass


class GainDimsMismatch(ValueError):
    pass


@dataclass
class RunConfig:
    plant: PlantModel
    feedback: FeedbackConfig
    disturbance: DisturbanceSpec
    optimizer: opt.OptimizerOptions
    t_end: float = 30.0
    t_on: float = 5.0
    h: float = None
    trace_every: int = 10
    raw: dict = field(default_factory=dict, repr=False)
    sha256: str = ""


def _matrix(value, name):
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise ConfigError(f"{name}: expected a matrix")
    return arr


def parse_config(text: str, seed: int = None) -> RunConfig:
    """Validate and build a :class:`RunConfig` from config file text."""
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a key-value mapping")
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    try:
        tau_u = float(raw.get("tau_u", PlantParams.tau_u))
        if any(k in raw for k in MATRIX_KEYS):
            if any(k in raw for k in PLANT_KEYS):
                raise ConfigError("explicit plant matrices cannot be mixed with mass-spring parameters")
            missing = [k for k in MATRIX_KEYS if k not in raw]
            if missing:
                raise ConfigError(f"missing plant matrices: {', '.join(missing)}")
            if tau_u < 0:
                raise ConfigError(f"tau_u must be >= 0, got {tau_u}")
            plant = PlantModel(*(_matrix(raw[k], k) for k in MATRIX_KEYS), tau_u)
        else:
            params = PlantParams(**{k: float(raw[k]) for k in PLANT_KEYS if k in raw}, tau_u=tau_u)
            plant = build_plant(params)
        delays = tuple(float(d) for d in raw.get("delays", (0.05, 0.1, 0.15, 0.2)))
        n_c = int(raw.get("n_c", 0))
        if n_c < 0:
            raise ConfigError(f"n_c must be >= 0, got {n_c}")
        feedback = FeedbackConfig(delays, n_c)
        freqs = tuple(float(f) for f in raw.get("frequencies", (4.0, 8.0, 12.0, 16.0)))
        phases = raw.get("phases")
        disturbance = DisturbanceSpec(float(raw.get("F_d", 3.0)), freqs,
                                      None if phases is None else tuple(float(p) for p in phases))
        npts = raw.get("npts")
        options = opt.OptimizerOptions(
            maxit=int(raw.get("maxit", 500)),
            multistart=int(raw.get("multistart", 5)),
            gradient_sampling=bool(raw.get("gradient_sampling", False)),
            n_jobs=int(raw.get("n_jobs", 1)),
            seed=int(raw.get("seed", 0) if seed is None else seed),
            spectrum=spectrum.SpectrumOptions(npts=None if npts is None else int(npts)),
        )
        if options.maxit < 0 or options.multistart < 1:
            raise ConfigError("maxit must be >= 0 and multistart >= 1")
        cfg = RunConfig(plant, feedback, disturbance, options,
                        t_end=float(raw.get("t_end", 30.0)), t_on=float(raw.get("t_on", 5.0)),
                        h=None if raw.get("h") is None else float(raw["h"]),
                        trace_every=int(raw.get("trace_every", 10)), raw=raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not 0 <= cfg.t_on < cfg.t_end or cfg.trace_every < 1:
        raise ConfigError("need 0 <= t_on < t_end and trace_every >= 1")
    cfg.sha256 = hashlib.sha256(text.encode()).hexdigest()
    return cfg


def load_config(path, seed: int = None) -> RunConfig:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    cfg = parse_config(data.decode(), seed)
    cfg.sha256 = hashlib.sha256(data).hexdigest()
    return cfg


def write_gains(path, K: GainMatrix) -> None:
    with open(path, "w") as fh:
        fh.write("# n_c n_u n_y N: {} {} {} {}\n".format(*K.dims))
        np.savetxt(fh, np.atleast_2d(K.K), fmt="%.17g")


def read_gains(path) -> GainMatrix:
    try:
        with open(path) as fh:
            header = fh.readline()
            body = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read gains: {exc}") from exc
    try:
        dims = tuple(int(v) for v in header.split(":")[-1].split())
        if len(dims) != 4:
            raise ValueError
    except ValueError:
        raise GainDimsMismatch(f"{path}: malformed dims header {header.strip()!r}") from None
    rows = dims[0] + dims[1]
    vals = np.array(body.split(), dtype=float)
    cols = dims[0] + dims[2] * dims[3]
    if vals.size != rows * cols:
        raise GainDimsMismatch(f"{path}: header promises {rows}x{cols}, found {vals.size} entries")
    return GainMatrix(vals.reshape(rows, cols), *dims)


def _check_dims(K: GainMatrix, cfg: RunConfig) -> None:
    want = (cfg.feedback.n_c, cfg.plant.n_u, cfg.plant.n_y, cfg.feedback.N)
    if K.dims != want:
        raise GainDimsMismatch(f"gain dims (n_c, n_u, n_y, N) = {K.dims}, config needs {want}")


def _base_report(cfg: RunConfig, command: str) -> dict:
    return {
        "command": command,
        "tool_version": __version__,
        "config_sha256": cfg.sha256,
        "config": cfg.raw,
        "seed": cfg.optimizer.seed,
    }


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=float) + "\n")


def cmd_analyze(cfg: RunConfig, out: Path, gains=None) -> int:
    sys = assemble_ddae(cfg.plant, cfg.feedback)
    K = sys.zero_gain() if gains is None else read_gains(gains)
    if gains is not None:
        _check_dims(K, cfg)
    sp = spectrum.compute_spectrum(sys, np.asarray(getattr(K, "K", K)), opts=cfg.optimizer.spectrum)
    sp.to_csv(out / "roots.csv")
    report = _base_report(cfg, "analyze")
    report.update(alpha=sp.abscissa, n_roots=len(sp.roots), npts=sp.npts,
                  max_residual=float(np.max(sp.residuals)), roots_csv="roots.csv")
    _write_json(out / "report.json", report)
    print(f"alpha = {sp.abscissa:.10g}")
    return 0


def cmd_design(cfg: RunConfig, out: Path) -> int:
    orders = list(range(cfg.feedback.n_c + 1))
    records = opt.staged_design(cfg.plant, cfg.feedback.delays, orders, cfg.disturbance.frequencies, cfg.optimizer)
    report = _base_report(cfg, "design")
    rows, residual_table = [], []
    for rec in records:
        tag = f"nc{rec.n_c}"
        sys = assemble_ddae(cfg.plant, FeedbackConfig(rec.delays, rec.n_c))
        write_gains(out / f"gains_{tag}.txt", rec.K)
        sp = spectrum.compute_spectrum(sys, rec.K.K, opts=cfg.optimizer.spectrum)
        sp.to_csv(out / f"spectrum_{tag}.csv")
        if rec.trace is not None:
            rec.trace.to_csv(out / f"trace_{tag}.csv")
        rows.append({
            "n_c": rec.n_c, "alpha": rec.alpha, "alpha_recomputed": sp.abscissa,
            "residual_max": rec.residual_max, "iterations": rec.iterations,
            "wall_time": rec.wall_time, "best_start": rec.start,
            "gains": f"gains_{tag}.txt", "spectrum_csv": f"spectrum_{tag}.csv",
        })
        for f, w in zip(cfg.disturbance.frequencies, rec.partition.omegas):
            G = zeros.transfer_value(sys, rec.K.K, 1j * w)
            G0 = zeros.transfer_value(sys, sys.zero_gain(), 1j * w)
            residual_table.append({
                "n_c": rec.n_c, "frequency_hz": f,
                "h_normalized": abs(zeros.constraint_residual(sys, rec.K, w, rec.partition)),
                "G_ratio": abs(G) / abs(G0),
            })
        print(f"n_c={rec.n_c} alpha={rec.alpha:.6f} residual_max={rec.residual_max:.3g} "
              f"iterations={rec.iterations}")
    write_gains(out / "gains.txt", records[-1].K)
    report.update(orders=rows, constraint_residuals=residual_table)
    _write_json(out / "report.json", report)
    return 0


def cmd_simulate(cfg: RunConfig, out: Path, gains) -> int:
    if gains is None:
        raise ConfigError("simulate needs --gains")
    K = read_gains(gains)
    _check_dims(K, cfg)
    try:
        scn = sim.SimScenario(cfg.plant, K, cfg.feedback.delays, cfg.disturbance,
                              t_end=cfg.t_end, t_on=cfg.t_on, h=cfg.h)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    trace = sim.simulate_closed_loop(scn)
    trace.to_csv(out / "trace.csv", every=cfg.trace_every)
    try:
        att = sim.steady_state_attenuation(trace, cfg.disturbance.frequencies)
    except sim.WindowTooShort as exc:
        raise ConfigError(str(exc)) from exc
    sys = assemble_ddae(cfg.plant, cfg.feedback)
    with open(out / "attenuation.csv", "w") as fh:
        fh.write("frequency_hz,attenuation_db,open_loop_amplitude\n")
        for f, a in zip(cfg.disturbance.frequencies, att):
            g0 = abs(zeros.transfer_value(sys, sys.zero_gain(), 2j * np.pi * f)) * cfg.disturbance.amplitude
            fh.write(f"{f:.17g},{a:.17g},{g0:.17g}\n")
            print(f"{f:g} Hz: {a:.2f} dB")
    report = _base_report(cfg, "simulate")
    report.update(h=scn.h, attenuation_db=dict(zip(map(str, cfg.disturbance.frequencies), att.tolist())),
                  trace_csv="trace.csv", attenuation_csv="attenuation.csv")
    _write_json(out / "report.json", report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delayfb", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=("analyze", "design", "simulate"))
    p.add_argument("--config", required=True, help="flat YAML config file")
    p.add_argument("--gains", help="gain matrix file")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    err = _sys.stderr
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "analyze":
            return cmd_analyze(cfg, out, args.gains)
        if args.command == "design":
            return cmd_design(cfg, out)
        return cmd_simulate(cfg, out, args.gains)
    except zeros.InsufficientParameters as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INSUFFICIENT
    except ConfigError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    except GainDimsMismatch as exc:
        print(f"error: {exc}", file=err)
        return EXIT_DIMS
    except sim.InstabilityDetected as exc:
        print(f"error: closed loop unstable, {exc}", file=err)
        return EXIT_UNSTABLE
    except zeros.EliminationError as exc:
        print(f"error: elimination failed: {exc}", file=err)
        return EXIT_ELIMINATION
    except (spectrum.DiscretizationTooCoarse, spectrum.EmptyRegion, np.linalg.LinAlgError,
            ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=err)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
