"""Experiment pipelines shared by the command line and the acceptance suite.

Every function takes a validated :class:`RunConfig` and returns arrays or
ensembles; file handling lives in :mod:`drmor.cli`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import ConfigError, RunConfig
from .drrnn import DrRnnModel, rollout_batch
from .dynsys import (FomSystem, IntegrationError, TimeGrid, Trajectory, integrate_implicit_euler,
                     integrate_implicit_euler_batch, stack_systems)
from .problems import (ODE3_SYSTEM, HeatProblemSpec, TwoPhaseSpec, build_heat_fom,
                       build_saturation_fom, fractional_flow, load_permeability_csv,
                       ode3_initial_state, solve_pressure, stability_bound)
from .reduction import (DeimOperator, PodBasis, assemble_snapshots, build_deim_operator,
                        build_pod_deim_rom, compute_pod_basis, deim_select, galerkin_project)
from .rnn import StandardRnnModel, impulse_inputs
from .training import Dataset, InitConfig, TrainingConfig, TrainingError, train
from .uq import EnsembleResult, EnsembleSpec, nearest_index, run_ensemble, sample_parameters

log = logging.getLogger(__name__)


# setup -----------------------------------------------------------------------

def ensemble_spec(cfg: RunConfig) -> EnsembleSpec:
    return EnsembleSpec(cfg.bounds, cfg.count, cfg.seed, (cfg.train, cfg.test))


def parameter_samples(cfg: RunConfig) -> np.ndarray:
    return sample_parameters(ensemble_spec(cfg))


def split(cfg: RunConfig):
    return np.arange(cfg.train), np.arange(cfg.train, cfg.train + cfg.test)


def time_grid(cfg: RunConfig, multiplier: int = 1) -> TimeGrid:
    if cfg.steps % multiplier:
        raise ValueError(f"dt multiplier {multiplier} does not divide {cfg.steps} steps")
    return TimeGrid(cfg.dt * multiplier, cfg.steps // multiplier)


def two_phase_spec(cfg: RunConfig, porosity: float = 0.2) -> TwoPhaseSpec:
    perm = None if cfg.permeability_file is None else load_permeability_csv(cfg.permeability_file)
    return TwoPhaseSpec(n_cells=cfg.n_cells, porosity=float(porosity), permeability=perm)


def build_fom(cfg: RunConfig, params):
    """Full-order system and initial state for one parameter draw."""
    params = np.atleast_1d(np.asarray(params, dtype=float))
    if cfg.problem in ("P1", "P2", "P3"):
        return ODE3_SYSTEM, ode3_initial_state(cfg.problem, params)
    if cfg.problem == "P4":
        return build_heat_fom(HeatProblemSpec(alpha=float(params[0]), dx=cfg.dx))
    spec = two_phase_spec(cfg, params[0])
    s0 = spec.initial_saturation
    return build_saturation_fom(solve_pressure(s0, spec), spec), s0


def _systems(cfg, samples):
    pairs = [build_fom(cfg, p) for p in samples]
    return [p[0] for p in pairs], np.array([p[1] for p in pairs])


def _batched(systems):
    first = systems[0]
    if all(s is first for s in systems):
        return first
    return stack_systems(systems)


def run_fom(cfg: RunConfig, samples, threads: int = 1, multiplier: int = 1) -> EnsembleResult:
    """Implicit-Euler FOM ensemble.

    The whole ensemble is advanced as one batch; if any member fails, the
    ensemble is rerun member by member so failures are recorded per sample.
    """
    samples = np.atleast_2d(samples)
    grid = time_grid(cfg, multiplier)
    systems, y0 = _systems(cfg, samples)
    try:
        states = integrate_implicit_euler_batch(_batched(systems), y0, grid)
        return EnsembleResult.from_array(samples, states, grid)
    except IntegrationError as exc:
        log.warning("batched FOM failed (%s); retrying sample by sample", exc)

    def runner(p):
        system, y = build_fom(cfg, p)
        return integrate_implicit_euler(system, y, grid)

    return run_ensemble(runner, samples, threads)


def probe_location(cfg: RunConfig, multiplier: int = 1):
    """``(variable, time_index, label)`` of the scalar whose PDF is reported."""
    steps = cfg.steps // multiplier
    if cfg.problem in ("P1", "P2", "P3"):
        return 2, steps, f"y3(t={cfg.dt * cfg.steps:g})"
    if cfg.problem == "P4":
        nodes = HeatProblemSpec(dx=cfg.dx).nodes
        i = nearest_index(nodes, 0.45)
        j = nearest_index(np.arange(steps + 1) * cfg.dt * multiplier, 0.45)
        return i, j, f"y(x={nodes[i]:.4g}, t={j * cfg.dt * multiplier:.4g})"
    centers = (np.arange(cfg.n_cells) + 0.5) / cfg.n_cells
    i = nearest_index(centers, 0.5)
    return i, steps, f"s(x={centers[i]:.4g}, t={cfg.dt * cfg.steps:g})"


def stability_report(cfg: RunConfig) -> dict:
    """Explicit transport bound at the reference porosity and over the porosity range."""
    if cfg.problem != "P5":
        raise ConfigError("the stability check applies to the two-phase problem (P5)", key="id")
    ref = stability_bound(two_phase_spec(cfg, 0.2))
    lo = stability_bound(two_phase_spec(cfg, cfg.lower[0]))
    hi = stability_bound(two_phase_spec(cfg, cfg.upper[0]))
    return {"reference_porosity": 0.2, "bound": ref, "bound_min": min(lo, hi),
            "bound_max": max(lo, hi), "dt": cfg.dt, "violated": cfg.dt > ref}


# reduction -------------------------------------------------------------------

def pod_from_fom(fom: EnsembleResult, idx, rank: int) -> PodBasis:
    trajs = [fom.trajectories[i] for i in idx if fom.trajectories[i] is not None]
    return compute_pod_basis(assemble_snapshots(trajs), rank)


def nonlinearity_map(cfg: RunConfig):
    if cfg.problem != "P5":
        raise ConfigError("DEIM needs the pointwise nonlinearity of the two-phase problem (P5)", key="id")
    spec = two_phase_spec(cfg)
    return lambda s: fractional_flow(s, spec)[0]


def deim_from_fom(cfg: RunConfig, fom: EnsembleResult, idx, basis: PodBasis,
                  m: int) -> DeimOperator:
    trajs = [fom.trajectories[i] for i in idx if fom.trajectories[i] is not None]
    X_f = assemble_snapshots(trajs, map=nonlinearity_map(cfg))
    V = compute_pod_basis(X_f, m).basis
    return build_deim_operator(V, deim_select(V), basis)


def reduce(system: FomSystem, basis: PodBasis, deim: Optional[DeimOperator] = None):
    return galerkin_project(system, basis) if deim is None else build_pod_deim_rom(system, basis, deim)


def reduced_systems(cfg: RunConfig, samples, basis: PodBasis,
                    deim: Optional[DeimOperator] = None):
    """Per-sample ROMs and projected initial states ``(L, r)``."""
    systems, y0 = _systems(cfg, np.atleast_2d(samples))
    roms = [reduce(s, basis, deim) for s in systems]
    return roms, y0 @ basis.basis


def run_rom(cfg: RunConfig, samples, basis: PodBasis, deim: Optional[DeimOperator] = None,
            threads: int = 1):
    """Implicit-Euler ROM ensemble; returns ``(lifted EnsembleResult, coefficients)``."""
    samples = np.atleast_2d(samples)
    grid = time_grid(cfg)
    roms, c0 = reduced_systems(cfg, samples, basis, deim)
    try:
        coeffs = integrate_implicit_euler_batch(stack_systems(roms), c0, grid)
    except IntegrationError as exc:
        log.warning("batched ROM failed (%s); retrying sample by sample", exc)

        def runner(i):
            k = int(i[0])
            t = integrate_implicit_euler(roms[k], c0[k], grid)
            return Trajectory(basis.basis @ t.states, grid)

        res = run_ensemble(runner, np.arange(len(roms))[:, None], threads)
        return EnsembleResult(samples, res.trajectories, res.failures), None
    lifted = coeffs @ basis.basis.T
    return EnsembleResult.from_array(samples, lifted, grid), coeffs


# DR-RNN and baselines --------------------------------------------------------

def training_config(cfg: RunConfig, seed: Optional[int] = None) -> TrainingConfig:
    init = InitConfig(U=cfg.init_U)
    return TrainingConfig(batch_size=cfg.batch_size, iterations=cfg.iterations,
                          seed=cfg.seed if seed is None else seed,
                          learning_rate=cfg.learning_rate, init=init)


def drrnn_template(cfg: RunConfig, n: int, layers: Optional[int] = None,
                   multiplier: int = 1) -> DrRnnModel:
    K = cfg.layers if layers is None else layers
    return DrRnnModel.zeros(n, K, dt=cfg.dt * multiplier, eps=cfg.eps, train_U=cfg.train_U)


@dataclass
class Workspace:
    """Reference data shared by the DR-RNN experiments of one configuration."""

    cfg: RunConfig
    samples: np.ndarray
    fom: EnsembleResult
    basis: Optional[PodBasis] = None
    deim: Optional[DeimOperator] = None

    @property
    def reduced(self) -> bool:
        return self.basis is not None


def prepare(cfg: RunConfig, threads: int = 1, reduced: Optional[bool] = None) -> Workspace:
    """Sample parameters, run the FOM and (for PDE problems) build the reduction."""
    samples = parameter_samples(cfg)
    fom = run_fom(cfg, samples, threads)
    ws = Workspace(cfg, samples, fom)
    if reduced is None:
        reduced = cfg.problem in ("P4", "P5")
    if reduced:
        train_idx, _ = split(cfg)
        ws.basis = pod_from_fom(fom, train_idx, cfg.rank)
        if cfg.problem == "P5":
            ws.deim = deim_from_fom(cfg, fom, train_idx, ws.basis, cfg.deim_m)
    return ws


def drrnn_dataset(ws: Workspace, idx, multiplier: int = 1) -> Dataset:
    """Targets for DR-RNN training or testing.

    ODE problems use FOM trajectories with a shared system; reduced problems
    use ROM coefficient trajectories with one reduced system per sample.
    """
    cfg = ws.cfg
    idx = np.asarray(idx, dtype=int)
    if not ws.reduced:
        states = ws.fom.stacked()[idx]
        return Dataset.from_trajectories(states, cfg.dt, stride=multiplier)
    roms, c0 = reduced_systems(cfg, ws.samples[idx], ws.basis, ws.deim)
    coeffs = integrate_implicit_euler_batch(stack_systems(roms), c0, time_grid(cfg))
    return Dataset.from_trajectories(coeffs, cfg.dt, stride=multiplier, systems=roms)


def fit_drrnn(ws: Workspace, layers: Optional[int] = None, multiplier: int = 1,
              seed: Optional[int] = None, restarts: Optional[int] = None):
    """Train a DR-RNN on the training split; returns ``(model, history)``.

    With ``restarts > 1`` the seeds ``seed, seed + 1, ...`` are tried and the
    run with the lowest final training mse is kept; test data plays no part
    in the choice.
    """
    cfg = ws.cfg
    train_idx, test_idx = split(cfg)
    data = drrnn_dataset(ws, train_idx, multiplier)
    test = drrnn_dataset(ws, test_idx, multiplier) if len(test_idx) else None
    n = data.initial.shape[1]
    template = drrnn_template(cfg, n, layers, multiplier)
    if not ws.reduced:
        template = template.bind(ODE3_SYSTEM)
    base = cfg.seed if seed is None else seed
    best, error = None, None
    for k in range(cfg.restarts if restarts is None else restarts):
        try:
            run = train(template, data, training_config(cfg, base + k), test)
        except TrainingError as exc:
            log.warning("restart %d diverged: %s", k, exc)
            error = exc
            continue
        if best is None or run[1].train_mse[-1] < best[1].train_mse[-1]:
            best = run
    if best is None:
        raise error
    return best


def drrnn_predict(ws: Workspace, model: DrRnnModel, idx, multiplier: int = 1) -> np.ndarray:
    """Full-space DR-RNN states ``(len(idx), T/multiplier + 1, n)``."""
    cfg = ws.cfg
    idx = np.asarray(idx, dtype=int)
    steps = cfg.steps // multiplier
    if not ws.reduced:
        y0 = ws.fom.stacked()[idx, 0]
        return rollout_batch(model, y0, steps, ODE3_SYSTEM)
    roms, c0 = reduced_systems(cfg, ws.samples[idx], ws.basis, ws.deim)
    coeffs = rollout_batch(model, c0, steps, stack_systems(roms))
    return coeffs @ ws.basis.basis.T


def rnn_dataset(ws: Workspace, idx) -> Dataset:
    """Standard-RNN data: the random inputs enter at the first step only."""
    states = ws.fom.stacked()[np.asarray(idx, dtype=int)]
    data = Dataset.from_trajectories(states, ws.cfg.dt)
    data.inputs = impulse_inputs(ws.samples[idx], data.steps)
    return data


def fit_rnn(ws: Workspace, hidden: Optional[int] = None, seed: Optional[int] = None):
    cfg = ws.cfg
    train_idx, test_idx = split(cfg)
    data = rnn_dataset(ws, train_idx)
    test = rnn_dataset(ws, test_idx) if len(test_idx) else None
    n = data.targets.shape[2]
    template = StandardRnnModel.zeros(n if hidden is None else hidden, ws.samples.shape[1], n)
    return train(template, data, training_config(cfg, seed), test)


def trajectory_mse(pred, ref) -> float:
    """Summed squared error over time (initial state excluded) and components,
    averaged over samples."""
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    d = pred[:, 1:] - ref[:, 1:]
    return float(np.sum(d * d) / pred.shape[0])
