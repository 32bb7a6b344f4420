"""Stochastic gradient descent over sampled initial conditions.

Each epoch draws a batch of initial states, runs the adjoint on the whole
batch at once, averages the per-sample gradients and takes one ADAM step
with learning rate eta_r * gamma^(k - k_r), where (k_r, eta_r) is the most
recent restart (k_r = 0, eta_r = eta before any restart).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import dynamics as dyn
from .adjoint import CostSpec, RigidBodySystem, cost_and_gradient
from .integrate import SolverConfig, lie_integrate, tree_map
from .lie import SE3, Pose, ProductElement, rotation_angle
from .parallel import chunk_bounds, map_chunks, worker_count

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# initial-condition sampler


@dataclass
class SamplerSpec:
    mean_pose: Pose = field(default_factory=lambda: Pose(np.eye(3), np.zeros(3)))
    alpha_max: float = math.pi
    d_max: float = 1.0
    alpha_p_max: float = 0.03
    d_p_max: float = 1.0

    def __post_init__(self):
        for name in ("alpha_max", "d_max", "alpha_p_max", "d_p_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"sampler range {name} must be nonnegative")
        self.mean_pose = Pose(np.asarray(self.mean_pose.R, dtype=float),
                              np.asarray(self.mean_pose.p, dtype=float))


def _directions(rng, n):
    v = rng.standard_normal((n, 3))
    norm = np.linalg.norm(v, axis=-1)
    while np.any(norm == 0.0):          # probability zero, but cheap to honour
        bad = norm == 0.0
        v[bad] = rng.standard_normal((int(bad.sum()), 3))
        norm = np.linalg.norm(v, axis=-1)
    return v / norm[:, None]


def sample_initial(sampler: SamplerSpec, rng, n: int) -> ProductElement:
    """n initial states H = H_I exp(hat(alpha w; d v)), P = (alpha_p w_p; d_p v_p)."""
    alpha = rng.uniform(0.0, sampler.alpha_max, n)
    d = rng.uniform(0.0, sampler.d_max, n)
    alpha_p = rng.uniform(0.0, sampler.alpha_p_max, n)
    d_p = rng.uniform(0.0, sampler.d_p_max, n)
    w, v, wp, vp = (_directions(rng, n) for _ in range(4))
    q = np.concatenate([alpha[:, None] * w, d[:, None] * v], axis=-1)
    H_I = Pose(np.broadcast_to(sampler.mean_pose.R, (n, 3, 3)),
               np.broadcast_to(sampler.mean_pose.p, (n, 3)))
    H = SE3.compose(H_I, SE3.exp(q))
    P = np.concatenate([alpha_p[:, None] * wp, d_p[:, None] * vp], axis=-1)
    return ProductElement(H, P)


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(state: AdamState, params, grad, eta) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected ADAM update; a non-finite gradient leaves everything unchanged."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite gradient: ADAM update skipped")
        return params.copy(), state
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = params - eta * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    t: np.ndarray                 # (nt,)
    angle: np.ndarray             # (n, nt) rotation angle to goal
    distance: np.ndarray          # (n, nt)
    e_kin: np.ndarray
    e_pot: np.ndarray
    failed: np.ndarray            # (n,)

    def _mean(self, a):
        ok = ~self.failed
        return a[ok].mean(axis=0) if ok.any() else np.full(a.shape[1], np.nan)

    @property
    def mean_angle(self):
        return self._mean(self.angle)

    @property
    def mean_distance(self):
        return self._mean(self.distance)

    @property
    def mean_e_kin(self):
        return self._mean(self.e_kin)

    @property
    def mean_e_pot(self):
        return self._mean(self.e_pot)

    @property
    def mean_final_angle(self):
        return float(self.mean_angle[-1])

    @property
    def mean_final_distance(self):
        return float(self.mean_distance[-1])

    def proportions(self):
        """Mean E_kin and E_pot as fractions of the mean initial total energy."""
        e0 = self.mean_e_kin[0] + self.mean_e_pot[0]
        return self.mean_e_kin / e0, self.mean_e_pot / e0


def held_out_set(sampler: SamplerSpec, n: int = 256, seed: int = 20240917) -> ProductElement:
    return sample_initial(sampler, np.random.default_rng(seed), n)


def simulate(ctrl_spec: dyn.ControllerSpec, body: dyn.BodyParams, g0, duration: float,
             cfg: SolverConfig = SolverConfig(), guard: bool = True):
    """Closed-loop forward solve; returns the chart trajectory."""
    return lie_integrate(lambda t, g: dyn.product_field(ctrl_spec, body)(t, g), g0, 0.0,
                         float(duration), cfg, tag="SE3xR6", guard=guard)


def energies(ctrl_spec: dyn.ControllerSpec, body: dyn.BodyParams, H, P):
    """(E_kin, E_pot); E_pot is the controller potential plus gravity when present."""
    ek, ep, _ = dyn.hamiltonian(body, ctrl_spec.controller, H, P)
    return ek, ep + dyn.gravity_potential(body, H)


def evaluate(ctrl_spec: dyn.ControllerSpec, body: dyn.BodyParams, cost: CostSpec, g0,
             cfg: SolverConfig = SolverConfig(), n_times: int = 31) -> EvalResult:
    """Angle, distance and energies on a uniform time grid for a batch of initial states."""
    traj = simulate(ctrl_spec, body, g0, cost.horizon, cfg, guard=True)
    ts = np.linspace(0.0, cost.horizon, n_times)
    n = SE3.entries(g0.pose).shape[0]
    out = {k: np.empty((n, n_times)) for k in ("angle", "distance", "e_kin", "e_pot")}
    RF, pF = cost.goal
    for i, t in enumerate(ts):
        g = traj.dense_element(t)
        out["angle"][:, i] = rotation_angle(np.swapaxes(RF, -1, -2) @ g.pose.R)
        out["distance"][:, i] = np.linalg.norm(g.pose.p - pF, axis=-1)
        out["e_kin"][:, i], out["e_pot"][:, i] = energies(ctrl_spec, body, g.pose, g.mom)
    failed = traj.failed | ~np.all(np.isfinite(out["angle"]), axis=1)
    return EvalResult(ts, out["angle"], out["distance"], out["e_kin"], out["e_pot"], failed)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 1200
    batch_size: int = 2048
    eta: float = 1e-3
    gamma: float = 0.999
    seed: int = 0
    restarts: Sequence[Tuple[int, float]] = ((1000, 1e-2),)
    eval_every: int = 10
    eval_n: int = 256
    eval_seed: int = 20240917
    eval_times: int = 31
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_drop_fraction: float = 0.5

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        self.restarts = tuple(sorted((int(e), float(r)) for e, r in self.restarts))
        for _, r in self.restarts:
            if not r > 0:
                raise ValueError("restart learning rates must be positive")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Rate used for the update of 0-based epoch ``epoch``."""
    start, eta = 0, cfg.eta
    for e, r in cfg.restarts:
        if epoch >= e:
            start, eta = e, r
    return eta * cfg.gamma ** (epoch - start)


@dataclass
class EpochRecord:
    epoch: int                    # 1-based: number of updates taken after this row
    loss: float
    terminal_loss: float
    integral_loss: float
    dropped: int
    eta: float
    mean_final_angle: float = float("nan")
    mean_final_distance: float = float("nan")
    wall_time: float = 0.0


@dataclass
class TrainState:
    epoch: int
    params: np.ndarray
    adam: AdamState
    rng_state: dict


@dataclass
class TrainResult:
    state: TrainState
    history: List[EpochRecord]
    evals: List[Tuple[int, EvalResult]]


def _batch_gradient(cost, ctrl_spec, body, g0, solver):
    res = cost_and_gradient(RigidBodySystem(cost, ctrl_spec, body), g0, solver, guard=True)
    return res.grad, res.cost, res.terminal_cost, res.integral_cost, res.failed


def batch_gradient(cost, ctrl_spec, body, g0, solver, workers=None):
    """Per-sample (grad, cost, terminal, integral, failed), split over worker processes."""
    n = SE3.entries(g0.pose).shape[0]
    workers = worker_count() if workers is None else workers
    bounds = chunk_bounds(n, workers)
    args = [(cost, ctrl_spec, body, tree_map(lambda a: a[a0:b0], g0), solver) for a0, b0 in bounds]
    parts = map_chunks(_batch_gradient, args, workers)
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(5))


def initial_state(cfg: TrainConfig, ctrl_spec: dyn.ControllerSpec) -> TrainState:
    n = ctrl_spec.controller.n_params
    return TrainState(0, ctrl_spec.controller.params(),
                      AdamState.zeros(n, cfg.beta1, cfg.beta2, cfg.adam_eps),
                      np.random.default_rng(cfg.seed).bit_generator.state)


def train(cfg: TrainConfig, ctrl_spec: dyn.ControllerSpec, cost: CostSpec, body: dyn.BodyParams,
          sampler: SamplerSpec = SamplerSpec(), solver: SolverConfig = SolverConfig(),
          state: Optional[TrainState] = None, on_epoch: Optional[Callable] = None,
          workers=None, evaluate_initial: bool = True) -> TrainResult:
    """Run epochs ``state.epoch + 1 .. cfg.epochs``.

    ``on_epoch(record, state, eval_result_or_None)`` is called after every
    epoch (the CLI writes checkpoints from it).
    """
    state = state or initial_state(cfg, ctrl_spec)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    held = held_out_set(sampler, cfg.eval_n, cfg.eval_seed)
    history, evals = [], []
    t_start = time.perf_counter()
    if evaluate_initial and state.epoch == 0:
        evals.append((0, evaluate(ctrl_spec.with_params(state.params), body, cost, held, solver,
                                  cfg.eval_times)))
    params, adam = state.params.copy(), state.adam
    restart_epochs = {e for e, _ in cfg.restarts}
    for k in range(state.epoch, cfg.epochs):
        if k in restart_epochs and k > 0:
            adam = AdamState.zeros(params.size, adam.beta1, adam.beta2, adam.eps)
        spec_k = ctrl_spec.with_params(params)
        g0 = sample_initial(sampler, rng, cfg.batch_size)
        grad, c, term, integ, failed = batch_gradient(cost, spec_k, body, g0, solver, workers)
        dropped = int(failed.sum())
        if dropped > cfg.max_drop_fraction * cfg.batch_size:
            raise TrainingAborted(
                f"epoch {k + 1}: {dropped} of {cfg.batch_size} samples failed",
                {"epoch": k + 1, "failed": np.nonzero(failed)[0].tolist(), "params": params})
        if dropped:
            log.warning("epoch %d: dropped %d failed samples", k + 1, dropped)
        ok = ~failed
        eta_k = learning_rate(cfg, k)
        params, adam = adam_step(adam, params, grad[ok].mean(axis=0), eta_k)
        rec = EpochRecord(k + 1, float(c[ok].mean()), float(term[ok].mean()),
                          float(integ[ok].mean()), dropped, eta_k)
        ev = None
        if (k + 1) % cfg.eval_every == 0 or k + 1 == cfg.epochs:
            ev = evaluate(ctrl_spec.with_params(params), body, cost, held, solver, cfg.eval_times)
            rec.mean_final_angle = ev.mean_final_angle
            rec.mean_final_distance = ev.mean_final_distance
            evals.append((k + 1, ev))
        rec.wall_time = time.perf_counter() - t_start
        history.append(rec)
        state = TrainState(k + 1, params.copy(), adam, rng.bit_generator.state)
        if on_epoch is not None:
            on_epoch(rec, state, ev)
    return TrainResult(state, history, evals)


def moving_average(x, window=10):
    x = np.asarray(x, dtype=float)
    if x.size < window:
        return np.array([x.mean()]) if x.size else x
    return np.convolve(x, np.ones(window) / window, mode="valid")


__all__ = [
    "TrainingAborted", "SamplerSpec", "sample_initial", "AdamState", "adam_step", "EvalResult",
    "held_out_set", "simulate", "energies", "evaluate", "TrainConfig", "learning_rate", "EpochRecord",
    "TrainState", "TrainResult", "batch_gradient", "initial_state", "train", "moving_average",
]
