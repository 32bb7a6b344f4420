"""Generalized adjoint method on matrix Lie groups.

For g' = g hat(f~(g, theta)) and total cost C = F(g(T)) + int_0^T r(g) dt, the
algebra-level co-state obeys

    lambda' = -d_g(lambda^T f~ + r) + ad_{f~}^T lambda,    lambda(T) = d_g F,

and dC/dtheta = int_0^T d/dtheta(lambda^T f~ + r) dt (F does not depend on
theta here).  ``cost_and_gradient`` runs the chart-switching forward solve,
then integrates (lambda, theta accumulator) backwards against the dense
forward output.  The co-state never needs a chart: it lives on the algebra.

A system supplies four things: the group, ``field_and_running(g)``,
``final(g)`` with its gradient, and ``costate_terms(g, lam)`` returning
(f~, d_g(lambda^T f~ + r), d_theta(lambda^T f~ + r)).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import dynamics as dyn
from .errors import ContractViolation, NumericError
from .integrate import SolverConfig, integrate_rn, lie_integrate, tree_map
from .lie import SE3, Pose, ProductElement, Vec, group


@dataclass
class CostSpec:
    goal: Pose = field(default_factory=lambda: Pose(np.eye(3), np.zeros(3)))
    weights: np.ndarray = field(default_factory=lambda: np.array([4, 20, 5, 1, 1, 1, 1, 1, 1.0]))
    horizon: float = 3.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (9,):
            raise ContractViolation(f"need 9 cost weights, got {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ContractViolation("cost weights must be finite and nonnegative")
        if not self.horizon >= 0:
            raise ContractViolation("horizon must be nonnegative")
        self.weights = w
        self.goal = Pose(np.asarray(self.goal.R, dtype=float), np.asarray(self.goal.p, dtype=float))


class CoState(NamedTuple):
    lambda_h: np.ndarray
    lambda_p: np.ndarray


@dataclass
class GradientResult:
    grad: np.ndarray
    cost: np.ndarray
    terminal_cost: np.ndarray
    integral_cost: np.ndarray
    failed: np.ndarray
    trajectory: object = field(default=None, repr=False)
    costate0: np.ndarray = field(default=None, repr=False)   # lambda(0), intrinsic d C / d g0


# ---------------------------------------------------------------------------
# cost terms


def _trace_rel(spec: CostSpec, H):
    """Tr(H_F^-1 H) of the 4x4 homogeneous matrices."""
    return np.einsum("ij,...ij->...", spec.goal.R, np.asarray(H.R, dtype=float)) + 1.0


def _dist2(spec: CostSpec, H):
    d = np.asarray(H.p, dtype=float) - spec.goal.p
    return np.sum(d * d, -1)


def translation_error(spec: CostSpec, H):
    """d = R_F^T (p - p_F), the translation block of H_F^-1 H."""
    return (np.asarray(H.p, dtype=float) - spec.goal.p) @ spec.goal.R


def _pose_entry_grad(spec, H, w_trace, w_dist):
    p = np.asarray(H.p, dtype=float)
    out = np.zeros(p.shape[:-1] + (12,))
    out[..., :9] = -w_trace * spec.goal.R.reshape(9)
    out[..., 9:] = 2.0 * w_dist * (p - spec.goal.p)
    return out


def _mom_terms(P, wa, wb):
    P = np.asarray(P, dtype=float)
    return wa * np.sum(P[..., :3] ** 2, -1) + wb * np.sum(P[..., 3:] ** 2, -1)


def _mom_grad(P, wa, wb):
    P = np.asarray(P, dtype=float)
    return np.concatenate([2 * wa * P[..., :3], 2 * wb * P[..., 3:]], axis=-1)


def final_cost(spec: CostSpec, g: ProductElement):
    w = spec.weights
    return (-w[0] * _trace_rel(spec, g.pose) + w[1] * _dist2(spec, g.pose)
            + _mom_terms(g.mom, w[2], w[3]))


def running_cost(spec: CostSpec, g: ProductElement, W):
    w = spec.weights
    W = np.asarray(W, dtype=float)
    return (-w[4] * _trace_rel(spec, g.pose) + w[5] * _dist2(spec, g.pose)
            + _mom_terms(g.mom, w[6], w[7]) + w[8] * np.sum(W * W, -1))


def terminal_costate(spec: CostSpec, g: ProductElement) -> CoState:
    w = spec.weights
    lh = SE3.gradient_from_entries(g.pose, _pose_entry_grad(spec, g.pose, w[0], w[1]))
    return CoState(lh, _mom_grad(g.mom, w[2], w[3]))


# ---------------------------------------------------------------------------
# systems


def _wrench_terms(ctrl_spec, body, H, P):
    """Shared forward quantities of the closed loop."""
    C = ctrl_spec.controller
    T = P @ body.inertia_inv.T
    eg = C.potential_entry_grad(H)
    W_ctrl = -SE3.gradient_from_entries(H, eg) - C.damping(H, P) * P
    comp, grav = float(ctrl_spec.gravity_compensation), float(body.gravity)
    kappa = comp - grav
    Pdot = dyn.ad_transpose(T, P) + W_ctrl
    W_tot = W_ctrl
    dVg = None
    if comp or grav:
        dVg = dyn.gravity_gradient(body, H)
        if kappa != 0.0:
            Pdot = Pdot + kappa * dVg
        if comp:
            W_tot = W_ctrl + dVg
    return T, Pdot, W_tot, eg, kappa, comp


def _momentum_costate_terms(ctrl_spec, body, w, H, P, T, lamP, W_tot, eg, kappa, comp):
    """d_H, d_P and d_theta of lambda_P^T Pdot + w9 |W|^2 (state-only r terms excluded)."""
    C = ctrl_spec.controller
    c = lamP + 2.0 * w[8] * W_tot
    secV = SE3.second_from_entries(H, eg, lambda u: C.potential_entry_hvp(H, u), c)
    gH_e, gP, gth_B = C.damping_vjp(H, P, c)
    dH = -secV - SE3.gradient_from_entries(H, gH_e)
    a = kappa * lamP + comp * 2.0 * w[8] * W_tot
    if kappa != 0.0 or comp:
        geg = dyn.gravity_entry_grad(body, H)
        dH = dH + SE3.second_from_entries(H, geg, np.zeros_like, a)
    Iinv_T = body.inertia_inv.T
    dP = dyn.ad_apply(T, lamP) - dyn.ad_transpose(lamP, P) @ Iinv_T.T - gP
    dth = -C.potential_param_dir(H, dyn.embed_direction(H, c)) - gth_B
    return dH, dP, dth


class RigidBodySystem:
    """Closed-loop rigid body on SE(3) x R^6."""

    def __init__(self, cost: CostSpec, ctrl_spec: dyn.ControllerSpec, body: dyn.BodyParams):
        self.cost, self.ctrl, self.body = cost, ctrl_spec, body
        self.group = group("SE3xR6")

    @property
    def n_params(self):
        return self.ctrl.controller.n_params

    def field_and_running(self, g):
        H, P = g.pose, np.asarray(g.mom, dtype=float)
        T, Pdot, W_tot, *_ = _wrench_terms(self.ctrl, self.body, H, P)
        return np.concatenate([T, Pdot], -1), running_cost(self.cost, g, W_tot)

    def final(self, g):
        return final_cost(self.cost, g)

    def final_grad(self, g):
        return np.concatenate(terminal_costate(self.cost, g), axis=-1)

    def costate_terms(self, g, lam):
        w = self.cost.weights
        H, P = g.pose, np.asarray(g.mom, dtype=float)
        lamH, lamP = lam[..., :6], lam[..., 6:]
        T, Pdot, W_tot, eg, kappa, comp = _wrench_terms(self.ctrl, self.body, H, P)
        dH, dP, dth = _momentum_costate_terms(self.ctrl, self.body, w, H, P, T, lamP,
                                              W_tot, eg, kappa, comp)
        dH = dH + SE3.gradient_from_entries(H, _pose_entry_grad(self.cost, H, w[4], w[5]))
        dP = dP + lamH @ self.body.inertia_inv + _mom_grad(P, w[6], w[7])
        return np.concatenate([T, Pdot], -1), np.concatenate([dH, dP], -1), dth

    def ad_transpose(self, xi, lam):
        out = np.zeros_like(lam)
        out[..., :6] = dyn.ad_transpose(xi[..., :6], lam[..., :6])
        return out


class MomentumSystem:
    """The closed loop with the pose pinned at ``H0``: a flow on Vec(6).

    The group is abelian, so the co-state equation loses its ad term and the
    method reduces to the classical flat-space adjoint.
    """

    def __init__(self, cost: CostSpec, ctrl_spec: dyn.ControllerSpec, body: dyn.BodyParams, H0: Pose):
        self.cost, self.ctrl, self.body = cost, ctrl_spec, body
        self.H0 = Pose(np.asarray(H0.R, dtype=float), np.asarray(H0.p, dtype=float))
        self.group = Vec(6)

    @property
    def n_params(self):
        return self.ctrl.controller.n_params

    def _H(self, P):
        n = P.shape[:-1]
        return Pose(np.broadcast_to(self.H0.R, n + (3, 3)), np.broadcast_to(self.H0.p, n + (3,)))

    def field_and_running(self, P):
        P = np.asarray(P, dtype=float)
        w = self.cost.weights
        _, Pdot, W_tot, *_ = _wrench_terms(self.ctrl, self.body, self._H(P), P)
        return Pdot, _mom_terms(P, w[6], w[7]) + w[8] * np.sum(W_tot * W_tot, -1)

    def final(self, P):
        w = self.cost.weights
        return _mom_terms(P, w[2], w[3])

    def final_grad(self, P):
        w = self.cost.weights
        return _mom_grad(P, w[2], w[3])

    def costate_terms(self, P, lam):
        P = np.asarray(P, dtype=float)
        w = self.cost.weights
        H = self._H(P)
        T, Pdot, W_tot, eg, kappa, comp = _wrench_terms(self.ctrl, self.body, H, P)
        _, dP, dth = _momentum_costate_terms(self.ctrl, self.body, w, H, P, T, lam,
                                             W_tot, eg, kappa, comp)
        return Pdot, dP + _mom_grad(P, w[6], w[7]), dth

    def ad_transpose(self, xi, lam):
        return np.zeros_like(lam)


# ---------------------------------------------------------------------------
# the method


def costate_rhs(system, g, lam):
    """lambda' = -d_g(lambda^T f~ + r) + ad_{f~}^T lambda (theta integrand discarded)."""
    xi, dg, _ = system.costate_terms(g, np.asarray(lam, dtype=float))
    return -dg + system.ad_transpose(xi, lam)


def _batch(g, G):
    ent = G.entries(g)
    if ent.ndim == 1:
        return tree_map(lambda a: a[None], g), False
    return g, True


def cost_and_gradient(system, g0, cfg: SolverConfig = SolverConfig(), initial_chart=None,
                      guard: bool = False, keep_trajectory: bool = False) -> GradientResult:
    """Total cost and its parameter gradient for one or a batch of initial states.

    With ``guard`` set, batch members whose forward or backward solve turns
    non-finite are flagged in ``failed`` (their outputs are NaN) instead of
    aborting the whole batch.
    """
    G = system.group
    g0, batched = _batch(g0, G)
    B = G.entries(g0).shape[0]
    n, npar = G.dim, system.n_params
    T_end = float(system.cost.horizon)

    def fwd(t, g):
        xi, r = system.field_and_running(g)
        return xi, r[:, None]

    traj = lie_integrate(fwd, g0, 0.0, T_end, cfg, tag=G, aux0=np.zeros((B, 1)),
                         initial_chart=initial_chart, guard=guard)
    gT = traj.final_element()
    integral = traj.aux[-1][:, 0]
    terminal = system.final(gT)
    lamT = system.final_grad(gT)
    failed = traj.failed.copy()
    if guard:
        lamT = np.where(failed[:, None], 0.0, lamT)

    def bwd(t, x):
        g = traj.dense_element(t)
        lam = x[:, :n]
        xi, dg, dth = system.costate_terms(g, lam)
        return np.concatenate([-dg + system.ad_transpose(xi, lam), -dth], axis=-1)

    x0 = np.concatenate([lamT, np.zeros((B, npar))], axis=-1)
    back = integrate_rn(bwd, x0, T_end, 0.0, cfg, guard=guard)
    grad = back.x[-1][:, n:]
    lam0 = back.x[-1][:, :n]
    failed |= back.failed
    cost = terminal + integral
    bad = ~np.isfinite(cost) | ~np.all(np.isfinite(grad), axis=-1)
    if bad.any() and not guard:
        raise NumericError("non-finite cost or gradient", dump={"trajectory": traj, "grad": grad})
    failed |= bad
    if failed.any():
        grad = np.where(failed[:, None], np.nan, grad)
        cost = np.where(failed, np.nan, cost)
    out = GradientResult(grad, cost, terminal, integral, failed,
                         traj if keep_trajectory else None, lam0)
    if not batched:
        out = GradientResult(grad[0], cost[0], terminal[0], integral[0], failed[0],
                             out.trajectory, lam0[0])
    return out


def total_cost(system, g0, cfg: SolverConfig = SolverConfig(), initial_chart=None, guard=False):
    """Forward-only cost (terminal + quadrature), batched like ``cost_and_gradient``."""
    G = system.group
    g0, batched = _batch(g0, G)
    B = G.entries(g0).shape[0]

    def fwd(t, g):
        xi, r = system.field_and_running(g)
        return xi, r[:, None]

    traj = lie_integrate(fwd, g0, 0.0, float(system.cost.horizon), cfg, tag=G,
                         aux0=np.zeros((B, 1)), initial_chart=initial_chart, guard=guard)
    c = system.final(traj.final_element()) + traj.aux[-1][:, 0]
    if guard:
        c = np.where(traj.failed, np.nan, c)
    return c if batched else c[0]


__all__ = [
    "CostSpec", "CoState", "GradientResult", "final_cost", "running_cost", "terminal_costate",
    "translation_error", "RigidBodySystem", "MomentumSystem", "costate_rhs",
    "cost_and_gradient", "total_cost",
]
