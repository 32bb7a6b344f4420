"""Rigid-body dynamics on SE(3) x R^6 with potential shaping and damping injection.

State is Gamma = (H, P) with H = (R, p) and body momentum P = (P_omega; P_v).
The algebra-level vector field is

    T  = I^-1 P                                   (twist)
    Pdot = ad_T^T P + W(H, P) - d_H V_g(H)        (gravity optional)

with the control wrench W = -d_H V(H) - B(H, P) P (+ d_H V_g under gravity
compensation).  Controllers expose a small set of primitives in *embedded*
coordinates (R row-major, then p) so that the co-state code can assemble
every derivative it needs without knowing which controller it talks to.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diff
from .errors import ContractViolation
from .lie import SE3, Pose, ProductElement, cross, skew

V_SIZES, V_ACTS = [12, 64, 1], ["tanh", "linear"]
B_SIZES, B_ACTS = [18, 64, 6], ["softplus", "linear"]


@dataclass
class BodyParams:
    inertia: np.ndarray = field(default_factory=lambda: np.eye(6))
    mass: float = 1.0
    g_vec: Optional[np.ndarray] = None      # None disables gravity

    def __post_init__(self):
        I = np.asarray(self.inertia, dtype=float)
        if I.shape != (6, 6):
            raise ContractViolation(f"inertia must be 6x6, got {I.shape}")
        if np.max(np.abs(I - I.T)) > 1e-12:
            raise ContractViolation("inertia is not symmetric")
        if np.linalg.eigvalsh(I).min() <= 0:
            raise ContractViolation("inertia is not positive definite")
        self.inertia = I
        self.inertia_inv = np.linalg.inv(I)
        if self.g_vec is not None:
            self.g_vec = np.asarray(self.g_vec, dtype=float).reshape(3)

    @property
    def gravity(self) -> bool:
        return self.g_vec is not None


# ---------------------------------------------------------------------------
# small helpers


def _split(H):
    return np.asarray(H.R, dtype=float), np.asarray(H.p, dtype=float)


def _mv(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def _mtv(A, x):
    return np.einsum("...ji,...j->...i", A, x)


def _to_entries(dR, dp):
    return np.concatenate([dR.reshape(dR.shape[:-2] + (9,)), dp], axis=-1)


def _from_entries(e):
    return e[..., :9].reshape(e.shape[:-1] + (3, 3)), e[..., 9:]


def embed_direction(H, c):
    """Embedded-coordinate image J c = (R hat(c_w), R c_v) of an algebra vector."""
    R, _ = _split(H)
    c = np.asarray(c, dtype=float)
    return _to_entries(R @ skew(c[..., :3]), _mv(R, c[..., 3:]))


def ad_transpose(T, P):
    """ad_T^T P for twists T = (w; v) and co-vectors P = (P_w; P_v)."""
    w, v = T[..., :3], T[..., 3:]
    Pw, Pv = P[..., :3], P[..., 3:]
    return np.concatenate([cross(Pw, w) + cross(Pv, v), cross(Pv, w)], axis=-1)


def ad_apply(T, x):
    """ad_T x."""
    w, v = T[..., :3], T[..., 3:]
    xw, xv = x[..., :3], x[..., 3:]
    return np.concatenate([cross(w, xw), cross(v, xw) + cross(w, xv)], axis=-1)


# ---------------------------------------------------------------------------
# controllers


class QuadraticController:
    """V_Q = 1/4 p^T K p + 1/4 p^T R K R^T p - Tr(G (R - I)), B constant diagonal.

    theta[0:3] -> log diag K, theta[3:6] -> log diag G, theta[6:12] -> log diag B.
    A (batch, 12) theta gives one parameter set per batch member, which the
    finite-difference oracle uses to roll out all perturbations at once.
    """

    kind = "quadratic"

    def __init__(self, theta=None):
        theta = np.zeros(12) if theta is None else np.asarray(theta, dtype=float).copy()
        if theta.shape[-1:] != (12,):
            raise ContractViolation(f"quadratic controller needs 12 parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ContractViolation("non-finite controller parameters")
        self.theta = theta

    @property
    def n_params(self):
        return 12

    def params(self):
        return self.theta.copy()

    def with_params(self, theta):
        return QuadraticController(theta)

    def architecture(self):
        return {"kind": self.kind, "n_params": 12}

    @property
    def K(self):
        return np.exp(self.theta[..., :3])

    @property
    def G(self):
        return np.exp(self.theta[..., 3:6])

    @property
    def B(self):
        return np.exp(self.theta[..., 6:])

    def potential(self, H):
        R, p = _split(H)
        k, g = self.K, self.G
        a = _mtv(R, p)
        diagR = np.diagonal(R, axis1=-2, axis2=-1)
        return 0.25 * np.sum(k * p * p, -1) + 0.25 * np.sum(k * a * a, -1) - np.sum(g * (diagR - 1), -1)

    def potential_entry_grad(self, H):
        R, p = _split(H)
        k = self.K
        ka = k * _mtv(R, p)
        gR = 0.5 * p[..., :, None] * ka[..., None, :] - self.G[..., :, None] * np.eye(3)
        gp = 0.5 * k * p + 0.5 * _mv(R, ka)
        return _to_entries(gR, gp)

    def potential_entry_hvp(self, H, u):
        R, p = _split(H)
        dR, dp = _from_entries(np.asarray(u, dtype=float))
        k = self.K
        a = _mtv(R, p)
        da = _mtv(dR, p) + _mtv(R, dp)
        gR = 0.5 * dp[..., :, None] * (k * a)[..., None, :] + 0.5 * p[..., :, None] * (k * da)[..., None, :]
        gp = 0.5 * k * dp + 0.5 * _mv(dR, k * a) + 0.5 * _mv(R, k * da)
        return _to_entries(gR, gp)

    def potential_param_dir(self, H, u):
        """d/dtheta (u^T grad_entries V)."""
        R, p = _split(H)
        dR, dp = _from_entries(np.asarray(u, dtype=float))
        a = _mtv(R, p)
        da = _mtv(dR, p) + _mtv(R, dp)
        out = np.zeros(p.shape[:-1] + (12,))
        out[..., :3] = 0.5 * self.K * (da * a + dp * p)
        out[..., 3:6] = -self.G * np.diagonal(dR, axis1=-2, axis2=-1)
        return out

    def damping(self, H, P):
        return np.broadcast_to(self.B, np.broadcast_shapes(np.shape(P), self.B.shape)).copy()

    def damping_vjp(self, H, P, c):
        """Derivatives of c^T B P: (embedded H gradient, P gradient, theta gradient)."""
        P = np.asarray(P, dtype=float)
        b = self.B
        gH = np.zeros(P.shape[:-1] + (12,))
        gth = np.zeros(P.shape[:-1] + (12,))
        gth[..., 6:] = c * b * P
        return gH, b * c, gth

    def potential_bound(self):
        # every term of V_Q is nonnegative for positive diagonal K, G and R in SO(3)
        return 0.0, "V_Q >= 0: quadratic terms with K > 0 plus -Tr(G(R - I)) >= 0 for diagonal G > 0"


class NNController:
    """V from a 12-64-1 tanh/linear net, B = diag(exp(b)) from an 18-64-6 softplus/linear net.

    Parameters are flattened V-net first, then B-net.  Inputs: R row-major,
    p, and (for B) P.
    """

    kind = "nn"

    def __init__(self, v_net: diff.MlpParams, b_net: diff.MlpParams):
        if v_net.architecture() != {"sizes": V_SIZES, "activations": V_ACTS}:
            raise ContractViolation(f"V-net architecture must be {V_SIZES} {V_ACTS}")
        if b_net.architecture() != {"sizes": B_SIZES, "activations": B_ACTS}:
            raise ContractViolation(f"B-net architecture must be {B_SIZES} {B_ACTS}")
        self.v_net, self.b_net = v_net, b_net
        self._nv = v_net.n_params

    @classmethod
    def init(cls, rng=None, zero=False, scale=1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(diff.init_mlp(V_SIZES, V_ACTS, rng, scale, zero),
                   diff.init_mlp(B_SIZES, B_ACTS, rng, scale, zero))

    @property
    def n_params(self):
        return self._nv + self.b_net.n_params

    def params(self):
        return np.concatenate([self.v_net.flatten(), self.b_net.flatten()])

    def with_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ContractViolation(f"expected {self.n_params} parameters, got {theta.shape}")
        return NNController(self.v_net.with_flat(theta[:self._nv]),
                            self.b_net.with_flat(theta[self._nv:]))

    def architecture(self):
        return {"kind": self.kind, "v_net": self.v_net.architecture(),
                "b_net": self.b_net.architecture(), "n_params": self.n_params}

    def _pad_v(self, g):
        return np.concatenate([g, np.zeros(g.shape[:-1] + (self.b_net.n_params,))], axis=-1)

    def _pad_b(self, g):
        return np.concatenate([np.zeros(g.shape[:-1] + (self._nv,)), g], axis=-1)

    def potential(self, H):
        return diff.forward(self.v_net, SE3.entries(H))[..., 0]

    def potential_entry_grad(self, H):
        return diff.vjp(self.v_net, SE3.entries(H), np.ones(1))

    def potential_entry_hvp(self, H, u):
        return diff.directional_second(self.v_net, SE3.entries(H), u)

    def potential_param_dir(self, H, u):
        return self._pad_v(diff.param_gradient_of_input_gradient(self.v_net, SE3.entries(H), u))

    def _b_input(self, H, P):
        return np.concatenate([SE3.entries(H), np.asarray(P, dtype=float)], axis=-1)

    def damping(self, H, P):
        return np.exp(diff.forward(self.b_net, self._b_input(H, P)))

    def damping_vjp(self, H, P, c):
        x = self._b_input(H, P)
        beta = diff.forward(self.b_net, x)
        b = np.exp(beta)
        s = c * b * np.asarray(P, dtype=float)
        xbar = diff.vjp(self.b_net, x, s)
        gth = diff.param_gradient(self.b_net, x, s)
        return xbar[..., :12], xbar[..., 12:] + b * c, self._pad_b(gth)

    def potential_bound(self):
        W2, b2 = self.v_net.layers[1].W, self.v_net.layers[1].b
        return float(b2[0] - np.abs(W2).sum()), "tanh features lie in [-1, 1], so V >= b2 - sum|W2|"


class NullController:
    """W = 0: the free rigid body."""

    kind = "none"
    n_params = 0

    def params(self):
        return np.zeros(0)

    def with_params(self, theta):
        if np.size(theta):
            raise ContractViolation("the null controller has no parameters")
        return self

    def architecture(self):
        return {"kind": self.kind, "n_params": 0}

    def potential(self, H):
        return np.zeros(np.shape(H.p)[:-1])

    def potential_entry_grad(self, H):
        return np.zeros(np.shape(H.p)[:-1] + (12,))

    def potential_entry_hvp(self, H, u):
        return np.zeros(np.shape(u))

    def potential_param_dir(self, H, u):
        return np.zeros(np.shape(u)[:-1] + (0,))

    def damping(self, H, P):
        return np.zeros(np.shape(P))

    def damping_vjp(self, H, P, c):
        n = np.shape(P)[:-1]
        return np.zeros(n + (12,)), np.zeros(np.shape(P)), np.zeros(n + (0,))

    def potential_bound(self):
        return 0.0, "V = 0"


@dataclass
class ControllerSpec:
    controller: object
    gravity_compensation: bool = False

    @property
    def kind(self):
        return self.controller.kind

    def with_params(self, theta):
        return ControllerSpec(self.controller.with_params(theta), self.gravity_compensation)


# ---------------------------------------------------------------------------
# energies, gravity, wrenches


def kinetic_energy(body: BodyParams, P):
    P = np.asarray(P, dtype=float)
    return 0.5 * np.sum(P * _mv(body.inertia_inv, P), -1)


def hamiltonian(body: BodyParams, controller, H, P):
    """(E_kin, E_pot, E_total) with E_pot the controller potential."""
    ek = kinetic_energy(body, P)
    ep = controller.potential(H)
    return ek, ep, ek + ep


def gravity_potential(body: BodyParams, H):
    if not body.gravity:
        return np.zeros(np.shape(H.p)[:-1])
    return -body.mass * np.asarray(H.p, dtype=float) @ body.g_vec


def gravity_entry_grad(body: BodyParams, H):
    p = np.asarray(H.p, dtype=float)
    out = np.zeros(p.shape[:-1] + (12,))
    if body.gravity:
        out[..., 9:] = -body.mass * body.g_vec
    return out


def gravity_gradient(body: BodyParams, H):
    """d_H V_g = (0, -m R^T g)."""
    return SE3.gradient_from_entries(H, gravity_entry_grad(body, H))


def potential_gradient(controller, H):
    return SE3.gradient_from_entries(H, controller.potential_entry_grad(H))


def control_wrench(spec: ControllerSpec, body: BodyParams, H, P):
    """W = -d_H V - B P, plus d_H V_g when gravity compensation is on."""
    P = np.asarray(P, dtype=float)
    c = spec.controller
    W = -potential_gradient(c, H) - c.damping(H, P) * P
    if spec.gravity_compensation:
        W = W + gravity_gradient(body, H)
    return W


def rigid_body_rhs(body: BodyParams, H, P, W):
    """Algebra-level field (T, Pdot) for an external wrench W."""
    P = np.asarray(P, dtype=float)
    T = _mv(body.inertia_inv, P)
    Pdot = ad_transpose(T, P) + W
    if body.gravity:
        Pdot = Pdot - gravity_gradient(body, H)
    return T, Pdot


def closed_loop_field(spec: ControllerSpec, body: BodyParams, H, P):
    """(T, Pdot, W) for the closed loop.

    The gravity and compensation terms are combined before they touch the
    momentum equation so that compensation cancels gravity exactly.
    """
    P = np.asarray(P, dtype=float)
    c = spec.controller
    T = _mv(body.inertia_inv, P)
    W_ctrl = -potential_gradient(c, H) - c.damping(H, P) * P
    kappa = float(spec.gravity_compensation) - float(body.gravity)
    Pdot = ad_transpose(T, P) + W_ctrl
    W = W_ctrl
    if body.gravity or spec.gravity_compensation:
        dVg = gravity_gradient(body, H)
        if kappa != 0.0:
            Pdot = Pdot + kappa * dVg
        if spec.gravity_compensation:
            W = W_ctrl + dVg
    return T, Pdot, W


def product_field(spec: ControllerSpec, body: BodyParams):
    """f~(t, Gamma) for the Lie integrator on SE(3) x R^6."""
    def f(t, g):
        T, Pdot, _ = closed_loop_field(spec, body, g.pose, g.mom)
        return np.concatenate([T, Pdot], axis=-1)
    return f


# ---------------------------------------------------------------------------
# stability certificate


@dataclass
class StabilityReport:
    passed: bool
    damping_symmetric: bool
    damping_positive: bool
    min_eigenvalue: float
    potential_lower_bound: float
    bound_reason: str
    notes: list


def stability_audit(spec: ControllerSpec, body: BodyParams, n: int = 1000, rng=None) -> StabilityReport:
    """Sample check of B(H, P) I > 0 and the construction-level lower bound of V."""
    rng = np.random.default_rng(0) if rng is None else rng
    from .lie import random_rotation
    notes = []
    I = body.inertia
    if np.max(np.abs(I - np.diag(np.diag(I)))) > 0:
        msg = "inertia is not diagonal: B I need not be symmetric for diagonal B"
        warnings.warn(msg)
        notes.append(msg)
    H = Pose(random_rotation(rng, n), rng.normal(size=(n, 3)))
    P = rng.normal(size=(n, 6))
    b = spec.controller.damping(H, P)
    BI = b[:, :, None] * I[None]
    asym = np.max(np.abs(BI - BI.swapaxes(-1, -2))) if n else 0.0
    sym = bool(asym <= 1e-12 * max(1.0, np.max(np.abs(BI)) if n else 1.0))
    eig = np.linalg.eigvalsh(0.5 * (BI + BI.swapaxes(-1, -2))).min() if n else np.inf
    pos = bool(np.all(np.isfinite(b)) and eig > 0)
    if not sym:
        notes.append(f"B I asymmetric by {asym:.3g}")
    if not pos:
        notes.append(f"B I not positive definite (min eigenvalue {eig:.3g})")
    bound, reason = spec.controller.potential_bound()
    if spec.kind == "none":
        pos = False
        notes.append("no damping injected")
    return StabilityReport(sym and pos, sym, pos, float(eig), bound, reason, notes)


def make_state(H: Pose, P) -> ProductElement:
    return ProductElement(H, np.asarray(P, dtype=float))


__all__ = [
    "BodyParams", "QuadraticController", "NNController", "NullController", "ControllerSpec",
    "embed_direction", "ad_transpose", "ad_apply", "kinetic_energy", "hamiltonian",
    "gravity_potential", "gravity_entry_grad", "gravity_gradient", "potential_gradient",
    "control_wrench", "rigid_body_rhs", "closed_loop_field", "product_field",
    "StabilityReport", "stability_audit", "make_state", "V_SIZES", "V_ACTS", "B_SIZES", "B_ACTS",
]
