"""Matrix Lie group primitives for SO(3), SE(3), Vec(k) and SE(3) x R^6.

Everything here is batch-first: arrays carry arbitrary leading axes and the
group structure lives in the trailing one or two axes.  Group elements are
kept as explicit blocks (``Pose(R, p)``, ``ProductElement(pose, mom)``); the
block-diagonal 11x11 matrix of the product group is only materialised by
``as_matrix`` for inspection and tests.

Conventions
-----------
* twists are ordered ``(omega; v)``, wrenches and momenta ``(torque; force)``
* ``hat``/``vee`` are the coordinate isomorphism between R^n and the algebra
* ``ad(a)`` is the matrix of ``b -> vee(hat(a) hat(b) - hat(b) hat(a))``
* ``dexp(q)`` is the left-trivialised derivative of exp,
  ``hat(dexp(q) qdot) = exp(hat q)^-1 d/dt exp(hat q)``
"""
from __future__ import annotations

import math
from typing import NamedTuple, Union

import numpy as np

from .errors import ContractViolation, InvalidAlgebraError, OutOfChartError

ALGEBRA_TOL = 1e-9
LOG_MARGIN = 1e-6          # refuse logs with rotation angle above pi - LOG_MARGIN
EXP_TAYLOR = 1e-4          # exp / Q / log small-angle switch
DEXP_TAYLOR = 1e-3         # dexp coefficient small-angle switch
REORTHO_TOL = 1e-7


class Pose(NamedTuple):
    """SE(3) element ``[[R, p], [0, 1]]`` stored as blocks."""

    R: np.ndarray
    p: np.ndarray


class ProductElement(NamedTuple):
    """Element of SE(3) x R^6 (pose and body momentum)."""

    pose: Pose
    mom: np.ndarray


GroupElement = Union[np.ndarray, Pose, ProductElement]


# ---------------------------------------------------------------------------
# so(3) helpers


def skew(w):
    w = np.asarray(w, dtype=float)
    z = np.zeros_like(w[..., 0])
    return np.stack(
        [
            np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
            np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
            np.stack([-w[..., 1], w[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def unskew(S):
    """Read (S32, S13, S21); no membership check."""
    S = np.asarray(S, dtype=float)
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def _T(A):
    return np.swapaxes(A, -1, -2)


def _mv(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def cross(a, b):
    """Batched 3-vector cross product (leaner than np.cross for small trailing axes)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def _angle(w):
    return np.sqrt(np.einsum("...i,...i->...", w, w))


def _where_small(theta, thresh, taylor, closed):
    """Evaluate ``closed`` where theta >= thresh and ``taylor`` elsewhere.

    ``closed`` receives a copy of theta with the small entries replaced by 1
    so no division by zero is ever evaluated.
    """
    theta = np.asarray(theta, dtype=float)
    small = theta < thresh
    safe = np.where(small, 1.0, theta)
    return np.where(small, taylor(theta), closed(safe))


def _so3_exp_coeffs(theta):
    """(sin t / t, (1 - cos t) / t^2) with Taylor fallback."""
    a = _where_small(theta, EXP_TAYLOR, lambda t: 1 - t**2 / 6 + t**4 / 120,
                     lambda t: np.sin(t) / t)
    b = _where_small(theta, EXP_TAYLOR, lambda t: 0.5 - t**2 / 24 + t**4 / 720,
                     lambda t: (1 - np.cos(t)) / t**2)
    return a, b


def _third_coeff(theta, thresh=EXP_TAYLOR):
    """(t - sin t) / t^3."""
    return _where_small(theta, thresh, lambda t: 1 / 6 - t**2 / 120 + t**4 / 5040,
                        lambda t: (t - np.sin(t)) / t**3)


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = _angle(w)
    a, b = _so3_exp_coeffs(theta)
    W = skew(w)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye + a[..., None, None] * W + b[..., None, None] * (W @ W)


def so3_log(R, margin=LOG_MARGIN):
    """Principal rotation vector of R; raises past ``pi - margin``."""
    R = np.asarray(R, dtype=float)
    A = 0.5 * (R - _T(R))
    s = unskew(A)
    sin_t = _angle(s)
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if np.any(theta > math.pi - margin):
        raise OutOfChartError(
            f"rotation angle {float(np.max(theta)):.9f} too close to pi for the log map"
        )
    scale = _where_small(theta, EXP_TAYLOR, lambda t: 1 + t**2 / 6 + 7 * t**4 / 360,
                         lambda t: t / np.sin(t))
    return scale[..., None] * s


def so3_dexp(w):
    """Closed form of sum_k (-1)^k/(k+1)! ad_w^k for so(3)."""
    w = np.asarray(w, dtype=float)
    theta = _angle(w)
    b = _where_small(theta, DEXP_TAYLOR, lambda t: 0.5 - t**2 / 24 + t**4 / 720,
                     lambda t: (1 - np.cos(t)) / t**2)
    c = _third_coeff(theta, DEXP_TAYLOR)
    W = skew(w)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye - b[..., None, None] * W + c[..., None, None] * (W @ W)


def _so3_dexp_inv_coeff(theta):
    """1/t^2 - cot(t/2)/(2t), regular up to (not including) 2 pi."""
    return _where_small(theta, DEXP_TAYLOR, lambda t: 1 / 12 + t**2 / 720 + t**4 / 30240,
                        lambda t: 1 / t**2 - np.cos(t / 2) / (2 * t * np.sin(t / 2)))


def so3_dexp_inv(w):
    """Inverse of ``so3_dexp``: I + W/2 + d(theta) W^2."""
    w = np.asarray(w, dtype=float)
    W = skew(w)
    d = _so3_dexp_inv_coeff(_angle(w))
    return np.eye(3) + 0.5 * W + d[..., None, None] * (W @ W)


def _so3_dexp_inv_apply(w, x):
    d = _so3_dexp_inv_coeff(_angle(w))[..., None]
    wx = cross(w, x)
    return x + 0.5 * wx + d * cross(w, wx)


def _se3_dexp_coeffs(theta):
    """a_2..a_5 of the closed-form SE(3) dexp (a_0 = 1, a_1 = -1/2)."""
    s, co = np.sin, np.cos
    a2 = _where_small(theta, DEXP_TAYLOR, lambda t: 1 / 6 - t**4 / 5040 + 0 * t,
                      lambda t: (8 + 2 * co(t) - 10 * s(t) / t) / (4 * t**2))
    a3 = _where_small(theta, DEXP_TAYLOR, lambda t: -1 / 24 + t**4 / 40320 + 0 * t,
                      lambda t: (-4 * t + (12 - 12 * co(t)) / t - 2 * s(t)) / (4 * t**3))
    a4 = _where_small(theta, DEXP_TAYLOR, lambda t: 1 / 120 - t**2 / 2520 + t**4 / 120960,
                      lambda t: (4 + 2 * co(t) - 6 * s(t) / t) / (4 * t**4))
    a5 = _where_small(theta, DEXP_TAYLOR, lambda t: -1 / 720 + t**2 / 20160 - t**4 / 1209600,
                      lambda t: (-2 * t + (8 - 8 * co(t)) / t - 2 * s(t)) / (4 * t**5))
    return a2, a3, a4, a5


def _reorthonormalize(R):
    drift = np.abs(_T(R) @ R - np.eye(3)).max(axis=(-2, -1))
    if np.any(drift > REORTHO_TOL):
        fixed = R @ (3 * np.eye(3) - _T(R) @ R) / 2
        R = np.where((drift > REORTHO_TOL)[..., None, None], fixed, R)
    return R


# ---------------------------------------------------------------------------
# groups


class _Group:
    name = ""
    dim = 0

    def _check(self, a):
        a = np.asarray(a, dtype=float)
        if a.ndim == 0 or a.shape[-1] != self.dim:
            raise ContractViolation(
                f"{self.name}: expected coordinates of length {self.dim}, got shape {a.shape}"
            )
        return a

    def dexp_series(self, q, order=12):
        """Truncated power series of dexp; reference implementation."""
        A = self.ad(q)
        K = np.zeros_like(A)
        term = np.broadcast_to(np.eye(self.dim), A.shape).copy()
        for k in range(order + 1):
            K = K + ((-1) ** k / math.factorial(k + 1)) * term
            term = term @ A
        return K

    def __repr__(self):
        return self.name


class _SO3(_Group):
    name = "SO3"
    dim = 3

    def hat(self, a):
        return skew(self._check(a))

    def vee(self, m, tol=ALGEBRA_TOL):
        m = np.asarray(m, dtype=float)
        if m.shape[-2:] != (3, 3):
            raise ContractViolation(f"so3 vee expects 3x3 matrices, got {m.shape}")
        if np.abs(m + _T(m)).max(initial=0.0) > tol:
            raise InvalidAlgebraError("matrix is not skew-symmetric")
        return unskew(m)

    def ad(self, a):
        return skew(self._check(a))

    def exp(self, a):
        return so3_exp(self._check(a))

    def log(self, R):
        return so3_log(R)

    def dexp(self, q):
        return so3_dexp(self._check(q))

    def dexp_solve(self, q, xi):
        return _so3_dexp_inv_apply(np.asarray(q, dtype=float), np.asarray(xi, dtype=float))

    def identity(self, batch=()):
        return np.broadcast_to(np.eye(3), tuple(batch) + (3, 3)).copy()

    def compose(self, g, h, reorthonormalize=True):
        R = np.asarray(g) @ np.asarray(h)
        return _reorthonormalize(R) if reorthonormalize else R

    def inverse(self, g):
        return _T(np.asarray(g)).copy()

    def as_matrix(self, g):
        return np.asarray(g, dtype=float)

    def entries(self, g):
        g = np.asarray(g, dtype=float)
        return g.reshape(g.shape[:-2] + (9,))

    def perturbation_jacobian(self, g):
        R = np.asarray(g, dtype=float)
        cols = [(R @ skew(np.eye(3)[k])).reshape(R.shape[:-2] + (9,)) for k in range(3)]
        return np.stack(cols, axis=-1)

    def gradient_from_entries(self, g, grad):
        R = np.asarray(g, dtype=float)
        G = np.asarray(grad, dtype=float).reshape(R.shape)
        M = _T(R) @ G
        return unskew(M - _T(M))


class _SE3(_Group):
    name = "SE3"
    dim = 6

    def hat(self, a):
        a = self._check(a)
        out = np.zeros(a.shape[:-1] + (4, 4))
        out[..., :3, :3] = skew(a[..., :3])
        out[..., :3, 3] = a[..., 3:]
        return out

    def vee(self, m, tol=ALGEBRA_TOL):
        m = np.asarray(m, dtype=float)
        if m.shape[-2:] != (4, 4):
            raise ContractViolation(f"se3 vee expects 4x4 matrices, got {m.shape}")
        W = m[..., :3, :3]
        if (np.abs(W + _T(W)).max(initial=0.0) > tol
                or np.abs(m[..., 3, :]).max(initial=0.0) > tol):
            raise InvalidAlgebraError("matrix is not in se(3)")
        return np.concatenate([unskew(W), m[..., :3, 3]], axis=-1)

    def ad(self, a):
        a = self._check(a)
        W = skew(a[..., :3])
        out = np.zeros(a.shape[:-1] + (6, 6))
        out[..., :3, :3] = W
        out[..., 3:, 3:] = W
        out[..., 3:, :3] = skew(a[..., 3:])
        return out

    def exp(self, a):
        a = self._check(a)
        w, v = a[..., :3], a[..., 3:]
        theta = _angle(w)
        sa, b = _so3_exp_coeffs(theta)
        c = _third_coeff(theta)
        W = skew(w)
        W2 = W @ W
        eye = np.eye(3)
        R = eye + sa[..., None, None] * W + b[..., None, None] * W2
        # left Jacobian form of (I - e^W) W v + w w^T v, divided by theta^2
        V = eye + b[..., None, None] * W + c[..., None, None] * W2
        return Pose(R, _mv(V, v))

    def log(self, g):
        R, p = g
        w = so3_log(R)
        theta = _angle(w)
        c = _where_small(theta, EXP_TAYLOR,
                         lambda t: 1 / 12 + t**2 / 720 + t**4 / 30240,
                         lambda t: (2 * np.sin(t) - t * (1 + np.cos(t)))
                         / (2 * t**2 * np.sin(t)))
        W = skew(w)
        Q = np.eye(3) - 0.5 * W + c[..., None, None] * (W @ W)
        return np.concatenate([w, _mv(Q, np.asarray(p, dtype=float))], axis=-1)

    def dexp(self, q):
        """K(q) = sum_{i=0}^{5} a_i(theta) ad_q^i."""
        q = self._check(q)
        a2, a3, a4, a5 = _se3_dexp_coeffs(_angle(q[..., :3]))
        A = self.ad(q)
        A2 = A @ A
        A3 = A2 @ A
        A4 = A3 @ A
        A5 = A4 @ A
        e = lambda x: x[..., None, None]
        return (np.eye(6) - 0.5 * A + e(a2) * A2 + e(a3) * A3 + e(a4) * A4 + e(a5) * A5)

    def dexp_solve(self, q, xi):
        """K(q)^-1 xi without forming K.

        K is block lower triangular with the so(3) dexp on both diagonal
        blocks, so the rotational part is inverted in closed form and the
        coupling block is applied through repeated ad products.
        """
        q = np.asarray(q, dtype=float)
        xi = np.asarray(xi, dtype=float)
        w, v = q[..., :3], q[..., 3:]
        xw = _so3_dexp_inv_apply(w, xi[..., :3])
        coeffs = (-0.5,) + _se3_dexp_coeffs(_angle(w))
        # lower block of K [xw; 0]; ad^i acts as (w x a, v x a + w x b)
        a, b = xw, np.zeros_like(xw)
        low = np.zeros_like(xw)
        for c in coeffs:
            a, b = cross(w, a), cross(v, a) + cross(w, b)
            low = low + np.asarray(c)[..., None] * b
        return np.concatenate([xw, _so3_dexp_inv_apply(w, xi[..., 3:] - low)], axis=-1)

    def identity(self, batch=()):
        batch = tuple(batch)
        return Pose(np.broadcast_to(np.eye(3), batch + (3, 3)).copy(), np.zeros(batch + (3,)))

    def compose(self, g, h, reorthonormalize=True):
        R = g.R @ h.R
        if reorthonormalize:
            R = _reorthonormalize(R)
        return Pose(R, _mv(g.R, h.p) + g.p)

    def inverse(self, g):
        Rt = _T(g.R)
        return Pose(Rt.copy(), -_mv(Rt, g.p))

    def as_matrix(self, g):
        R, p = np.asarray(g.R, dtype=float), np.asarray(g.p, dtype=float)
        out = np.zeros(R.shape[:-2] + (4, 4))
        out[..., :3, :3] = R
        out[..., :3, 3] = p
        out[..., 3, 3] = 1.0
        return out

    def from_matrix(self, m):
        m = np.asarray(m, dtype=float)
        return Pose(m[..., :3, :3].copy(), m[..., :3, 3].copy())

    def entries(self, g):
        """Embedded coordinates: R row-major (9) then p (3)."""
        R, p = g
        R = np.asarray(R, dtype=float)
        return np.concatenate([R.reshape(R.shape[:-2] + (9,)), np.asarray(p, dtype=float)],
                              axis=-1)

    def perturbation_jacobian(self, g):
        R = np.asarray(g.R, dtype=float)
        J = np.zeros(R.shape[:-2] + (12, 6))
        for k in range(3):
            J[..., :9, k] = (R @ skew(np.eye(3)[k])).reshape(R.shape[:-2] + (9,))
        J[..., 9:, 3:] = R
        return J

    def gradient_from_entries(self, g, grad):
        """J^T grad without forming J."""
        R = np.asarray(g.R, dtype=float)
        grad = np.asarray(grad, dtype=float)
        G = grad[..., :9].reshape(grad.shape[:-1] + (3, 3))
        M = _T(R) @ G
        return np.concatenate([unskew(M - _T(M)), _mv(_T(R), grad[..., 9:])], axis=-1)

    def second_from_entries(self, g, grad, hvp, c):
        """d_g (c^T d_g f) given entry gradient and entry Hessian-vector product.

        ``hvp(u)`` must return the embedded-coordinate Hessian of f applied to
        ``u``; ``c`` is a fixed 6-vector.  The extra term comes from the
        dependence of the perturbation Jacobian on R.
        """
        R = np.asarray(g.R, dtype=float)
        grad = np.asarray(grad, dtype=float)
        c = np.asarray(c, dtype=float)
        u = _mv(self.perturbation_jacobian(g), c)
        out = self.gradient_from_entries(g, hvp(u))
        G = grad[..., :9].reshape(grad.shape[:-1] + (3, 3))
        N = skew(c[..., :3]) @ G.swapaxes(-1, -2) @ R
        rot = -unskew(N - _T(N)) + cross(c[..., 3:], _mv(_T(R), grad[..., 9:]))
        return out + np.concatenate([rot, np.zeros_like(rot)], axis=-1)


class Vec(_Group):
    """(R^k, +) realised as ``[[I, p], [0, 1]]``; elements stored as p."""

    def __init__(self, k):
        self.dim = int(k)
        self.name = f"Vec{self.dim}"

    def __eq__(self, other):
        return isinstance(other, Vec) and other.dim == self.dim

    def __hash__(self):
        return hash(("Vec", self.dim))

    def hat(self, a):
        a = self._check(a)
        k = self.dim
        out = np.zeros(a.shape[:-1] + (k + 1, k + 1))
        out[..., :k, k] = a
        return out

    def vee(self, m, tol=ALGEBRA_TOL):
        m = np.asarray(m, dtype=float)
        k = self.dim
        if m.shape[-2:] != (k + 1, k + 1):
            raise ContractViolation(f"{self.name} vee expects {(k + 1, k + 1)}, got {m.shape}")
        rest = m.copy()
        rest[..., :k, k] = 0.0
        if np.abs(rest).max(initial=0.0) > tol:
            raise InvalidAlgebraError(f"matrix is not in vec({k})")
        return m[..., :k, k].copy()

    def ad(self, a):
        a = self._check(a)
        return np.zeros(a.shape[:-1] + (self.dim, self.dim))

    def exp(self, a):
        return self._check(a).copy()

    def log(self, g):
        return self._check(g).copy()

    def dexp(self, q):
        q = self._check(q)
        return np.broadcast_to(np.eye(self.dim), q.shape[:-1] + (self.dim, self.dim)).copy()

    def dexp_solve(self, q, xi):
        return np.array(xi, dtype=float, copy=True)

    def identity(self, batch=()):
        return np.zeros(tuple(batch) + (self.dim,))

    def compose(self, g, h, reorthonormalize=True):
        return np.asarray(g, dtype=float) + np.asarray(h, dtype=float)

    def inverse(self, g):
        return -np.asarray(g, dtype=float)

    def as_matrix(self, g):
        g = self._check(g)
        k = self.dim
        out = np.broadcast_to(np.eye(k + 1), g.shape[:-1] + (k + 1, k + 1)).copy()
        out[..., :k, k] = g
        return out

    def entries(self, g):
        return self._check(g)

    def perturbation_jacobian(self, g):
        g = self._check(g)
        return np.broadcast_to(np.eye(self.dim), g.shape[:-1] + (self.dim, self.dim)).copy()

    def gradient_from_entries(self, g, grad):
        return np.asarray(grad, dtype=float)


class _SE3xR6(_Group):
    """Direct product SE(3) x (R^6, +) with component-wise composition."""

    name = "SE3xR6"
    dim = 12

    def __init__(self):
        self.se3 = SE3
        self.vec = Vec(6)

    def hat(self, a):
        a = self._check(a)
        out = np.zeros(a.shape[:-1] + (11, 11))
        out[..., :4, :4] = self.se3.hat(a[..., :6])
        out[..., 4:, 4:] = self.vec.hat(a[..., 6:])
        return out

    def vee(self, m, tol=ALGEBRA_TOL):
        m = np.asarray(m, dtype=float)
        if m.shape[-2:] != (11, 11):
            raise ContractViolation(f"product vee expects 11x11 matrices, got {m.shape}")
        off = np.concatenate([m[..., :4, 4:].reshape(m.shape[:-2] + (-1,)),
                              m[..., 4:, :4].reshape(m.shape[:-2] + (-1,))], axis=-1)
        if np.abs(off).max(initial=0.0) > tol:
            raise InvalidAlgebraError("matrix is not block diagonal")
        return np.concatenate([self.se3.vee(m[..., :4, :4], tol),
                               self.vec.vee(m[..., 4:, 4:], tol)], axis=-1)

    def ad(self, a):
        a = self._check(a)
        out = np.zeros(a.shape[:-1] + (12, 12))
        out[..., :6, :6] = self.se3.ad(a[..., :6])
        return out

    def exp(self, a):
        a = self._check(a)
        return ProductElement(self.se3.exp(a[..., :6]), a[..., 6:].copy())

    def log(self, g):
        return np.concatenate([self.se3.log(g.pose), np.asarray(g.mom, dtype=float)], axis=-1)

    def dexp(self, q):
        q = self._check(q)
        out = np.zeros(q.shape[:-1] + (12, 12))
        out[..., :6, :6] = self.se3.dexp(q[..., :6])
        out[..., 6:, 6:] = np.eye(6)
        return out

    def dexp_solve(self, q, xi):
        xi = np.asarray(xi, dtype=float)
        return np.concatenate([self.se3.dexp_solve(q[..., :6], xi[..., :6]), xi[..., 6:]], axis=-1)

    def identity(self, batch=()):
        return ProductElement(self.se3.identity(batch), np.zeros(tuple(batch) + (6,)))

    def compose(self, g, h, reorthonormalize=True):
        return ProductElement(self.se3.compose(g.pose, h.pose, reorthonormalize),
                              np.asarray(g.mom) + np.asarray(h.mom))

    def inverse(self, g):
        return ProductElement(self.se3.inverse(g.pose), -np.asarray(g.mom))

    def as_matrix(self, g):
        H = self.se3.as_matrix(g.pose)
        out = np.zeros(H.shape[:-2] + (11, 11))
        out[..., :4, :4] = H
        out[..., 4:, 4:] = self.vec.as_matrix(g.mom)
        return out

    def entries(self, g):
        return np.concatenate([self.se3.entries(g.pose), np.asarray(g.mom, dtype=float)], axis=-1)

    def perturbation_jacobian(self, g):
        Jh = self.se3.perturbation_jacobian(g.pose)
        out = np.zeros(Jh.shape[:-2] + (18, 12))
        out[..., :12, :6] = Jh
        out[..., 12:, 6:] = np.eye(6)
        return out

    def gradient_from_entries(self, g, grad):
        grad = np.asarray(grad, dtype=float)
        return np.concatenate([self.se3.gradient_from_entries(g.pose, grad[..., :12]),
                               grad[..., 12:]], axis=-1)


SO3 = _SO3()
SE3 = _SE3()
SE3xR6 = _SE3xR6()

_TAGS = {"so3": SO3, "SO3": SO3, "se3": SE3, "SE3": SE3, "product": SE3xR6,
         "SE3xR6": SE3xR6}


def group(tag) -> _Group:
    """Resolve a group tag (object, name, or ``"vecK"``) to its group object."""
    if isinstance(tag, _Group):
        return tag
    if isinstance(tag, str):
        if tag in _TAGS:
            return _TAGS[tag]
        if tag.lower().startswith("vec") and tag[3:].isdigit():
            return Vec(int(tag[3:]))
    raise ContractViolation(f"unknown group tag {tag!r}")


def _infer(g):
    if isinstance(g, ProductElement):
        return SE3xR6
    if isinstance(g, Pose):
        return SE3
    g = np.asarray(g)
    if g.ndim >= 2 and g.shape[-2:] == (3, 3):
        return SO3
    return Vec(g.shape[-1])


# ---------------------------------------------------------------------------
# functional surface


def hat(a, tag):
    return group(tag).hat(a)


def vee(m, tag):
    return group(tag).vee(m)


def adjoint_rep(a, tag):
    return group(tag).ad(a)


def exp_group(a, tag):
    return group(tag).exp(a)


def log_group(g, tag=None):
    return (group(tag) if tag is not None else _infer(g)).log(g)


def dexp(q, tag):
    return group(tag).dexp(q)


def compose(g, h, tag=None, reorthonormalize=True):
    G = group(tag) if tag is not None else _infer(g)
    if tag is None and _infer(h) != G and not (isinstance(G, Vec) and isinstance(_infer(h), Vec)):
        raise ContractViolation("compose: elements belong to different groups")
    return G.compose(g, h, reorthonormalize)


def inverse(g, tag=None):
    return (group(tag) if tag is not None else _infer(g)).inverse(g)


def identity(tag, batch=()):
    return group(tag).identity(batch)


def perturbation_jacobian(g, tag=None):
    """Jacobian of the embedded entries of ``g (I + hat q)`` w.r.t. q at q = 0."""
    return (group(tag) if tag is not None else _infer(g)).perturbation_jacobian(g)


def intrinsic_gradient(entry_grad, g, tag=None):
    """Left-trivialised gradient d_g f from the gradient w.r.t. embedded entries.

    ``entry_grad`` is either an array of partial derivatives evaluated at g or a
    callable returning it when given the embedded entries.
    """
    G = group(tag) if tag is not None else _infer(g)
    if callable(entry_grad):
        entry_grad = entry_grad(G.entries(g))
    return G.gradient_from_entries(g, entry_grad)


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    ortho = np.abs(_T(R) @ R - np.eye(3)).max() <= tol
    return bool(ortho and np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))


def random_rotation(rng, size=()):
    """Uniform rotations from normalised 4-d Gaussian quaternions."""
    size = (size,) if isinstance(size, int) else tuple(size)
    q = rng.standard_normal(size + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def rotation_angle(R):
    """Angle of rotation in [0, pi], robust near both ends."""
    R = np.asarray(R, dtype=float)
    s = _angle(unskew(0.5 * (R - _T(R))))
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)
