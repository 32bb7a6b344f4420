"""Hand-written differentiation of small feed-forward networks.

Every derivative comes out of one layerwise pass: a forward sweep that also
carries a tangent (dual part) along an input direction ``w``, then a reverse
sweep seeded with an output co-vector ``s`` whose own tangent is propagated
alongside.  From that single sweep we read off

    value                         f(x)
    input co-gradient             s^T df/dx
    directional second            d/dx (s^T df/dx w)     (a Hessian-vector product)
    parameter gradient            d/dtheta (s^T f)
    parameter mixed gradient      d/dtheta (s^T df/dx w)

All functions accept a leading batch axis on ``x``; parameters are shared.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.special import expit

from .errors import ContractViolation

ACTIVATIONS = ("softplus", "tanh", "linear")


def softplus(z):
    # overflow-safe ln(1 + e^z); faster than logaddexp
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _act(name, z):
    """Activation value and its first two derivatives."""
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if name == "softplus":
        s = expit(z)
        return softplus(z), s, s * (1.0 - s)
    if name == "linear":
        return z, np.ones_like(z), np.zeros_like(z)
    raise ContractViolation(f"unknown activation {name!r}")


@dataclass
class Layer:
    W: np.ndarray   # (out, in)
    b: np.ndarray   # (out,)
    activation: str

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ContractViolation(f"layer shapes W{self.W.shape} b{self.b.shape} do not chain")


@dataclass
class MlpParams:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ContractViolation("an MLP needs at least one layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise ContractViolation(
                    f"layer dimensions do not chain: {a.W.shape} -> {b.W.shape}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def n_params(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers)

    def architecture(self):
        """JSON-friendly descriptor: sizes and activations."""
        sizes = [self.input_dim] + [l.W.shape[0] for l in self.layers]
        return {"sizes": sizes, "activations": [l.activation for l in self.layers]}

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.W.ravel(), l.b]) for l in self.layers])

    def with_flat(self, theta) -> "MlpParams":
        return unflatten(self.architecture(), theta)


def unflatten(arch, theta) -> MlpParams:
    theta = np.asarray(theta, dtype=float)
    sizes, acts = arch["sizes"], arch["activations"]
    layers, k = [], 0
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], acts):
        W = theta[k:k + n_in * n_out].reshape(n_out, n_in)
        k += n_in * n_out
        b = theta[k:k + n_out]
        k += n_out
        layers.append(Layer(W.copy(), b.copy(), act))
    if k != theta.size:
        raise ContractViolation(f"expected {k} parameters, got {theta.size}")
    return MlpParams(layers)


def init_mlp(sizes, activations, rng, scale=1.0, zero=False) -> MlpParams:
    """Glorot-uniform weights and zero biases (or everything zero)."""
    layers = []
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
        if zero:
            W = np.zeros((n_out, n_in))
        else:
            lim = scale * np.sqrt(6.0 / (n_in + n_out))
            W = rng.uniform(-lim, lim, size=(n_out, n_in))
        layers.append(Layer(W, np.zeros(n_out), act))
    return MlpParams(layers)


def _check_x(net, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.input_dim:
        raise ContractViolation(f"input has length {x.shape[-1]}, net expects {net.input_dim}")
    return x


def forward(net: MlpParams, x):
    h = _check_x(net, x)
    for l in net.layers:
        h = _act(l.activation, h @ l.W.T + l.b)[0]
    return h


def _sweep(net, x, seed, w=None, want_params=False):
    """The combined dual-forward / reverse sweep.

    Returns (value, xbar, xbar_dot, grads, grads_dot) where grads are per-layer
    (Wbar, bbar) with batch axes, and the *_dot entries are None when ``w`` is
    None.
    """
    x = _check_x(net, x)
    dual = w is not None
    hs, hds, zs, acts = [x], [np.broadcast_to(np.asarray(w, dtype=float), x.shape)] if dual else [None], [], []
    h, hd = x, hds[0]
    for l in net.layers:
        z = h @ l.W.T + l.b
        a, d1, d2 = _act(l.activation, z)
        zs.append(z)
        acts.append((d1, d2))
        if dual:
            zd = hd @ l.W.T
            hd = d1 * zd
            hds.append(hd)
        h = a
        hs.append(h)
    value = h
    hbar = np.broadcast_to(np.asarray(seed, dtype=float), value.shape)
    hbar_d = np.zeros_like(hbar) if dual else None
    grads, grads_d = [], []
    for i in range(len(net.layers) - 1, -1, -1):
        l = net.layers[i]
        d1, d2 = acts[i]
        zbar = d1 * hbar
        if dual:
            zd = hds[i] @ l.W.T
            zbar_d = d2 * zd * hbar + d1 * hbar_d
        if want_params:
            grads.append((zbar[..., :, None] * hs[i][..., None, :], zbar))
            if dual:
                grads_d.append((zbar_d[..., :, None] * hs[i][..., None, :]
                                + zbar[..., :, None] * hds[i][..., None, :], zbar_d))
        hbar = zbar @ l.W
        if dual:
            hbar_d = zbar_d @ l.W
    grads.reverse()
    grads_d.reverse()
    return value, hbar, hbar_d, grads, grads_d


def _flat(grads):
    return np.concatenate(
        [np.concatenate([gW.reshape(gW.shape[:-2] + (-1,)), gb], axis=-1) for gW, gb in grads],
        axis=-1)


def vjp(net: MlpParams, x, seed):
    """s^T df/dx for an output co-vector ``s``."""
    return _sweep(net, x, seed)[1]


def input_gradient(net: MlpParams, x):
    """Full Jacobian df/dx, shape (..., out, in)."""
    x = _check_x(net, x)
    rows = [vjp(net, x, e) for e in np.eye(net.output_dim)]
    return np.stack(rows, axis=-2)


def directional_second(net: MlpParams, x, w, seed=None):
    """d/dx (s^T df/dx w); for a scalar net with s = 1 this is the Hessian times w."""
    if seed is None:
        seed = np.ones(net.output_dim)
    return _sweep(net, x, seed, w=w)[2]


def param_gradient(net: MlpParams, x, seed):
    """d/dtheta (s^T f) in flattened parameter order, per batch member."""
    return _flat(_sweep(net, x, seed, want_params=True)[3])


def param_gradient_of_input_gradient(net: MlpParams, x, w, seed=None):
    """d/dtheta (s^T df/dx w) in flattened parameter order."""
    if seed is None:
        seed = np.ones(net.output_dim)
    return _flat(_sweep(net, x, seed, w=w, want_params=True)[4])


def full_sweep(net: MlpParams, x, seed, w):
    """Everything at once: (value, s^T J, d/dx(s^T J w), d/dtheta(s^T f), d/dtheta(s^T J w))."""
    value, xbar, xbar_d, g, gd = _sweep(net, x, seed, w=w, want_params=True)
    return value, xbar, xbar_d, _flat(g), _flat(gd)


__all__ = [
    "ACTIVATIONS", "Layer", "MlpParams", "softplus", "unflatten", "init_mlp", "forward", "vjp",
    "input_gradient", "directional_second", "param_gradient",
    "param_gradient_of_input_gradient", "full_sweep",
]
