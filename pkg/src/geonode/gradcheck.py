"""Brute-force finite-difference oracle for controller gradients.

Central differences need two full rollouts per parameter.  Rather than loop,
all perturbed rollouts of a draw run as one batch: the quadratic controller
takes a per-member theta, and for the networks each batch member carries a
single perturbed entry, applied as a sparse correction on top of shared
weights so the dense algebra stays one matrix product per layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .adjoint import CostSpec, RigidBodySystem, cost_and_gradient, total_cost
from .diff import softplus
from .integrate import SolverConfig, tree_map
from .lie import SE3
from .parallel import map_chunks

DEFAULT_THRESHOLD = 1e-3
ABS_FLOOR = 1e-8      # entries below this are compared absolutely
ABS_TOL = 1e-6


class PerturbedNN:
    """NN controller where batch member s has entry ``index[s]`` shifted by ``delta[s]``."""

    kind = "nn"

    def __init__(self, base: dyn.NNController, index, delta):
        self.base = base
        index = np.asarray(index, dtype=int)
        delta = np.asarray(delta, dtype=float)
        nv = base.v_net.n_params
        self.v_sel = self._select(base.v_net, index, delta)
        self.b_sel = self._select(base.b_net, index - nv, delta)

    @staticmethod
    def _select(net, k, delta):
        """Per layer: (rows, i, j, d) of weight hits and (rows, i, d) of bias hits."""
        out, start = [], 0
        rows = np.arange(k.size)
        for l in net.layers:
            nw, nb = l.W.size, l.b.size
            w = (k >= start) & (k < start + nw)
            b = (k >= start + nw) & (k < start + nw + nb)
            kw = k[w] - start
            out.append(((rows[w], kw // l.W.shape[1], kw % l.W.shape[1], delta[w]),
                        (rows[b], k[b] - start - nw, delta[b])))
            start += nw + nb
        return out

    @staticmethod
    def _affine(l, x, sel):
        (rw, iw, jw, dw), (rb, ib, db) = sel
        z = x @ l.W.T + l.b
        z[rw, iw] += dw * x[rw, jw]
        z[rb, ib] += db
        return z

    def potential_entry_grad(self, H):
        x = SE3.entries(H)
        l1, l2 = self.base.v_net.layers
        s1, s2 = self.v_sel
        h = np.tanh(self._affine(l1, x, s1))
        hbar = np.broadcast_to(l2.W[0], h.shape).copy()
        rw, _, jw, dw = s2[0]
        hbar[rw, jw] += dw
        zbar = (1.0 - h * h) * hbar
        xbar = zbar @ l1.W
        rw, iw, jw, dw = s1[0]
        xbar[rw, jw] += dw * zbar[rw, iw]
        return xbar

    def damping(self, H, P):
        x = np.concatenate([SE3.entries(H), np.asarray(P, dtype=float)], axis=-1)
        l1, l2 = self.base.b_net.layers
        s1, s2 = self.b_sel
        h = softplus(self._affine(l1, x, s1))
        return np.exp(self._affine(l2, h, s2))


@dataclass
class GradcheckReport:
    blocks: dict            # name -> max error (relative, or absolute for tiny entries)
    passed: bool
    threshold: float
    adjoint: np.ndarray = field(repr=False, default=None)
    fd: np.ndarray = field(repr=False, default=None)

    def lines(self):
        out = []
        for name, err in self.blocks.items():
            status = "pass" if err <= self.threshold else "FAIL"
            out.append(f"{name:>12s}  max_err={err:.3e}  {status}")
        return out


def param_blocks(controller):
    """Named slices of the flat parameter vector."""
    if controller.kind == "quadratic":
        return {"K": slice(0, 3), "G": slice(3, 6), "B": slice(6, 12)}
    if controller.kind == "nn":
        out, k = {}, 0
        for tag, net in (("V", controller.v_net), ("B", controller.b_net)):
            for li, l in enumerate(net.layers, 1):
                out[f"{tag}.W{li}"] = slice(k, k + l.W.size)
                k += l.W.size
                out[f"{tag}.b{li}"] = slice(k, k + l.b.size)
                k += l.b.size
        return out
    return {}


def _repeat(g, n):
    return tree_map(lambda a: np.repeat(a[None], n, axis=0), g)


def fd_gradient(cost: CostSpec, ctrl_spec: dyn.ControllerSpec, body: dyn.BodyParams, g0,
                cfg: SolverConfig, eps=1e-4, chunk=4096, indices=None):
    """Central-difference gradient of the total cost for one (unbatched) initial state."""
    C = ctrl_spec.controller
    theta = C.params()
    idx = np.arange(theta.size) if indices is None else np.asarray(indices, dtype=int)
    if idx.size == 0:
        return np.zeros(0)
    pairs_idx = np.repeat(idx, 2)
    pairs_delta = np.tile([eps, -eps], idx.size)
    costs = np.empty(pairs_idx.size)
    for s in range(0, pairs_idx.size, chunk):
        ki, kd = pairs_idx[s:s + chunk], pairs_delta[s:s + chunk]
        if C.kind == "quadratic":
            th = np.repeat(theta[None], ki.size, axis=0)
            th[np.arange(ki.size), ki] += kd
            pc = dyn.QuadraticController(th)
        elif C.kind == "nn":
            pc = PerturbedNN(C, ki, kd)
        else:
            raise ValueError(f"no parameters to perturb for {C.kind}")
        system = RigidBodySystem(cost, dyn.ControllerSpec(pc, ctrl_spec.gravity_compensation), body)
        costs[s:s + chunk] = total_cost(system, _repeat(g0, ki.size), cfg)
    return (costs[0::2] - costs[1::2]) / (2 * eps)


def compare(adj, fd, floor=ABS_FLOOR, abs_tol=ABS_TOL, threshold=DEFAULT_THRESHOLD):
    """Elementwise error normalised so that <= threshold means pass.

    Entries with |fd| below ``floor`` are judged on absolute error against
    ``abs_tol``; the result is rescaled onto the relative threshold.
    """
    adj, fd = np.asarray(adj, dtype=float), np.asarray(fd, dtype=float)
    rel = np.abs(adj - fd) / np.maximum(np.abs(fd), 1e-300)
    small = np.abs(fd) < floor
    return np.where(small, np.abs(adj - fd) / abs_tol * threshold, rel)


def _one_draw(cost, spec, body, g0, cfg, eps, chunk):
    res = cost_and_gradient(RigidBodySystem(cost, spec, body), g0, cfg)
    return res.grad, fd_gradient(cost, spec, body, g0, cfg, eps, chunk)


def gradcheck(cost: CostSpec, ctrl_spec: dyn.ControllerSpec, body: dyn.BodyParams, g0s,
              cfg: SolverConfig, eps=1e-4, threshold=DEFAULT_THRESHOLD, controllers=None,
              chunk=4096, workers=None) -> GradcheckReport:
    """Adjoint vs central differences over a batch of initial states.

    ``controllers`` optionally gives one controller per initial state (random
    parameter draws); otherwise ``ctrl_spec``'s controller is used for all.
    Draws are independent and run on ``workers`` processes (GEONODE_THREADS
    by default); results are collected in draw order.
    """
    n = SE3.entries(g0s.pose).shape[0]
    ctrls = controllers or [ctrl_spec.controller] * n
    args = [(cost, dyn.ControllerSpec(ctrls[s], ctrl_spec.gravity_compensation), body,
             tree_map(lambda a: a[s], g0s), cfg, eps, chunk) for s in range(n)]
    rows = map_chunks(_one_draw, args, workers)
    adj, fd = np.array([r[0] for r in rows]), np.array([r[1] for r in rows])
    err = compare(adj, fd, threshold=threshold) if adj.size else np.zeros((n, 0))
    blocks = {name: float(np.max(err[:, sl])) if err.size else 0.0
              for name, sl in param_blocks(ctrls[0]).items()}
    passed = bool(np.all(np.isfinite(err)) and (err.size == 0 or np.max(err) <= threshold))
    return GradcheckReport(blocks, passed, threshold, adj, fd)


__all__ = ["PerturbedNN", "GradcheckReport", "param_blocks", "fd_gradient", "compare", "gradcheck"]
