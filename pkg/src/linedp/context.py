"""Bidirectional GRU over the sequence of line embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc

GATES = ("z", "r", "h")


@dataclass
class GruParams:
    """One direction: input maps W_* (d x u), recurrent maps R_* (u x u), biases b_* (1 x u)."""

    W_z: nc.Node
    W_r: nc.Node
    W_h: nc.Node
    R_z: nc.Node
    R_r: nc.Node
    R_h: nc.Node
    b_z: nc.Node
    b_r: nc.Node
    b_h: nc.Node

    @property
    def hidden(self) -> int:
        return self.R_z.shape[0]

    def named(self, prefix: str) -> dict[str, nc.Node]:
        return {f"{prefix}.{k}": getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_named(cls, params: dict[str, nc.Node], prefix: str) -> "GruParams":
        return cls(**{k: params[f"{prefix}.{k}"] for k in cls.__dataclass_fields__})

    @classmethod
    def init(cls, d: int, u: int, rng: np.random.Generator, prefix: str = "") -> "GruParams":
        kw = {}
        for g in GATES:
            kw[f"W_{g}"] = rng.uniform(-0.08, 0.08, size=(d, u))
        for g in GATES:
            q, r = np.linalg.qr(rng.standard_normal((u, u)))
            kw[f"R_{g}"] = q * np.sign(np.diag(r))
        for g in GATES:
            kw[f"b_{g}"] = np.zeros((1, u))
        return cls(**{k: nc.parameter(v, name=f"{prefix}.{k}" if prefix else k)
                      for k, v in kw.items()})


def gru_cell(x: nc.Node, h_prev: nc.Node, p: GruParams) -> nc.Node:
    """One GRU step; the reset gate scales h_prev before the recurrent map."""
    if x.shape[0] != 1 or x.shape[1] != p.W_z.shape[0]:
        raise nc.DimensionError(f"gru_cell: input {x.shape} vs W {p.W_z.shape}")
    if h_prev.shape != (1, p.hidden):
        raise nc.DimensionError(f"gru_cell: hidden {h_prev.shape} vs u={p.hidden}")
    z = nc.sigmoid(nc.add(nc.add(nc.matmul(x, p.W_z), nc.matmul(h_prev, p.R_z)), p.b_z))
    r = nc.sigmoid(nc.add(nc.add(nc.matmul(x, p.W_r), nc.matmul(h_prev, p.R_r)), p.b_r))
    cand = nc.tanh(nc.add(nc.add(nc.matmul(x, p.W_h),
                                 nc.matmul(nc.mul(r, h_prev), p.R_h)), p.b_h))
    return nc.add(nc.mul(nc.sub(nc.constant(np.ones((1, p.hidden))), z), h_prev),
                  nc.mul(z, cand))


def gru_scan(XW: nc.Node, R_zr: nc.Node, R_h: nc.Node, reverse: bool = False) -> nc.Node:
    """Fused GRU recurrence with hand-written BPTT.

    XW holds the per-step input projections [z | r | h] with biases folded in (n x 3u).
    Returns the n x u hidden states in sequence order.
    """
    n, u = XW.shape[0], R_h.shape[0]
    if XW.shape[1] != 3 * u or R_zr.shape != (u, 2 * u) or R_h.shape != (u, u):
        raise nc.DimensionError(f"gru_scan: XW {XW.shape}, R_zr {R_zr.shape}, R_h {R_h.shape}")
    xw, rzr, rh = XW.value, R_zr.value, R_h.value
    steps = range(n - 1, -1, -1) if reverse else range(n)
    H = np.empty((n, u))
    Hp = np.empty((n, u))
    Z = np.empty((n, u))
    R = np.empty((n, u))
    C = np.empty((n, u))
    h = np.zeros((1, u))
    for i in steps:
        g = nc._sigmoid(xw[i:i + 1, :2 * u] + h @ rzr)
        z, r = g[:, :u], g[:, u:]
        c = np.tanh(xw[i:i + 1, 2 * u:] + (r * h) @ rh)
        Hp[i], Z[i], R[i], C[i] = h[0], z[0], r[0], c[0]
        h = h + z * (c - h)
        H[i] = h[0]

    def back(G):
        dXW = np.empty((n, 3 * u))
        carry = np.zeros(u)
        for i in reversed(steps):
            hp, z, r, c = Hp[i], Z[i], R[i], C[i]
            dh = G[i] + carry
            dac = dh * z * (1.0 - c * c)
            drh = dac @ rh.T
            dag = np.concatenate([dh * (c - hp) * z * (1.0 - z), drh * hp * r * (1.0 - r)])
            dXW[i, :2 * u] = dag
            dXW[i, 2 * u:] = dac
            carry = dh * (1.0 - z) + drh * r + dag @ rzr.T
        return dXW, Hp.T @ dXW[:, :2 * u], (R * Hp).T @ dXW[:, 2 * u:]

    return nc._make(H, (XW, R_zr, R_h), back, "gru_scan")


def bigru_forward(X: nc.Node, fwd: GruParams, bwd: GruParams) -> nc.Node:
    """n x d line embeddings -> n x 2u context matrix [forward | backward]."""
    if X.shape[0] < 1:
        raise ValueError("bigru_forward: empty sequence")
    if fwd.W_z.shape[0] != X.shape[1] or bwd.W_z.shape[0] != X.shape[1]:
        raise nc.DimensionError(f"bigru_forward: input {X.shape} vs W {fwd.W_z.shape}")
    return nc.concat_cols([_direction(X, fwd, reverse=False), _direction(X, bwd, reverse=True)])


def _direction(X: nc.Node, p: GruParams, reverse: bool) -> nc.Node:
    n = X.shape[0]
    W = nc.concat_cols([p.W_z, p.W_r, p.W_h])
    b = nc.concat_cols([p.b_z, p.b_r, p.b_h])
    XW = nc.add(nc.matmul(X, W), nc.broadcast_rows(b, n))
    return gru_scan(XW, nc.concat_cols([p.R_z, p.R_r]), p.R_h, reverse)
