"""Two-head bilinear attention fusion of line embeddings and line contexts.

Rows are lines throughout.  With P = relu(H_l U) and Q = relu(H_c M), head h
builds the interaction map A_h = (P * q_h) Q^T (theta x theta), pools it
channel-wise into f''_h[c] = sum_ij P_ic A_ij Q_jc, sum-pools f''_h with
stride s and adds the two heads.  U and M are shared by both heads and by the
interaction and pooling stages.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc

HEADS = 2


@dataclass
class BafnParams:
    U: nc.Node
    M: nc.Node
    q: list[nc.Node]
    stride: int = 3

    def __post_init__(self):
        k = self.U.shape[1]
        if self.M.shape[1] != k:
            raise nc.DimensionError(f"bafn: U {self.U.shape} and M {self.M.shape} disagree on k")
        if self.stride < 1 or k % self.stride:
            raise nc.ConfigError(f"bafn: k={k} is not divisible by stride s={self.stride}")
        for qh in self.q:
            if qh.shape != (1, k):
                raise nc.DimensionError(f"bafn: q {qh.shape} must be 1 x {k}")

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def named(self) -> dict[str, nc.Node]:
        out = {"bafn.U": self.U, "bafn.M": self.M}
        out.update({f"bafn.q{i + 1}": qh for i, qh in enumerate(self.q)})
        return out

    @classmethod
    def from_named(cls, params: dict[str, nc.Node], stride: int, heads: int = HEADS):
        return cls(params["bafn.U"], params["bafn.M"],
                   [params[f"bafn.q{i + 1}"] for i in range(heads)], stride)

    @classmethod
    def init(cls, d: int, d_ctx: int, k: int, stride: int, rng: np.random.Generator,
             heads: int = HEADS) -> "BafnParams":
        lim_u = np.sqrt(6.0 / (d + k))
        lim_m = np.sqrt(6.0 / (d_ctx + k))
        U = nc.parameter(rng.uniform(-lim_u, lim_u, size=(d, k)), "bafn.U")
        M = nc.parameter(rng.uniform(-lim_m, lim_m, size=(d_ctx, k)), "bafn.M")
        lim_q = np.sqrt(6.0 / (1 + k))
        q = [nc.parameter(rng.uniform(-lim_q, lim_q, size=(1, k)), f"bafn.q{i + 1}")
             for i in range(heads)]
        return cls(U, M, q, stride)


def _invalid(mask: Sequence[bool] | None) -> list[int]:
    if mask is None:
        return []
    return [i for i, ok in enumerate(mask) if not ok]


def project(H_l: nc.Node, H_c: nc.Node, params: BafnParams,
            mask: Sequence[bool] | None = None, activate: bool = True):
    """Shared projections (H_l U, H_c M), ReLU'd when ``activate``; masked rows zeroed."""
    if H_l.shape[0] != H_c.shape[0]:
        raise nc.DimensionError(f"bafn: H_l {H_l.shape} and H_c {H_c.shape} row mismatch")
    P = nc.matmul(H_l, params.U)
    Q = nc.matmul(H_c, params.M)
    if activate:
        P, Q = nc.relu(P), nc.relu(Q)
    bad = _invalid(mask)
    if bad:
        P = nc.masked_zero(P, rows=bad)
        Q = nc.masked_zero(Q, rows=bad)
    return P, Q


def bilinear_interaction(H_l: nc.Node, H_c: nc.Node, params: BafnParams, head: int,
                         mask: Sequence[bool] | None = None) -> nc.Node:
    """theta x theta interaction map of one head."""
    P, Q = project(H_l, H_c, params, mask)
    return interaction_from_projections(P, Q, params.q[head], mask)


def interaction_from_projections(P: nc.Node, Q: nc.Node, q: nc.Node,
                                 mask: Sequence[bool] | None = None) -> nc.Node:
    n = P.shape[0]
    A = nc.matmul(nc.mul(P, nc.broadcast_rows(q, n)), nc.transpose(Q))
    bad = _invalid(mask)
    if bad:
        A = nc.masked_zero(A, rows=bad, cols=bad)
    return A


def pooling_from_projections(P: nc.Node, A: nc.Node, Q: nc.Node) -> nc.Node:
    """f''[c] = sum_ij P[i,c] A[i,j] Q[j,c]  ->  1 x k."""
    if A.shape != (P.shape[0], Q.shape[0]) or P.shape[1] != Q.shape[1]:
        raise nc.DimensionError(f"bilinear_pooling: P {P.shape}, A {A.shape}, Q {Q.shape}")
    return nc.sum(nc.mul(P, nc.matmul(A, Q)), axis=0)


def bilinear_pooling(H_l: nc.Node, H_c: nc.Node, params: BafnParams, A: nc.Node,
                     mask: Sequence[bool] | None = None, activate: bool = True) -> nc.Node:
    """Channel-wise bilinear form through A.

    ``activate=False`` gives the literal form without ReLU on the projections.
    """
    P, Q = project(H_l, H_c, params, mask, activate)
    return pooling_from_projections(P, A, Q)


def fuse_heads(f1: nc.Node, f2: nc.Node) -> nc.Node:
    if f1.shape != f2.shape:
        raise nc.DimensionError(f"fuse_heads: length mismatch {f1.shape} vs {f2.shape}")
    return nc.add(f1, f2)


@dataclass
class BafnOutput:
    f: nc.Node
    maps: list[nc.Node]


def bafn_forward(H_l: nc.Node, H_c: nc.Node, params: BafnParams,
                 mask: Sequence[bool] | None = None, pool_activation: bool = True) -> BafnOutput:
    """Fused 1 x (k/s) file representation plus the per-head interaction maps."""
    P, Q = project(H_l, H_c, params, mask)
    if pool_activation:
        P2, Q2 = P, Q
    else:
        P2, Q2 = project(H_l, H_c, params, mask, activate=False)
    maps, pooled = [], []
    for qh in params.q:
        A = interaction_from_projections(P, Q, qh, mask)
        maps.append(A)
        pooled.append(nc.sum_pool_1d(pooling_from_projections(P2, A, Q2), params.stride))
    f = pooled[0]
    for extra in pooled[1:]:
        f = fuse_heads(f, extra)
    return BafnOutput(f, maps)


def consolidate_heads(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Average the per-head maps into a single map."""
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise nc.DimensionError(f"consolidate_heads: shape mismatch {sorted(shapes)}")
    return np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in maps]), axis=0)


def rank_lines(scores: Sequence[float], line_numbers: Sequence[int],
               mask: Sequence[bool] | None = None) -> list[tuple[int, float]]:
    """(line_number, score) pairs, score descending, ties by ascending line number."""
    pairs = [(int(n), float(s)) for i, (n, s) in enumerate(zip(line_numbers, scores))
             if mask is None or mask[i]]
    pairs.sort(key=lambda p: (-p[1], p[0]))
    return pairs


def line_scores(A_single: np.ndarray, line_numbers: Sequence[int],
                mask: Sequence[bool] | None = None) -> list[tuple[int, float]]:
    """Rank lines by the diagonal of the consolidated map."""
    return rank_lines(np.diag(A_single), line_numbers, mask)
