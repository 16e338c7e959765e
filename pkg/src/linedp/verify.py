"""Finite-difference checks of every differentiable piece, small enough to run in seconds."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import numcore as nc
from .bafn import BafnParams, bafn_forward
from .context import GruParams, bigru_forward
from .corpus import PreparedFile, preprocess_line
from .encoder import build_vocab


def _weighted(out: nc.Node, w: np.ndarray) -> nc.Node:
    # contract with a fixed random weight so no gradient entry is trivially uniform
    return nc.sum(nc.mul(out, nc.constant(w)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], nc.Node], list[nc.Node]]]:
    """(name, loss builder, parameters) for each primitive op."""
    a = nc.parameter(rng.normal(size=(3, 4)), "a")
    b = nc.parameter(rng.normal(size=(3, 4)), "b")
    c = nc.parameter(rng.normal(size=(4, 2)), "c")
    s = nc.parameter(rng.normal(size=(4, 4)), "s")
    r = nc.parameter(rng.normal(size=(1, 4)), "r")
    k = nc.parameter(rng.normal(size=(1, 6)), "k")
    z = nc.parameter(_away_from_zero(rng, (3, 4)), "z")
    logit = nc.parameter(np.array([[0.3]]), "logit")
    w34, w32, w44 = rng.normal(size=(3, 4)), rng.normal(size=(3, 2)), rng.normal(size=(4, 4))

    def drop():
        return _weighted(nc.dropout(a, 0.3, np.random.default_rng(7), True), w34)

    return [
        ("matmul", lambda: _weighted(nc.matmul(a, c), w32), [a, c]),
        ("transpose", lambda: _weighted(nc.transpose(nc.transpose(a)), w34), [a]),
        ("add", lambda: _weighted(nc.add(a, b), w34), [a, b]),
        ("add + broadcast", lambda: _weighted(nc.add(a, nc.broadcast_rows(r, 3)), w34), [a, r]),
        ("sub", lambda: _weighted(nc.sub(a, b), w34), [a, b]),
        ("mul", lambda: _weighted(nc.mul(a, b), w34), [a, b]),
        ("scale", lambda: _weighted(nc.scale(a, -1.7), w34), [a]),
        ("relu", lambda: _weighted(nc.relu(z), w34), [z]),
        ("sigmoid", lambda: _weighted(nc.sigmoid(a), w34), [a]),
        ("tanh", lambda: _weighted(nc.tanh(a), w34), [a]),
        ("concat_cols", lambda: _weighted(nc.concat_cols([a, b]), np.hstack([w34, w34[::-1]])), [a, b]),
        ("concat_rows", lambda: _weighted(nc.concat_rows([a, r]), np.vstack([w34, w34[:1]])), [a, r]),
        ("slice_rows", lambda: _weighted(nc.slice_rows(a, 1, 3), w34[:2]), [a]),
        ("slice_cols", lambda: _weighted(nc.slice_cols(a, 1, 3), w32), [a]),
        ("take_rows", lambda: _weighted(nc.take_rows(a, [2, 0, 2]), w34), [a]),
        ("broadcast_rows", lambda: _weighted(nc.broadcast_rows(r, 3), w34), [r]),
        ("diag", lambda: _weighted(nc.diag(s), w44[:1]), [s]),
        ("masked_zero", lambda: _weighted(nc.masked_zero(s, rows=[1], cols=[2]), w44), [s]),
        ("sum", lambda: nc.sum(nc.mul(a, a)), [a]),
        ("sum axis=0", lambda: _weighted(nc.sum(a, axis=0), w34[:1]), [a]),
        ("sum axis=1", lambda: _weighted(nc.sum(a, axis=1), w34[:1, :3]), [a]),
        ("mean", lambda: nc.mean(nc.mul(a, b)), [a, b]),
        ("sum_pool_1d", lambda: _weighted(nc.sum_pool_1d(k, 3), w32[:1]), [k]),
        ("layer_norm_rows", lambda: _weighted(nc.layer_norm_rows(a), w34), [a]),
        ("dropout", drop, [a]),
        ("weighted_bce (defective)",
         lambda: nc.weighted_bce(nc.sigmoid(logit), 1.0, 4.0), [logit]),
        ("weighted_bce (clean)",
         lambda: nc.weighted_bce(nc.sigmoid(logit), 0.0, 4.0), [logit]),
    ]


def bigru_case(rng: np.random.Generator, steps: int = 4, d: int = 3, u: int = 2):
    X = nc.parameter(rng.normal(size=(steps, d)), "X")
    fwd, bwd = GruParams.init(d, u, rng), GruParams.init(d, u, rng)
    for p in (fwd, bwd):
        for name in ("b_z", "b_r", "b_h"):
            getattr(p, name).value[:] = rng.normal(scale=0.3, size=(1, u))
    w = rng.normal(size=(steps, 2 * u))
    params = [X] + list(fwd.named("f").values()) + list(bwd.named("b").values())
    return (lambda: _weighted(bigru_forward(X, fwd, bwd), w)), params


def bafn_case(rng: np.random.Generator, pool_activation: bool):
    n, d, dc, k, stride = 4, 3, 2, 6, 3
    H_l = nc.parameter(rng.normal(size=(n, d)), "H_l")
    H_c = nc.parameter(rng.normal(size=(n, dc)), "H_c")
    params = BafnParams.init(d, dc, k, stride, rng)
    mask = [True, True, False, True]
    w = rng.normal(size=(1, k // stride))
    w_map = rng.normal(size=(n, n))

    def f():
        out = bafn_forward(H_l, H_c, params, mask, pool_activation)
        # include the maps so the attention path is checked along with f
        m = nc.add(_weighted(out.maps[0], w_map), _weighted(out.maps[1], w_map.T))
        return nc.add(_weighted(out.f, w), nc.scale(m, 0.1))

    return f, [H_l, H_c] + list(params.named().values())


def full_model_case(rng: np.random.Generator):
    from .model import LineDefectModel, ModelConfig

    lines = ["int total = count + 1;", 'log("done " + total);', "return total;"]
    f = PreparedFile("Demo.java", [(i + 1, preprocess_line(t)) for i, t in enumerate(lines)],
                     True, [False, True, False])
    cfg = ModelConfig(embed_dim=4, hidden=3, k=6, stride=3, min_frequency=1,
                      seed=int(rng.integers(1 << 31)))
    model = LineDefectModel(cfg, build_vocab([f], 1))

    def loss():
        return model.file_loss(f, 3.0, True, np.random.default_rng(11))

    return loss, list(model.params.values())


def run_gradient_suite(seed: int = 0) -> list[tuple[str, float]]:
    """Max relative error for every case."""
    rng = np.random.default_rng(seed)
    out = []
    for name, f, params in primitive_cases(rng):
        out.append((f"primitive {name}", nc.gradient_check(f, params)))
    f, params = bigru_case(rng)
    out.append(("Bi-GRU, 4 steps", nc.gradient_check(f, params)))
    for act in (True, False):
        f, params = bafn_case(rng, act)
        label = "sigmoid pooling" if act else "literal pooling"
        out.append((f"BAFN two heads, masked, {label}", nc.gradient_check(f, params)))
    f, params = full_model_case(rng)
    out.append(("full model loss, 3-line file", nc.gradient_check(f, params)))
    return out
