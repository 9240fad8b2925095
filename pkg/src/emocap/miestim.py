"""Mutual-information machinery for the decorrelation penalty.

Three pieces: an exact discrete MI computation used as a reference
oracle, a small variational network modeling q(y|x) as a diagonal
Gaussian, and the sample-based upper-bound estimate used as the stage-1
loss to strip transcription content out of the speech embedding.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

LOG_2PI = float(np.log(2.0 * np.pi))
LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0


class TableError(ValueError):
    pass


def mi_discrete(probs) -> float:
    """Exact mutual information (nats) of a discrete joint table.

    Sum of p * ln(p / (p_row * p_col)) with 0*ln(0) := 0.
    """
    t = np.asarray(probs, dtype=np.float64)
    if t.ndim != 2:
        raise TableError(f"joint table must be a matrix, got shape {t.shape}")
    if np.any(t < 0):
        raise TableError("joint table has negative entries")
    total = t.sum()
    if abs(total - 1.0) > 1e-9:
        raise TableError(f"joint table sums to {total}, expected 1")
    pr = t.sum(axis=1, keepdims=True)
    pc = t.sum(axis=0, keepdims=True)
    mask = t > 0
    mi = float(np.sum(t[mask] * np.log(t[mask] / (pr @ pc)[mask])))
    return max(mi, 0.0)


# ---------------------------------------------------------------------------
# variational conditional network


def init_varnet(rng: np.random.Generator, d_x: int, d_y: int, hidden: int = 64) -> dict:
    """Two-layer perceptron producing mean and log-variance of q(y|x)."""
    from .qformer import xavier
    return {
        "varnet.W1": xavier(rng, (d_x, hidden)),
        "varnet.b1": np.zeros(hidden),
        "varnet.Wm": xavier(rng, (hidden, d_y)),
        "varnet.bm": np.zeros(d_y),
        "varnet.Wv": xavier(rng, (hidden, d_y)),
        "varnet.bv": np.zeros(d_y),
    }


def _node(v):
    return v if isinstance(v, ad.Node) else ad.const(v)


def varnet_forward(x, params):
    """x: (n, d_x) -> (mu, logvar) Nodes of shape (n, d_y).

    Log-variance is clamped to [-8, 8] to keep densities non-degenerate.
    """
    x = _node(x)
    p = {k: _node(v) for k, v in params.items()}
    h = ad.tanh(ad.add_rowvec(ad.matmul(x, p["varnet.W1"]), p["varnet.b1"]))
    mu = ad.add_rowvec(ad.matmul(h, p["varnet.Wm"]), p["varnet.bm"])
    logvar = ad.clip(ad.add_rowvec(ad.matmul(h, p["varnet.Wv"]), p["varnet.bv"]),
                     LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def gaussian_loglik_rows(mu, logvar, y):
    """Row-wise diagonal-Gaussian log density: (n, d) inputs -> (n,) Node."""
    mu, logvar, y = _node(mu), _node(logvar), _node(y)
    resid = ad.square(ad.sub(y, mu))
    inv2var = ad.scale(ad.exp(ad.neg(logvar)), 0.5)
    terms = ad.add(ad.scale(logvar, 0.5), ad.mul(resid, inv2var))
    per_row = ad.mean_rows(ad.transpose(terms))  # sums/d over columns per row
    d = mu.value.shape[1]
    return ad.add_const(ad.scale(per_row, -d), -0.5 * LOG_2PI * d)


def _row(v):
    """Reshape a (d,) Node into a (1, d) Node, gradients passing through."""
    return ad.Node(v.value[None, :].copy(), (v,), lambda g: (g[0],))


def varnet_loglik(params, x, y):
    """Scalar log q(y|x) for one pooled pair (both d-vectors)."""
    xn = _node(np.asarray(x, dtype=np.float64) if not isinstance(x, ad.Node) else x)
    yn = _node(np.asarray(y, dtype=np.float64) if not isinstance(y, ad.Node) else y)
    if xn.value.ndim == 1:
        xn = _row(xn)
    if yn.value.ndim == 1:
        yn = _row(yn)
    d_in = _node(params["varnet.W1"]).value.shape[0]
    if xn.value.shape[1] != d_in:
        raise ad.ShapeError(
            f"varnet_loglik: x dim {xn.value.shape[1]} != net input {d_in}"
        )
    mu, logvar = varnet_forward(xn, params)
    if yn.value.shape != mu.value.shape:
        raise ad.ShapeError(
            f"varnet_loglik: y shape {yn.value.shape} != net output {mu.value.shape}"
        )
    return ad.sum_all(gaussian_loglik_rows(mu, logvar, yn))


def club_upper_bound(xs, ys, params):
    """Sample-based MI upper bound (differentiable Node).

    (1/n^2) * sum_i sum_j [log q(y_i|x_i) - log q(y_j|x_i)] over aligned
    pairs; the variational net parameters may be plain arrays (frozen) or
    Nodes (trainable).
    """
    xs, ys = _node(xs), _node(ys)
    n = xs.value.shape[0]
    if n < 2:
        raise ValueError(f"club_upper_bound: need at least 2 pairs, got {n}")
    if ys.value.shape[0] != n:
        raise ad.ShapeError(f"club_upper_bound: {n} xs vs {ys.value.shape[0]} ys")
    mu, logvar = varnet_forward(xs, params)
    pos = ad.mean_all(gaussian_loglik_rows(mu, logvar, ys))
    neg_terms = []
    for i in range(n):
        mu_i = ad.mean_rows(ad.slice_rows(mu, i, i + 1))
        lv_i = ad.mean_rows(ad.slice_rows(logvar, i, i + 1))
        resid = ad.square(ad.add_rowvec(ys, ad.neg(mu_i)))
        inv2var = ad.scale(ad.exp(ad.neg(lv_i)), 0.5)
        quad = ad.sum_all(ad.mul_rowvec(resid, inv2var))
        lv_sum = ad.scale(ad.sum_all(lv_i), 0.5 * n)
        d = mu.value.shape[1]
        neg_terms.append(ad.add_const(ad.neg(ad.add(quad, lv_sum)),
                                      -0.5 * LOG_2PI * d * n))
    neg = ad.scale(_sum_nodes(neg_terms), 1.0 / (n * n))
    return ad.sub(pos, neg)


def _sum_nodes(nodes):
    total = nodes[0]
    for t in nodes[1:]:
        total = ad.add(total, t)
    return total


def club_estimate(xs, ys, params) -> float:
    """Value-only vectorized CLUB estimate for large sample sets."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    mu, logvar = varnet_forward(ad.const(xs), params)
    mu, logvar = mu.value, logvar.value
    var = np.exp(logvar)
    n, d = mu.shape
    pos = np.mean(np.sum(-0.5 * LOG_2PI - 0.5 * logvar
                         - (ys - mu) ** 2 / (2 * var), axis=1))
    neg = 0.0
    for i in range(n):
        ll = np.sum(-0.5 * LOG_2PI - 0.5 * logvar[i]
                    - (ys - mu[i]) ** 2 / (2 * var[i]), axis=1)
        neg += ll.sum()
    return float(pos - neg / (n * n))


def train_varnet_step(params, xs, ys, lr: float) -> float:
    """One gradient-ascent step on the mean log-likelihood of aligned pairs.

    Updates params in place; returns the pre-step mean log-likelihood.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) == 0:
        raise ValueError("train_varnet_step: empty batch")
    nodes = {k: ad.param(v) for k, v in params.items()}
    mu, logvar = varnet_forward(ad.const(xs), nodes)
    mean_ll = ad.mean_all(gaussian_loglik_rows(mu, logvar, ad.const(ys)))
    if not np.isfinite(mean_ll.value):
        raise FloatingPointError(
            f"non-finite variational log-likelihood {mean_ll.value} "
            f"(|mu| max {np.abs(mu.value).max()}, logvar range "
            f"[{logvar.value.min()}, {logvar.value.max()}])"
        )
    ad.backward(mean_ll)
    for k in params:
        params[k] = params[k] + lr * nodes[k].grad
    return float(mean_ll.value)
