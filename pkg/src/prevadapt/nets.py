"""Minimal feed-forward network core with analytic gradients.

Everything runs on float64 numpy arrays and is deterministic given a seed.
Networks are ReLU MLPs producing class logits; losses are (weighted)
cross-entropies against hard labels or soft target distributions, with an
optional per-sample additive logit offset (used to fold a frozen log-prior
into the loss without tracking gradients through it).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class ConfigurationError(ValueError):
    """Invalid shapes or settings supplied to a network operation."""


class NumericsError(FloatingPointError):
    """A loss or gradient became non-finite during evaluation."""


@dataclass
class MLPParams:
    """Layered weight/bias collection for a ReLU MLP.

    weights[i] has shape (fan_in, fan_out); biases[i] has shape (fan_out,).
    Hidden layers use ReLU, the final layer emits raw logits.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ConfigurationError("weights and biases must pair up")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ConfigurationError(f"layer {i}: shape mismatch {w.shape} vs {b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ConfigurationError(f"layer {i}: input dim does not chain")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])

    def from_flat(self, flat: np.ndarray) -> "MLPParams":
        """Rebuild params with this object's shapes from a flat vector."""
        out_w, out_b = [], []
        k = 0
        for w in self.weights:
            out_w.append(flat[k:k + w.size].reshape(w.shape).copy())
            k += w.size
        for b in self.biases:
            out_b.append(flat[k:k + b.size].copy())
            k += b.size
        if k != flat.size:
            raise ConfigurationError("flat vector length does not match parameter count")
        return MLPParams(out_w, out_b)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


def init_mlp(dims: Sequence[int], rng: np.random.Generator) -> MLPParams:
    """He-uniform weight init with zero biases for the given layer sizes."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases)


def mlp_forward(params: MLPParams, batch: np.ndarray) -> np.ndarray:
    """Forward pass producing logits, shape (n, out_dim)."""
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ConfigurationError(
            f"batch has {x.shape[1] if x.ndim == 2 else '?'} columns, network expects {params.in_dim}"
        )
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis; rows sum to 1."""
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def nll_loss(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Mean negative log-likelihood of hard labels under probability rows.

    Logs are clamped at log(1e-12) so degenerate rows never produce -inf.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    y = np.atleast_1d(np.asarray(labels))
    if p.shape[0] == 0:
        raise ValueError("nll_loss on an empty batch")
    if y.shape[0] != p.shape[0]:
        raise ValueError("labels do not match batch size")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise ValueError("label outside class range")
    picked = p[np.arange(p.shape[0]), y]
    ll = np.log(np.maximum(picked, LOG_CLAMP))
    if weights is None:
        return float(-np.mean(ll))
    w = np.asarray(weights, dtype=float)
    return float(-np.mean(w * ll))


@dataclass
class LossSpec:
    """Loss description for `backward`.

    kind "cross_entropy": targets are int labels (n,) or soft target rows
    (n, n_classes) summing to 1; logit_offset, if given, is an (n, n_classes)
    additive offset applied before the softmax and treated as a constant
    (no gradient flows into it).
    kind "squared": targets are real values (n,) or (n, out_dim) and the loss
    is the mean squared error of the raw network outputs.
    weights: optional per-sample multipliers, either kind.
    """

    targets: np.ndarray
    weights: np.ndarray | None = None
    logit_offset: np.ndarray | None = None
    kind: str = "cross_entropy"


def _target_rows(spec: LossSpec, n: int, k: int) -> np.ndarray:
    t = np.asarray(spec.targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ValueError("targets do not match batch size")
        rows = np.zeros((n, k))
        rows[np.arange(n), t.astype(int)] = 1.0
        return rows
    if t.shape != (n, k):
        raise ValueError("soft targets must be shaped (n, n_classes)")
    return np.asarray(t, dtype=float)


def backward(params: MLPParams, batch: np.ndarray, spec: LossSpec) -> tuple[float, MLPParams]:
    """Loss value and its analytic gradient with the same shape as the params.

    The loss is mean over the batch of w_n * CE(softmax(logits_n + offset_n),
    target_n), computed through log-softmax so it never hits log(0).
    """
    x = np.asarray(batch, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise ValueError("backward on an empty batch")

    # forward with cached activations
    acts = [x]
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    logits = acts[-1]
    if spec.logit_offset is not None:
        logits = logits + np.asarray(spec.logit_offset, dtype=float)

    k = params.out_dim
    if spec.kind == "cross_entropy":
        targets = _target_rows(spec, n, k)
        logp = log_softmax(logits)
        per_sample = -np.sum(targets * logp, axis=1)
        delta = np.exp(logp) - targets
    elif spec.kind == "squared":
        targets = np.asarray(spec.targets, dtype=float).reshape(n, -1)
        if targets.shape[1] != k:
            raise ValueError("squared-loss targets must match the output dim")
        resid = logits - targets
        per_sample = np.sum(resid * resid, axis=1)
        delta = 2.0 * resid
    else:
        raise ConfigurationError(f"unknown loss kind {spec.kind!r}")
    if spec.weights is not None:
        w_s = np.asarray(spec.weights, dtype=float)
        per_sample = w_s * per_sample
    bad = ~np.isfinite(per_sample)
    if np.any(bad):
        raise NumericsError(f"non-finite loss at batch index {int(np.argmax(bad))}")
    loss = float(np.mean(per_sample))

    # backprop: d loss / d logits, already averaged over the batch
    if spec.weights is not None:
        delta = delta * np.asarray(spec.weights, dtype=float)[:, None]
    delta = delta / n

    gw = [np.empty(0)] * params.n_layers
    gb = [np.empty(0)] * params.n_layers
    for i in range(last, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0.0)
    return loss, MLPParams(gw, gb)


@dataclass
class SgdOptimizer:
    lr: float = 0.1

    def step(self, params: MLPParams, grads: MLPParams) -> None:
        for w, g in zip(params.weights, grads.weights):
            w -= self.lr * g
        for b, g in zip(params.biases, grads.biases):
            b -= self.lr * g


@dataclass
class AdamOptimizer:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: MLPParams, grads: MLPParams) -> None:
        tensors = params.weights + params.biases
        gs = grads.weights + grads.biases
        if not self.m:
            self.m = [np.zeros_like(a) for a in tensors]
            self.v = [np.zeros_like(a) for a in tensors]
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(tensors, gs, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class LbfgsResult:
    x: np.ndarray
    fval: float
    n_iter: int
    converged: bool
    line_search_failed: bool


def lbfgs_minimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    history: int = 10,
    max_iter: int = 100,
    grad_tol: float = 1e-7,
    armijo_c: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 40,
) -> LbfgsResult:
    """L-BFGS with two-loop recursion and backtracking Armijo line search.

    `fun` maps a flat parameter vector to (value, gradient). Only strictly
    decreasing steps are accepted, so the returned value never exceeds the
    initial one. If the line search cannot find a decrease the best point so
    far is returned with `line_search_failed` set.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    if not np.isfinite(f):
        raise NumericsError("objective not finite at the initial point")

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    n_iter = 0

    for n_iter in range(max_iter):
        gnorm = float(np.linalg.norm(g, ord=np.inf))
        if gnorm <= grad_tol:
            return LbfgsResult(x, f, n_iter, True, False)

        # two-loop recursion for the search direction
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            beta = rho * np.dot(y, q)
            q += (a - beta) * s
        d = -q

        dg = float(np.dot(g, d))
        if dg >= 0.0:  # not a descent direction; fall back to steepest descent
            d = -g
            dg = -float(np.dot(g, g))

        step = 1.0 if y_hist else min(1.0, 1.0 / max(gnorm, 1e-12))
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + armijo_c * step * dg:
                accepted = True
                break
            step *= shrink
        if not accepted:
            return LbfgsResult(x, f, n_iter, False, True)

        s = x_new - x
        yv = g_new - g
        sy = float(np.dot(s, yv))
        if sy > 1e-10:  # keep the inverse-Hessian estimate positive definite
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new

    return LbfgsResult(x, f, max_iter, False, False)


def lbfgs_minimize_params(
    objective: Callable[[MLPParams], tuple[float, MLPParams]],
    init: MLPParams,
    **kwargs,
) -> tuple[MLPParams, LbfgsResult]:
    """Run `lbfgs_minimize` over MLP parameters via flatten/unflatten."""

    def flat_fun(v: np.ndarray) -> tuple[float, np.ndarray]:
        f, grads = objective(init.from_flat(v))
        return f, grads.to_flat()

    res = lbfgs_minimize(flat_fun, init.to_flat(), **kwargs)
    return init.from_flat(res.x), res
