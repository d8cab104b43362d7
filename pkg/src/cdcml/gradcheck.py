"""Central finite-difference checking of every analytic gradient.

The checker is deliberately independent of the backward passes: it
re-evaluates the forward computation at perturbed inputs and compares
the resulting slope against the analytic gradient. Dropout masks and
batch statistics are frozen across probes by reusing the same seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import (
    LossConfig,
    cfm_loss,
    cfr_loss,
    sfr_loss,
    sim_mse_loss,
    va_mse_loss,
)
from .nn import (
    LayerSpec,
    Network,
    affine,
    batch_norm,
    dropout,
    relu,
    sigmoid,
)
from .va import SigmaProvenance, SimilarityScale

FD_STEP = 1e-5

LAYER_TARGETS = ("affine", "batch_norm", "relu", "sigmoid", "dropout", "stack")
LOSS_TARGETS = ("cfr", "cfm", "sfr", "sim_mse", "va_mse")
ALL_TARGETS = LOSS_TARGETS + LAYER_TARGETS


def numerical_grad(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Elementwise central differences of a scalar function of an array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over entries of |a - n| / max(1, |a|, |n|).

    The unit floor in the denominator turns the comparison into an
    absolute one for small gradient entries, which keeps finite-
    difference roundoff from dominating the ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _va_labels(rng: np.random.Generator, b: int) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=(b, 2))


def _companions(rng: np.random.Generator, b: int) -> np.ndarray:
    offs = rng.integers(1, b, size=b)
    return (np.arange(b) + offs) % b


def check_loss(target: str, seed: int) -> float:
    """FD-check one loss on a random small batch; returns the max rel error."""
    rng = np.random.default_rng([seed, 17])
    b = int(rng.integers(4, 8))
    dim = int(rng.integers(5, 13))
    cfg = LossConfig(alpha=float(rng.uniform(0.2, 1.2)))
    worst = 0.0

    if target == "cfr":
        u = rng.normal(0.0, 1.0, size=(b, dim))
        w = rng.normal(0.0, 1.0, size=(b, dim))
        yi = _va_labels(rng, b)
        ym = _va_labels(rng, b)
        scale = SimilarityScale(0.5, SigmaProvenance("exact"))
        d = np.sqrt(np.sum((yi - ym) ** 2, axis=1))
        s_pos = np.exp(-d / scale.sigma)
        j_mus = _companions(rng, b)
        j_img = _companions(rng, b)

        def run():
            return cfr_loss(u, w, s_pos, yi, ym, scale, j_mus, j_img, cfg)

        report = run()
        for name, arr in (("img_emb", u), ("mus_emb", w)):
            num = numerical_grad(lambda: run().total, arr)
            worst = max(worst, max_rel_error(report.grads[name], num))
    elif target == "cfm":
        u = rng.normal(0.0, 0.6, size=(b, dim))
        w = rng.normal(0.0, 0.6, size=(b, dim))

        def run():
            return cfm_loss(u, w, cfg)

        report = run()
        for name, arr in (("img_emb", u), ("mus_emb", w)):
            num = numerical_grad(lambda: run().total, arr)
            worst = max(worst, max_rel_error(report.grads[name], num))
    elif target == "sfr":
        e = rng.normal(0.0, 1.0, size=(b, dim))
        y = _va_labels(rng, b)
        j = _companions(rng, b)
        k = (j + 1) % b
        for i in range(b):  # nudge until (i, j, k) is a distinct triple
            while k[i] == i or k[i] == j[i]:
                k[i] = (k[i] + 1) % b

        def run():
            return sfr_loss(e, y, j, k, cfg, modality="image")

        report = run()
        num = numerical_grad(lambda: run().total, e)
        worst = max_rel_error(report.grads["img_emb"], num)
    elif target == "sim_mse":
        pred = rng.uniform(0.05, 0.95, size=b)
        true = rng.uniform(0.05, 0.95, size=b)

        def run():
            return sim_mse_loss(pred, true)

        report = run()
        num = numerical_grad(lambda: run().total, pred)
        worst = max_rel_error(report.grads["sim_pred"], num)
    elif target == "va_mse":
        pred = rng.uniform(0.05, 0.95, size=(b, 2))
        true = _va_labels(rng, b)

        def run():
            return va_mse_loss(pred, true, modality="image")

        report = run()
        num = numerical_grad(lambda: run().total, pred)
        worst = max_rel_error(report.grads["img_va_pred"], num)
    else:
        raise ValueError(f"unknown loss target {target!r}")
    return worst


def _specs_for(kind: str, din: int, dout: int) -> list[LayerSpec]:
    if kind == "affine":
        return [affine(din, dout)]
    if kind == "batch_norm":
        return [batch_norm(din)]
    if kind == "relu":
        return [relu(din)]
    if kind == "sigmoid":
        return [sigmoid(din)]
    if kind == "dropout":
        return [dropout(din, 0.5)]
    if kind == "stack":
        return [
            affine(din, dout),
            batch_norm(dout),
            relu(dout),
            dropout(dout, 0.5),
            affine(dout, dout),
            sigmoid(dout),
        ]
    raise ValueError(f"unknown layer target {kind!r}")


def check_layer(target: str, seed: int, mode: str = "train") -> float:
    """FD-check one layer kind (or a mixed stack) against its backward pass.

    The scalar probe is a fixed random linear functional of the network
    output, so the analytic gradient is backward() driven with the
    projection matrix as the output gradient.
    """
    rng = np.random.default_rng([seed, 23])
    b = int(rng.integers(3, 7))
    din = int(rng.integers(4, 10))
    dout = int(rng.integers(3, 9))
    net = Network(_specs_for(target, din, dout), seed=int(rng.integers(2**31)))
    x = rng.normal(0.0, 1.0, size=(b, din))
    proj = rng.normal(0.0, 1.0, size=(b, net.output_dim))
    dropout_seed = int(rng.integers(2**31))

    def scalar() -> float:
        out, _ = net.forward(x, mode=mode, dropout_seed=dropout_seed, update_stats=False)
        return float(np.sum(out * proj))

    out, cache = net.forward(x, mode=mode, dropout_seed=dropout_seed, update_stats=False)
    dx, grads = net.backward(cache, proj)

    worst = max_rel_error(dx, numerical_grad(scalar, x))
    for idx, layer_grads in enumerate(grads):
        for name, g in layer_grads.items():
            num = numerical_grad(scalar, net.params[idx][name])
            worst = max(worst, max_rel_error(g, num))
    return worst


@dataclass
class GradCheckResult:
    target: str
    max_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_error < 1e-6


def run_gradcheck(trials: int = 100, seed: int = 0) -> list[GradCheckResult]:
    """Check every loss and every layer kind over seeded random batches."""
    results = []
    for target in LOSS_TARGETS:
        worst = 0.0
        for t in range(trials):
            worst = max(worst, check_loss(target, seed=seed * 100_003 + t))
        results.append(GradCheckResult(target=target, max_error=worst, trials=trials))
    for target in LAYER_TARGETS:
        worst = 0.0
        for t in range(trials):
            mode = "train" if t % 2 == 0 else "eval"
            worst = max(worst, check_layer(target, seed=seed * 100_003 + t, mode=mode))
        results.append(GradCheckResult(target=target, max_error=worst, trials=trials))
    return results
