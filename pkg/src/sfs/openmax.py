"""Open-set recalibration: per-class mean activation vectors with Weibull
tail models that attenuate class scores and route mass to an unknown bucket.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNKNOWN = -1


@dataclass
class WeibullFit:
    shape: float
    scale: float
    shift: float = 0.0

    def cdf(self, x: float) -> float:
        z = x - self.shift
        if z <= 0.0:
            return 0.0
        return 1.0 - np.exp(-((z / self.scale) ** self.shape))


@dataclass
class OpenMaxModel:
    tail_size: int = 20
    alpha_top: int = 3
    mav: dict = field(default_factory=dict)       # class -> D-vector
    weibull: dict = field(default_factory=dict)   # class -> WeibullFit
    uncalibrated: set = field(default_factory=set)


def weibull_mle(samples: np.ndarray, iters: int = 100) -> WeibullFit:
    """Two-parameter Weibull maximum-likelihood fit (shift fixed at 0) via
    Newton iteration on the shape parameter."""
    x = np.asarray(samples, dtype=np.float64)
    x = x[x > 0]
    if x.size == 0:
        return WeibullFit(shape=1.0, scale=1e-12)
    if x.size == 1 or np.allclose(x, x[0]):
        return WeibullFit(shape=1.0, scale=float(max(x.mean(), 1e-12)))
    lx = np.log(x)
    mean_lx = lx.mean()
    k = 1.0
    for _ in range(iters):
        xk = x ** k
        a = (xk * lx).sum() / xk.sum()
        f = 1.0 / k - (a - mean_lx)
        b = (xk * lx * lx).sum() / xk.sum()
        fprime = -1.0 / k ** 2 - (b - a * a)
        step = f / fprime
        k_new = k - step
        if k_new <= 0:
            k_new = k / 2.0
        if abs(k_new - k) < 1e-12:
            k = k_new
            break
        k = k_new
    scale = (np.mean(x ** k)) ** (1.0 / k)
    return WeibullFit(shape=float(k), scale=float(scale))


def openmax_fit(activations_per_class: dict, tail_size: int = 20,
                alpha_top: int = 3) -> OpenMaxModel:
    """activations_per_class: class_id -> [n, D] correctly-classified
    activation vectors.  Classes with fewer than tail_size samples are
    flagged uncalibrated and never revised at prediction time."""
    model = OpenMaxModel(tail_size=tail_size, alpha_top=alpha_top)
    for cid, acts in activations_per_class.items():
        acts = np.asarray(acts, dtype=np.float64)
        mav = acts.mean(axis=0)
        model.mav[cid] = mav
        if len(acts) < tail_size:
            model.uncalibrated.add(cid)
            continue
        dists = np.linalg.norm(acts - mav, axis=1)
        tail = np.sort(dists)[-tail_size:]
        model.weibull[cid] = weibull_mle(tail)
    return model


def openmax_predict(raw_scores: dict, query_activation: np.ndarray,
                    model: OpenMaxModel) -> dict:
    """Revise nonnegative per-class scores, accumulating attenuated mass
    into the UNKNOWN bucket; returns a normalized probability dict over
    {classes} | {UNKNOWN}."""
    q = np.asarray(query_activation, dtype=np.float64)
    classes = sorted(raw_scores)
    ranked = sorted(classes, key=lambda c: (-raw_scores[c], c))
    alpha = min(model.alpha_top, len(ranked))
    revised = {c: float(raw_scores[c]) for c in classes}
    unknown = 0.0
    for rank, cid in enumerate(ranked[:alpha], start=1):
        if cid in model.uncalibrated or cid not in model.weibull:
            continue
        dist = float(np.linalg.norm(q - model.mav[cid]))
        cdf = model.weibull[cid].cdf(dist)
        omega = 1.0 - ((alpha - rank + 1) / alpha) * cdf
        moved = revised[cid] * (1.0 - omega)
        revised[cid] -= moved
        unknown += moved
    revised[UNKNOWN] = unknown
    total = sum(revised.values())
    if total <= 0.0:
        n = len(revised)
        return {c: 1.0 / n for c in revised}
    return {c: v / total for c, v in revised.items()}
