"""Exact noise prediction for diagonal-Gaussian source models.

For one component with data mean ``mu`` and std ``s`` the noised marginal at
step ``t`` is ``N(sqrt(ab) mu, ab s^2 + 1 - ab)`` and::

    E[x0 | x_t] = mu + sqrt(ab) s^2 / v * (x_t - sqrt(ab) mu)
    eps*        = (x_t - sqrt(ab) E[x0 | x_t]) / sqrt(1 - ab)

The unconditional branch mixes every component (labels and composites) with
responsibilities computed in log space.
"""

from __future__ import annotations

import itertools
import math
from typing import Mapping, Sequence

import numpy as np

from zsep import _accel
from zsep.denoiser.base import Denoiser
from zsep.denoiser.conditions import Composite, Condition, Label, Null, Random
from zsep.schedule import NoiseSchedule

_LOG2PI = math.log(2.0 * math.pi)


class GaussianSourceModel:
    """Per-label diagonal Gaussians plus derived composite components.

    Composite ``(i, j, ...)`` gets mean ``sum(mu)`` and variance ``sum(s^2)``
    (sums of independent Gaussians). ``priors`` maps condition keys to
    non-negative weights and is normalized; the default is uniform. Keys left
    out of ``priors`` get weight zero, and zero-weight components drop out of
    the Null mixture while staying reachable as explicit conditions.
    """

    def __init__(self, means: Mapping[int, np.ndarray], stds: Mapping[int, np.ndarray],
                 composites: Sequence[Sequence[int]] | None = None,
                 priors: Mapping[str, float] | None = None):
        if set(means) != set(stds) or not means:
            raise ValueError("means and stds must cover the same non-empty label set")
        self.label_ids = sorted(int(k) for k in means)
        shape = np.shape(means[self.label_ids[0]])
        self.means: dict[int, np.ndarray] = {}
        self.stds: dict[int, np.ndarray] = {}
        for k in self.label_ids:
            mu = np.asarray(means[k], dtype=np.float64)
            s = np.asarray(stds[k], dtype=np.float64)
            if mu.shape != shape or s.shape != shape:
                raise ValueError("all mean/std grids must share one shape")
            if np.any(s <= 0) or not np.all(np.isfinite(s)) or not np.all(np.isfinite(mu)):
                raise ValueError(f"label {k}: stds must be positive and everything finite")
            self.means[k], self.stds[k] = mu, s
        self.shape = shape
        if composites is None:
            composites = list(itertools.combinations(self.label_ids, 2))
        self.composites = [Composite.of(*ids) for ids in composites]
        for comp in self.composites:
            missing = set(comp.ids) - set(self.label_ids)
            if missing:
                raise ValueError(f"composite {comp.ids} references unknown labels {sorted(missing)}")

        components: list[Condition] = [Label(k) for k in self.label_ids] + list(self.composites)
        w = np.ones(len(components))
        if priors is not None:
            unknown = set(priors) - {c.key() for c in components}
            if unknown:
                raise ValueError(f"priors for unknown conditions: {sorted(unknown)}")
            w = np.array([float(priors.get(c.key(), 0.0)) for c in components])
            if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
                raise ValueError("prior weights must be finite, non-negative and not all zero")
        keep = w > 0
        self.components = [c for c, k in zip(components, keep) if k]
        self.priors = w[keep] / w[keep].sum()
        self.comp_means = np.stack([self._mean_var(c)[0].ravel() for c in self.components])
        self.comp_vars = np.stack([self._mean_var(c)[1].ravel() for c in self.components])

    def _mean_var(self, c: Condition) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(c, Label):
            if c.id not in self.means:
                raise KeyError(f"unknown label id {c.id}")
            return self.means[c.id], self.stds[c.id] ** 2
        if isinstance(c, Composite):
            for i in c.ids:
                if i not in self.means:
                    raise KeyError(f"unknown label id {i}")
            mu = np.sum([self.means[i] for i in c.ids], axis=0)
            var = np.sum([self.stds[i] ** 2 for i in c.ids], axis=0)
            return mu, var
        raise ValueError(f"condition {c!r} has no single Gaussian component")

    def mean_var(self, c: Condition) -> tuple[np.ndarray, np.ndarray]:
        return self._mean_var(c)

    def sample(self, c: Condition, stream, n: int) -> np.ndarray:
        mu, var = self._mean_var(c)
        return mu + np.sqrt(var) * stream.normal((n, *self.shape))

    @classmethod
    def fit(cls, dataset, min_std: float = 1e-3, composites=None, priors=None) -> "GaussianSourceModel":
        """Moment-match each label from the singleton samples of a dataset."""
        by_label: dict[int, list[np.ndarray]] = {}
        for cond, g in dataset:
            if isinstance(cond, Label):
                by_label.setdefault(cond.id, []).append(np.asarray(g, dtype=np.float64))
        if not by_label:
            raise ValueError("dataset has no single-label samples")
        means, stds = {}, {}
        for k, gs in by_label.items():
            arr = np.stack(gs)
            means[k] = arr.mean(axis=0)
            stds[k] = np.maximum(arr.std(axis=0), min_std)
        return cls(means, stds, composites=composites, priors=priors)


# -- posterior kernels ----------------------------------------------------------


def _mixture_posterior_numpy(x, means, vars_, logpi, ab):
    """Returns (E[x0|x_t] of shape (B, D), responsibilities (B, K))."""
    sab = math.sqrt(ab)
    m = sab * means                                  # (K, D)
    v = ab * vars_ + (1.0 - ab)                      # (K, D)
    diff = x[:, None, :] - m[None, :, :]             # (B, K, D)
    ll = -0.5 * np.sum(diff * diff / v + np.log(v) + _LOG2PI, axis=2) + logpi
    ll -= ll.max(axis=1, keepdims=True)
    r = np.exp(ll)
    r /= r.sum(axis=1, keepdims=True)
    gain = sab * vars_ / v                           # (K, D)
    e_k = means[None, :, :] + gain[None, :, :] * diff
    return np.einsum("bk,bkd->bd", r, e_k), r


@_accel.njit
def _mixture_posterior_loop(x, means, vars_, logpi, ab):
    B, D = x.shape
    K = means.shape[0]
    sab = math.sqrt(ab)
    e = np.zeros((B, D))
    r = np.empty((B, K))
    ll = np.empty(K)
    for b in range(B):
        top = -np.inf
        for k in range(K):
            acc = 0.0
            for d in range(D):
                v = ab * vars_[k, d] + (1.0 - ab)
                diff = x[b, d] - sab * means[k, d]
                acc += diff * diff / v + math.log(v) + _LOG2PI
            ll[k] = -0.5 * acc + logpi[k]
            if ll[k] > top:
                top = ll[k]
        tot = 0.0
        for k in range(K):
            r[b, k] = math.exp(ll[k] - top)
            tot += r[b, k]
        for k in range(K):
            r[b, k] /= tot
            for d in range(D):
                v = ab * vars_[k, d] + (1.0 - ab)
                diff = x[b, d] - sab * means[k, d]
                e[b, d] += r[b, k] * (means[k, d] + sab * vars_[k, d] / v * diff)
    return e, r


def mixture_posterior(x, means, vars_, logpi, ab, use_numba: bool | None = None):
    use = _accel.USE_NUMBA if use_numba is None else use_numba
    if use:
        return _mixture_posterior_loop(np.ascontiguousarray(x, dtype=np.float64), means, vars_, logpi, float(ab))
    return _mixture_posterior_numpy(np.asarray(x, dtype=np.float64), means, vars_, logpi, float(ab))


def analytic_eps(model: GaussianSourceModel, sched: NoiseSchedule, x_t: np.ndarray, c: Condition, t: int,
                 return_resp: bool = False):
    """Bayes-optimal noise prediction under ``model`` (see module docstring)."""
    if isinstance(c, Random):
        raise ValueError("the analytic model has no component for a Random prompt")
    ab = float(sched.alpha_bars[int(t)])
    if not 0.0 < ab < 1.0:
        raise ValueError(f"timestep {t} has alpha_bar={ab}; need t >= 1")
    x = np.asarray(x_t)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    if x.shape[-len(model.shape):] != model.shape:
        raise ValueError(f"grid shape {x.shape} does not end with model shape {model.shape}")
    lead = x.shape[: x.ndim - len(model.shape)]
    flat = x.reshape(-1, int(np.prod(model.shape))).astype(np.float64)
    sab = math.sqrt(ab)
    resp = None
    if isinstance(c, Null):
        e, resp = mixture_posterior(flat, model.comp_means, model.comp_vars, np.log(model.priors), ab)
    else:
        mu, var = model.mean_var(c)
        mu, var = mu.ravel(), var.ravel()
        v = ab * var + (1.0 - ab)
        e = mu + (sab * var / v) * (flat - sab * mu)
    eps = (flat - sab * e) / math.sqrt(1.0 - ab)
    eps = eps.reshape(*lead, *model.shape).astype(dtype, copy=False)
    if return_resp:
        return eps, resp
    return eps


class AnalyticDenoiser(Denoiser):
    def __init__(self, model: GaussianSourceModel, sched: NoiseSchedule):
        self.model = model
        self.sched = sched

    def _eps(self, x_t, c, t):
        return analytic_eps(self.model, self.sched, x_t, c, t)

    def supports(self, c):
        if isinstance(c, Null):
            return True
        if isinstance(c, Label):
            return c.id in self.model.means
        if isinstance(c, Composite):
            return all(i in self.model.means for i in c.ids)
        return False
