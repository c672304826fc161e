"""Mapping clean grids back to terminal noise: DDIM and edit-friendly DDPM inversion.

Memory: a DDPM trace stores one grid per step, i.e. ``O(steps * grid)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from zsep.denoiser.base import ConditionArg, Denoiser
from zsep.denoiser.conditions import NULL
from zsep.rng import Stream
from zsep.sampler import GuidanceConfig, SamplerKind, ddpm_apply, ddpm_mean, generate
from zsep.schedule import NoiseSchedule, StepPlan


@dataclass(frozen=True, eq=False)
class InversionTrace:
    """Result of inverting ``x_0``.

    For DDPM, ``zs[k]`` belongs to reverse step ``k`` of ``plan``. The final
    step has zero variance, so its slot holds the additive residual
    ``x_0 - mu_1(x_1)`` instead of a normalized noise (``final_residual``).
    """

    kind: SamplerKind
    x_T: np.ndarray
    zs: tuple[np.ndarray, ...]
    c_inv: ConditionArg
    plan: StepPlan
    aux_xs: tuple[np.ndarray, ...] | None = None
    final_residual: bool = True
    trace_id: int | None = None

    def __post_init__(self):
        if self.trace_id is None:
            object.__setattr__(self, "trace_id", _content_id(self))
        if self.kind is SamplerKind.DDIM and self.zs:
            raise ValueError("DDIM traces carry no per-step noises")
        if self.kind is SamplerKind.DDPM and len(self.zs) != len(self.plan):
            raise ValueError("DDPM traces need exactly one z per reverse step")


def _content_id(trace: InversionTrace) -> int:
    """Stable 63-bit id from the trace's kind, plan, condition and terminal latent."""
    c = trace.c_inv
    c_key = ",".join(x.key() for x in c) if isinstance(c, tuple) else c.key()
    h = hashlib.sha256(f"{trace.kind.value}|{trace.plan.timesteps}|{c_key}".encode())
    h.update(np.ascontiguousarray(trace.x_T).tobytes())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def ddim_invert(model: Denoiser, sched: NoiseSchedule, plan: StepPlan, x_0: np.ndarray,
                c_inv: ConditionArg = NULL, refine_iters: int = 0, keep_path: bool = False) -> InversionTrace:
    """Run the DDIM recursion upwards from ``x_0``.

    Each ascent ``t_prev -> t`` reuses the noise predicted at the current
    iterate (evaluated with the destination timestep ``t``, since the model is
    undefined at ``t = 0``)::

        x0_hat = (x - sqrt(1 - ab_prev) eps) / sqrt(ab_prev)
        x_t    = sqrt(ab_t) x0_hat + sqrt(1 - ab_t) eps

    ``refine_iters > 0`` re-evaluates ``eps`` at the new point and repeats,
    a fixed-point correction towards the exact inverse of :func:`ddim_step`.
    """
    plan.validate(sched)
    x = np.array(x_0, copy=True)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("x_0 contains non-finite values")
    path = [x.copy()] if keep_path else None
    for t, t_prev in reversed(plan.pairs()):
        ab_t = sched.alpha_bars[t]
        ab_p = sched.alpha_bars[t_prev]
        eps = model.predict_eps(x, c_inv, t)
        x0_hat = (x - math.sqrt(1.0 - ab_p) * eps) / math.sqrt(ab_p)
        x_new = math.sqrt(ab_t) * x0_hat + math.sqrt(1.0 - ab_t) * eps
        for _ in range(refine_iters):
            eps = model.predict_eps(x_new, c_inv, t)
            x0_hat = (x - math.sqrt(1.0 - ab_p) * eps) / math.sqrt(ab_p)
            x_new = math.sqrt(ab_t) * x0_hat + math.sqrt(1.0 - ab_t) * eps
        x = x_new
        if keep_path:
            path.append(x.copy())
    return InversionTrace(SamplerKind.DDIM, x, (), c_inv, plan,
                          aux_xs=tuple(reversed(path)) if keep_path else None)


def _aux_noise(seed, t: int, shape) -> np.ndarray:
    if isinstance(seed, (list, tuple, np.ndarray)):
        return np.stack([Stream(int(s), "ddpm-inv", t).normal(shape[1:]) for s in seed])
    return Stream(int(seed), "ddpm-inv", t).normal(shape)


def _replayable_noise(mu: np.ndarray, target: np.ndarray, sigma: float, residual: bool,
                      max_ulps: int = 8) -> np.ndarray:
    """``z`` solving ``ddpm_apply(mu, sigma, z) == target`` in floating point.

    The algebraic solution is rounded, so replay would land a few ulps off
    ``target``; a sharp denoiser can amplify that drift downstream. Elements
    that miss are nudged through neighbouring floats until the update hits
    ``target`` exactly (when no neighbour does, the rounded value is kept).
    """
    z = (target - mu) / sigma if sigma > 0 else target - mu
    z = z.astype(target.dtype, copy=False)
    miss = ddpm_apply(mu, sigma, z, residual) != target
    for direction in (np.inf, -np.inf):
        cand = z.copy()
        for _ in range(max_ulps):
            if not miss.any():
                return z
            cand = np.nextafter(cand, direction)
            hit = miss & (ddpm_apply(mu, sigma, cand, residual) == target)
            z[hit] = cand[hit]
            miss &= ~hit
    return z


def ddpm_invert(model: Denoiser, sched: NoiseSchedule, plan: StepPlan, x_0: np.ndarray,
                c_inv: ConditionArg = NULL, seed=0, keep_aux: bool = False) -> InversionTrace:
    """Edit-friendly DDPM inversion.

    Draws an independent noisy latent ``x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) n_t``
    for every plan timestep, then extracts ``z = (x_prev - mu_t(x_t)) / sigma_t``
    with ``mu_t`` built from ``eps(x_t, c_inv, t)``. ``seed`` may be one int or
    one per batch row.

    In floating point ``mu_t`` is evaluated at the iterate the sampler will
    actually hold on replay (equal to ``x_t`` up to rounding), and each ``z`` is
    picked among neighbouring floats to land on the next latent (see
    :func:`_replayable_noise`). Rounding therefore never compounds through a
    sensitive denoiser, and the final residual absorbs what is left.
    """
    plan.validate(sched)
    x0 = np.asarray(x_0)
    dtype = x0.dtype if np.issubdtype(x0.dtype, np.floating) else np.float64
    x0 = x0.astype(dtype, copy=False)
    if not np.all(np.isfinite(x0)):
        raise FloatingPointError("x_0 contains non-finite values")
    aux = {0: x0}
    for t in plan.timesteps:
        ab = sched.alpha_bars[t]
        n = _aux_noise(seed, t, x0.shape).astype(dtype)
        aux[t] = (math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * n).astype(dtype)
    zs = []
    pairs = plan.pairs()
    x = aux[plan.timesteps[0]]
    for k, (t, t_prev) in enumerate(pairs):
        # extract z against the iterate replay will hold, so rounding cannot compound
        eps = model.predict_eps(x, c_inv, t)
        mu, sigma = ddpm_mean(sched, x, t, t_prev, eps)
        last = k == len(pairs) - 1
        if sigma <= 0 and not last:
            raise FloatingPointError(f"zero reverse variance at non-final step t={t}; schedule bug")
        z = _replayable_noise(mu, aux[t_prev], sigma, residual=sigma <= 0)
        zs.append(z)
        x = ddpm_apply(mu, sigma, z, final_residual=sigma <= 0)
    return InversionTrace(SamplerKind.DDPM, aux[plan.timesteps[0]], tuple(zs), c_inv, plan,
                          aux_xs=tuple(aux[t] for t in plan.timesteps) + (x0,) if keep_aux else None)


def reconstruct(model: Denoiser, sched: NoiseSchedule, trace: InversionTrace, g: GuidanceConfig | None = None,
                plan: StepPlan | None = None) -> np.ndarray:
    """Replay a trace through the sampler.

    With ``g`` matching the inversion (``omega = 0`` under a null ``c_inv``, or
    ``c_rev == c_inv`` at ``omega = 1``) DDPM replay reproduces ``x_0`` up to
    rounding; any other ``g`` is an edit.
    """
    if plan is not None and plan != trace.plan:
        raise ValueError("plan does not match the trace's plan")
    if g is None:
        g = GuidanceConfig(omega=1.0, c_rev=trace.c_inv)
    zs = trace.zs if trace.kind is SamplerKind.DDPM else None
    return generate(model, sched, trace.plan, trace.x_T, g, trace.kind, zs=zs,
                    final_residual=trace.final_residual)


def invert(model: Denoiser, sched: NoiseSchedule, plan: StepPlan, x_0: np.ndarray, c_inv: ConditionArg,
           kind: SamplerKind | str, seed=0, refine_iters: int = 0) -> InversionTrace:
    kind = SamplerKind(kind)
    if kind is SamplerKind.DDIM:
        return ddim_invert(model, sched, plan, x_0, c_inv, refine_iters=refine_iters)
    return ddpm_invert(model, sched, plan, x_0, c_inv, seed=seed)
