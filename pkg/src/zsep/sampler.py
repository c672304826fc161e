"""Reverse steps, classifier-free guidance, and the generation loop."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from zsep.denoiser.base import ConditionArg, Denoiser
from zsep.denoiser.conditions import NULL, Condition
from zsep.rng import Stream
from zsep.schedule import NoiseSchedule, StepPlan, reverse_coeffs


class SamplerKind(str, enum.Enum):
    DDIM = "ddim"
    DDPM = "ddpm"


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance weight and reverse condition (one, or one per batch row)."""

    omega: float = 1.0
    c_rev: ConditionArg = NULL

    def __post_init__(self):
        if not math.isfinite(self.omega) or self.omega < 0:
            raise ValueError(f"omega must be finite and >= 0, got {self.omega}")
        if isinstance(self.c_rev, list):
            object.__setattr__(self, "c_rev", tuple(self.c_rev))


def _null_like(c: ConditionArg):
    return tuple(NULL for _ in c) if isinstance(c, tuple) else NULL


def cfg_eps(model: Denoiser, x_t: np.ndarray, t: int, g: GuidanceConfig) -> np.ndarray:
    """``eps_null + omega * (eps_cond - eps_null)``.

    At ``omega == 0`` only the unconditional branch is evaluated and at
    ``omega == 1`` only the conditional one, so both endpoints are exact.
    """
    if g.omega == 0.0:
        return model.predict_eps(x_t, _null_like(g.c_rev), t)
    if g.omega == 1.0:
        return model.predict_eps(x_t, g.c_rev, t)
    e_null = model.predict_eps(x_t, _null_like(g.c_rev), t)
    e_cond = model.predict_eps(x_t, g.c_rev, t)
    return e_null + g.omega * (e_cond - e_null)


def ddim_step(sched: NoiseSchedule, x_t: np.ndarray, t: int, t_prev: int, eps: np.ndarray) -> np.ndarray:
    """Deterministic DDIM update from ``t`` to ``t_prev`` (``t_prev = 0`` returns x0_hat)."""
    if t_prev >= t:
        raise ValueError(f"need t_prev < t, got t={t}, t_prev={t_prev}")
    if np.shape(eps) != np.shape(x_t):
        raise ValueError("eps and x_t shapes differ")
    ab_t = sched.alpha_bars[t]
    ab_p = sched.alpha_bars[t_prev]
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    if t_prev == 0:
        return x0_hat
    return math.sqrt(ab_p) * x0_hat + math.sqrt(1.0 - ab_p) * eps


def ddpm_mean(sched: NoiseSchedule, x_t: np.ndarray, t: int, t_prev: int, eps: np.ndarray) -> tuple[np.ndarray, float]:
    cx, ce, sigma = reverse_coeffs(sched, t, t_prev)
    return cx * x_t - ce * eps, sigma


def ddpm_step(sched: NoiseSchedule, x_t: np.ndarray, t: int, t_prev: int, eps: np.ndarray,
              z: np.ndarray | None) -> np.ndarray:
    """``mu_t(x_t) + sigma * z``.

    On a zero-variance step (the final one) ``z`` is ignored unless it is a
    stored residual from an inversion trace, in which case it is added as is;
    see :func:`zsep.inversion.ddpm_invert`.
    """
    if t_prev >= t:
        raise ValueError(f"need t_prev < t, got t={t}, t_prev={t_prev}")
    if np.shape(eps) != np.shape(x_t) or (z is not None and np.shape(z) != np.shape(x_t)):
        raise ValueError("eps / z shapes must match x_t")
    mu, sigma = ddpm_mean(sched, x_t, t, t_prev, eps)
    if z is None:
        return mu
    return mu + sigma * z if sigma > 0 else mu


def ddpm_apply(mu: np.ndarray, sigma: float, z: np.ndarray, final_residual: bool = False) -> np.ndarray:
    """The update used by DDPM replay: ``mu + sigma * z``, or ``mu + z`` for a stored residual."""
    if sigma > 0:
        return mu + sigma * z
    return mu + z if final_residual else mu


def fresh_noise(seeds, step_index: int, shape, dtype) -> np.ndarray:
    """Per-row noise for DDPM sampling: row ``b`` uses stream ``seeds[b] / "ddpm-z" / step``."""
    if isinstance(seeds, (list, tuple, np.ndarray)):
        rows = [Stream(int(s), "ddpm-z", step_index).normal(shape[1:]) for s in seeds]
        return np.stack(rows).astype(dtype)
    return Stream(int(seeds), "ddpm-z", step_index).normal(shape).astype(dtype)


def generate(model: Denoiser, sched: NoiseSchedule, plan: StepPlan, x_T: np.ndarray, g: GuidanceConfig,
             kind: SamplerKind | str = SamplerKind.DDIM, zs: Sequence[np.ndarray] | None = None,
             seed=0, final_residual: bool = False) -> np.ndarray:
    """Run the reverse chain over ``plan`` from ``x_T`` and return the x0 estimate.

    For DDPM, ``zs`` supplies one noise grid per step (e.g. from an inversion
    trace); when omitted, fresh standard normals are drawn from ``seed``. With
    ``final_residual`` the last entry of ``zs`` is an additive correction for
    the zero-variance final step.
    """
    kind = SamplerKind(kind)
    plan.validate(sched)
    x = np.array(x_T, copy=True)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    pairs = plan.pairs()
    if kind is SamplerKind.DDPM and zs is not None and len(zs) != len(pairs):
        raise ValueError(f"zs has {len(zs)} entries, plan has {len(pairs)} steps")
    for k, (t, t_prev) in enumerate(pairs):
        eps = cfg_eps(model, x, t, g)
        if kind is SamplerKind.DDIM:
            x = ddim_step(sched, x, t, t_prev, eps)
            continue
        mu, sigma = ddpm_mean(sched, x, t, t_prev, eps)
        if zs is not None:
            x = ddpm_apply(mu, sigma, np.asarray(zs[k], dtype=x.dtype), final_residual)
        elif sigma > 0:
            x = mu + sigma * fresh_noise(seed, k, x.shape, x.dtype)
        else:
            x = mu
    return x
