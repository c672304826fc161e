"""Discrete noise schedules, step plans, and reverse-step coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """A discrete variance-preserving schedule.

    ``alpha_bars`` has ``T + 1`` entries with the sentinel ``alpha_bars[0] == 1``
    so that index ``t`` always means "after t noising steps". ``betas[t - 1]``
    and ``alphas[t - 1]`` belong to step ``t``.
    """

    kind: str
    betas: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all(np.isfinite(betas)) or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        betas.setflags(write=False)
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        alphas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        self._check_index(t)
        return float(self.alpha_bars[t])

    def _check_index(self, t: int) -> None:
        if not 0 <= int(t) <= self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T}]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, **self.params}


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    for name, b in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not math.isfinite(b) or not 0.0 < b < 1.0:
            raise ValueError(f"{name} must be finite and in (0, 1), got {b!r}")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule("linear", betas, {"beta_start": float(beta_start), "beta_end": float(beta_end)})


def make_cosine_schedule(T: int, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule with ``alpha_bar(t) = f(t) / f(0)``.

    ``f(u) = cos^2(((u / T + offset) / (1 + offset)) * pi / 2)``; betas are
    recovered from consecutive ratios and clipped at ``max_beta``.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not math.isfinite(offset) or offset <= 0:
        raise ValueError("offset must be a small positive number")
    u = np.arange(int(T) + 1, dtype=np.float64)
    f = np.cos(((u / T + offset) / (1.0 + offset)) * math.pi / 2.0) ** 2
    ab = f / f[0]
    betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-12, max_beta)
    return NoiseSchedule("cosine", betas, {"offset": float(offset)})


def schedule_from_dict(spec: dict) -> NoiseSchedule:
    kind = spec.get("kind", "linear")
    if kind == "linear":
        return make_linear_schedule(spec["T"], spec.get("beta_start", 1e-4), spec.get("beta_end", 0.02))
    if kind == "cosine":
        return make_cosine_schedule(spec["T"], spec.get("offset", 0.008))
    raise ValueError(f"unknown schedule kind {kind!r}")


def default_schedule() -> NoiseSchedule:
    return make_linear_schedule(1000, 1e-4, 0.02)


@dataclass(frozen=True)
class StepPlan:
    """Strictly decreasing timesteps; step ``k`` maps ``timesteps[k]`` to ``timesteps[k+1]``
    (or to 0 after the last entry)."""

    timesteps: tuple[int, ...]

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        if not ts:
            raise ValueError("a step plan needs at least one timestep")
        if any(t < 1 for t in ts):
            raise ValueError("plan timesteps must be >= 1")
        if any(a <= b for a, b in zip(ts, ts[1:])):
            raise ValueError("plan timesteps must be unique and strictly decreasing")
        object.__setattr__(self, "timesteps", ts)

    def __len__(self) -> int:
        return len(self.timesteps)

    def pairs(self) -> list[tuple[int, int]]:
        """``(t, t_prev)`` for every reverse step, in sampling order."""
        ts = self.timesteps
        return [(t, ts[k + 1] if k + 1 < len(ts) else 0) for k, t in enumerate(ts)]

    def validate(self, sched: NoiseSchedule) -> None:
        if self.timesteps[0] > sched.T:
            raise ValueError(f"plan starts at {self.timesteps[0]} but schedule has T={sched.T}")


def make_plan(T: int, steps: int | None = None, timesteps: Sequence[int] | None = None) -> StepPlan:
    """Evenly strided plan from ``T`` down to roughly ``T / steps``, or an explicit list."""
    if timesteps is not None:
        return StepPlan(tuple(timesteps))
    steps = T if steps is None else int(steps)
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)[:-1]
    return StepPlan(tuple(int(t) for t in ts))


def reverse_coeffs(sched: NoiseSchedule, t: int, t_prev: int, variance: str = "posterior") -> tuple[float, float, float]:
    """Coefficients of one (possibly strided) DDPM reverse step.

    Returns ``(mean_x_coef, mean_eps_coef, sigma)`` such that::

        mu = mean_x_coef * x_t - mean_eps_coef * eps
        x_prev = mu + sigma * z

    With ``a = alpha_bar[t] / alpha_bar[t_prev]`` and ``b = 1 - a``:
    ``mean_x_coef = 1 / sqrt(a)``, ``mean_eps_coef = b / (sqrt(a) sqrt(1 - alpha_bar[t]))``.
    ``variance="posterior"`` gives ``sigma^2 = (1 - alpha_bar[t_prev]) / (1 - alpha_bar[t]) * b``,
    which is exactly 0 on the final step. ``variance="beta"`` uses ``sigma^2 = b``
    except on the final step, which is kept deterministic.
    """
    sched._check_index(t)
    sched._check_index(t_prev)
    if t_prev >= t:
        raise ValueError(f"need t_prev < t, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bars[t]
    ab_p = sched.alpha_bars[t_prev]
    a = ab_t / ab_p
    b = 1.0 - a
    mean_x = 1.0 / math.sqrt(a)
    mean_eps = b / (math.sqrt(a) * math.sqrt(1.0 - ab_t))
    if variance == "posterior":
        var = (1.0 - ab_p) / (1.0 - ab_t) * b
    elif variance == "beta":
        var = 0.0 if t_prev == 0 else b
    else:
        raise ValueError(f"unknown variance convention {variance!r}")
    return float(mean_x), float(mean_eps), float(math.sqrt(max(var, 0.0)))
