"""The noise-prediction contract shared by every denoiser."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from zsep.denoiser.conditions import Condition, Null
from zsep.schedule import NoiseSchedule

ConditionArg = Condition | Sequence[Condition]


class Denoiser:
    """Base class: ``predict_eps(x_t, c, t)`` on grids of shape ``(..., C, T_f, F)``.

    ``c`` is either one condition for the whole batch or one condition per
    leading-axis row. Rows sharing a condition are evaluated together.
    """

    sched: NoiseSchedule

    def predict_eps(self, x_t: np.ndarray, c: ConditionArg, t: int) -> np.ndarray:
        x_t = np.asarray(x_t)
        if not np.issubdtype(x_t.dtype, np.floating):
            x_t = x_t.astype(np.float64)
        t = int(t)
        if not 1 <= t <= self.sched.T:
            raise IndexError(f"timestep {t} outside [1, {self.sched.T}]")
        if not np.all(np.isfinite(x_t)):
            raise FloatingPointError("x_t contains non-finite values")
        if isinstance(c, (list, tuple)):
            if x_t.ndim < 4 or len(c) != x_t.shape[0]:
                raise ValueError("per-row conditions need a batched x_t with matching leading axis")
            out = np.empty_like(x_t)
            groups: dict[Condition, list[int]] = {}
            for i, ci in enumerate(c):
                groups.setdefault(ci, []).append(i)
            for ci, rows in groups.items():
                out[rows] = self._eps(x_t[rows], ci, t)
            return out
        return self._eps(x_t, c, t)

    def _eps(self, x_t: np.ndarray, c: Condition, t: int) -> np.ndarray:
        raise NotImplementedError

    def supports(self, c: Condition) -> bool:
        return True


class CountingDenoiser(Denoiser):
    """Wraps a denoiser and counts calls split into unconditional / conditional."""

    def __init__(self, inner: Denoiser):
        self.inner = inner
        self.sched = inner.sched
        self.calls: Counter = Counter()

    def predict_eps(self, x_t, c, t):
        conds = c if isinstance(c, (list, tuple)) else [c]
        for ci in conds:
            self.calls["uncond" if isinstance(ci, Null) else "cond"] += 1
            self.calls[ci.key()] += 1
        self.calls["total"] += 1
        return self.inner.predict_eps(x_t, c, t)

    def supports(self, c):
        return self.inner.supports(c)

    def reset(self) -> None:
        self.calls.clear()


class FunctionDenoiser(Denoiser):
    """Adapter for tests: ``fn(x_t, c, t) -> eps``."""

    def __init__(self, sched: NoiseSchedule, fn):
        self.sched = sched
        self.fn = fn

    def _eps(self, x_t, c, t):
        return np.asarray(self.fn(x_t, c, t), dtype=x_t.dtype)
