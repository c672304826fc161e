"""A two-layer conditional MLP noise predictor and its training loop.

The raw network is ``F(u) = silu(u @ W1 + b1) @ W2 + b2`` with
``u = [x_in, time_embedding(t), cond_embedding(c)]``.

When ``sigma_data`` is set, ``F`` sits inside a fixed, parameter-free
preconditioning so that a narrow hidden layer does not have to carry the
identity map. With ``ab = alpha_bar[t]`` and ``q = 1 - ab + ab * sigma_data^2``::

    x_in = x_t / sqrt(q)
    eps  = x_t * sqrt(1 - ab) / q - sigma_data * sqrt(ab / q) * F(x_in)

which equals ``(x_t - sqrt(ab) * x0_hat) / sqrt(1 - ab)`` for the denoised
estimate ``x0_hat = c_skip * x_t / sqrt(ab) + c_out * F``. The first term is the
exact answer for zero-mean Gaussian data of variance ``sigma_data^2``; the
network learns the rest.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from zsep.denoiser.base import Denoiser
from zsep.denoiser.conditions import Composite, Condition, Label, Null, Random
from zsep.rng import Stream
from zsep.schedule import NoiseSchedule

log = logging.getLogger(__name__)


@dataclass
class TinyDenoiserParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    emb: np.ndarray
    dims: tuple[int, int, int]
    d_t: int
    cond_keys: tuple[str, ...]
    p_uncond: float = 0.1
    sigma_data: float | None = 0.5

    @property
    def hidden(self) -> int:
        return int(self.b1.size)

    @property
    def d_c(self) -> int:
        return int(self.emb.shape[1])

    @property
    def grid_size(self) -> int:
        return int(np.prod(self.dims))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2, "emb": self.emb}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "TinyDenoiserParams":
        return replace(self, **{k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})

    def copy(self) -> "TinyDenoiserParams":
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})

    def row_of(self, c: Condition) -> int:
        try:
            return self.cond_keys.index(c.key())
        except ValueError:
            if isinstance(c, Label):
                raise KeyError(f"unknown label id {c.id}") from None
            raise KeyError(f"condition {c.key()} has no embedding row") from None


def condition_keys(label_ids: Sequence[int], include_pairs: bool = True) -> tuple[str, ...]:
    keys = [Null().key()] + [Label(i).key() for i in sorted(label_ids)]
    if include_pairs:
        keys += [Composite.of(a, b).key() for a, b in itertools.combinations(sorted(label_ids), 2)]
    return tuple(keys)


def init_params(dims, label_ids: Sequence[int], hidden: int = 256, d_t: int = 16, d_c: int = 16,
                p_uncond: float = 0.1, include_pairs: bool = True, sigma_data: float | None = 0.5,
                seed: int = 0) -> TinyDenoiserParams:
    dims = tuple(int(d) for d in dims)
    if d_t % 2:
        raise ValueError("time embedding dimension must be even")
    if not 0.0 <= p_uncond < 1.0 + 1e-12:
        raise ValueError("p_uncond must lie in [0, 1]")
    D = int(np.prod(dims))
    d_in = D + d_t + d_c
    keys = condition_keys(label_ids, include_pairs)
    st = Stream(seed, "tiny-init")
    return TinyDenoiserParams(
        W1=st.child("W1").normal((d_in, hidden)) / math.sqrt(d_in),
        b1=np.zeros(hidden),
        W2=st.child("W2").normal((hidden, D)) / math.sqrt(hidden),
        b2=np.zeros(D),
        emb=st.child("emb").normal((len(keys), d_c)),
        dims=dims,
        d_t=int(d_t),
        cond_keys=keys,
        p_uncond=float(p_uncond),
        sigma_data=sigma_data,
    )


def time_embedding(t, d_t: int) -> np.ndarray:
    """Sinusoidal embedding; ``t`` scalar or 1-D array -> ``(n, d_t)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d_t // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def random_prompt_embedding(params: TinyDenoiserParams, seed: int) -> np.ndarray:
    """Embedding for an unseen prompt: a fresh draw at the scale of the learned rows."""
    learned = params.emb[1:] if params.emb.shape[0] > 1 else params.emb
    scale = float(np.sqrt(np.mean(learned**2))) or 1.0
    return Stream(seed, "random-prompt").normal((params.d_c,)) * scale


def _silu(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


def _cond_matrix(params: TinyDenoiserParams, c, n: int, dtype) -> np.ndarray:
    if isinstance(c, np.ndarray):
        return params.emb[c].astype(dtype)
    if isinstance(c, Random):
        row = random_prompt_embedding(params, c.seed)
    else:
        row = params.emb[params.row_of(c)]
    return np.broadcast_to(row.astype(dtype), (n, params.d_c))


def tiny_forward(params: TinyDenoiserParams, x: np.ndarray, c, t, _cache: dict | None = None) -> np.ndarray:
    """Raw affine-nonlinear-affine map on grids ``(..., C, T_f, F)``.

    ``c`` is a Condition or an int array of embedding rows (one per sample).
    """
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    D = params.grid_size
    if x.shape[-3:] != params.dims:
        raise ValueError(f"grid dims {x.shape[-3:]} do not match model dims {params.dims}")
    lead = x.shape[:-3]
    flat = x.reshape(-1, D).astype(dtype, copy=False)
    n = flat.shape[0]
    temb = time_embedding(t, params.d_t).astype(dtype)
    if temb.shape[0] == 1:
        temb = np.broadcast_to(temb, (n, params.d_t))
    u = np.concatenate([flat, temb, _cond_matrix(params, c, n, dtype)], axis=1)
    a = u @ params.W1.astype(dtype, copy=False) + params.b1.astype(dtype, copy=False)
    h, s = _silu(a)
    out = h @ params.W2.astype(dtype, copy=False) + params.b2.astype(dtype, copy=False)
    if _cache is not None:
        _cache.update(u=u, a=a, h=h, s=s)
    return out.reshape(*lead, *params.dims)


def _precond(ab, sigma_data: float):
    """Per-sample (input scale, skip coefficient, output coefficient)."""
    ab = np.asarray(ab, dtype=np.float64)
    q = 1.0 - ab + ab * sigma_data**2
    return 1.0 / np.sqrt(q), np.sqrt(1.0 - ab) / q, sigma_data * np.sqrt(ab / q)


def tiny_eps(params: TinyDenoiserParams, sched: NoiseSchedule, x_t: np.ndarray, c, t) -> np.ndarray:
    if params.sigma_data is None:
        return tiny_forward(params, x_t, c, t)
    x_t = np.asarray(x_t)
    ab = sched.alpha_bars[int(t)]
    k_in, k_skip, k_out = (float(v) for v in _precond(ab, params.sigma_data))
    F = tiny_forward(params, x_t * k_in, c, t)
    return (k_skip * x_t - k_out * F).astype(F.dtype, copy=False)


class TinyDenoiser(Denoiser):
    def __init__(self, params: TinyDenoiserParams, sched: NoiseSchedule):
        self.params = params
        self.sched = sched

    def _eps(self, x_t, c, t):
        return tiny_eps(self.params, self.sched, x_t, c, t)

    def supports(self, c):
        if isinstance(c, Random):
            return True
        return c.key() in self.params.cond_keys


# -- training -------------------------------------------------------------------


def loss_and_grads(params: TinyDenoiserParams, sched: NoiseSchedule, x0: np.ndarray, noise: np.ndarray,
                   t: np.ndarray, rows: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared noise-prediction error over a batch and its exact gradient.

    ``x0`` and ``noise`` are ``(B, D)``; ``t`` and ``rows`` are ``(B,)`` ints.
    """
    B, D = x0.shape
    dtype = x0.dtype
    ab = sched.alpha_bars[t][:, None]
    x_t = (np.sqrt(ab).astype(dtype) * x0 + np.sqrt(1.0 - ab).astype(dtype) * noise)
    if params.sigma_data is None:
        k_in, k_skip, k_out = np.ones_like(ab), np.zeros_like(ab), -np.ones_like(ab)
    else:
        k_in, k_skip, k_out = _precond(ab, params.sigma_data)
    k_in, k_skip, k_out = (k.astype(dtype) for k in (k_in, k_skip, k_out))
    cache: dict = {}
    F = tiny_forward(params, (x_t * k_in).reshape(B, *params.dims), rows, t, _cache=cache).reshape(B, D)
    pred = k_skip * x_t - k_out * F
    resid = pred - noise
    loss = float(np.mean(resid**2))

    dF = -(2.0 / (B * D)) * resid * k_out
    h, s, a, u = cache["h"], cache["s"], cache["a"], cache["u"]
    gW2 = h.T @ dF
    gb2 = dF.sum(axis=0)
    dh = dF @ params.W2.T.astype(dtype, copy=False)
    da = dh * (s * (1.0 + a * (1.0 - s)))
    gW1 = u.T @ da
    gb1 = da.sum(axis=0)
    du = da[:, :] @ params.W1[D + params.d_t:].T.astype(dtype, copy=False)
    gemb = np.zeros(params.emb.shape, dtype=np.float64)
    np.add.at(gemb, rows, du)
    grads = {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2, "emb": gemb}
    return loss, {k: v.astype(np.float64, copy=False) for k, v in grads.items()}


class Adam:
    """Adaptive moments with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def update(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: TinyDenoiserParams
    losses: list[float] = field(default_factory=list)


def _dataset_arrays(params: TinyDenoiserParams, dataset) -> tuple[np.ndarray, np.ndarray]:
    if not dataset:
        raise ValueError("dataset is empty")
    X = np.stack([np.asarray(g, dtype=np.float64).reshape(-1) for _, g in dataset])
    if X.shape[1] != params.grid_size:
        raise ValueError(f"dataset grids have {X.shape[1]} elements, model expects {params.grid_size}")
    rows = np.array([params.row_of(c) for c, _ in dataset], dtype=np.int64)
    return X, rows


def train(params: TinyDenoiserParams, dataset, sched: NoiseSchedule, epochs: int, lr: float, seed: int,
          batch_size: int = 64, fit_sigma_data: bool = True, lr_decay: str = "none",
          dtype=np.float64) -> TrainResult:
    """Minibatch Adam on the denoising objective with condition dropout.

    Each epoch visits the dataset once in a seeded order; every sample gets a
    fresh timestep, noise draw, and dropout coin. ``losses[e]`` is the mean
    minibatch loss of epoch ``e``. ``lr_decay="cosine"`` anneals the step size
    to zero over the run.
    """
    if lr_decay not in ("none", "cosine"):
        raise ValueError(f"unknown lr_decay {lr_decay!r}")
    X, rows_all = _dataset_arrays(params, dataset)
    if not 0.0 <= params.p_uncond <= 1.0:
        raise ValueError("p_uncond must lie in [0, 1]")
    params = params.copy()
    if fit_sigma_data and params.sigma_data is not None:
        params.sigma_data = float(np.std(X)) or params.sigma_data
    X = X.astype(dtype)
    arrays = params.arrays()
    opt = Adam(lr)
    root = Stream(seed, "train")
    N, D = X.shape
    losses: list[float] = []
    for epoch in range(int(epochs)):
        if lr_decay == "cosine":
            opt.lr = 0.5 * lr * (1.0 + math.cos(math.pi * epoch / max(int(epochs), 1)))
        st = root.child("epoch", epoch)
        order = st.child("order").permutation(N)
        total, nb = 0.0, 0
        for bi, start in enumerate(range(0, N, batch_size)):
            idx = order[start:start + batch_size]
            bs = st.child("batch", bi)
            t = bs.integers(1, sched.T + 1, (idx.size,))
            noise = bs.normal((idx.size, D), dtype=dtype)
            drop = bs.uniform((idx.size,)) < params.p_uncond
            rows = np.where(drop, 0, rows_all[idx])
            loss, grads = loss_and_grads(params, sched, X[idx], noise, t, rows)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.update(arrays, grads)
            total += loss
            nb += 1
        losses.append(total / nb)
        log.debug("epoch %d loss %.5f", epoch, losses[-1])
    return TrainResult(params, losses)


def eval_loss(params: TinyDenoiserParams, dataset, sched: NoiseSchedule, seed: int = 12345, repeats: int = 4,
              conditional: bool = True) -> float:
    """Held-out denoising loss with fixed noise draws (no dropout)."""
    X, rows = _dataset_arrays(params, dataset)
    if not conditional:
        rows = np.zeros_like(rows)
    st = Stream(seed, "eval-loss")
    out = []
    for r in range(repeats):
        s = st.child(r)
        t = s.integers(1, sched.T + 1, (X.shape[0],))
        noise = s.normal(X.shape)
        out.append(loss_and_grads(params, sched, X, noise, t, rows)[0])
    return float(np.mean(out))
