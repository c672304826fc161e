"""Synthetic harmonic-texture sources and additive mixtures.

A source grid has shape ``(C, T_f, F)``. Each label is a harmonic stack: energy
at bins ``k * fundamental`` for ``k = 1..harmonics`` with per-harmonic gain
``decay ** (k - 1)``, amplitude-modulated over frames by a raised cosine whose
phase is drawn from the seed, plus small non-negative uniform jitter.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from zsep.denoiser.conditions import Composite, Condition, Label
from zsep.rng import Stream

Dims = tuple[int, int, int]

DEFAULT_DIMS: Dims = (1, 16, 32)
DEMO_DIMS: Dims = (1, 64, 64)


@dataclass(frozen=True)
class SourceLabel:
    id: int
    name: str
    fundamental: int
    harmonics: int = 3
    decay: float = 0.7
    period: float = 8.0
    amplitude: float = 1.0
    depth: float = 0.8
    jitter: float = 0.05

    def harmonic_bins(self, F: int) -> list[int]:
        return [k * self.fundamental for k in range(1, self.harmonics + 1) if k * self.fundamental < F]

    def clipped_harmonics(self, F: int) -> int:
        return self.harmonics - len(self.harmonic_bins(F))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def default_labels() -> list[SourceLabel]:
    """Four labels whose harmonic bins are disjoint for ``F >= 32``."""
    return [
        SourceLabel(0, "drone", fundamental=3, period=8.0),
        SourceLabel(1, "chime", fundamental=4, period=5.0),
        SourceLabel(2, "horn", fundamental=5, period=11.0),
        SourceLabel(3, "buzz", fundamental=7, period=3.0),
    ]


class LabelRegistry:
    def __init__(self, labels: Sequence[SourceLabel]):
        self.labels = {}
        for lab in labels:
            if lab.id in self.labels:
                raise ValueError(f"duplicate label id {lab.id}")
            self.labels[lab.id] = lab

    def __getitem__(self, label_id: int) -> SourceLabel:
        try:
            return self.labels[int(label_id)]
        except KeyError:
            raise KeyError(f"unknown label id {label_id}") from None

    def __iter__(self):
        return iter(self.labels.values())

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def ids(self) -> list[int]:
        return sorted(self.labels)


def _check_dims(dims) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


def envelope(label: SourceLabel, frames: int, phase: float) -> np.ndarray:
    t = np.arange(frames, dtype=np.float64)
    return (1.0 - label.depth) + label.depth * 0.5 * (1.0 + np.cos(2.0 * math.pi * t / label.period + phase))


def gen_source(label: SourceLabel, dims: Dims, seed: int, gain: float = 1.0, warnings: list | None = None) -> np.ndarray:
    """Deterministic harmonic texture for ``label``; a pure function of its arguments.

    Harmonics that would land at or above ``F`` are dropped; a note is appended
    to ``warnings`` when given.
    """
    C, Tf, F = _check_dims(dims)
    if label.fundamental >= F:
        raise ValueError(f"label {label.id}: fundamental bin {label.fundamental} >= F={F}")
    if label.clipped_harmonics(F) and warnings is not None:
        warnings.append(f"label {label.id}: {label.clipped_harmonics(F)} harmonic(s) above F={F} clipped")
    stream = Stream(seed, "source", label.id)
    phase = float(stream.uniform((), 0.0, 2.0 * math.pi))
    jit = stream.uniform((C, Tf, F))
    amp = label.amplitude * gain
    grid = amp * label.jitter * jit
    env = envelope(label, Tf, phase)
    for k, b in enumerate(label.harmonic_bins(F)):
        grid[:, :, b] += amp * label.decay**k * env[None, :]
    return grid


def expected_energy(label: SourceLabel, dims: Dims, gain: float = 1.0) -> float:
    """Closed-form E[sum(grid**2)] over the random phase and jitter."""
    C, Tf, F = _check_dims(dims)
    amp = label.amplitude * gain
    d = label.depth
    # env = (1 - d) + d/2 + (d/2) cos(.): E[env] = 1 - d/2, E[env^2] = (1 - d/2)^2 + d^2/8
    # (exact per frame because the phase is uniform on the circle)
    m_env = 1.0 - d / 2.0
    e_env2 = m_env**2 + d**2 / 8.0
    j = label.jitter
    total = C * Tf * F * (amp * j) ** 2 / 3.0
    for k, _ in enumerate(label.harmonic_bins(F)):
        h = amp * label.decay**k
        # (h env + amp j U)^2 minus the jitter term already counted
        total += C * Tf * (h**2 * e_env2 + 2.0 * h * m_env * amp * j * 0.5)
    return total


def mix(sources: Sequence[np.ndarray], gains: Sequence[float] | None = None) -> np.ndarray:
    """Element-wise sum in list order (optionally with per-source gains)."""
    if len(sources) == 0:
        raise ValueError("mix needs at least one source")
    shape = np.shape(sources[0])
    for s in sources[1:]:
        if np.shape(s) != shape:
            raise ValueError(f"dimension mismatch: {np.shape(s)} vs {shape}")
    out = np.array(sources[0], dtype=np.float64, copy=True)
    if gains is not None:
        if len(gains) != len(sources):
            raise ValueError("one gain per source required")
        out *= gains[0]
    for k, s in enumerate(sources[1:], start=1):
        out += s if gains is None else gains[k] * s
    return out


@dataclass
class SyntheticScene:
    sources: list[tuple[SourceLabel, np.ndarray]]
    mixture: np.ndarray
    seed: int
    scene_id: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def label_ids(self) -> list[int]:
        return [lab.id for lab, _ in self.sources]

    def source_for(self, label_id: int) -> np.ndarray:
        for lab, g in self.sources:
            if lab.id == label_id:
                return g
        raise KeyError(f"scene {self.scene_id} has no source with label {label_id}")


def make_scene(labels: Sequence[SourceLabel], dims: Dims, seed: int, scene_id: int = 0,
               gains: Sequence[float] | None = None) -> SyntheticScene:
    notes: list[str] = []
    grids = [gen_source(lab, dims, Stream(seed, "scene", scene_id).child("src", k).key, warnings=notes)
             for k, lab in enumerate(labels)]
    if gains is not None:
        grids = [g * float(a) for g, a in zip(grids, gains)]
    return SyntheticScene(list(zip(labels, grids)), mix(grids), seed, scene_id, notes)


def make_scenes(registry: LabelRegistry, count: int, dims: Dims, seed: int, n_sources: int = 2) -> list[SyntheticScene]:
    """``count`` two-source scenes with label pairs cycling through all unordered pairs.

    Scene ``k`` depends only on ``(seed, k)``, so growing ``count`` never changes
    earlier scenes.
    """
    if count < 1:
        raise ValueError("need at least one scene")
    combos = list(itertools.combinations(registry.ids, n_sources))
    if not combos:
        raise ValueError(f"registry has fewer than {n_sources} labels")
    scenes = []
    for k in range(count):
        ids = combos[k % len(combos)]
        scenes.append(make_scene([registry[i] for i in ids], dims, seed, scene_id=k))
    return scenes


def make_dataset(labels: Sequence[SourceLabel], n_per_label: int, include_pairs: bool,
                 dims: Dims = DEFAULT_DIMS, seed: int = 0) -> list[tuple[Condition, np.ndarray]]:
    """Training corpus of ``(condition, grid)`` pairs.

    Singletons come first (label order, then sample index), followed by one
    block of ``n_per_label`` mixtures for every unordered label pair.
    """
    if not labels:
        raise ValueError("label list is empty")
    if n_per_label < 1:
        raise ValueError("n_per_label must be >= 1")
    dims = _check_dims(dims)
    root = Stream(seed, "dataset")
    out: list[tuple[Condition, np.ndarray]] = []
    for lab in labels:
        for n in range(n_per_label):
            out.append((Label(lab.id), gen_source(lab, dims, root.child("single", lab.id, n).key)))
    if include_pairs:
        for a, b in itertools.combinations(labels, 2):
            for n in range(n_per_label):
                st = root.child("pair", a.id, b.id, n)
                g = mix([gen_source(a, dims, st.child(0).key), gen_source(b, dims, st.child(1).key)])
                out.append((Composite.of(a.id, b.id), g))
    return out


def band_energies(grid: np.ndarray) -> np.ndarray:
    """Per-bin energy summed over channels and frames (CSV summary rows)."""
    return np.sum(np.asarray(grid, dtype=np.float64) ** 2, axis=(-3, -2))
