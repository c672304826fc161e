"""Discrete stand-ins for text prompts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union


@dataclass(frozen=True)
class Null:
    """The empty prompt."""

    def key(self) -> str:
        return "null"


@dataclass(frozen=True)
class Label:
    id: int

    def key(self) -> str:
        return f"label:{self.id}"


@dataclass(frozen=True)
class Composite:
    ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if not ids:
            raise ValueError("composite condition needs at least one label")
        if list(ids) != sorted(set(ids)):
            raise ValueError(f"composite ids must be sorted and unique, got {ids}")
        object.__setattr__(self, "ids", ids)

    @classmethod
    def of(cls, *ids: int) -> "Composite":
        return cls(tuple(sorted(set(int(i) for i in ids))))

    def key(self) -> str:
        return "composite:" + "+".join(str(i) for i in self.ids)


@dataclass(frozen=True)
class Random:
    """A prompt unrelated to any known source, reproducible from its seed."""

    seed: int

    def key(self) -> str:
        return f"random:{self.seed}"


Condition = Union[Null, Label, Composite, Random]

NULL = Null()


def parse_condition(text: str) -> Condition:
    """Inverse of ``Condition.key()``; also accepts a bare integer label id."""
    text = str(text).strip()
    if text in ("null", "none", "∅", ""):
        return NULL
    if text.lstrip("-").isdigit():
        return Label(int(text))
    kind, _, rest = text.partition(":")
    if kind == "label":
        return Label(int(rest))
    if kind == "composite":
        return Composite.of(*(int(p) for p in rest.split("+")))
    if kind == "random":
        return Random(int(rest))
    raise ValueError(f"cannot parse condition {text!r}")
