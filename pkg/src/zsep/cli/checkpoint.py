"""The ZSEP binary container.

Layout (little-endian throughout)::

    b"ZSEP" | u16 version | u32 record count
    per record:
        u8 kind | u16 name length | name (utf-8)
        u8 ndim | ndim x u32 dims
        u32 meta length | meta (canonical JSON, utf-8)
        u64 payload length | payload (float32)

``kind`` is one of ``params``, ``gaussian-model``, ``grid``, ``trace-metadata``.
Decoding then re-encoding reproduces the input bytes exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from zsep.denoiser.analytic import GaussianSourceModel
from zsep.denoiser.conditions import parse_condition
from zsep.denoiser.tiny import TinyDenoiserParams
from zsep.inversion import InversionTrace
from zsep.sampler import SamplerKind
from zsep.schedule import StepPlan

MAGIC = b"ZSEP"
VERSION = 1
KINDS = ("params", "gaussian-model", "grid", "trace-metadata")
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _canonical_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


@dataclass(frozen=True, eq=False)
class Record:
    kind: str
    name: str
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown record kind {self.kind!r}")
        arr = np.asarray(self.data)
        if arr.dtype != _F32:
            arr = arr.astype(_F32)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        # normalize meta through JSON so equality is on the stored form
        object.__setattr__(self, "meta", json.loads(_canonical_json(self.meta)))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Record):
            return NotImplemented
        return (self.kind == other.kind and self.name == other.name and self.dims == other.dims
                and self.meta == other.meta and self.data.tobytes() == other.data.tobytes())

    def __hash__(self):
        return hash((self.kind, self.name, self.dims))


def encode(records: Sequence[Record]) -> bytes:
    out = [MAGIC, struct.pack("<HI", VERSION, len(records))]
    for r in records:
        name = r.name.encode("utf-8")
        meta = _canonical_json(r.meta)
        payload = r.data.astype(_F32, copy=False).tobytes()
        out.append(struct.pack("<BH", KINDS.index(r.kind), len(name)))
        out.append(name)
        out.append(struct.pack("<B", len(r.dims)))
        out.append(struct.pack(f"<{len(r.dims)}I", *r.dims))
        out.append(struct.pack("<I", len(meta)))
        out.append(meta)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def decode(buf: bytes) -> list[Record]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic: not a ZSEP container")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    records = []
    for _ in range(count):
        kind_code, name_len = struct.unpack("<BH", take(3))
        if kind_code >= len(KINDS):
            raise CheckpointError(f"unknown record kind code {kind_code}")
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (meta_len,) = struct.unpack("<I", take(4))
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
        (n_bytes,) = struct.unpack("<Q", take(8))
        if n_bytes != 4 * int(np.prod(dims, dtype=np.int64)):
            raise CheckpointError(f"record {name!r}: payload size does not match dims {dims}")
        data = np.frombuffer(bytes(take(n_bytes)), dtype=_F32).reshape(dims)
        records.append(Record(KINDS[kind_code], name, data, meta))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last record")
    return records


def write_checkpoint(path: str | Path, records: Sequence[Record]) -> None:
    Path(path).write_bytes(encode(records))


def read_checkpoint(path: str | Path) -> list[Record]:
    return decode(Path(path).read_bytes())


def find(records: Sequence[Record], kind: str, name: str | None = None) -> list[Record]:
    return [r for r in records if r.kind == kind and (name is None or r.name == name)]


# -- domain objects <-> records ---------------------------------------------------------


def params_records(params: TinyDenoiserParams) -> list[Record]:
    meta = {"dims": list(params.dims), "d_t": params.d_t, "cond_keys": list(params.cond_keys),
            "p_uncond": params.p_uncond, "sigma_data": params.sigma_data}
    recs = [Record("params", "tiny/config", np.zeros(0), meta)]
    recs += [Record("params", f"tiny/{k}", v) for k, v in params.arrays().items()]
    return recs


def params_from_records(records: Sequence[Record]) -> TinyDenoiserParams:
    by_name = {r.name: r for r in find(records, "params")}
    if "tiny/config" not in by_name:
        raise CheckpointError("no tiny denoiser parameters in container")
    m = by_name["tiny/config"].meta
    arrays = {}
    for k in ("W1", "b1", "W2", "b2", "emb"):
        if f"tiny/{k}" not in by_name:
            raise CheckpointError(f"missing parameter record tiny/{k}")
        arrays[k] = by_name[f"tiny/{k}"].data.astype(np.float64)
    return TinyDenoiserParams(dims=tuple(m["dims"]), d_t=int(m["d_t"]), cond_keys=tuple(m["cond_keys"]),
                              p_uncond=float(m["p_uncond"]), sigma_data=m["sigma_data"], **arrays)


def gaussian_records(model: GaussianSourceModel) -> list[Record]:
    meta = {"label_ids": model.label_ids, "composites": [list(c.ids) for c in model.composites],
            "priors": {c.key(): float(p) for c, p in zip(model.components, model.priors)}}
    recs = [Record("gaussian-model", "gaussian/config", np.zeros(0), meta)]
    for k in model.label_ids:
        recs.append(Record("gaussian-model", f"gaussian/mean/{k}", model.means[k]))
        recs.append(Record("gaussian-model", f"gaussian/std/{k}", model.stds[k]))
    return recs


def gaussian_from_records(records: Sequence[Record]) -> GaussianSourceModel:
    by_name = {r.name: r for r in find(records, "gaussian-model")}
    if "gaussian/config" not in by_name:
        raise CheckpointError("no Gaussian model in container")
    m = by_name["gaussian/config"].meta
    means = {k: by_name[f"gaussian/mean/{k}"].data.astype(np.float64) for k in m["label_ids"]}
    stds = {k: by_name[f"gaussian/std/{k}"].data.astype(np.float64) for k in m["label_ids"]}
    return GaussianSourceModel(means, stds, composites=m["composites"], priors=m["priors"])


def grid_record(name: str, grid: np.ndarray, **meta) -> Record:
    return Record("grid", name, grid, meta)


def trace_records(trace: InversionTrace, prefix: str = "trace") -> list[Record]:
    c_inv = trace.c_inv
    c_keys = [c.key() for c in c_inv] if isinstance(c_inv, tuple) else c_inv.key()
    meta = {"kind": trace.kind.value, "c_inv": c_keys, "trace_id": trace.trace_id,
            "final_residual": bool(trace.final_residual), "n_zs": len(trace.zs)}
    recs = [Record("trace-metadata", prefix, np.asarray(trace.plan.timesteps, dtype=np.float64), meta),
            grid_record(f"{prefix}/x_T", trace.x_T)]
    recs += [grid_record(f"{prefix}/z/{k}", z) for k, z in enumerate(trace.zs)]
    return recs


def trace_from_records(records: Sequence[Record], prefix: str = "trace") -> InversionTrace:
    meta_recs = find(records, "trace-metadata", prefix)
    if not meta_recs:
        raise CheckpointError(f"no trace metadata named {prefix!r}")
    rec = meta_recs[0]
    grids = {r.name: r.data.astype(np.float64) for r in find(records, "grid")}
    c = rec.meta["c_inv"]
    c_inv = tuple(parse_condition(k) for k in c) if isinstance(c, list) else parse_condition(c)
    zs = tuple(grids[f"{prefix}/z/{k}"] for k in range(rec.meta["n_zs"]))
    plan = StepPlan(tuple(int(t) for t in rec.data))
    return InversionTrace(SamplerKind(rec.meta["kind"]), grids[f"{prefix}/x_T"], zs, c_inv, plan,
                          final_residual=rec.meta["final_residual"], trace_id=rec.meta["trace_id"])
