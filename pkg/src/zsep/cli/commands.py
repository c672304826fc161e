"""Experiment commands behind the ``zsep`` CLI.

Each ``cmd_*`` takes a validated :class:`ExperimentConfig` and an output
directory, writes its artifacts there and returns a small summary dict. All
outputs are pure functions of the config, so re-runs are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from zsep import metrics
from zsep.cli import checkpoint as ckpt
from zsep.cli.config import ExperimentConfig, config_to_dict, dump_config, parse_config
from zsep.cli.svg import line_plot
from zsep.denoiser import AnalyticDenoiser, GaussianSourceModel, TinyDenoiser, init_params, train
from zsep.denoiser.base import Denoiser
from zsep.denoiser.conditions import NULL, Composite, Condition, Label, parse_condition
from zsep.denoiser.tiny import eval_loss
from zsep.inversion import ddim_invert, ddpm_invert, reconstruct
from zsep.sampler import SamplerKind
from zsep.scene import LabelRegistry, SyntheticScene, make_dataset, make_scenes
from zsep.separation import SeparationRequest, ablate_prompts, scene_seed, separate, sweep_omega

log = logging.getLogger(__name__)

CSV_COLUMNS = ("scene_id", "seed", "target_label", "omega", "sampler", "steps", "si_sdr_db", "spectral_l1", "desk_fad")


class AcceptanceError(AssertionError):
    """A requested acceptance assertion did not hold (exit code 4)."""


# -- io helpers ---------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def csv_text(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path: Path, rows: Iterable[dict], columns: Sequence[str]) -> Path:
    path.write_text(csv_text(rows, columns), encoding="utf-8")
    return path


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _prepare_out(cfg: ExperimentConfig, out: str | Path | None) -> Path:
    path = Path(out if out is not None else cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(dump_config(cfg), encoding="utf-8")
    return path


def ordered_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally over a process pool; order is preserved."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# -- building blocks ----------------------------------------------------------------------


def registry_of(cfg: ExperimentConfig) -> LabelRegistry:
    return LabelRegistry([lab.build() for lab in cfg.labels])


def dataset_of(cfg: ExperimentConfig):
    d = cfg.dataset
    return make_dataset([lab.build() for lab in cfg.labels], d.n_per_label, d.pairs, d.dims, d.seed)


def scenes_of(cfg: ExperimentConfig) -> list[SyntheticScene]:
    s = cfg.scenes
    if s.count < 1:
        raise ValueError("scene list is empty")
    return make_scenes(registry_of(cfg), s.count, cfg.dataset.dims, s.seed, s.n_sources)


def fit_model(cfg: ExperimentConfig, hidden: int | None = None, seed: int | None = None):
    """Train (tiny) or moment-match (analytic) a denoiser.

    Returns ``(records, losses)``. Parameters pass through the float32
    container encoding, so a model used in-process and one reloaded from its
    checkpoint behave identically.
    """
    spec = cfg.denoiser
    seed = cfg.seed if seed is None else seed
    data = dataset_of(cfg)
    if spec.kind == "analytic":
        return ckpt.gaussian_records(GaussianSourceModel.fit(data, min_std=spec.min_std)), []
    params = init_params(cfg.dataset.dims, [lab.id for lab in cfg.labels], hidden=hidden or spec.hidden,
                         d_t=spec.d_t, d_c=spec.d_c, p_uncond=spec.p_uncond, include_pairs=cfg.dataset.pairs,
                         seed=seed)
    if spec.epochs == 0:
        return ckpt.params_records(params), []
    res = train(params, data, cfg.schedule.build(), spec.epochs, spec.lr, seed=seed, batch_size=spec.batch_size,
                lr_decay=spec.lr_decay, dtype=np.dtype(spec.dtype).type)
    return ckpt.params_records(res.params), res.losses


def model_from_records(records: Sequence[ckpt.Record], cfg: ExperimentConfig) -> Denoiser:
    sched = cfg.schedule.build()
    if ckpt.find(records, "params", "tiny/config"):
        return TinyDenoiser(ckpt.params_from_records(records), sched)
    if ckpt.find(records, "gaussian-model", "gaussian/config"):
        return AnalyticDenoiser(ckpt.gaussian_from_records(records), sched)
    raise ckpt.CheckpointError("container holds no denoiser")


def load_or_fit(cfg: ExperimentConfig, model_path: str | Path | None = None) -> Denoiser:
    if model_path is not None:
        return model_from_records(ckpt.read_checkpoint(model_path), cfg)
    records, _ = fit_model(cfg)
    return model_from_records(records, cfg)


def _kind(cfg: ExperimentConfig) -> SamplerKind:
    return SamplerKind(cfg.sampler)


def _c_inv_for(cfg: ExperimentConfig, scene: SyntheticScene | None, target: Condition) -> Condition:
    policy = cfg.guidance.c_inv
    if policy == "null":
        return NULL
    if policy == "other":
        if scene is None:
            raise ValueError("c_inv policy 'other' needs a scene with labeled sources")
        others = [i for i in scene.label_ids if not (isinstance(target, Label) and target.id == i)]
        if not others:
            raise ValueError(f"scene {scene.scene_id} has no source other than the target")
        return Label(others[0])
    return parse_condition(policy)


def _target_cell(c: Condition):
    return c.id if isinstance(c, Label) else c.key()


# -- commands -----------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, out=None) -> dict:
    out = _prepare_out(cfg, out)
    records, losses = fit_model(cfg)
    ckpt.write_checkpoint(out / "model.zsep", records)
    write_csv(out / "train_loss.csv", ({"epoch": e, "loss": v} for e, v in enumerate(losses)), ("epoch", "loss"))
    if any(not math.isfinite(v) for v in losses):
        raise FloatingPointError("training produced a non-finite loss")
    log.info("trained %s denoiser: %d epochs", cfg.denoiser.kind, len(losses))
    return {"checkpoint": str(out / "model.zsep"), "epochs": len(losses),
            "final_loss": losses[-1] if losses else None}


def cmd_separate(cfg: ExperimentConfig, out=None, model_path=None, grid_path=None, grid_name=None,
                 scene_index: int = 0, targets: Sequence[str] | None = None) -> dict:
    """Separate one mixture (a configured scene or a grid record) into its targets."""
    out = _prepare_out(cfg, out)
    model = load_or_fit(cfg, model_path)
    sched = cfg.schedule.build()
    scene = None
    if grid_path is not None:
        grids = ckpt.find(ckpt.read_checkpoint(grid_path), "grid", grid_name)
        if not grids:
            raise ValueError(f"{grid_path}: no grid record{' named ' + grid_name if grid_name else ''}")
        mixture = grids[0].data.astype(np.float64)
        scene_id, seed = scene_index, cfg.seed
    else:
        scenes = scenes_of(cfg)
        if not 0 <= scene_index < len(scenes):
            raise ValueError(f"scene index {scene_index} outside 0..{len(scenes) - 1}")
        scene = scenes[scene_index]
        mixture, scene_id, seed = scene.mixture, scene.scene_id, scene.seed
    if targets:
        conds = [parse_condition(t) for t in targets]
    elif cfg.targets is not None:
        conds = [Label(i) for i in cfg.targets]
    elif scene is not None:
        conds = [Label(i) for i in scene.label_ids]
    else:
        conds = [Label(lab.id) for lab in cfg.labels]
    for c in conds:
        if not isinstance(c, (Label, Composite)) and cfg.guidance.omega != 0:
            raise ValueError(f"target {c.key()} is not a label or composite")
    plan = cfg.plan.build(sched.T)
    c_inv = _c_inv_for(cfg, scene, conds[0])
    req = SeparationRequest(mixture, conds, plan, c_inv=c_inv, omega=cfg.guidance.omega, kind=_kind(cfg),
                            seed=scene_seed(cfg.seed, scene) if scene is not None else cfg.seed)
    res = separate(model, sched, req, truth=scene)
    records = [ckpt.grid_record("mixture", mixture, scene_id=scene_id)]
    rows = []
    for c, o, d in zip(res.targets, res.outputs, res.diagnostics):
        records.append(ckpt.grid_record(f"output/{c.key()}", o, target=c.key(), trace_id=res.trace_id))
        fad = None
        if scene is not None:
            ref = _reference(scene, c)
            fad = metrics.desk_fad(o[None], ref[None]) if ref is not None else None
        rows.append({"scene_id": scene_id, "seed": seed, "target_label": _target_cell(c),
                     "omega": cfg.guidance.omega, "sampler": cfg.sampler, "steps": len(plan),
                     "si_sdr_db": d.get("si_sdr_db"), "spectral_l1": d.get("spectral_l1"), "desk_fad": fad})
    records.append(ckpt.Record("trace-metadata", "separation", np.asarray(plan.timesteps, dtype=np.float64),
                               {"trace_id": res.trace_id, "c_inv": c_inv.key(), "sampler": cfg.sampler,
                                "omega": cfg.guidance.omega, "targets": [c.key() for c in res.targets]}))
    ckpt.write_checkpoint(out / "separated.zsep", records)
    write_csv(out / "separate.csv", rows, CSV_COLUMNS)
    return {"outputs": len(res.outputs), "trace_id": res.trace_id, "rows": rows}


def _reference(scene: SyntheticScene, c: Condition):
    try:
        if isinstance(c, Label):
            return scene.source_for(c.id)
        if isinstance(c, Composite):
            return np.sum([scene.source_for(i) for i in c.ids], axis=0)
    except KeyError:
        return None
    return None


def peak_violations(summary: dict) -> list[str]:
    """Check the guidance-sweep shape on median SI-SDR.

    Medians must rise strictly over the grid points up to ``omega = 1`` and the
    largest ``omega`` above 1 must fall strictly below ``m(1)``.
    """
    med = {float(o): v["median_si_sdr_db"] for o, v in summary.items()}
    if 1.0 not in med:
        return ["omega grid does not contain 1"]
    problems = []
    low = sorted(o for o in med if o <= 1.0)
    for a, b in zip(low, low[1:]):
        if not med[b] > med[a]:
            problems.append(f"m({b:g}) = {med[b]:.3f} is not above m({a:g}) = {med[a]:.3f}")
    high = [o for o in med if o > 1.0]
    if high and not med[max(high)] < med[1.0]:
        problems.append(f"m({max(high):g}) = {med[max(high)]:.3f} is not below m(1) = {med[1.0]:.3f}")
    return problems


def cmd_sweep_omega(cfg: ExperimentConfig, out=None, model_path=None, assert_peak: bool = False) -> dict:
    out = _prepare_out(cfg, out)
    model = load_or_fit(cfg, model_path)
    sched = cfg.schedule.build()
    res = sweep_omega(model, sched, scenes_of(cfg), omegas=cfg.omegas, kind=_kind(cfg),
                      plan=cfg.plan.build(sched.T), seed=cfg.seed)
    write_csv(out / "sweep_omega.csv", res["rows"], CSV_COLUMNS)
    summary = res["summary"]
    omegas = sorted(summary)
    cols = ("omega", "median_si_sdr_db", "mean_si_sdr_db", "mean_spectral_l1", "desk_fad")
    write_csv(out / "sweep_omega_summary.csv", ({"omega": o, **summary[o]} for o in omegas), cols)
    svg = line_plot(omegas, {
        "median SI-SDR (dB)": [summary[o]["median_si_sdr_db"] for o in omegas],
        "mean spectral L1": [summary[o]["mean_spectral_l1"] for o in omegas],
        "desk-FAD": [summary[o]["desk_fad"] for o in omegas],
    }, title="Separation metrics vs guidance weight", xlabel="omega", ylabel="normalized value", normalize=True)
    (out / "sweep_omega.svg").write_text(svg, encoding="utf-8")
    problems = peak_violations(summary)
    if assert_peak and problems:
        raise AcceptanceError("; ".join(problems))
    return {"summary": summary, "violations": problems}


ABLATION_COLUMNS = ("scene_id", "seed", "config", "c_inv", "c_rev", "target_label", "omega", "sampler", "steps",
                    "si_sdr_db", "spectral_l1", "desk_fad", "delta_si_sdr_db", "delta_spectral_l1", "delta_desk_fad")


def cmd_ablate_prompts(cfg: ExperimentConfig, out=None, model_path=None) -> dict:
    out = _prepare_out(cfg, out)
    model = load_or_fit(cfg, model_path)
    sched = cfg.schedule.build()
    res = ablate_prompts(model, sched, scenes_of(cfg), kind=_kind(cfg), plan=cfg.plan.build(sched.T),
                         seed=cfg.seed, omega=cfg.guidance.omega)
    write_csv(out / "ablate_prompts.csv", res["rows"], ABLATION_COLUMNS)
    cols = ("config", "median_si_sdr_db", "delta_median_si_sdr_db", "mean_spectral_l1", "desk_fad")
    write_csv(out / "ablate_prompts_summary.csv", ({"config": k, **v} for k, v in res["summary"].items()), cols)
    return {"summary": res["summary"]}


ROUNDTRIP_COLUMNS = ("scene_id", "seed", "sampler", "steps", "max_abs_err", "rel_l2_err", "si_sdr_db")
TABLE2_COLUMNS = ("scene_id", "seed", "method", "steps", "si_sdr_db", "spectral_l1", "desk_fad")


def roundtrip_rows(model: Denoiser, cfg: ExperimentConfig, scenes: Sequence[SyntheticScene]) -> list[dict]:
    """Inversion round-trip errors under the null condition for every plan length."""
    if not scenes:
        raise ValueError("scene list is empty")
    sched = cfg.schedule.build()
    X = np.stack([s.mixture for s in scenes])
    rows = []
    for steps in cfg.roundtrip_steps:
        plan = cfg.plan.model_copy(update={"steps": steps, "timesteps": None}).build(sched.T)
        for kind in (SamplerKind.DDIM, SamplerKind.DDPM):
            if kind is SamplerKind.DDIM:
                trace = ddim_invert(model, sched, plan, X, NULL)
            else:
                trace = ddpm_invert(model, sched, plan, X, NULL, seed=[scene_seed(cfg.seed, s) for s in scenes])
            Y = reconstruct(model, sched, trace)
            for s, x, y in zip(scenes, X, Y):
                rows.append({"scene_id": s.scene_id, "seed": s.seed, "sampler": kind.value, "steps": len(plan),
                             "max_abs_err": float(np.max(np.abs(y - x))),
                             "rel_l2_err": float(np.linalg.norm(y - x) / np.linalg.norm(x)),
                             "si_sdr_db": metrics.si_sdr(y, x)})
    rows.sort(key=lambda r: (r["sampler"], r["steps"], r["scene_id"]))
    return rows


def cmd_roundtrip(cfg: ExperimentConfig, out=None, model_path=None) -> dict:
    out = _prepare_out(cfg, out)
    scenes = scenes_of(cfg)
    model = load_or_fit(cfg, model_path)
    rows = roundtrip_rows(model, cfg, scenes)
    write_csv(out / "roundtrip.csv", rows, ROUNDTRIP_COLUMNS)
    rep = metrics.table2_demo(model, cfg.schedule.build(), scenes, steps=cfg.table2_steps)
    write_csv(out / "table2.csv", rep.rows, TABLE2_COLUMNS)
    medians = {}
    for r in rows:
        medians.setdefault((r["sampler"], r["steps"]), []).append(r["rel_l2_err"])
    return {"median_rel_l2": {f"{k[0]}/{k[1]}": float(np.median(v)) for k, v in sorted(medians.items())},
            "table2": {"si_sdr_db": rep.si_sdr_db, "desk_fad": rep.desk_fad}}


CAPACITY_COLUMNS = ("hidden", "seed", "n_params", "final_train_loss", "eval_loss", "median_si_sdr_db")


def _capacity_job(job: tuple[dict, int, int]) -> dict:
    cfg_dict, hidden, seed = job
    cfg = parse_config(cfg_dict)
    records, losses = fit_model(cfg, hidden=hidden, seed=seed)
    model = model_from_records(records, cfg)
    sched = cfg.schedule.build()
    res = sweep_omega(model, sched, scenes_of(cfg), omegas=[cfg.guidance.omega], kind=_kind(cfg),
                      plan=cfg.plan.build(sched.T), seed=cfg.seed)
    params = model.params
    return {"hidden": hidden, "seed": seed, "n_params": int(sum(a.size for a in params.arrays().values())),
            "final_train_loss": losses[-1] if losses else None,
            "eval_loss": eval_loss(params, dataset_of(cfg), sched),
            "median_si_sdr_db": res["summary"][float(cfg.guidance.omega)]["median_si_sdr_db"]}


def capacity_rows(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    if cfg.denoiser.kind != "tiny":
        raise ValueError("capacity-sweep needs a tiny denoiser config")
    d = config_to_dict(cfg)
    work = [(d, h, s) for h in cfg.capacity.hidden for s in cfg.capacity.seeds]
    return ordered_map(_capacity_job, work, jobs)


def capacity_correlation(rows: Sequence[dict], loss_key: str = "final_train_loss") -> float:
    """Spearman rank correlation between inverted loss and median SI-SDR."""
    q = [-float(r[loss_key]) for r in rows]
    m = [float(r["median_si_sdr_db"]) for r in rows]
    return float(spearmanr(q, m).statistic)


def cmd_capacity_sweep(cfg: ExperimentConfig, out=None, jobs: int = 1) -> dict:
    out = _prepare_out(cfg, out)
    rows = capacity_rows(cfg, jobs)
    write_csv(out / "capacity.csv", rows, CAPACITY_COLUMNS)
    rho = capacity_correlation(rows)
    rho_eval = capacity_correlation(rows, "eval_loss")
    write_csv(out / "capacity_summary.csv",
              [{"quality": "final_train_loss", "spearman": rho}, {"quality": "eval_loss", "spearman": rho_eval}],
              ("quality", "spearman"))
    return {"spearman": rho, "spearman_eval": rho_eval, "rows": rows}


def _fmt(v: str, digits: int = 3) -> str:
    try:
        return f"{float(v):.{digits}f}"
    except ValueError:
        return v


def cmd_report(cfg: ExperimentConfig, out=None) -> dict:
    """Collect whatever result tables exist in ``out`` into ``report.md``."""
    out = _prepare_out(cfg, out)
    sections = []
    p = out / "sweep_omega_summary.csv"
    if p.exists():
        rows = read_csv(p)
        lines = ["## Guidance sweep", "", "| omega | median SI-SDR (dB) | mean spectral L1 | desk-FAD |",
                 "|---|---|---|---|"]
        lines += [f"| {r['omega']} | {_fmt(r['median_si_sdr_db'], 2)} | {_fmt(r['mean_spectral_l1'], 4)} "
                  f"| {_fmt(r['desk_fad'], 4)} |" for r in rows]
        summary = {float(r["omega"]): {"median_si_sdr_db": float(r["median_si_sdr_db"])} for r in rows}
        problems = peak_violations(summary)
        lines += ["", "Shape check: " + ("holds" if not problems else "; ".join(problems))]
        sections.append("\n".join(lines))
    p = out / "ablate_prompts_summary.csv"
    if p.exists():
        rows = read_csv(p)
        lines = ["## Prompt ablation", "", "| config | median SI-SDR (dB) | delta vs baseline | desk-FAD |",
                 "|---|---|---|---|"]
        lines += [f"| {r['config']} | {_fmt(r['median_si_sdr_db'], 2)} | {_fmt(r['delta_median_si_sdr_db'], 2)} "
                  f"| {_fmt(r['desk_fad'], 4)} |" for r in rows]
        sections.append("\n".join(lines))
    p = out / "roundtrip.csv"
    if p.exists():
        groups: dict[tuple[str, int], list[float]] = {}
        for r in read_csv(p):
            groups.setdefault((r["sampler"], int(r["steps"])), []).append(float(r["max_abs_err"]))
        lines = ["## Inversion round trip", "", "| sampler | steps | median max-abs error |", "|---|---|---|"]
        lines += [f"| {k[0]} | {k[1]} | {np.median(v):.3e} |" for k, v in sorted(groups.items())]
        sections.append("\n".join(lines))
    p = out / "table2.csv"
    if p.exists():
        groups = {}
        fad = {}
        for r in read_csv(p):
            groups.setdefault(r["method"], []).append(float(r["si_sdr_db"]))
            fad[r["method"]] = float(r["desk_fad"])
        lines = ["## Sample-level vs distribution-level scores", "",
                 "| method | median SI-SDR vs mixture (dB) | desk-FAD vs mixtures |", "|---|---|---|"]
        lines += [f"| {k} | {np.median(v):.2f} | {fad[k]:.4f} |" for k, v in groups.items()]
        sections.append("\n".join(lines))
    p = out / "capacity_summary.csv"
    if p.exists():
        lines = ["## Capacity", "", "| quality measure | Spearman vs median SI-SDR |", "|---|---|"]
        lines += [f"| {r['quality']} | {_fmt(r['spearman'], 3)} |" for r in read_csv(p)]
        sections.append("\n".join(lines))
    if not sections:
        raise ValueError(f"no result tables found in {out}")
    text = "# zsep report\n\n" + "\n\n".join(sections) + "\n"
    (out / "report.md").write_text(text, encoding="utf-8")
    return {"sections": len(sections)}


def summary_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=str)
