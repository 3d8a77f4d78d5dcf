"""Workflows: data, training, fine-tuning, the two searches, evaluation and reporting.

Each workflow takes a :class:`RunConfig`, does its work in memory and, when
given a :class:`RunDir`, writes its artefacts plus a ``<phase>.manifest``.
Manifests hold no wall-clock values, so reruns under one seed reproduce them
byte for byte.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..denoiser import DenoiserModel, build, depth_profile
from ..diffusion import NoiseSchedule, SamplerSpec, ddim_sample, linear_beta_schedule, training_loss
from ..numerics import Adam, Tape, stream
from ..search import (
    DepthQualityObjective,
    DepthSearchConfig,
    MultiDepthConfig,
    SamplingObjective,
    SearchReport,
    TsSearchConfig,
    depth_search,
    multi_depth_csv,
    multi_depth_enumerate,
    pareto_csv,
    pareto_report,
    pareto_table,
    ts_optimize,
)
from ..tasks import VALIDATION_OFFSET, make_batch, make_pair, psnr, to_unit, validation_seeds
from ..tschedule import TimestepSchedule, gamma_schedule, uniform_schedule
from . import checkpoint
from .config import RunConfig
from .files import RunDir, build_id, csv_text, digest, manifest_text

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def noise_schedule(cfg: RunConfig) -> NoiseSchedule:
    return linear_beta_schedule(cfg["diffusion.T"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"])


def train_scene_seeds(cfg: RunConfig) -> np.ndarray:
    size = cfg["train.dataset_size"]
    base = cfg["seed.data"] * size
    if base < 0 or base + size > VALIDATION_OFFSET:
        raise ValueError(f"training seeds [{base}, {base + size}) overlap the validation range")
    return np.arange(base, base + size)


def search_scene_seeds(cfg: RunConfig, count: int, label: str = "search") -> list[int]:
    """A fixed random subset of the training scenes."""
    pool = train_scene_seeds(cfg)
    if count > len(pool):
        raise ValueError(f"asked for {count} search images from {len(pool)} training scenes")
    pick = stream(cfg["seed.search"], label).choice(len(pool), size=count, replace=False)
    return [int(s) for s in np.sort(pool[pick])]


def _batch(cfg: RunConfig, seeds: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    return make_batch(cfg["task"], seeds, cfg["unet.image_size"], cfg["unet.channels"])


def _f(x: float) -> str:
    return f"{x:.6f}"


# ------------------------------------------------------------------ gen-data


def gen_data(cfg: RunConfig, out: RunDir | None = None) -> dict[str, str]:
    train = train_scene_seeds(cfg)
    val = list(validation_seeds(cfg["eval.batch"]))
    items = {"task": cfg["task"], "train.first": int(train[0]), "train.count": len(train),
             "validation.first": val[0], "validation.count": len(val)}
    if out is not None:
        rows = [("train", int(s)) for s in train] + [("validation", s) for s in val]
        out.write_text("data/seeds.csv", csv_text(["split", "seed"], rows))
        for s in list(train[: cfg["eval.dump"]]) + val[: cfg["eval.dump"]]:
            pair = make_pair(cfg["task"], int(s), cfg["unet.image_size"], cfg["unet.channels"])
            out.write_image(f"data/{int(s)}_cond{_ext(pair.cond)}", pair.cond)
            out.write_image(f"data/{int(s)}_target{_ext(pair.target)}", pair.target)
        items["files"] = ",".join(out.written)
        out.write_text("gen-data.manifest", manifest_text(items))
    return {k: str(v) for k, v in items.items()}


def _ext(img: np.ndarray) -> str:
    return ".pgm" if img.shape[0] == 1 else ".ppm"


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    model: DenoiserModel
    log: list[tuple[int, float, float]] = field(default_factory=list)  # (step, window mean loss, lr)
    steps: int = 0

    def window(self, first: bool) -> float:
        return self.log[0][1] if first else self.log[-1][1]

    def loss_csv(self) -> str:
        return csv_text(["step", "loss", "lr"], [(s, f"{l:.9g}", f"{lr:.6g}") for s, l, lr in self.log])


def lr_at(step: int, steps: int, lr: float, decay_fraction: float) -> float:
    """Constant, then linear decay over the final ``decay_fraction`` of the run."""
    if decay_fraction <= 0:
        return lr
    span = decay_fraction * steps
    return lr * min(1.0, (steps - step) / span)


def optimize(model: DenoiserModel, cfg: RunConfig, steps: int, lr: float, label: str,
             trainable: Sequence[str] | None = None,
             progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam on the denoising loss over the pre-generated training pairs.

    Only ``trainable`` parameters (default: all) are handed to the optimiser.
    """
    names = list(model.params) if trainable is None else list(trainable)
    result = TrainResult(model)
    if steps <= 0:
        return result
    cond, x0 = _batch(cfg, train_scene_seeds(cfg))
    dtype = next(iter(model.params.values())).dtype
    cond, x0 = cond.astype(dtype), x0.astype(dtype)
    sched = noise_schedule(cfg)
    opt = Adam({n: model.params[n] for n in names}, lr=lr, beta1=cfg["train.beta1"],
               beta2=cfg["train.beta2"], eps=cfg["train.eps"])
    rng = stream(cfg["seed.noise"], label)
    every = max(1, cfg["train.log_every"])
    window: list[float] = []
    batch = cfg["train.batch"]
    for i in range(steps):
        opt.state.lr = lr_at(i, steps, lr, cfg["train.decay_fraction"])
        idx = rng.integers(0, len(x0), size=batch)
        opt.zero_grad()
        try:
            with Tape() as tape:
                loss = training_loss(model, x0[idx], cond[idx], sched, rng, cfg["diffusion.p_drop"])
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError("loss")
            tape.backward(loss)
            opt.step()
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite values at step {i} ({exc})") from None
        window.append(value)
        if (i + 1) % every == 0 or i + 1 == steps:
            result.log.append((i + 1, float(np.mean(window)), opt.state.lr))
            window = []
            if progress is not None:
                progress(i + 1, result.log[-1][1])
    result.steps = steps
    return result


def train(cfg: RunConfig, out: RunDir | None = None, resume: DenoiserModel | None = None,
          progress=None) -> TrainResult:
    model = resume if resume is not None else build(cfg.unet(), cfg["seed.init"], cfg["diffusion.T"])
    res = optimize(model, cfg, cfg["train.steps"], cfg["train.lr"], "train", progress=progress)
    if out is not None:
        blob = checkpoint.save(model, out._claim("model.ckpt"), {"phase": "train"})
        out.write_text("loss.csv", res.loss_csv())
        items = {"build": build_id(), **{f"config.{k}": v for k, v in _cfg_items(cfg)},
                 "train.steps": res.steps, "train.checkpoint": "model.ckpt", "train.checkpoint_digest": digest(blob)}
        if res.log:
            items["train.loss_first_window"] = f"{res.window(True):.9g}"
            items["train.loss_last_window"] = f"{res.window(False):.9g}"
        out.write_text("train.manifest", manifest_text(items))
    return res


def _cfg_items(cfg: RunConfig):
    for line in cfg.to_text().splitlines():
        yield line.split(" = ", 1)


def finetune(cfg: RunConfig, model: DenoiserModel, depth: int, out: RunDir | None = None,
             progress=None) -> TrainResult:
    """Train only the parameters at levels <= ``depth`` with the model running at that depth."""
    tuned = model.copy()
    if depth >= model.config.d_max:
        log.warning("fine-tune requested at d_max = %d: nothing is pruned, skipping", depth)
        tuned.active_depth = model.config.d_max
        res = TrainResult(tuned)
    else:
        tuned.active_depth = depth
        steps = int(round(cfg["finetune.step_fraction"] * cfg["train.steps"]))
        lr = cfg["finetune.lr_scale"] * cfg["train.lr"]
        res = optimize(tuned, cfg, steps, lr, f"finetune/{depth}", trainable=tuned.names_up_to(depth),
                       progress=progress)
    if out is not None:
        blob = checkpoint.save(tuned, out._claim("finetuned.ckpt"), {"phase": "finetune"})
        out.write_text("finetune_loss.csv", res.loss_csv())
        out.write_text("finetune.manifest", manifest_text({
            "finetune.depth": depth, "finetune.steps": res.steps,
            "finetune.checkpoint": "finetuned.ckpt", "finetune.checkpoint_digest": digest(blob),
        }))
    return res


# ------------------------------------------------------------------ sampling


def sample(cfg: RunConfig, model: DenoiserModel, out: RunDir | None = None) -> np.ndarray:
    seeds = list(validation_seeds(cfg["sample.count"]))
    cond, target = _batch(cfg, seeds)
    steps = cfg["sample.steps"]
    sched = uniform_schedule(steps, cfg.t_max) if cfg["sample.gamma"] == 1.0 else \
        gamma_schedule(cfg["sample.gamma"], steps, cfg.t_max, cfg["search.alpha"])
    spec = SamplerSpec(sched, guidance=cfg["sample.guidance"])
    x = ddim_sample(model, cond, spec, seeds, noise_schedule(cfg))
    if out is not None:
        for i, s in enumerate(seeds):
            out.write_image(f"samples/{s}{_ext(x[i])}", to_unit(x[i]))
        out.write_text("sample.manifest", manifest_text({
            "schedule": sched.to_csv_line(), "guidance": cfg["sample.guidance"],
            "digest": digest(np.ascontiguousarray(x).tobytes()),
        }))
    return x


# ------------------------------------------------------------------ searches


def ts_config(cfg: RunConfig, n: int | None = None, guidance: float | None = None) -> TsSearchConfig:
    return TsSearchConfig(
        n=cfg["search.n"] if n is None else n, N=cfg["search.N"], step=cfg["search.step"],
        probe=cfg["search.probe"], batch=cfg["search.batch"], direction_mode=cfg["search.direction_mode"],
        refine=cfg["search.refine"], alpha=cfg["search.alpha"], t_max=cfg.t_max,
        guidance=cfg["search.guidance"][0] if guidance is None else guidance, eta=cfg["search.eta"],
    )


@dataclass
class TsResult:
    n: int
    guidance: float
    gamma: float
    schedule: TimestepSchedule
    report: SearchReport


def ts_search(cfg: RunConfig, model: DenoiserModel, ns: Sequence[int] | None = None,
              out: RunDir | None = None, tag: str = "ts_search") -> list[TsResult]:
    """Gamma search for every requested step count and every guidance scale."""
    ns = [cfg["search.n"]] if ns is None else list(ns)
    seeds = search_scene_seeds(cfg, cfg["search.batch"])
    cond, _ = _batch(cfg, seeds)
    results = []
    items: dict[str, object] = {"ts.seeds_digest": digest(",".join(map(str, seeds)).encode())}
    for n in ns:
        for w in cfg["search.guidance"]:
            tcfg = ts_config(cfg, n, w)
            obj = SamplingObjective(model, cond, seeds, noise_schedule(cfg), tcfg)
            gamma, report = ts_optimize(obj, tcfg, seeds)
            sched = gamma_schedule(gamma, n, cfg.t_max, cfg["search.alpha"])
            results.append(TsResult(n, w, gamma, sched, report))
            key = f"ts.n{n}.w{w:g}"
            items.update({f"{key}.{k.split('.', 1)[1]}": v for k, v in report.manifest_items("x").items()
                          if not k.startswith("x.config.")})
            items[f"{key}.schedule"] = sched.to_csv_line()
            items[f"{key}.instrumented_calls"] = obj.calls
            if out is not None:
                out.write_text(f"{tag}_n{n}_w{w:g}.csv", report.to_csv())
    if out is not None:
        out.write_text(f"{tag}.manifest", manifest_text(items))
    return results


def depth_objective(cfg: RunConfig, model: DenoiserModel, batch: int, steps: int) -> DepthQualityObjective:
    seeds = search_scene_seeds(cfg, batch)
    cond, _ = _batch(cfg, seeds)
    return DepthQualityObjective(model.with_depth(model.config.d_max), cond, seeds, noise_schedule(cfg),
                                 steps, cfg.t_max, cfg["search.guidance"][0], cfg["search.eta"])


@dataclass
class DepthResult:
    depth: int
    threshold: float
    self_psnr: float | None
    report: SearchReport
    qualities: dict[int, float]


def run_depth_search(cfg: RunConfig, model: DenoiserModel, out: RunDir | None = None) -> DepthResult:
    dcfg = DepthSearchConfig(cfg["depth.threshold"], cfg["depth.margin_db"], cfg["depth.batch"],
                             cfg["depth.steps"], cfg.t_max, cfg["search.guidance"][0], cfg["search.eta"])
    obj = depth_objective(cfg, model, dcfg.batch, dcfg.steps)
    self_q = None
    threshold = dcfg.threshold
    if threshold is None:
        self_q = obj.self_psnr()
        threshold = self_q - dcfg.margin_db
    d, report = depth_search(obj, threshold, config={"batch": dcfg.batch, "steps": dcfg.steps})
    report.sampler_calls = report.expected_calls = obj.calls
    qualities = {int(p.value): p.metric for p in report.probes}
    prof = depth_profile(model)
    if out is not None:
        out.write_text("depth_search.csv", report.to_csv())
        items = {"depth.chosen": d, "depth.threshold": _f(threshold),
                 "depth.self_psnr": "" if self_q is None else _f(self_q),
                 "depth.flags": ",".join(report.flags) or "none",
                 "depth.sampler_calls": obj.calls,
                 "depth.param_fraction": _f(prof.cum_params(d) / prof.total_params),
                 "depth.mac_fraction": _f(prof.cum_macs(d) / prof.total_macs)}
        for dd, q in qualities.items():
            items[f"depth.psnr.d{dd}"] = _f(q)
        out.write_text("depth_search.manifest", manifest_text(items))
    return DepthResult(d, threshold, self_q, report, qualities)


def multi_depth(cfg: RunConfig, model: DenoiserModel, out: RunDir | None = None):
    mcfg = MultiDepthConfig(cfg["multi.depths"], cfg["multi.n"], cfg["multi.group"], cfg["multi.batch"],
                            t_max=cfg.t_max)
    obj = depth_objective(cfg, model, mcfg.batch, mcfg.n)
    rows = multi_depth_enumerate(obj, mcfg)
    entries = pareto_report(rows)
    if out is not None:
        out.write_text("multi_depth.csv", multi_depth_csv(rows))
        out.write_text("pareto.csv", pareto_csv(entries))
        out.write_text("pareto.txt", pareto_table(entries))
        out.write_text("multi_depth.manifest", manifest_text({
            "multi.rows": len(rows), "multi.sampler_calls": obj.calls,
            "multi.csv_digest": digest(multi_depth_csv(rows).encode()),
        }))
    return rows, entries


# ------------------------------------------------------------------ evaluation


@dataclass
class Method:
    name: str
    model: DenoiserModel
    schedule: TimestepSchedule
    search_calls: int = 0


EVAL_COLUMNS = ("method", "steps", "image_index", "seed", "mse", "psnr")
SUMMARY_COLUMNS = ("method", "steps", "schedule", "psnr_mean", "psnr_std", "mse_mean", "search_calls")


@dataclass
class EvalResult:
    reference: np.ndarray
    outputs: dict[str, np.ndarray]
    psnr: dict[str, np.ndarray]
    mse: dict[str, np.ndarray]
    methods: list[Method]
    seeds: list[int]

    def mean(self, name: str) -> float:
        return float(np.mean(self.psnr[name]))

    def rows(self):
        for m in self.methods:
            for i, s in enumerate(self.seeds):
                yield (m.name, len(m.schedule), i, s, f"{self.mse[m.name][i]:.9g}", _f(self.psnr[m.name][i]))

    def summary_rows(self):
        for m in self.methods:
            p = self.psnr[m.name]
            yield (m.name, len(m.schedule), m.schedule.to_csv_line().replace(",", " "), _f(float(np.mean(p))),
                   _f(float(np.std(p))), f"{float(np.mean(self.mse[m.name])):.9g}", m.search_calls)


def evaluate(cfg: RunConfig, reference_model: DenoiserModel, methods: Sequence[Method],
             out: RunDir | None = None, tag: str = "eval") -> EvalResult:
    """Per-image PSNR of each method against the full model's N-step uniform output."""
    seeds = list(validation_seeds(cfg["eval.batch"]))
    cond, target = _batch(cfg, seeds)
    sched = noise_schedule(cfg)
    w = cfg["eval.guidance"]
    ref_model = reference_model.with_depth(reference_model.config.d_max)
    ref = ddim_sample(ref_model, cond, SamplerSpec(uniform_schedule(cfg["eval.N"], cfg.t_max), guidance=w),
                      seeds, sched)
    outputs, ps, ms = {}, {}, {}
    for m in methods:
        x = ddim_sample(m.model, cond, SamplerSpec(m.schedule, guidance=w), seeds, sched)
        q = psnr(to_unit(x), to_unit(ref))
        outputs[m.name], ps[m.name], ms[m.name] = x, q.psnr, q.mse
    res = EvalResult(ref, outputs, ps, ms, list(methods), seeds)
    if out is not None:
        out.write_text(f"{tag}.csv", csv_text(EVAL_COLUMNS, res.rows()))
        out.write_text(f"{tag}_summary.csv", csv_text(SUMMARY_COLUMNS, res.summary_rows()))
        for i in range(min(cfg["eval.dump"], len(seeds))):
            s = seeds[i]
            out.write_image(f"images/{s}_cond{_ext(cond[i])}", to_unit(cond[i]))
            out.write_image(f"images/{s}_target{_ext(target[i])}", to_unit(target[i]))
            out.write_image(f"images/{s}_reference{_ext(ref[i])}", to_unit(ref[i]))
            for m in methods:
                out.write_image(f"images/{s}_{m.name}{_ext(ref[i])}", to_unit(outputs[m.name][i]))
        items = {}
        for m in methods:
            items[f"{tag}.{m.name}.psnr_mean"] = _f(res.mean(m.name))
            items[f"{tag}.{m.name}.schedule"] = m.schedule.to_csv_line()
        out.write_text(f"{tag}.manifest", manifest_text(items))
    return res


# ------------------------------------------------------------------ report


REPORT_COLUMNS = ("steps", "method", "schedule", "psnr_mean", "psnr_std", "search_calls")


def report_from_rows(rows: Sequence[dict[str, str]]) -> tuple[str, str]:
    rows = sorted(rows, key=lambda r: (int(r["steps"]), r["method"]))
    csv_out = csv_text(REPORT_COLUMNS, [[r[c] for c in REPORT_COLUMNS] for r in rows])
    head = f"{'Steps':>5}  {'Method':<22} {'PSNR (dB)':>10} {'std':>7} {'Search calls':>13}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{int(r['steps']):>5}  {r['method']:<22} {float(r['psnr_mean']):>10.2f} "
                     f"{float(r['psnr_std']):>7.2f} {int(r['search_calls']):>13}")
    return csv_out, "\n".join(lines) + "\n"


# ------------------------------------------------------------------ pipeline


@dataclass
class PipelineResult:
    train: TrainResult
    depth: DepthResult
    finetuned: TrainResult
    ts: list[TsResult]
    evaluation: EvalResult
    manifest: str


def run_pipeline(cfg: RunConfig, out: RunDir, progress=None) -> PipelineResult:
    """train -> depth-search -> fine-tune at d* -> gamma search -> evaluate -> report."""
    tr = train(cfg, out, progress=progress)
    full = tr.model
    dres = run_depth_search(cfg, full, out)
    ft_depth = cfg["finetune.depth"] or dres.depth
    ftr = finetune(cfg, full, ft_depth, out)
    pruned = ftr.model
    ts = ts_search(cfg, full, cfg["eval.steps"], out)
    methods = []
    for n in cfg["eval.steps"]:
        opt = next(r for r in ts if r.n == n and r.guidance == cfg["search.guidance"][0])
        methods.append(Method(f"uniform-{n}", full, uniform_schedule(n, cfg.t_max)))
        methods.append(Method(f"optimized-{n}", full, opt.schedule, opt.report.sampler_calls))
        if pruned.active_depth < full.config.d_max:
            methods.append(Method(f"pruned-optimized-{n}", pruned, opt.schedule, opt.report.sampler_calls))
    if pruned.active_depth < full.config.d_max:
        methods.append(Method(f"pruned-uniform-{cfg['eval.N']}", pruned, uniform_schedule(cfg["eval.N"], cfg.t_max)))
    ev = evaluate(cfg, full, methods, out)
    csv_out, table = report_from_rows(
        [dict(zip(SUMMARY_COLUMNS, map(str, r))) for r in ev.summary_rows()]
    )
    out.write_text("report.csv", csv_out)
    out.write_text("report.txt", table)
    manifest = _merge_manifests(out, ["train", "depth_search", "finetune", "ts_search", "eval"])
    manifest += f"files = {','.join(sorted(out.written + ['pipeline.manifest']))}\n"
    out.write_text("pipeline.manifest", manifest)
    return PipelineResult(tr, dres, ftr, ts, ev, manifest)


def _merge_manifests(out: RunDir, phases: Sequence[str]) -> str:
    return "".join(out.path(f"{ph}.manifest").read_text(encoding="utf-8") for ph in phases)
