"""Command-line entry point.

Every subcommand reads ``--config`` (default: built-in defaults), applies
``--set key=value`` overrides and ``--seed``, and writes under ``--out``.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..denoiser import build, depth_profile
from ..tschedule import gamma_schedule, uniform_schedule
from . import checkpoint, runs
from .config import ConfigError, RunConfig, load_config
from .files import OverwriteError, RunDir, manifest_text, read_csv, read_manifest

log = logging.getLogger("i2icompress")

COMMANDS = ("gen-data", "train", "finetune", "sample", "ts-search", "depth-search", "multi-depth",
            "profile", "evaluate", "report", "pipeline")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="set every seed.* key")
    common.add_argument("--out", default="run", help="output directory (default: run)")
    common.add_argument("--force", action="store_true", help="allow overwriting existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="i2icompress", description="Depth-skip pruning and gamma time-step search on toy diffusion.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help, ckpt=False):
        sp = sub.add_parser(name, parents=[common], help=help)
        if ckpt:
            sp.add_argument("--ckpt", help="checkpoint (default: <out>/model.ckpt)")
        return sp

    add("gen-data", "write dataset seed manifest and example pairs")
    sp = add("train", "train the denoiser")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp = add("finetune", "fine-tune a depth-skipped model", ckpt=True)
    sp.add_argument("--depth", type=int, help="depth (default: finetune.depth, else depth_search.manifest)")
    sp = add("sample", "sample validation conditions", ckpt=True)
    sp.add_argument("--depth", type=int, help="run the model at this depth")
    add("ts-search", "gamma time-step search (one run per search.guidance value)", ckpt=True)
    add("depth-search", "depth-skip search", ckpt=True)
    add("multi-depth", "exhaustive per-step-group depth table and Pareto summary", ckpt=True)
    sp = add("profile", "per-depth parameter and MAC profile", ckpt=True)
    sp.add_argument("--no-ckpt", action="store_true", help="profile a freshly built model from the config")
    sp = add("evaluate", "PSNR of uniform and gamma schedules against the N-step reference", ckpt=True)
    sp.add_argument("--gamma", type=float, action="append", default=[],
                    help="gamma per eval.steps entry (default: from ts_search.manifest)")
    sp.add_argument("--pruned", help="also evaluate this (fine-tuned) checkpoint")
    sp = add("report", "consolidate eval_summary.csv into report.csv and report.txt")
    sp.add_argument("--run", help="run directory (default: --out)")
    add("pipeline", "train, depth-search, fine-tune, ts-search, evaluate and report")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg.apply(args.set)
    if args.seed is not None:
        cfg.set_seed(args.seed)
    return cfg


def _model(args, out: RunDir):
    path = Path(args.ckpt) if getattr(args, "ckpt", None) else out.path("model.ckpt")
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, _ = checkpoint.load(path)
    return model


def _progress(step: int, loss: float) -> None:
    log.info("step %d loss %.5f", step, loss)


def run(argv: list[str]) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = _config(args)
    out = RunDir(args.out, force=args.force)
    out.root.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "gen-data":
        runs.gen_data(cfg, out)
    elif cmd == "train":
        resume = checkpoint.load(args.resume)[0] if args.resume else None
        res = runs.train(cfg, out, resume=resume, progress=_progress)
        if res.log:
            print(f"trained {res.steps} steps, last-window loss {res.window(False):.5f}")
    elif cmd == "finetune":
        model = _model(args, out)
        depth = args.depth or cfg["finetune.depth"]
        if not depth:
            man = out.path("depth_search.manifest")
            if not man.is_file():
                raise UsageError("no --depth given, finetune.depth = 0 and no depth_search.manifest in --out")
            depth = int(read_manifest(man)["depth.chosen"])
        runs.finetune(cfg, model, depth, out, progress=_progress)
        print(f"fine-tuned at depth {depth}")
    elif cmd == "sample":
        model = _model(args, out)
        if args.depth:
            model.active_depth = args.depth
        runs.sample(cfg, model, out)
    elif cmd == "ts-search":
        for r in runs.ts_search(cfg, _model(args, out), [cfg["search.n"]], out):
            print(f"n={r.n} w={r.guidance:g}: gamma*={r.gamma:.4f} schedule={r.schedule.to_csv_line()} "
                  f"calls={r.report.sampler_calls}")
    elif cmd == "depth-search":
        res = runs.run_depth_search(cfg, _model(args, out), out)
        print(f"d*={res.depth} threshold={res.threshold:.3f} dB flags={','.join(res.report.flags) or 'none'}")
    elif cmd == "multi-depth":
        _, entries = runs.multi_depth(cfg, _model(args, out), out)
        print(out.path("pareto.txt").read_text(encoding="utf-8"), end="")
    elif cmd == "profile":
        model = build(cfg.unet(), cfg["seed.init"]) if args.no_ckpt else _model(args, out)
        text = depth_profile(model).to_csv()
        out.write_text("profile.csv", text)
        print(text, end="")
    elif cmd == "evaluate":
        _evaluate(args, cfg, out)
    elif cmd == "report":
        run_dir = Path(args.run) if args.run else out.root
        summary = run_dir / "eval_summary.csv"
        if not summary.is_file():
            raise UsageError(f"no eval_summary.csv in {run_dir}")
        csv_out, table = runs.report_from_rows(read_csv(summary))
        out.write_text("report.csv", csv_out)
        out.write_text("report.txt", table)
        print(table, end="")
    elif cmd == "pipeline":
        res = runs.run_pipeline(cfg, out, progress=_progress)
        print(out.path("report.txt").read_text(encoding="utf-8"), end="")
        print(f"d*={res.depth.depth} " + " ".join(f"gamma*(n={r.n},w={r.guidance:g})={r.gamma:.4f}" for r in res.ts))
    return 0


def _evaluate(args, cfg: RunConfig, out: RunDir) -> None:
    full = _model(args, out)
    steps = cfg["eval.steps"]
    gammas = list(args.gamma)
    ts_man = out.path("ts_search.manifest")
    if not gammas and ts_man.is_file():
        man = read_manifest(ts_man)
        w = cfg["search.guidance"][0]
        gammas = [float(man.get(f"ts.n{n}.w{w:g}.chosen", "nan")) for n in steps]
    if gammas and len(gammas) != len(steps):
        raise UsageError(f"need one --gamma per eval.steps entry ({len(steps)}), got {len(gammas)}")
    pruned = checkpoint.load(args.pruned)[0] if args.pruned else None
    methods = []
    for i, n in enumerate(steps):
        methods.append(runs.Method(f"uniform-{n}", full, uniform_schedule(n, cfg.t_max)))
        if gammas and gammas[i] == gammas[i]:
            sched = gamma_schedule(gammas[i], n, cfg.t_max, cfg["search.alpha"])
            methods.append(runs.Method(f"optimized-{n}", full, sched))
            if pruned is not None:
                methods.append(runs.Method(f"pruned-optimized-{n}", pruned, sched))
    res = runs.evaluate(cfg, full, methods, out)
    for m in methods:
        print(f"{m.name:<22} {res.mean(m.name):7.2f} dB")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OverwriteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
