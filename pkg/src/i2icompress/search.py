"""Depth search, gamma (time-step) search and the exhaustive multi-depth table.

Both searches talk to an *objective* rather than to a model directly, so the
same walk runs against a trained denoiser or against a synthetic oracle:

* a gamma objective exposes ``reference()``, ``sample(gamma)``,
  ``distance(a, b)``, ``key(gamma)`` and a ``calls`` counter;
* a depth objective exposes ``quality(depth)`` and ``calls``.

:class:`SamplingObjective` and :class:`DepthQualityObjective` are the
model-backed implementations.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .denoiser import DenoiserModel, depth_profile
from .diffusion import NoiseSchedule, SamplerSpec, ddim_sample
from .tasks import batch_mse, mse_to_psnr, psnr, to_unit
from .tschedule import GammaSpec, default_alpha, gamma_schedule, uniform_schedule

log = logging.getLogger(__name__)

REFERENCE = "reference"
UNIFORM_LITERAL = "uniform-literal"


@dataclass
class TsSearchConfig:
    n: int = 5
    N: int = 50
    step: float = 0.05
    probe: float = 0.1
    batch: int = 64
    direction_mode: str = REFERENCE
    refine: bool = False
    alpha: float | None = None
    t_max: int = 999
    guidance: float = 1.0
    eta: float = 0.0
    max_probes: int = 400

    def __post_init__(self) -> None:
        if self.step <= 0 or self.probe <= 0:
            raise ValueError("step and probe offsets must be positive")
        if not 2 <= self.n < self.N:
            raise ValueError(f"need 2 <= n < N, got n={self.n}, N={self.N}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.direction_mode not in (REFERENCE, UNIFORM_LITERAL):
            raise ValueError(f"unknown direction_mode {self.direction_mode!r}")

    @property
    def alpha_value(self) -> float:
        return default_alpha(self.t_max) if self.alpha is None else self.alpha


@dataclass
class Probe:
    index: int
    phase: str
    value: float
    metric: float
    cumulative_calls: int


@dataclass
class SearchReport:
    kind: str
    config: dict
    seeds: list[int]
    probes: list[Probe] = field(default_factory=list)
    chosen: float | None = None
    sign: int | None = None
    sampler_calls: int = 0
    expected_calls: int = 0
    call_bound: int | None = None
    flags: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    def add(self, phase: str, value: float, metric: float, calls: int) -> None:
        self.probes.append(Probe(len(self.probes), phase, float(value), float(metric), int(calls)))

    def trajectory(self, phases: Sequence[str] = ("walk",)) -> list[float]:
        return [p.metric for p in self.probes if p.phase in phases]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["probe_index", "value", "metric", "cumulative_sampler_calls"])
        for p in self.probes:
            w.writerow([p.index, f"{p.value:.6f}", f"{p.metric:.9g}", p.cumulative_calls])
        return buf.getvalue()

    def manifest_items(self, prefix: str) -> dict[str, str]:
        """Deterministic key/value summary (wall-clock is left out on purpose)."""
        items = {
            f"{prefix}.chosen": f"{self.chosen:.6f}",
            f"{prefix}.probes": str(len(self.probes)),
            f"{prefix}.sampler_calls": str(self.sampler_calls),
            f"{prefix}.expected_calls": str(self.expected_calls),
            f"{prefix}.flags": ",".join(self.flags) or "none",
        }
        if self.sign is not None:
            items[f"{prefix}.sign"] = str(self.sign)
        if self.call_bound is not None:
            items[f"{prefix}.call_bound"] = str(self.call_bound)
        for k, v in sorted(self.config.items()):
            items[f"{prefix}.config.{k}"] = str(v)
        return items


# --------------------------------------------------------------------------- objectives


class SamplingObjective:
    """Gamma objective backed by DDIM sampling of a model on a fixed batch."""

    def __init__(self, model: DenoiserModel, cond: np.ndarray, seeds: Sequence[int],
                 schedule: NoiseSchedule, cfg: TsSearchConfig):
        self.model = model
        self.cond = cond
        self.seeds = list(seeds)
        self.schedule = schedule
        self.cfg = cfg
        self._cache: dict[tuple, np.ndarray] = {}
        self._reference: np.ndarray | None = None
        self.samplings = 0
        self._start = model.invocations

    @property
    def calls(self) -> int:
        return self.model.invocations - self._start

    def _run(self, steps) -> np.ndarray:
        spec = SamplerSpec(steps, eta=self.cfg.eta, guidance=self.cfg.guidance)
        self.samplings += 1
        return ddim_sample(self.model, self.cond, spec, self.seeds, self.schedule)

    def reference(self) -> np.ndarray:
        if self._reference is None:
            self._reference = self._run(uniform_schedule(self.cfg.N, self.cfg.t_max))
        return self._reference

    def key(self, gamma: float) -> tuple:
        return gamma_schedule(gamma, self.cfg.n, self.cfg.t_max, self.cfg.alpha_value).steps

    def sample(self, gamma: float) -> np.ndarray:
        sched = gamma_schedule(gamma, self.cfg.n, self.cfg.t_max, self.cfg.alpha_value)
        if sched.steps not in self._cache:
            self._cache[sched.steps] = self._run(sched)
        return self._cache[sched.steps]

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return batch_mse(a, b)

    def expected_calls(self) -> int:
        """Analytic sampler-call count for what has been sampled so far."""
        passes = 1 if self.cfg.guidance == 1.0 else 2
        n_ref = 1 if self._reference is not None else 0
        return len(self.seeds) * passes * (self.cfg.N * n_ref + self.cfg.n * (self.samplings - n_ref))


class QuadraticOracle:
    """Synthetic gamma objective: outputs are the gammas themselves, distance is squared gap.

    ``distance(reference, sample(g)) = (g - minimizer)**2``; ``profile`` lets a
    caller replace the map from gamma to "output" with any monotone function.
    """

    def __init__(self, minimizer: float, profile: Callable[[float], float] = lambda g: g,
                 batch: int = 1, n: int = 5, N: int = 50):
        self.minimizer = minimizer
        self.profile = profile
        self.batch, self.n, self.N = batch, n, N
        self.calls = 0
        self._have_reference = False

    def reference(self) -> float:
        if not self._have_reference:  # computed once, like a cached sampler reference
            self.calls += self.batch * self.N
            self._have_reference = True
        return self.profile(self.minimizer)

    def key(self, gamma: float) -> float:
        return gamma

    def sample(self, gamma: float) -> float:
        self.calls += self.batch * self.n
        return self.profile(gamma)

    def distance(self, a: float, b: float) -> float:
        return float((a - b) ** 2)


# --------------------------------------------------------------------------- gamma search


def _sgn(x: float) -> int:
    return 1 if x >= 0 else -1


def ts_direction_sign(objective, cfg: TsSearchConfig, report: SearchReport | None = None) -> tuple[int, object]:
    """Pick the walk direction; returns ``(sign, uniform_output)``. Ties resolve to +1."""
    x_uni = objective.sample(1.0)
    x_pos = objective.sample(1.0 + cfg.probe)
    x_neg = objective.sample(1.0 / (1.0 + cfg.probe))
    anchor = objective.reference() if cfg.direction_mode == REFERENCE else x_uni
    d_pos = objective.distance(anchor, x_pos)
    d_neg = objective.distance(anchor, x_neg)
    if report is not None:
        report.add("sign", 1.0 + cfg.probe, d_pos, objective.calls)
        report.add("sign", 1.0 / (1.0 + cfg.probe), d_neg, objective.calls)
    return _sgn(d_neg - d_pos), x_uni


def _gamma_ok(gamma: float, cfg: TsSearchConfig) -> bool:
    try:
        GammaSpec(gamma, cfg.n, cfg.t_max, cfg.alpha_value)
    except ValueError:
        return False
    return True


def _walk(objective, reference, sign: int, start: float, start_metric: float | None, step: float,
          stop_at: float | None, cfg: TsSearchConfig, report: SearchReport, phase: str) -> float:
    """Greedy walk p = start, start+step, ...; returns the last p before the metric stopped improving."""
    p = start
    if start_metric is None:
        start_metric = objective.distance(reference, objective.sample(p**sign))
        report.add(phase, p**sign, start_metric, objective.calls)
    m_prev, p_prev = start_metric, p
    last_key = objective.key(p**sign)
    evaluated = 0
    k = 0
    while evaluated < cfg.max_probes:
        k += 1
        p = start + k * step
        if stop_at is not None and p > stop_at + 1e-12:
            break
        gamma = p**sign
        if not _gamma_ok(gamma, cfg):
            report.flags.append(f"{phase}_hit_gamma_bound")
            break
        key = objective.key(gamma)
        if key == last_key:
            continue  # same discrete schedule, same metric
        last_key = key
        m = objective.distance(reference, objective.sample(gamma))
        evaluated += 1
        report.add(phase, gamma, m, objective.calls)
        if m >= m_prev:
            break
        m_prev, p_prev = m, p
    else:
        report.flags.append(f"{phase}_max_probes")
    return p_prev


def ts_optimize(objective, cfg: TsSearchConfig, seeds: Sequence[int] = ()) -> tuple[float, SearchReport]:
    """Sign probe followed by a first-worsening greedy walk on p, with gamma = p**sign."""
    t0 = time.perf_counter()
    report = SearchReport("gamma", asdict(cfg), list(seeds))
    reference = objective.reference()
    sign, x_uni = ts_direction_sign(objective, cfg, report)
    report.sign = sign
    m_uni = objective.distance(reference, x_uni)
    report.add("walk", 1.0, m_uni, objective.calls)
    p_best = _walk(objective, reference, sign, 1.0, m_uni, cfg.step, None, cfg, report, "walk")
    if p_best == 1.0:
        report.flags.append("no_improvement_over_uniform")
        log.warning("gamma search: first probe already worse than uniform; keeping gamma = 1")
    if cfg.refine:
        lo = max(p_best - cfg.step, 1e-6)
        p_best = _walk(objective, reference, sign, lo, None, cfg.step / 5.0, p_best + cfg.step,
                       cfg, report, "refine")
    report.chosen = p_best**sign
    report.sampler_calls = objective.calls
    if hasattr(objective, "expected_calls"):
        report.expected_calls = objective.expected_calls()
    else:
        report.expected_calls = objective.calls
    walk_probes = sum(1 for p in report.probes if p.phase in ("walk", "refine")) - 1
    report.call_bound = cfg.batch * (cfg.N + 3 * cfg.n + cfg.n * walk_probes) * (1 if cfg.guidance == 1.0 else 2)
    report.wall_clock = time.perf_counter() - t0
    return report.chosen, report


# --------------------------------------------------------------------------- depth search


@dataclass
class DepthSearchConfig:
    threshold: float | None = None
    margin_db: float = 2.0
    batch: int = 64
    steps: int = 50
    t_max: int = 999
    guidance: float = 1.0
    eta: float = 0.0


class DepthQualityObjective:
    """PSNR of depth-skipped sampling against the full-depth output on the same seeds."""

    def __init__(self, model: DenoiserModel, cond: np.ndarray, seeds: Sequence[int],
                 schedule: NoiseSchedule, steps: int = 50, t_max: int = 999,
                 guidance: float = 1.0, eta: float = 0.0):
        self.model = model
        self.cond = cond
        self.seeds = list(seeds)
        self.schedule = schedule
        self.timesteps = uniform_schedule(steps, t_max)
        self.guidance, self.eta = guidance, eta
        self._start = model.invocations
        self._cache: dict[tuple[int, ...], float] = {}
        self._reference: np.ndarray | None = None

    @property
    def calls(self) -> int:
        return self.model.invocations - self._start

    @property
    def d_max(self) -> int:
        return self.model.config.d_max

    def _sample(self, depths: tuple[int, ...], seeds=None) -> np.ndarray:
        spec = SamplerSpec(self.timesteps, eta=self.eta, guidance=self.guidance, depths=depths)
        return ddim_sample(self.model, self.cond, spec, seeds or self.seeds, self.schedule)

    def reference(self) -> np.ndarray:
        if self._reference is None:
            self._reference = self._sample((self.d_max,) * len(self.timesteps))
        return self._reference

    def quality_of(self, depths: tuple[int, ...]) -> float:
        """Mean per-image PSNR for a per-step depth vector (steps in sampling order)."""
        depths = tuple(int(d) for d in depths)
        if depths not in self._cache:
            ref = self.reference()
            out = ref if all(d == self.d_max for d in depths) else self._sample(depths)
            self._cache[depths] = psnr(to_unit(out), to_unit(ref)).mean_psnr
        return self._cache[depths]

    def quality(self, depth: int) -> float:
        return self.quality_of((depth,) * len(self.timesteps))

    def self_psnr(self) -> float:
        """Full model vs itself under a disjoint set of noise seeds."""
        alt = [s + 7_919_000_000 for s in self.seeds]
        out = self._sample((self.d_max,) * len(self.timesteps), alt)
        return psnr(to_unit(out), to_unit(self.reference())).mean_psnr


class TableQuality:
    """Stub depth objective over a fixed ``{depth: quality}`` table."""

    def __init__(self, table: dict[int, float]):
        self.table = dict(table)
        self.d_max = max(self.table)
        self.calls = 0
        self.visited: list[int] = []

    def quality(self, depth: int) -> float:
        self.calls += 1
        self.visited.append(depth)
        return self.table[depth]


def depth_search(objective, threshold: float, d_max: int | None = None,
                 config: dict | None = None) -> tuple[int, SearchReport]:
    """Remove depth levels from the bottom until quality drops below ``threshold``.

    Returns the shallowest depth that still meets the threshold. If depth
    ``d_max - 1`` already fails, ``d_max`` comes back with a ``no_compression``
    flag; if every depth passes, 1 comes back.
    """
    t0 = time.perf_counter()
    d_max = objective.d_max if d_max is None else d_max
    report = SearchReport("depth", dict(config or {}, threshold=threshold), list(getattr(objective, "seeds", [])))
    chosen = 1
    for d in range(d_max - 1, 0, -1):
        m = objective.quality(d)
        report.add("probe", d, m, objective.calls)
        if m < threshold:
            chosen = d + 1
            break
    if chosen == d_max:
        report.flags.append("no_compression")
    report.chosen = chosen
    report.sampler_calls = report.expected_calls = objective.calls
    report.wall_clock = time.perf_counter() - t0
    return chosen, report


def exhaustive_depth(objective, threshold: float, d_max: int | None = None) -> tuple[int, bool]:
    """Independent check: evaluate every depth, return (minimal passing depth, monotone?)."""
    d_max = objective.d_max if d_max is None else d_max
    q = {d: objective.quality(d) for d in range(1, d_max)}
    monotone = all(q[d] <= q[d + 1] for d in range(1, d_max - 1))
    passing = [d for d in range(1, d_max) if q[d] >= threshold and all(q[e] >= threshold for e in range(d, d_max))]
    return (min(passing) if passing else d_max), monotone


def run_depth_search(model: DenoiserModel, cond: np.ndarray, seeds: Sequence[int],
                     schedule: NoiseSchedule, cfg: DepthSearchConfig) -> tuple[int, SearchReport]:
    obj = DepthQualityObjective(model, cond, seeds, schedule, cfg.steps, cfg.t_max, cfg.guidance, cfg.eta)
    threshold = cfg.threshold
    extra = {}
    if threshold is None:
        self_q = obj.self_psnr()
        threshold = self_q - cfg.margin_db
        extra["self_psnr"] = round(self_q, 6)
    d, report = depth_search(obj, threshold, config=dict(asdict(cfg), **extra))
    report.sampler_calls = report.expected_calls = obj.calls
    return d, report


# --------------------------------------------------------------------------- multi-depth


@dataclass
class MultiDepthConfig:
    depths: tuple[int, ...] = (7, 8, 9)
    n: int = 6
    group: int = 2
    batch: int = 32
    max_configs: int = 10_000
    t_max: int = 999

    def __post_init__(self) -> None:
        if self.n % self.group:
            raise ValueError(f"group size {self.group} must divide n = {self.n}")

    @property
    def count(self) -> int:
        return len(self.depths) ** (self.n // self.group)


@dataclass
class MultiDepthRow:
    depths: tuple[int, ...]  # one per step group, from the largest timestep down
    quality: float
    param_pct: float
    mac_pct: float

    @property
    def max_depth(self) -> int:
        return max(self.depths)

    @property
    def single(self) -> bool:
        return len(set(self.depths)) == 1


def multi_depth_enumerate(objective: DepthQualityObjective, cfg: MultiDepthConfig) -> list[MultiDepthRow]:
    if cfg.count > cfg.max_configs:
        raise ValueError(f"{cfg.count} depth configurations exceed the guard of {cfg.max_configs}")
    if len(objective.timesteps) != cfg.n:
        raise ValueError(f"objective samples {len(objective.timesteps)} steps, config expects {cfg.n}")
    prof = depth_profile(objective.model)
    rows = []
    for groups in itertools.product(sorted(cfg.depths), repeat=cfg.n // cfg.group):
        per_step = tuple(d for d in groups for _ in range(cfg.group))
        q = objective.quality_of(per_step)
        param_pct = 100.0 * prof.cum_params(max(groups)) / prof.total_params
        mac_pct = 100.0 * sum(prof.cum_macs(d) for d in per_step) / (cfg.n * prof.total_macs)
        rows.append(MultiDepthRow(tuple(groups), q, param_pct, mac_pct))
    return rows


def multi_depth_csv(rows: Sequence[MultiDepthRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["depths", "max_depth", "psnr", "param_pct", "mac_pct"])
    for r in rows:
        w.writerow(["-".join(map(str, r.depths)), r.max_depth, f"{r.quality:.6f}",
                    f"{r.param_pct:.4f}", f"{r.mac_pct:.4f}"])
    return buf.getvalue()


@dataclass
class ParetoEntry:
    depth: int
    psnr: float
    mac_pct: float
    param_pct: float
    a_dmac: float | None = None
    b_dpsnr: float | None = None
    b_dparam: float | None = None
    c_dmac: float | None = None
    c_dparam: float | None = None
    a_row: tuple[int, ...] | None = None
    b_row: tuple[int, ...] | None = None
    c_row: tuple[int, ...] | None = None


def pareto_report(rows: Sequence[MultiDepthRow], baselines: dict[int, MultiDepthRow] | None = None,
                  psnr_tol: float = 0.2, time_tol: float = 1.0) -> list[ParetoEntry]:
    """Best row per baseline depth under the three constrained regimes.

    (a) same parameter budget, quality drop < ``psnr_tol``: minimise MAC.
    (b) MAC increase < ``time_tol`` percentage points: maximise quality.
    (c) quality drop < ``psnr_tol``: minimise MAC.
    Regimes with no qualifying row are left as ``None``.
    """
    if baselines is None:
        baselines = {r.max_depth: r for r in rows if r.single}
    out = []
    for d in sorted(baselines, reverse=True):
        base = baselines[d]
        e = ParetoEntry(d, base.quality, base.mac_pct, base.param_pct)
        ok_q = [r for r in rows if base.quality - r.quality < psnr_tol]
        a = [r for r in ok_q if r.max_depth == d]
        if a:
            best = min(a, key=lambda r: (r.mac_pct, -r.quality, r.depths))
            e.a_dmac, e.a_row = best.mac_pct - base.mac_pct, best.depths
        b = [r for r in rows if r.mac_pct - base.mac_pct < time_tol]
        if b:
            best = min(b, key=lambda r: (-r.quality, r.param_pct, r.mac_pct, r.depths))
            e.b_dpsnr, e.b_dparam, e.b_row = best.quality - base.quality, best.param_pct - base.param_pct, best.depths
        if ok_q:
            best = min(ok_q, key=lambda r: (r.mac_pct, r.param_pct, -r.quality, r.depths))
            e.c_dmac, e.c_dparam, e.c_row = best.mac_pct - base.mac_pct, best.param_pct - base.param_pct, best.depths
        out.append(e)
    return out


def _fmt(v: float | None, signed: bool = True) -> str:
    if v is None:
        return "empty"
    return f"{v:+.2f}" if signed else f"{v:.2f}"


def pareto_table(entries: Sequence[ParetoEntry]) -> str:
    head = (f"{'Depth':>5} {'PSNR':>7} {'MAC(%)':>7} {'Param(%)':>8} | {'(a)dMAC':>8} | "
            f"{'(b)dPSNR':>8} {'(b)dParam':>9} | {'(c)dMAC':>8} {'(c)dParam':>9}")
    lines = [head, "-" * len(head)]
    for e in entries:
        lines.append(
            f"{e.depth:>5} {e.psnr:>7.2f} {e.mac_pct:>7.2f} {e.param_pct:>8.2f} | {_fmt(e.a_dmac):>8} | "
            f"{_fmt(e.b_dpsnr):>8} {_fmt(e.b_dparam):>9} | {_fmt(e.c_dmac):>8} {_fmt(e.c_dparam):>9}"
        )
    return "\n".join(lines) + "\n"


def pareto_csv(entries: Sequence[ParetoEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["depth", "psnr", "mac_pct", "param_pct", "a_dmac", "b_dpsnr", "b_dparam", "c_dmac", "c_dparam"])
    for e in entries:
        w.writerow([e.depth, f"{e.psnr:.6f}", f"{e.mac_pct:.4f}", f"{e.param_pct:.4f}",
                    *("" if v is None else f"{v:.6f}" for v in (e.a_dmac, e.b_dpsnr, e.b_dparam, e.c_dmac, e.c_dparam))])
    return buf.getvalue()


def mse_psnr(m: float) -> float:
    return float(mse_to_psnr(m))
