"""Run configuration: flat ``key = value`` text with ``#`` comments and dotted names.

Every key has a default; unknown keys raise :class:`ConfigError` naming the
offending token. Lists are comma separated. An empty value for an optional
field means "use the built-in rule" (for example ``search.alpha =`` gives
alpha = 0.03 * T).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from ..denoiser import UNetConfig
from ..tasks import TASKS, cond_channels


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in {"1", "true", "yes", "on"}:
        return True
    if low in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if not text.strip() or text.strip().lower() == "auto" else float(text)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _task(text: str) -> str:
    if text.strip() not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {text!r}")
    return text.strip()


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, Field] = {
    "task": Field(_task, "restore", "restore or structgen"),
    "unet.image_size": Field(int, 32, "pixels per side"),
    "unet.channels": Field(int, 3, "image channels, 1 (grey) or 3 (RGB)"),
    "unet.base_channels": Field(int, 8, "channels at the first level"),
    "unet.channel_mults": Field(_ints, (1, 2, 4, 8), "per-level channel multipliers"),
    "unet.blocks_per_level": Field(int, 2, "residual blocks per level"),
    "unet.time_embed_dim": Field(int, 32, "sinusoidal feature size"),
    "diffusion.T": Field(int, 1000, "trained timesteps"),
    "diffusion.beta_start": Field(float, 1e-4, "first beta"),
    "diffusion.beta_end": Field(float, 0.02, "last beta"),
    "diffusion.p_drop": Field(float, 0.1, "condition dropout for guidance"),
    "seed.data": Field(int, 0, "scene seed base"),
    "seed.init": Field(int, 0, "weight initialisation seed"),
    "seed.noise": Field(int, 0, "training noise, timestep and minibatch seed"),
    "seed.search": Field(int, 0, "selects the search images"),
    "train.steps": Field(int, 2000, "Adam steps"),
    "train.batch": Field(int, 16, "minibatch size"),
    "train.dataset_size": Field(int, 2048, "pre-generated training pairs"),
    "train.lr": Field(float, 2e-3, "base learning rate"),
    "train.beta1": Field(float, 0.9, "Adam beta1"),
    "train.beta2": Field(float, 0.999, "Adam beta2"),
    "train.eps": Field(float, 1e-8, "Adam epsilon"),
    "train.decay_fraction": Field(float, 0.5, "final fraction of steps with linear lr decay to 0"),
    "train.log_every": Field(int, 100, "loss CSV interval"),
    "finetune.lr_scale": Field(float, 0.3, "fine-tune lr as a fraction of train.lr"),
    "finetune.step_fraction": Field(float, 0.25, "fine-tune steps as a fraction of train.steps"),
    "finetune.depth": Field(int, 0, "depth to fine-tune at; 0 uses the depth-search result"),
    "search.n": Field(int, 5, "target step count"),
    "search.N": Field(int, 50, "reference step count"),
    "search.step": Field(float, 0.05, "greedy increment on p"),
    "search.probe": Field(float, 0.1, "sign-probe offset"),
    "search.batch": Field(int, 64, "search images drawn from the training split"),
    "search.direction_mode": Field(str, "reference", "reference or uniform-literal"),
    "search.refine": Field(_bool, False, "second pass at step/5"),
    "search.alpha": Field(_opt_float, None, "scale-down strength; empty for 0.03*T"),
    "search.guidance": Field(_floats, (1.0,), "guidance scales; more than one runs a sweep"),
    "search.eta": Field(float, 0.0, "DDIM eta"),
    "depth.threshold": Field(_opt_float, None, "PSNR threshold in dB; empty for self-PSNR minus margin"),
    "depth.margin_db": Field(float, 2.0, "margin below self-PSNR for the automatic threshold"),
    "depth.batch": Field(int, 64, "depth-search images"),
    "depth.steps": Field(int, 50, "uniform steps while probing depth"),
    "multi.depths": Field(_ints, (7, 8, 9), "candidate depths"),
    "multi.n": Field(int, 6, "steps"),
    "multi.group": Field(int, 2, "steps sharing one depth"),
    "multi.batch": Field(int, 32, "images"),
    "eval.batch": Field(int, 200, "validation images"),
    "eval.steps": Field(_ints, (5, 10), "step counts compared"),
    "eval.N": Field(int, 50, "reference step count"),
    "eval.guidance": Field(float, 1.0, "guidance scale"),
    "eval.dump": Field(int, 4, "images per method written as PPM/PGM"),
    "sample.count": Field(int, 8, "images"),
    "sample.steps": Field(int, 50, "steps"),
    "sample.gamma": Field(float, 1.0, "gamma of the schedule"),
    "sample.guidance": Field(float, 1.0, "guidance scale"),
}

SEED_KEYS = tuple(k for k in SCHEMA if k.startswith("seed."))


class RunConfig:
    """Typed view over a flat key/value table."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: f.default for k, f in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def __getitem__(self, key: str) -> Any:
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def set(self, key: str, value: Any) -> None:
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = SCHEMA[key].parse(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        self._values[key] = value

    def set_seed(self, seed: int) -> None:
        for key in SEED_KEYS:
            self._values[key] = int(seed)

    def apply(self, assignments: list[str]) -> None:
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            key, value = item.split("=", 1)
            self.set(key, value.strip())

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self._values.items())

    def items(self):
        return self._values.items()

    def copy(self) -> "RunConfig":
        out = RunConfig()
        out._values = dict(self._values)
        return out

    # derived views

    def unet(self) -> UNetConfig:
        ch = self["unet.channels"]
        return UNetConfig(
            image_size=self["unet.image_size"],
            in_channels=ch,
            cond_channels=cond_channels(self["task"], ch),
            out_channels=ch,
            base_channels=self["unet.base_channels"],
            channel_mults=self["unet.channel_mults"],
            blocks_per_level=self["unet.blocks_per_level"],
            time_embed_dim=self["unet.time_embed_dim"],
        )

    @property
    def t_max(self) -> int:
        return self["diffusion.T"] - 1


def parse_text(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig(parse_text(path.read_text(encoding="utf-8"), str(path)))
