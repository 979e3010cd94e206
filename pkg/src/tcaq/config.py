"""Run configuration: one schema drives the INI file format, CLI flags and validation."""
from __future__ import annotations

import argparse
import configparser
import io
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

from .reconstruction import ReconConfig

WEIGHT_ACT_BITS = frozenset(range(2, 9)) | {32}
SOFTMAX_BITS = frozenset({4, 6, 8, 32})


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    name: str
    type: type
    default: Any
    section: str
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


SCHEMA: tuple[Field, ...] = (
    Field("seed", int, 0, "run", "master seed (calibration chains, reconstruction batches)"),
    Field("out", str, "runs/default", "run", "output directory for every artifact"),
    Field("paper_scale", bool, False, "run", "use the published iteration counts (20000 / 10000)"),
    Field("timings", bool, False, "run", "fill the CSV seconds column (makes reruns differ)"),
    Field("model", str, "", "paths", "FP checkpoint path (default: <out>/fp_model.tcaq)"),
    Field("quantized", str, "", "paths", "quantized checkpoint path (default: <out>/quant_model.tcaq)"),
    Field("dataset_seed", int, 0, "data", "seed of the training dataset"),
    Field("dataset_size", int, 4096, "data", "training dataset size"),
    Field("train_steps", int, 3000, "train", "optimizer steps"),
    Field("train_lr", float, 1e-3, "train", "Adam learning rate"),
    Field("train_batch", int, 32, "train", "training batch size"),
    Field("bits_w", int, 4, "quant", "weight bits (2-8, 32 = full precision)"),
    Field("bits_a", int, 8, "quant", "activation bits (2-8, 32 = full precision)"),
    Field("bits_s", int, 8, "quant", "post-Softmax bits (4, 6, 8, 32)"),
    Field("tcr", bool, True, "quant", "channel rescaling with per-timestep activation quantizers"),
    Field("daq", bool, True, "quant", "per-timestep log2/uniform choice for post-Softmax activations"),
    Field("par", bool, True, "quant", "progressive recalibration rounds after the first reconstruction"),
    Field("groups", int, 0, "quant", "timestep groups for activation quantizers (0 = one per step)"),
    Field("clamp", str, "auto", "quant", "R_tru for scaling vectors: a number >= 1, 'auto' or 'none'"),
    Field("softmax_kind", str, "uniform", "quant", "post-Softmax quantizer when DAQ is off (uniform, log2)"),
    Field("calib_chains", int, 32, "calib", "sampler chains in a calibration set"),
    Field("inference_steps", int, 20, "calib", "DDIM steps for calibration and sampling"),
    Field("init_iters", int, 2000, "recon", "rounding iterations of the first reconstruction"),
    Field("par_iters", int, 1000, "recon", "rounding iterations of each later round"),
    Field("par_rounds", int, 2, "recon", "number of recalibration rounds"),
    Field("recon_batch", int, 16, "recon", "reconstruction batch size"),
    Field("recon_lr", float, 1e-2, "recon", "learning rate on rounding variables"),
    Field("reg_weight", float, 0.01, "recon", "rounding regularizer weight"),
    Field("recon_quant_acts", bool, True, "recon", "fake-quantize activations during reconstruction"),
    Field("sample_source", str, "quant", "eval", "checkpoint drawn from by the sample command: quant or fp"),
    Field("eval_samples", int, 512, "eval", "samples drawn for evaluation"),
    Field("eval_seed", int, 1, "eval", "sampler seed for evaluation"),
    Field("ref_seed", int, 12345, "eval", "seed of the reference dataset draw"),
    Field("ref_size", int, 4096, "eval", "reference dataset size"),
    Field("ablate_bits", str, "W4A4S4,W4A8S8", "ablate", "comma-separated bit settings, e.g. W4A8S8"),
    Field("spill_calibration", bool, False, "quant", "also write the FP calibration set archive"),
)
_BY_NAME = {f.name: f for f in SCHEMA}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    paper_scale: bool = False
    timings: bool = False
    model: str = ""
    quantized: str = ""
    dataset_seed: int = 0
    dataset_size: int = 4096
    train_steps: int = 3000
    train_lr: float = 1e-3
    train_batch: int = 32
    bits_w: int = 4
    bits_a: int = 8
    bits_s: int = 8
    tcr: bool = True
    daq: bool = True
    par: bool = True
    groups: int = 0
    clamp: str = "auto"
    softmax_kind: str = "uniform"
    calib_chains: int = 32
    inference_steps: int = 20
    init_iters: int = 2000
    par_iters: int = 1000
    par_rounds: int = 2
    recon_batch: int = 16
    recon_lr: float = 1e-2
    reg_weight: float = 0.01
    recon_quant_acts: bool = True
    sample_source: str = "quant"
    eval_samples: int = 512
    eval_seed: int = 1
    ref_seed: int = 12345
    ref_size: int = 4096
    ablate_bits: str = "W4A4S4,W4A8S8"
    spill_calibration: bool = False

    def __post_init__(self):
        self.validate()

    # -- derived values
    @property
    def model_path(self) -> Path:
        return Path(self.model) if self.model else Path(self.out) / "fp_model.tcaq"

    @property
    def quantized_path(self) -> Path:
        return Path(self.quantized) if self.quantized else Path(self.out) / "quant_model.tcaq"

    def clamp_value(self) -> Optional[float]:
        """None for automatic, inf for no clamp."""
        c = self.clamp.strip().lower()
        if c == "auto":
            return None
        if c == "none":
            return math.inf
        return float(c)

    def recon(self, rounds: Optional[int] = None) -> ReconConfig:
        init, par = (20000, 10000) if self.paper_scale else (self.init_iters, self.par_iters)
        return ReconConfig(init_iters=init, par_iters=par,
                           rounds=(self.par_rounds if self.par else 0) if rounds is None else rounds,
                           batch=self.recon_batch, lr=self.recon_lr, reg_weight=self.reg_weight,
                           quantize_activations_during_recon=self.recon_quant_acts, seed=self.seed)

    def bit_settings(self) -> list[tuple[int, int, int]]:
        return [parse_bits(s) for s in self.ablate_bits.split(",") if s.strip()]

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            want = _BY_NAME[f.name].type
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                setattr(self, f.name, float(v))
            elif not isinstance(v, want) or (want is int and isinstance(v, bool)):
                raise ConfigError(f"{f.name}: expected {want.__name__}, got {v!r}")
        if self.bits_w not in WEIGHT_ACT_BITS or self.bits_a not in WEIGHT_ACT_BITS:
            raise ConfigError(f"bits_w/bits_a must be in 2..8 or 32, got W{self.bits_w} A{self.bits_a}")
        if self.bits_s not in SOFTMAX_BITS:
            raise ConfigError(f"bits_s must be one of {sorted(SOFTMAX_BITS)}, got {self.bits_s}")
        try:
            c = self.clamp_value()
        except ValueError:
            raise ConfigError(f"clamp must be a number, 'auto' or 'none', got {self.clamp!r}") from None
        if c is not None and c < 1:
            raise ConfigError(f"clamp must be >= 1, got {c}")
        if self.softmax_kind not in ("uniform", "log2"):
            raise ConfigError(f"softmax_kind must be uniform or log2, got {self.softmax_kind!r}")
        if self.sample_source not in ("quant", "fp"):
            raise ConfigError(f"sample_source must be quant or fp, got {self.sample_source!r}")
        if not 0 <= self.groups <= self.inference_steps:
            raise ConfigError(f"groups must be in [0, inference_steps], got {self.groups}")
        for name in ("calib_chains", "inference_steps", "train_steps", "train_batch", "recon_batch", "dataset_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.eval_samples < 65 or self.ref_size < 65:
            raise ConfigError("eval_samples and ref_size must be >= 65 (64-dim covariance)")
        if self.par_iters > self.init_iters:
            raise ConfigError("par_iters must not exceed init_iters")
        if self.par_rounds < 0 or self.init_iters < 0:
            raise ConfigError("iteration and round counts must be non-negative")
        try:
            self.bit_settings()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def as_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_bits(text: str) -> tuple[int, int, int]:
    """'W4A8S8' -> (4, 8, 8); the S part defaults to 8 when omitted."""
    t = text.strip().upper()
    try:
        w_part, rest = t[1:].split("A")
        a_part, s_part = rest.split("S") if "S" in rest else (rest, "8")
        bits = int(w_part), int(a_part), int(s_part)
    except ValueError:
        raise ValueError(f"bad bit setting {text!r}; expected like W4A8S8") from None
    if not t.startswith("W") or bits[0] not in WEIGHT_ACT_BITS or bits[1] not in WEIGHT_ACT_BITS \
            or bits[2] not in SOFTMAX_BITS:
        raise ValueError(f"bad bit setting {text!r}")
    return bits


# ---------------------------------------------------------------------------
# file format


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def emit(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for f in SCHEMA:
        if not cp.has_section(f.section):
            cp.add_section(f.section)
        cp.set(f.section, f.name, _fmt(getattr(cfg, f.name)))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _coerce(f: Field, raw: str):
    if f.type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: not a boolean: {raw!r}")
    try:
        return f.type(raw.strip())
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {f.type.__name__}") from None


def parse(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    values = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            f = _BY_NAME.get(key)
            if f is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            if f.section != section:
                raise ConfigError(f"key {key!r} belongs in [{f.section}], found in [{section}]")
            values[key] = _coerce(f, raw)
    return RunConfig(**values)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse(p.read_text())


# ---------------------------------------------------------------------------
# CLI flags


def add_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("configuration (overrides the config file)")
    for f in SCHEMA:
        if f.type is bool:
            g.add_argument(f.flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None, help=f.help)
        else:
            g.add_argument(f.flag, dest=f.name, type=f.type, default=None, help=f.help)


def resolve(args: argparse.Namespace) -> RunConfig:
    base = load(args.config) if getattr(args, "config", None) else RunConfig()
    values = base.as_dict()
    for f in SCHEMA:
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig(**values)
