"""End-to-end orchestration used by the command line: train, quantize, sample, evaluate, ablate."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .calibration import CalibrationSet, resample_calibration_quant, sample_calibration_fp
from .config import RunConfig, emit
from .daq import decision_rows
from .diffusion import NoiseSchedule, ToyUNet, generate_dataset, sample, train_toy
from .metrics import ArmResult, MetricReport, emit_report, fmd, layer_error
from .qmodel import InitOptions, QuantModel, initialize
from .reconstruction import RoundLog, reconstruct
from .tensor import NonFiniteError, load_archive, save_archive

log = logging.getLogger(__name__)

# (tcr, daq, par) in report order
TOGGLES = [(False, False, False), (True, False, False), (False, True, False), (False, False, True),
           (True, True, False), (True, False, True), (False, True, True), (True, True, True)]
ERROR_CHAINS = 8  # calibration chains used for per-layer error reports


class MissingArtifact(FileNotFoundError):
    def __init__(self, path, producer: str):
        super().__init__(f"missing artifact {path}; produce it with `tcaq {producer}`")
        self.path, self.producer = Path(path), producer


def require(path, producer: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(p, producer)
    return p


def arm_name(tcr: bool, daq: bool, par: bool) -> str:
    parts = [n for n, on in (("TCR", tcr), ("DAQ", daq), ("PAR", par)) if on]
    return "+" + "+".join(parts) if parts else "baseline"


def out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def echo_config(cfg: RunConfig, name: str = "config.ini") -> Path:
    p = out_dir(cfg) / name
    p.write_text(emit(cfg))
    return p


def init_options(cfg: RunConfig, bits=None, tcr=None, daq=None) -> InitOptions:
    bw, ba, bs = bits or (cfg.bits_w, cfg.bits_a, cfg.bits_s)
    return InitOptions(bits_w=bw, bits_a=ba, bits_s=bs, tcr=cfg.tcr if tcr is None else tcr,
                       daq=cfg.daq if daq is None else daq, groups=cfg.groups or None,
                       clamp=cfg.clamp_value(), softmax_kind=cfg.softmax_kind)


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# stages


def train(cfg: RunConfig) -> ToyUNet:
    data = generate_dataset(cfg.dataset_seed, cfg.dataset_size)
    model = train_toy(data, NoiseSchedule(), steps=cfg.train_steps, lr=cfg.train_lr, seed=cfg.seed,
                      batch=cfg.train_batch)
    return model


def load_fp(cfg: RunConfig) -> ToyUNet:
    return ToyUNet.load(require(cfg.model_path, "train"))


def load_quant(cfg: RunConfig) -> QuantModel:
    return QuantModel.load(require(cfg.quantized_path, "quantize"))


def calibrate(model: ToyUNet, cfg: RunConfig) -> CalibrationSet:
    return sample_calibration_fp(model, cfg.calib_chains, cfg.inference_steps, seed=cfg.seed)


def resample_round(qm: QuantModel, calib: CalibrationSet, cfg: RunConfig, n: int) -> CalibrationSet:
    return resample_calibration_quant(qm, calib.n_chains, cfg.inference_steps, seed=calib.seed, round=n,
                                      layers=calib.layer_ids)


def quantize(model: ToyUNet, calib: CalibrationSet, cfg: RunConfig, opts: Optional[InitOptions] = None,
             rounds: Optional[int] = None, on_round=None) -> tuple[QuantModel, list[RoundLog]]:
    """Initialization, the first reconstruction on FP calibration, then recalibration rounds.

    ``on_round(n, qm, logs)`` is called after every round, which lets the ablation
    grid read off the PAR-free arm from the same run.
    """
    rc = cfg.recon()
    rounds = rc.rounds if rounds is None else rounds
    qm = initialize(model, calib, opts or init_options(cfg))
    logs = [reconstruct(qm, calib, rc, rc.init_iters, round=0)]
    if on_round:
        on_round(0, qm, logs)
    for n in range(rounds):
        cal = resample_round(qm, calib, cfg, n)
        logs.append(reconstruct(qm, cal, rc, rc.par_iters, round=n + 1, warm_start=True))
        if on_round:
            on_round(n + 1, qm, logs)
    return qm, logs


def reference_images(cfg: RunConfig) -> np.ndarray:
    return generate_dataset(cfg.ref_seed, cfg.ref_size).images


def layer_errors(model: ToyUNet, qm: QuantModel, calib: CalibrationSet,
                 chains: int = ERROR_CHAINS) -> dict[str, dict[str, float]]:
    """Activation error at each quantized layer's entry, FP vs quantized model on the same sampler states."""
    acc: dict[str, list] = {}
    for t in calib.timesteps:
        x = calib.x_t[t][:chains]
        fp_seen: dict[str, list] = {}
        seen: dict[str, list] = {}
        model.forward(x, t, hook=lambda lid, arr, _t: fp_seen.setdefault(lid, []).append(arr.copy()))
        qm(x, t, hook=lambda lid, arr, _t: seen.setdefault(lid, []).append(arr.copy()))
        for lid in fp_seen:
            if lid in qm.plan.act_tables or lid in qm.plan.softmax_tables or lid in qm.plan.weight_qp:
                acc.setdefault(lid, []).append((np.concatenate(fp_seen[lid]).ravel(),
                                                np.concatenate(seen[lid]).ravel()))
    return {lid: layer_error(np.concatenate([a for a, _ in pairs]), np.concatenate([b for _, b in pairs]))
            for lid, pairs in acc.items()}


def mean_sqnr(errors: dict[str, dict[str, float]]) -> float:
    vals = [e["sqnr_db"] for e in errors.values() if math.isfinite(e["sqnr_db"])]
    return float(np.mean(vals)) if vals else math.inf


def evaluate_quant(model: ToyUNet, qm: QuantModel, calib: CalibrationSet, cfg: RunConfig,
                   ref: np.ndarray) -> tuple[float, dict[str, dict[str, float]], np.ndarray]:
    xs = _finite(qm.sample(cfg.eval_samples, cfg.inference_steps, seed=cfg.eval_seed), "quantized samples")
    return fmd(xs, ref), layer_errors(model, qm, calib), xs


# ---------------------------------------------------------------------------
# artifacts


def write_decisions_csv(qm: QuantModel, path) -> None:
    rows = decision_rows(qm.plan.decisions)
    cols = ["layer_id", "t", "chosen", "R_g", "alpha", "x_min", "n_tail", "note"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def write_scaling_csv(qm: QuantModel, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer_id", "channel", "r_s", "clamp"])
        for lid, sv in qm.plan.scaling.items():
            for c, r in enumerate(sv.r_s):
                w.writerow([lid, c, repr(float(r)), "" if sv.clamp_range is None else repr(float(sv.clamp_range))])


def write_recon_log(logs: list[RoundLog], path, timings: bool) -> None:
    doc = [lg.to_json() for lg in logs]
    if not timings:  # wall-clock numbers would make reruns differ
        for d in doc:
            d.pop("seconds")
            for b in d["blocks"]:
                b.pop("seconds")
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def save_png_grid(samples: np.ndarray, path, cols: int = 8, zoom: int = 4) -> Path:
    """Tile up to cols*cols samples, mapping [-1, 1] to [0, 255] with a one-pixel gap."""
    imgs = np.clip(samples[: cols * cols, 0], -1, 1)
    n = len(imgs)
    rows = max(1, math.ceil(n / cols))
    h, w = imgs.shape[1] * zoom, imgs.shape[2] * zoom
    canvas = np.zeros((rows * (h + 1) + 1, cols * (w + 1) + 1), dtype=np.uint8)
    for i, img in enumerate(imgs):
        r, c = divmod(i, cols)
        tile = np.kron(np.rint((img + 1) * 127.5).astype(np.uint8), np.ones((zoom, zoom), dtype=np.uint8))
        canvas[1 + r * (h + 1): 1 + r * (h + 1) + h, 1 + c * (w + 1): 1 + c * (w + 1) + w] = tile
    Image.fromarray(canvas, mode="L").save(path)
    return Path(path)


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> Path:
    d = out_dir(cfg)
    echo_config(cfg)
    t0 = time.perf_counter()
    model = train(cfg)
    cfg.model_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(cfg.model_path)
    summary = {"steps": cfg.train_steps, "final_loss_mean100": float(np.mean(model.history[-100:]))}
    if cfg.timings:
        summary["seconds"] = time.perf_counter() - t0
    (d / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("trained %d steps, loss %.4f -> %s", cfg.train_steps, summary["final_loss_mean100"], cfg.model_path)
    return cfg.model_path


def cmd_quantize(cfg: RunConfig) -> Path:
    model = load_fp(cfg)
    d = out_dir(cfg)
    echo_config(cfg)
    calib = calibrate(model, cfg)
    if cfg.spill_calibration:
        calib.save(d / "calibration.tcaq")
    qm, logs = quantize(model, calib, cfg)
    cfg.quantized_path.parent.mkdir(parents=True, exist_ok=True)
    qm.save(cfg.quantized_path)
    write_decisions_csv(qm, d / "daq_decisions.csv")
    write_scaling_csv(qm, d / "tcr_scaling.csv")
    write_recon_log(logs, d / "recon_log.json", cfg.timings)
    return cfg.quantized_path


def cmd_sample(cfg: RunConfig) -> Path:
    if cfg.sample_source == "fp":
        xs = sample(load_fp(cfg), cfg.eval_samples, cfg.inference_steps, seed=cfg.eval_seed)
    else:
        xs = load_quant(cfg).sample(cfg.eval_samples, cfg.inference_steps, seed=cfg.eval_seed)
    _finite(xs, "samples")
    d = out_dir(cfg)
    echo_config(cfg)
    save_archive(d / "samples.tcaq", {f"samples/{cfg.sample_source}": xs})
    return save_png_grid(xs, d / "samples.png")


def load_samples(path) -> np.ndarray:
    rec = load_archive(require(path, "sample"))
    return next(iter(rec.values()))


def cmd_evaluate(cfg: RunConfig) -> Path:
    model = load_fp(cfg)
    qm = load_quant(cfg)
    d = out_dir(cfg)
    echo_config(cfg)
    t0 = time.perf_counter()
    ref = reference_images(cfg)
    calib = calibrate(model, cfg)
    fp_xs = _finite(sample(model, cfg.eval_samples, cfg.inference_steps, seed=cfg.eval_seed), "FP samples")
    q_fmd, errors, q_xs = evaluate_quant(model, qm, calib, cfg, ref)
    p = qm.plan
    arm = ArmResult("evaluated", p.bits_w, p.bits_a, p.bits_s, bool(p.scaling), bool(p.decisions),
                    cfg.par_rounds if cfg.par else 0, q_fmd, mean_sqnr(errors), cfg.eval_samples, cfg.eval_seed)
    timings = {"evaluate": time.perf_counter() - t0} if cfg.timings else {}
    report = MetricReport(cfg.as_dict(), errors, [arm], timings,
                          {"fp_fmd": fmd(fp_xs, ref), "quant_vs_fp_fmd": fmd(q_xs, fp_xs)})
    return emit_report(report, d / "report.json", cfg.timings)


def ablate(model: ToyUNet, cfg: RunConfig, bits: tuple[int, int, int], calib: Optional[CalibrationSet] = None,
           ref: Optional[np.ndarray] = None, toggles=TOGGLES) -> list[ArmResult]:
    """One row per (tcr, daq, par) arm at the given bit setting.

    Arms that differ only in PAR share initialization and the first
    reconstruction; the PAR-free arm is scored before the extra rounds run.
    Seeds are fixed per round and block, so this equals running both arms
    separately.
    """
    calib = calib or calibrate(model, cfg)
    ref = reference_images(cfg) if ref is None else ref
    results: dict[tuple, ArmResult] = {}
    wanted = set(toggles)
    for tcr, daq in dict.fromkeys((t, d) for t, d, _ in toggles):
        t0 = time.perf_counter()
        n_rounds = cfg.par_rounds if (tcr, daq, True) in wanted else 0

        def score(n, qm, logs):
            pars = [p for p, at in ((False, 0), (True, n_rounds)) if n == at and (tcr, daq, p) in wanted]
            if not pars:
                return
            f, errs, _ = evaluate_quant(model, qm, calib, cfg, ref)
            for p in pars:
                results[(tcr, daq, p)] = ArmResult(arm_name(tcr, daq, p), *bits, tcr, daq, n, f, mean_sqnr(errs),
                                                   cfg.eval_samples, cfg.eval_seed, time.perf_counter() - t0)
                log.info("W%dA%dS%d %s fmd %.4f", *bits, arm_name(tcr, daq, p), f)

        quantize(model, calib, cfg, init_options(cfg, bits, tcr, daq), rounds=n_rounds, on_round=score)
    return [results[k] for k in toggles]


def cmd_ablate(cfg: RunConfig) -> Path:
    model = load_fp(cfg)
    d = out_dir(cfg)
    echo_config(cfg)
    t0 = time.perf_counter()
    calib = calibrate(model, cfg)
    ref = reference_images(cfg)
    arms = []
    for bits in cfg.bit_settings():
        arms.extend(ablate(model, cfg, bits, calib, ref))
    timings = {"ablate": time.perf_counter() - t0} if cfg.timings else {}
    report = MetricReport(cfg.as_dict(), {}, arms, timings)
    return emit_report(report, d / "ablation.json", cfg.timings)
