"""Error metrics, the pixel-space Fréchet distance, and report serialization."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

SCHEMA_VERSION = 1
COV_EPS = 1e-6
CSV_COLUMNS = ("arm", "bits_w", "bits_a", "bits_s", "tcr", "daq", "par_rounds", "fmd", "mean_sqnr_db", "seconds")


def layer_error(fp, q) -> dict[str, float]:
    fp = np.asarray(fp, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if fp.shape != q.shape:
        raise ValueError(f"shape mismatch: {fp.shape} vs {q.shape}")
    err = float(np.mean((q - fp) ** 2))
    sig = float(np.mean(fp ** 2))
    if err == 0:
        sqnr = math.inf
    elif sig == 0:
        sqnr = -math.inf
    else:
        sqnr = 10 * math.log10(sig / err)
    return {"mse": err, "sqnr_db": sqnr}


def _flat(samples) -> np.ndarray:
    a = np.asarray(samples, dtype=np.float64)
    return a.reshape(len(a), -1)


def _moments(x: np.ndarray):
    mu = x.mean(axis=0)
    d = x - mu
    return mu, d.T @ d / len(x)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fmd(samples_a, samples_b) -> float:
    """Fréchet distance between Gaussians fitted to the flattened samples.

    The cross term uses tr((S1 S2)^1/2) = tr((S1^1/2 S2 S1^1/2)^1/2), evaluated
    with symmetric eigendecompositions.
    """
    a, b = _flat(samples_a), _flat(samples_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    if min(len(a), len(b)) < d + 1:
        raise ValueError(f"fmd needs at least {d + 1} samples per side, got {len(a)} and {len(b)}")
    mu1, s1 = _moments(a)
    mu2, s2 = _moments(b)
    eye = COV_EPS * np.eye(d)
    s1, s2 = s1 + eye, s2 + eye
    r1 = _sqrt_psd(s1)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(r1 @ s2 @ r1), 0, None)).sum()
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * cross)
    return max(val, 0.0)


def moment_distance(samples_a, samples_b) -> float:
    """Per-coordinate first and second moment gap: ||mu_a - mu_b||^2 + ||sd_a - sd_b||^2."""
    a, b = _flat(samples_a), _flat(samples_b)
    return float(np.sum((a.mean(0) - b.mean(0)) ** 2) + np.sum((a.std(0) - b.std(0)) ** 2))


# ---------------------------------------------------------------------------
# reports


@dataclass
class ArmResult:
    arm: str
    bits_w: int
    bits_a: int
    bits_s: int
    tcr: bool
    daq: bool
    par_rounds: int
    fmd: float
    mean_sqnr_db: float
    sample_count: int
    seed: int
    seconds: Optional[float] = None

    def csv_row(self, timings: bool) -> list:
        secs = "" if self.seconds is None or not timings else f"{self.seconds:.3f}"
        return [self.arm, self.bits_w, self.bits_a, self.bits_s, int(self.tcr), int(self.daq), self.par_rounds,
                repr(float(self.fmd)), repr(float(self.mean_sqnr_db)), secs]


@dataclass
class MetricReport:
    config: dict[str, Any]
    layers: dict[str, dict[str, float]] = field(default_factory=dict)
    arms: list[ArmResult] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version, "config": self.config, "layers": self.layers,
                "arms": [asdict(a) for a in self.arms], "timings": self.timings, "extra": self.extra}

    @classmethod
    def from_json(cls, doc: dict) -> "MetricReport":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {doc.get('schema_version')!r}")
        return cls(doc["config"], doc["layers"], [ArmResult(**a) for a in doc["arms"]], doc["timings"],
                   doc.get("extra", {}))


def _encode(o):
    # JSON has no infinities; keep them as strings so they survive a round trip
    if isinstance(o, float) and not math.isfinite(o):
        return repr(o)
    if isinstance(o, dict):
        return {k: _encode(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_encode(v) for v in o]
    if isinstance(o, np.generic):
        return _encode(o.item())
    return o


def _decode(o):
    if isinstance(o, str) and o in ("inf", "-inf", "nan"):
        return float(o)
    if isinstance(o, dict):
        return {k: _decode(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_decode(v) for v in o]
    return o


def write_csv(arms: list[ArmResult], path, timings: bool = False) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for a in arms:
            w.writerow(a.csv_row(timings))


def emit_report(report: MetricReport, path, timings: bool = False) -> Path:
    """JSON report at ``path`` plus the arm table next to it as ``<stem>.csv``."""
    path = Path(path)
    try:
        path.write_text(json.dumps(_encode(report.to_json()), indent=2, sort_keys=True) + "\n")
        write_csv(report.arms, path.with_suffix(".csv"), timings)
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e
    return path


def load_report(path) -> MetricReport:
    return MetricReport.from_json(_decode(json.loads(Path(path).read_text())))
