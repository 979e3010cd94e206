"""Per-(layer, timestep) choice between log2 and uniform quantizers for attention probabilities.

Each cell is fitted to a continuous power law (closed-form MLE, cutoff picked by
Kolmogorov-Smirnov distance) and compared against exponential and log-normal
fits on the same tail.  Log2 wins only when the power law beats both.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import log_ndtr

from .calibration import CalibrationSet

log = logging.getLogger(__name__)

MIN_TAIL = 50
N_CUTOFFS = 20
CUTOFF_RANGE = (0.50, 0.95)
FAMILIES = ("exponential", "lognormal")
CELL_SAMPLES = 512
_LOG_2PI = math.log(2 * math.pi)


class InsufficientTail(ValueError):
    pass


@dataclass
class PowerLawFit:
    alpha: float
    x_min: float
    loglik: float
    n_tail: int
    ks: float = float("nan")

    @property
    def c(self) -> float:
        """Normalisation of the density (alpha-1)/x_min * (x/x_min)^-alpha, written as c * x^-alpha."""
        return (self.alpha - 1) * self.x_min ** (self.alpha - 1)


@dataclass
class DaqDecision:
    layer_id: str
    t: int
    R_g: float
    chosen: str
    fit: Optional[PowerLawFit]
    alt_logliks: dict[str, float] = field(default_factory=dict)
    note: str = ""


# ---------------------------------------------------------------------------
# fitting; the scan works on a batch of equal-length sorted rows


def _scan(xs: np.ndarray):
    """KS cutoff scan for each row of ``xs`` (B, n), sorted ascending and positive.

    Candidate cutoffs are order statistics at evenly spaced quantile levels; the
    tail for a cutoff at position k is ``xs[:, k:]``.  Returns alpha, x_min, tail
    start and KS distance per row, with start -1 where no cutoff is usable.
    """
    B, n = xs.shape
    L = np.log(xs)
    suffix = np.cumsum(L[:, ::-1], axis=1)[:, ::-1]  # suffix[:, k] = sum L[:, k:]
    starts = np.unique(np.floor(np.linspace(*CUTOFF_RANGE, N_CUTOFFS) * (n - 1)).astype(int))
    best_ks = np.full(B, np.inf)
    best_alpha = np.full(B, np.nan)
    best_k = np.full(B, -1)
    for k in starts:
        m = n - k
        if m < MIN_TAIL:
            break
        S = suffix[:, k] - m * L[:, k]
        ok = S > 0
        alpha = 1 + m / np.where(ok, S, 1.0)
        F = -np.expm1((1 - alpha)[:, None] * (L[:, k:] - L[:, k:k + 1]))
        i = np.arange(m)
        ks = np.maximum((i + 1) / m - F, F - i / m).max(axis=1)
        better = ok & (ks < best_ks)
        best_ks = np.where(better, ks, best_ks)
        best_alpha = np.where(better, alpha, best_alpha)
        best_k = np.where(better, k, best_k)
    x_min = np.where(best_k >= 0, xs[np.arange(B), np.maximum(best_k, 0)], np.nan)
    return best_alpha, x_min, best_k, best_ks


def _pl_loglik(tail: np.ndarray, alpha: float, x_min: float) -> float:
    n = tail.size
    return float(n * math.log(alpha - 1) - n * math.log(x_min) - alpha * np.sum(np.log(tail / x_min)))


def _positive_sorted(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    pos = x[x > 0]
    if pos.size < x.size:
        log.debug("excluded %d non-positive samples before fitting", x.size - pos.size)
    return np.sort(pos)


def _closed_form(tail: np.ndarray, x_min: float) -> float:
    S = float(np.sum(np.log(tail / x_min)))
    if S <= 0:
        raise InsufficientTail("degenerate tail: every sample equals x_min")
    return 1 + tail.size / S


def fit_power_law(samples) -> PowerLawFit:
    xs = _positive_sorted(samples)
    if xs.size < MIN_TAIL:
        raise InsufficientTail(f"insufficient tail: {xs.size} positive samples, need {MIN_TAIL}")
    _, x_min, k, ks = (a[0] for a in _scan(xs[None, :]))
    if k < 0:
        raise InsufficientTail(f"insufficient tail: no cutoff leaves {MIN_TAIL} samples above a distinct x_min")
    # ties at the cutoff belong to the tail, matching the alternative fits
    tail = xs[xs >= x_min]
    alpha = _closed_form(tail, x_min)
    return PowerLawFit(alpha, float(x_min), _pl_loglik(tail, alpha, x_min), int(tail.size), float(ks))


def _tail(samples, x_min: float) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    return x[x >= x_min]


def fit_alternative(samples, family: str, x_min: float) -> float:
    """Log-likelihood of the best-fitting ``family`` on the tail ``samples >= x_min``."""
    tail = _tail(samples, x_min)
    n = tail.size
    if n == 0:
        raise InsufficientTail("no samples at or above x_min")
    if family == "exponential":
        gap = tail.mean() - x_min
        if gap <= 0:
            raise ValueError("exponential fit degenerate: all tail samples equal x_min")
        lam = 1.0 / gap
        return float(n * math.log(lam) - lam * np.sum(tail - x_min))
    if family == "lognormal":
        ln = np.log(tail)
        mu, sigma = ln.mean(), ln.std()
        if sigma == 0:
            raise ValueError("lognormal fit degenerate: sigma = 0")
        dens = -ln - math.log(sigma) - 0.5 * _LOG_2PI - (ln - mu) ** 2 / (2 * sigma ** 2)
        return float(dens.sum() - n * log_ndtr((mu - math.log(x_min)) / sigma))
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


def likelihood_ratio(fit: PowerLawFit, alt_logliks: dict[str, float]) -> float:
    return (fit.loglik - max(alt_logliks.values())) / fit.n_tail


def select_quantizer(layer_id: str, t: int, fit: Optional[PowerLawFit],
                     alt_logliks: Optional[dict[str, float]] = None, note: str = "") -> DaqDecision:
    if fit is None:
        return DaqDecision(layer_id, t, -math.inf, "uniform", None, {}, note or "insufficient tail")
    alts = dict(alt_logliks or {})
    r = likelihood_ratio(fit, alts)
    return DaqDecision(layer_id, t, r, "log2" if r > 0 else "uniform", fit, alts, note)


def decide(samples, layer_id: str = "", t: int = 0) -> DaqDecision:
    """Fit one cell from scratch and apply the sign rule."""
    try:
        fit = fit_power_law(samples)
        alts = {f: fit_alternative(samples, f, fit.x_min) for f in FAMILIES}
    except (InsufficientTail, ValueError) as e:
        return select_quantizer(layer_id, t, None, note=str(e))
    return select_quantizer(layer_id, t, fit, alts)


# ---------------------------------------------------------------------------
# batched pass over a calibration set


def _cell_sample(cell: np.ndarray, n: int) -> np.ndarray:
    """At most ``n`` positive values taken at an odd stride, sorted.

    An odd stride walks across the power-of-two row lengths of the attention maps
    instead of sampling one column repeatedly.
    """
    x = cell.ravel()
    if x.size > n:
        step = x.size // n
        x = x[::step - (step % 2 == 0)][:n]
    return np.sort(x[x > 0])


def _batch_alternatives(tails: np.ndarray, mask: np.ndarray, x_min: np.ndarray) -> dict[str, np.ndarray]:
    n = mask.sum(axis=1)
    x = np.where(mask, tails, 1.0)
    gap = np.where(mask, tails - x_min[:, None], 0.0).sum(axis=1) / n
    with np.errstate(divide="ignore"):
        lam = 1.0 / gap
        ll_exp = np.where(gap > 0, n * np.log(lam) - lam * gap * n, -np.inf)
    ln = np.log(x)
    mu = np.where(mask, ln, 0).sum(axis=1) / n
    sigma = np.sqrt(np.where(mask, (ln - mu[:, None]) ** 2, 0).sum(axis=1) / n)
    safe = np.where(sigma > 0, sigma, 1.0)
    dens = -ln - np.log(safe)[:, None] - 0.5 * _LOG_2PI - (ln - mu[:, None]) ** 2 / (2 * safe[:, None] ** 2)
    ll_ln = np.where(mask, dens, 0).sum(axis=1) - n * log_ndtr((mu - np.log(x_min)) / safe)
    ll_ln = np.where(sigma > 0, ll_ln, -np.inf)
    return {"exponential": ll_exp, "lognormal": ll_ln}


def run_daq_offline(calib: CalibrationSet, layers: list[str], bits: Optional[int] = None,
                    cell_samples: int = CELL_SAMPLES) -> dict[tuple[str, int], DaqDecision]:
    """Decision grid over every (layer, timestep) cell of ``calib``.

    Quantizer parameters for the chosen kinds are searched separately; ``bits`` is
    accepted for interface symmetry and recorded nowhere else.
    """
    keys, rows, single = [], [], {}
    for lid in layers:
        for t in calib.timesteps:
            x = _cell_sample(calib.cell(lid, t), cell_samples)
            if x.size < cell_samples:  # ragged cell: fit it on its own
                single[(lid, t)] = decide(x, lid, t)
            else:
                keys.append((lid, t))
                rows.append(x)
    out: dict[tuple[str, int], DaqDecision] = {}
    if rows:
        xs = np.stack(rows)
        _, x_min, K, ks = _scan(xs)
        mask = (xs >= x_min[:, None]) & (K >= 0)[:, None]
        n_tail = mask.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            S = np.where(mask, np.log(xs) - np.log(x_min)[:, None], 0).sum(axis=1)
            alpha = 1 + n_tail / S
            ll_pl = n_tail * np.log(alpha - 1) - n_tail * np.log(x_min) - alpha * S
            alts = _batch_alternatives(xs, mask, x_min)
        for i, (lid, t) in enumerate(keys):
            if K[i] < 0:
                out[(lid, t)] = select_quantizer(lid, t, None, note="insufficient tail: no valid cutoff")
                continue
            fit = PowerLawFit(float(alpha[i]), float(x_min[i]), float(ll_pl[i]), int(n_tail[i]), float(ks[i]))
            out[(lid, t)] = select_quantizer(lid, t, fit, {f: float(v[i]) for f, v in alts.items()})
    out.update(single)
    return {k: out[k] for k in sorted(out, key=lambda k: (layers.index(k[0]), k[1]))}


def decision_rows(decisions: dict[tuple[str, int], DaqDecision]) -> list[dict]:
    rows = []
    for (lid, t), d in decisions.items():
        rows.append({"layer_id": lid, "t": t, "chosen": d.chosen, "R_g": d.R_g,
                     "alpha": d.fit.alpha if d.fit else math.nan, "x_min": d.fit.x_min if d.fit else math.nan,
                     "n_tail": d.fit.n_tail if d.fit else 0, "note": d.note})
    return rows
