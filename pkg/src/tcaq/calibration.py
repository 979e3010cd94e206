"""Calibration sets: sampler states plus per-layer input activations, per timestep."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .diffusion import NoiseSchedule, Runtime, ToyUNet, sample
from .tensor import load_archive, save_archive


@dataclass
class CalibrationSample:
    x_t: np.ndarray
    t: int
    chain_id: int
    captured: dict[str, np.ndarray]


class CalibrationSet:
    """Chains x timesteps of captured activations, stored batched per timestep.

    ``x_t[t]`` has shape (n_chains, 1, 8, 8); ``captured[t][layer_id]`` has
    the layer's input batch for the same chains, in chain order.
    """

    def __init__(self, x_t: dict[int, np.ndarray], captured: dict[int, dict[str, np.ndarray]], source: str,
                 seed: int, layer_ids: list[str]):
        self.x_t = dict(sorted(x_t.items()))
        self.captured = {t: captured[t] for t in self.x_t}
        self.source = source
        self.seed = seed
        self.layer_ids = list(layer_ids)
        for t, cells in self.captured.items():
            missing = set(self.layer_ids) - set(cells)
            if missing:
                raise ValueError(f"calibration cell empty for t={t}: {sorted(missing)}")

    @property
    def timesteps(self) -> list[int]:
        return list(self.x_t)

    @property
    def n_chains(self) -> int:
        return len(next(iter(self.x_t.values())))

    def __len__(self) -> int:
        return self.n_chains * len(self.x_t)

    @property
    def samples(self) -> list[CalibrationSample]:
        return list(self.iter_samples())

    def iter_samples(self) -> Iterator[CalibrationSample]:
        for c in range(self.n_chains):
            for t in self.timesteps:
                yield CalibrationSample(self.x_t[t][c], t, c, {k: v[c] for k, v in self.captured[t].items()})

    def cell(self, layer_id: str, t: int) -> np.ndarray:
        self._check_layer(layer_id)
        return self.captured[t][layer_id]

    def _check_layer(self, layer_id: str) -> None:
        if layer_id not in self.layer_ids:
            raise KeyError(f"layer {layer_id!r} not captured; known ids: {self.layer_ids}")

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All sampler states and their timesteps, ordered by (t, chain)."""
        xs = np.concatenate([self.x_t[t] for t in self.timesteps])
        ts = np.concatenate([np.full(self.n_chains, t) for t in self.timesteps])
        return xs, ts

    def mean_state(self) -> dict[int, np.ndarray]:
        return {t: x.mean(axis=0) for t, x in self.x_t.items()}

    # -- spill to the tensor archive
    def records(self) -> dict[str, np.ndarray]:
        rec = {}
        for t in self.timesteps:
            for c in range(self.n_chains):
                base = f"cal/{self.source}/{c}/{t}"
                rec[f"{base}/x_t"] = self.x_t[t][c]
                for lid in self.layer_ids:
                    rec[f"{base}/{lid}"] = self.captured[t][lid][c]
        return rec

    def save(self, path) -> None:
        save_archive(path, self.records())

    @classmethod
    def load(cls, path, seed: int = 0) -> "CalibrationSet":
        rec = load_archive(path)
        x_t: dict[int, dict[int, np.ndarray]] = {}
        cap: dict[int, dict[str, dict[int, np.ndarray]]] = {}
        source, layer_ids = None, []
        for name, arr in rec.items():
            _, src, rest = name.split("/", 2)
            chain, t, lid = rest.split("/", 2)
            source, c, t = src, int(chain), int(t)
            if lid == "x_t":
                x_t.setdefault(t, {})[c] = arr
            else:
                cap.setdefault(t, {}).setdefault(lid, {})[c] = arr
                if lid not in layer_ids:
                    layer_ids.append(lid)
        stack = lambda d: np.stack([d[c] for c in sorted(d)])
        return cls({t: stack(v) for t, v in x_t.items()},
                   {t: {lid: stack(v) for lid, v in cells.items()} for t, cells in cap.items()},
                   source, seed, layer_ids)


def hooked_layers(model: ToyUNet) -> list[str]:
    return model.layer_ids(quantized_only=True)


def _collect(model: ToyUNet, n_chains: int, inference_steps: int, seed: int, runtime: Optional[Runtime],
             source: str, sched: Optional[NoiseSchedule], layers: Optional[list[str]]) -> CalibrationSet:
    layers = layers or hooked_layers(model)
    wanted = set(layers)
    x_t: dict[int, np.ndarray] = {}
    captured: dict[int, dict[str, np.ndarray]] = {}

    def on_state(t, x, start):
        x_t[t] = x.copy()

    def on_layer(lid, arr, t):
        if lid in wanted:
            captured.setdefault(int(t[0]), {})[lid] = arr.copy()

    sample(model, n_chains, inference_steps, seed=seed, sched=sched, runtime=runtime, hook=on_layer,
           chunk=max(n_chains, 1), trajectory=on_state)
    return CalibrationSet(x_t, captured, source, seed, layers)


def sample_calibration_fp(model: ToyUNet, n_chains: int = 32, inference_steps: int = 20, seed: int = 0,
                          sched: Optional[NoiseSchedule] = None, layers: Optional[list[str]] = None) -> CalibrationSet:
    return _collect(model, n_chains, inference_steps, seed, None, "fp_model", sched, layers)


def resample_calibration_quant(qmodel, n_chains: int = 32, inference_steps: int = 20, seed: int = 0,
                               round: int = 0, sched: Optional[NoiseSchedule] = None,
                               layers: Optional[list[str]] = None) -> CalibrationSet:
    """Calibration drawn from the quantized model's own sampling trajectory."""
    return _collect(qmodel.model, n_chains, inference_steps, seed, qmodel.runtime(), f"quant_model({round})",
                    sched, layers)


def capture_layer_stats(calib: CalibrationSet, layer_id: str) -> dict[int, np.ndarray]:
    """Per-timestep activation batches for one layer, keyed by ascending t."""
    calib._check_layer(layer_id)
    return {t: calib.captured[t][layer_id] for t in calib.timesteps}
