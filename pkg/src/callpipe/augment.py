"""Waveform augmentations applied before preprocessing.

Every function takes an explicit ``numpy.random.Generator`` and returns a
new array of the same length; labels are never touched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np


def add_gaussian_noise(wave: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise scaled so that var(wave)/var(noise) hits ``snr_db``."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size < 2:
        return wave.copy()
    # exact constancy check; var() of a constant is not always exactly 0.0
    if np.ptp(wave) == 0:
        return wave.copy()
    var = wave.var()
    noise_std = np.sqrt(var / 10.0 ** (snr_db / 10.0))
    return wave + rng.standard_normal(wave.shape) * noise_std


def mask_time_span(wave: np.ndarray, start: int, width: int) -> np.ndarray:
    out = np.array(wave, dtype=np.float64, copy=True)
    out[start:start + width] = 0.0
    return out


def time_mask(wave: np.ndarray, max_mask_frac: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < max_mask_frac <= 1:
        raise ValueError("max_mask_frac must lie in (0, 1]")
    n = len(wave)
    width = int(rng.integers(0, int(np.floor(max_mask_frac * n)) + 1))
    start = int(rng.integers(0, n - width + 1))
    return mask_time_span(wave, start, width)


def mask_freq_band(wave: np.ndarray, sr: float, f_lo: float, f_hi: float) -> np.ndarray:
    """Zero every real-FFT bin whose frequency lies in ``[f_lo, f_hi]``."""
    wave = np.asarray(wave, dtype=np.float64)
    n = len(wave)
    if n == 0:
        return wave.copy()
    spec = np.fft.rfft(wave)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs >= f_lo) & (freqs <= f_hi)] = 0.0
    return np.fft.irfft(spec, n=n)


def freq_mask(wave: np.ndarray, sr: float, max_band_hz: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < max_band_hz <= sr / 2:
        raise ValueError("max_band_hz must lie in (0, sr/2]")
    width = rng.uniform(0.0, max_band_hz)
    f0 = rng.uniform(0.0, sr / 2 - width)
    return mask_freq_band(wave, sr, f0, f0 + width)


def _noise_entry(wave, sr, params, rng):
    lo = float(params.get("snr_db_min", 0.0))
    hi = float(params.get("snr_db_max", 20.0))
    snr = float(params["snr_db"]) if "snr_db" in params else rng.uniform(lo, hi)
    return add_gaussian_noise(wave, snr, rng)


AUGMENTATIONS: dict[str, Callable[..., np.ndarray]] = {
    "gaussian_noise": _noise_entry,
    "time_mask": lambda wave, sr, params, rng: time_mask(wave, float(params.get("max_mask_frac", 0.1)), rng),
    "freq_mask": lambda wave, sr, params, rng: freq_mask(wave, sr, float(params.get("max_band_hz", 500.0)), rng),
}


@dataclass
class ChainEntry:
    name: str
    p: float
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class AugmentationChain:
    entries: Sequence[ChainEntry]
    train_aug_p: float = 1.0

    def __post_init__(self):
        for e in self.entries:
            if e.name not in AUGMENTATIONS:
                raise ValueError(f"unknown augmentation {e.name!r}; known: {sorted(AUGMENTATIONS)}")
            if not 0 <= e.p <= 1:
                raise ValueError(f"augmentation {e.name!r}: p must lie in [0, 1]")
        if not 0 <= self.train_aug_p <= 1:
            raise ValueError("train_aug_p must lie in [0, 1]")

    @classmethod
    def from_config(cls, group: Mapping[str, Any], train_aug_p: float) -> "AugmentationChain":
        """Build from the ``augmentations`` group: one mapping per entry, in order."""
        entries = []
        for name, params in group.items():
            params = dict(params)
            if not params.pop("enabled", True):
                continue
            entries.append(ChainEntry(name, float(params.pop("p", 1.0)), params))
        return cls(entries, float(train_aug_p))


def apply_chain(wave: np.ndarray, chain: AugmentationChain, rng: np.random.Generator,
                sr: float = 1.0) -> np.ndarray:
    """Gate by ``train_aug_p``, then apply each entry independently with its ``p``."""
    wave = np.asarray(wave, dtype=np.float64)
    if rng.random() >= chain.train_aug_p:
        return wave
    for entry in chain.entries:
        if rng.random() < entry.p:
            wave = AUGMENTATIONS[entry.name](wave, sr, entry.params, rng)
    return wave
