"""Time-frequency representations and normalizations."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

NORM_FLOOR = 1e-12


@dataclass
class TimeFreqGrid:
    values: np.ndarray  # [freq_bins, time_frames]
    bin_hz: np.ndarray  # centre frequency of each row
    frame_hop_s: float
    scale: str  # power | db | mel | pcen | normalized

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class PcenParams:
    alpha: float = 0.98
    delta: float = 2.0
    r: float = 0.5
    s: float = 0.025
    eps: float = 1e-6
    trainable: tuple[str, ...] = ("alpha", "delta", "r")

    def __post_init__(self):
        # eps == 0 is admitted for exact AGC checks
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if not 0 < self.s <= 1:
            raise ValueError("s must lie in (0, 1]")
        if self.r <= 0:
            raise ValueError("r must be positive")


def _check_nfft(nfft: int, hop: int) -> None:
    if nfft < 8 or nfft & (nfft - 1):
        raise ValueError(f"nfft must be a power of two >= 8, got {nfft}")
    if not 0 < hop <= nfft:
        raise ValueError(f"hop must lie in (0, nfft], got {hop}")


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (sums to exactly n/2)."""
    return signal.get_window("hann", n, fftbins=True)


def stft(wave: np.ndarray, nfft: int, hop: int, window: str = "hann") -> np.ndarray:
    """Centred, reflection-padded STFT; returns ``[nfft//2 + 1, len//hop + 1]`` complex."""
    _check_nfft(nfft, hop)
    if window != "hann":
        raise ValueError(f"unsupported window {window!r}")
    x = np.asarray(wave, dtype=np.float64)
    if x.size < 1:
        return np.zeros((nfft // 2 + 1, 0), dtype=np.complex128)
    padded = np.pad(x, nfft // 2, mode="reflect") if x.size > 1 else np.full(x.size + nfft, x[0])
    frames = sliding_window_view(padded, nfft)[::hop]
    return np.fft.rfft(frames * hann(nfft), axis=1).T


def power_spectrogram(wave: np.ndarray, nfft: int, hop: int, sample_rate: float = 1.0) -> TimeFreqGrid:
    spec = stft(wave, nfft, hop)
    power = spec.real**2 + spec.imag**2
    return TimeFreqGrid(power, np.fft.rfftfreq(nfft, 1.0 / sample_rate), hop / sample_rate, "power")


def amplitude_to_db(grid: TimeFreqGrid, eps: float = 1e-10, top_db: float | None = None) -> TimeFreqGrid:
    if eps <= 0:
        raise ValueError("eps must be positive")
    db = 10.0 * np.log10(np.maximum(grid.values, eps))
    if top_db is not None and db.size:
        db = np.maximum(db, db.max() - top_db)
    return replace(grid, values=db, scale="db")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """``n_mels + 2`` frequencies equally spaced on the mel curve."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def triangle_weights(freqs: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Evaluate the apex-1 triangular filters defined by ``edges`` at ``freqs``."""
    freqs = np.asarray(freqs, dtype=np.float64)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_filterbank(sr: float, nfft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filters, ``[n_mels, nfft//2 + 1]``, un-normalized (apex 1)."""
    fmax = sr / 2 if fmax is None else fmax
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not 0 <= fmin < fmax <= sr / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}, sr={sr}")
    edges = mel_band_edges(n_mels, fmin, fmax)
    return triangle_weights(np.fft.rfftfreq(nfft, 1.0 / sr), edges)


def apply_mel(grid: TimeFreqGrid, fb: np.ndarray, centers_hz: np.ndarray) -> TimeFreqGrid:
    return TimeFreqGrid(fb @ grid.values, np.asarray(centers_hz), grid.frame_hop_s, "mel")


def smooth_energy(values: np.ndarray, s: float, init: str = "first-frame") -> np.ndarray:
    """First-order IIR ``M[t] = (1 - s) M[t-1] + s E[t]`` along the last axis."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] == 0:
        return values.copy()
    if init == "first-frame":
        zi = (1.0 - s) * values[..., :1]
    elif init == "zeros":
        zi = np.zeros(values.shape[:-1] + (1,))
    else:
        raise ValueError(f"unknown init {init!r}")
    out, _ = signal.lfilter([s], [1.0, -(1.0 - s)], values, axis=-1, zi=zi)
    return out


def pcen(grid: TimeFreqGrid, params: PcenParams | None = None, init: str = "first-frame") -> TimeFreqGrid:
    """Per-channel energy normalization of a non-negative grid."""
    p = params or PcenParams()
    energy = np.asarray(grid.values, dtype=np.float64)
    if np.any(energy < 0):
        raise ValueError("pcen input must be non-negative")
    smooth = smooth_energy(energy, p.s, init)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = energy / (p.eps + smooth) ** p.alpha
    out = (gain + p.delta) ** p.r - p.delta ** p.r
    return replace(grid, values=out, scale="pcen")


def normalize_peak(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(np.abs(x)) if x.size else 0.0
    return x / peak if peak >= NORM_FLOOR else x.copy()


def normalize_unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not x.size:
        return x.copy()
    centered = x - x.mean()
    std = x.std()
    return centered / std if std >= NORM_FLOOR else centered


def normalize_sliding(grid: TimeFreqGrid, win_frames: int) -> TimeFreqGrid:
    """Per-row z-score against a centred, edge-clamped window of ``win_frames`` frames."""
    if win_frames < 1 or win_frames % 2 == 0:
        raise ValueError("win_frames must be odd and >= 1")
    v = np.asarray(grid.values, dtype=np.float64)
    if v.size == 0:
        return replace(grid, values=v.copy(), scale="normalized")
    half = win_frames // 2
    windows = sliding_window_view(np.pad(v, ((0, 0), (half, half)), mode="edge"), win_frames, axis=1)
    mu = windows.mean(axis=-1)
    sigma = windows.std(axis=-1)
    return replace(grid, values=(v - mu) / (sigma + 1e-6), scale="normalized")


class Preprocessor:
    """Waveform -> model input grid, driven by the ``preprocessors`` config group.

    Recognized keys: ``representation`` (spectrogram, spectrogram_db, mel,
    mel_db), ``nfft``, ``hop``, ``n_mels``, ``fmin``, ``fmax`` (0 means
    Nyquist), ``db_eps``, ``top_db`` (0 disables), ``normalization`` (peak,
    unit, sliding, none) and ``sliding_window``.
    """

    def __init__(self, cfg: Mapping[str, Any], sample_rate: int):
        self.cfg = dict(cfg)
        self.sample_rate = int(sample_rate)
        self.nfft = int(cfg.get("nfft", 256))
        self.hop = int(cfg.get("hop", self.nfft // 2))
        self.representation = cfg.get("representation", "mel_db")
        self.normalization = cfg.get("normalization", "peak")
        self.sliding_window = int(cfg.get("sliding_window", 15))
        self.db_eps = float(cfg.get("db_eps", 1e-10))
        top_db = float(cfg.get("top_db", 0))
        self.top_db = top_db if top_db > 0 else None
        _check_nfft(self.nfft, self.hop)
        if self.representation not in ("spectrogram", "spectrogram_db", "mel", "mel_db"):
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.normalization not in ("peak", "unit", "sliding", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        self.fb = None
        if self.representation.startswith("mel"):
            fmax = float(cfg.get("fmax", 0)) or sample_rate / 2
            fmin = float(cfg.get("fmin", 0))
            n_mels = int(cfg.get("n_mels", 64))
            self.fb = mel_filterbank(sample_rate, self.nfft, n_mels, fmin, fmax)
            self.mel_centers = mel_band_edges(n_mels, fmin, fmax)[1:-1]

    def __call__(self, wave: np.ndarray) -> TimeFreqGrid:
        grid = power_spectrogram(wave, self.nfft, self.hop, self.sample_rate)
        if self.fb is not None:
            grid = apply_mel(grid, self.fb, self.mel_centers)
        if self.representation.endswith("_db"):
            grid = amplitude_to_db(grid, self.db_eps, self.top_db)
        if self.normalization == "peak":
            grid = replace(grid, values=normalize_peak(grid.values), scale="normalized")
        elif self.normalization == "unit":
            grid = replace(grid, values=normalize_unit(grid.values), scale="normalized")
        elif self.normalization == "sliding":
            grid = normalize_sliding(grid, self.sliding_window)
        return grid

    def output_shape(self, n_samples: int) -> tuple[int, int]:
        rows = self.fb.shape[0] if self.fb is not None else self.nfft // 2 + 1
        return rows, n_samples // self.hop + 1
