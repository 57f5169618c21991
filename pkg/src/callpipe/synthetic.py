"""Synthetic call/background corpus for end-to-end checks.

Each clip is noise with a slight 1/f tilt.  One linear chirp (a "call") is
placed at a random offset inside one of the clip's 1 s windows, so the
remaining windows are pure background.  The noise level varies per clip
(log-uniform) so the detector cannot key on absolute level.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import AnnotationRecord, write_annotations_csv
from .audio_io import encode_wav


@dataclass
class CorpusSpec:
    n_clips: int = 200
    sample_rate: int = 8000
    clip_s: float = 3.0
    call_s: float = 0.8
    f0: float = 500.0
    f1: float = 1500.0
    snr_db: tuple[float, float] = (-5.0, 10.0)
    max_offset_s: float = 0.2
    noise_rms: tuple[float, float] = (1e-4, 0.1)
    label: str = "call"
    seed: int = 0


def pinkish_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance noise with a 1/f power tilt, flat in the lowest 1/80 of the band."""
    spec = np.fft.rfft(rng.standard_normal(n))
    k = np.arange(spec.size, dtype=np.float64)
    spec /= np.sqrt(np.maximum(k, max(1.0, spec.size / 80)))
    x = np.fft.irfft(spec, n)
    return x / x.std()


def chirp(n: int, sr: float, f0: float, f1: float) -> np.ndarray:
    t = np.arange(n) / sr
    dur = n / sr
    phase = 2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * dur))
    return np.sin(phase) * np.hanning(n)


def make_corpus(out_dir: str | Path, spec: CorpusSpec | None = None) -> tuple[Path, Path]:
    """Write ``clip_XXX.wav`` files and ``annotations.csv``; return (audio dir, csv path)."""
    spec = spec or CorpusSpec()
    out = Path(out_dir)
    audio = out / "audio"
    audio.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    sr = spec.sample_rate
    n = int(round(spec.clip_s * sr))
    n_call = int(round(spec.call_s * sr))
    n_windows = int(spec.clip_s)
    records = []
    for i in range(spec.n_clips):
        rms = float(np.exp(rng.uniform(*np.log(spec.noise_rms))))
        noise = pinkish_noise(n, rng) * rms
        k = int(rng.integers(0, n_windows))
        begin = k + float(rng.uniform(0, spec.max_offset_s))
        snr = float(rng.uniform(*spec.snr_db))
        call = chirp(n_call, sr, spec.f0, spec.f1)
        # SNR measured over the call's own span
        call *= rms * 10 ** (snr / 20) / call.std()
        start = int(round(begin * sr))
        wave = noise.copy()
        wave[start:start + n_call] += call
        peak = np.abs(wave).max()
        if peak > 0.99:
            wave *= 0.99 / peak
        name = f"clip_{i:03d}.wav"
        encode_wav(audio / name, wave[None], sr, bits=16)
        records.append(AnnotationRecord(name, 1, round(start / sr, 6), round((start + n_call) / sr, 6),
                                        spec.label, spec.f0, spec.f1))
    csv_path = out / "annotations.csv"
    write_annotations_csv(records, csv_path)
    return audio, csv_path
