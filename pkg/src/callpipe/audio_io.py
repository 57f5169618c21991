"""WAV decoding, sample-rate conversion and channel reduction."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

KAISER_BETA = 8.6
ZERO_CROSSINGS = 64


class DecodeError(Exception):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray  # [channels, frames]
    sample_rate: int
    source_path: str = ""

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.frames / self.sample_rate


def _read_chunks(data: bytes, path: str):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = data[pos + 8:pos + 8 + size]
        yield cid, size, body
        pos += 8 + size + (size & 1)


def decode_wav(path: str | Path) -> AudioClip:
    """Decode PCM 16/24/32-bit or 32-bit float WAV into unit-scale floats."""
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()

    fmt = None
    payload = None
    for cid, size, body in _read_chunks(raw, path):
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError(f"{path}: truncated fmt chunk")
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", body)
            if tag == WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag, channels, rate, block_align, bits)
        elif cid == b"data":
            if len(body) < size:
                raise DecodeError(f"{path}: truncated data chunk ({len(body)} of {size} bytes)")
            payload = body
    if fmt is None:
        raise DecodeError(f"{path}: missing fmt chunk")
    if payload is None:
        raise DecodeError(f"{path}: missing data chunk")

    tag, channels, rate, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise DecodeError(f"{path}: invalid header (channels={channels}, rate={rate})")
    if tag == WAVE_FORMAT_PCM and bits in (16, 24, 32):
        width = bits // 8
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        width = 4
    else:
        raise DecodeError(f"{path}: unsupported encoding (format tag 0x{tag:04X}, {bits} bits)")
    if len(payload) % (width * channels):
        raise DecodeError(f"{path}: truncated data chunk (partial frame)")

    if tag == WAVE_FORMAT_IEEE_FLOAT:
        flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(flat)):
            raise DecodeError(f"{path}: non-finite float samples")
    elif bits == 16:
        flat = np.frombuffer(payload, dtype="<i2") / 2.0**15
    elif bits == 32:
        flat = np.frombuffer(payload, dtype="<i4") / 2.0**31
    else:
        b = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints & 0x800000, ints - (1 << 24), ints)
        flat = ints / 2.0**23
    samples = flat.reshape(-1, channels).T.copy()
    return AudioClip(samples, int(rate), path)


def encode_wav(path: str | Path, samples: np.ndarray, sample_rate: int, bits: int = 16,
               float_format: bool = False) -> None:
    """Write ``samples`` ([channels, frames] or 1-D) as a WAV file."""
    arr = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    channels = arr.shape[0]
    inter = arr.T.reshape(-1)
    if float_format:
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
        payload = inter.astype("<f4").tobytes()
    else:
        tag = WAVE_FORMAT_PCM
        scale = 2.0 ** (bits - 1)
        ints = np.clip(np.round(inter * scale), -scale, scale - 1).astype(np.int64)
        if bits == 16:
            payload = ints.astype("<i2").tobytes()
        elif bits == 32:
            payload = ints.astype("<i4").tobytes()
        elif bits == 24:
            u = (ints & 0xFFFFFF).astype(np.uint32)
            payload = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
        else:
            raise ValueError(f"unsupported bit depth {bits}")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


@lru_cache(maxsize=32)
def _polyphase_filter(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    half_len = ZERO_CROSSINGS * max_rate
    h = signal.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", KAISER_BETA))
    # unit DC gain on every polyphase branch, so constants pass through exactly
    for phase in range(up):
        h[phase::up] /= h[phase::up].sum()
    # resample_poly multiplies the taps by ``up`` internally
    return h / up


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited rate conversion with a Kaiser-windowed sinc polyphase filter."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    target_rate = int(target_rate)
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.source_path)
    n_out = int(round(clip.frames * target_rate / clip.sample_rate))
    g = math.gcd(target_rate, clip.sample_rate)
    up, down = target_rate // g, clip.sample_rate // g
    if clip.frames == 0:
        out = np.zeros((clip.channels, 0))
    else:
        out = signal.resample_poly(clip.samples, up, down, axis=1, window=_polyphase_filter(up, down))
        if out.shape[1] >= n_out:
            out = out[:, :n_out]
        else:
            out = np.pad(out, ((0, 0), (0, n_out - out.shape[1])))
    return AudioClip(np.ascontiguousarray(out), target_rate, clip.source_path)


def mixdown(clip: AudioClip, policy: str = "average", channel: int = 0) -> AudioClip:
    """Reduce to mono by averaging, or by selecting ``channel`` (0-based)."""
    if policy == "average":
        mono = clip.samples.mean(axis=0, keepdims=True)
    elif policy == "select":
        if not 0 <= channel < clip.channels:
            raise IndexError(f"channel {channel} out of range for {clip.channels}-channel clip")
        mono = clip.samples[channel:channel + 1].copy()
    else:
        raise ValueError(f"unknown mixdown policy {policy!r}")
    return AudioClip(mono, clip.sample_rate, clip.source_path)
