"""Dataset assembly from the ``data`` config group."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .annotations import (AnnotationRecord, DatasetSpec, FilterRules, LabeledSegment, filter_annotations,
                          load_annotations, segment_dataset, split_by_group)
from .audio_io import AudioClip, decode_wav, mixdown, resample
from .augment import AugmentationChain, apply_chain
from .dsp import Preprocessor

log = logging.getLogger(__name__)


class DataError(Exception):
    pass


@dataclass(frozen=True)
class ChannelPolicy:
    mixdown: str = "average"  # average | select
    channel: int = 1  # 1-based, used by "select"

    def apply(self, clip: AudioClip) -> AudioClip:
        return mixdown(clip, self.mixdown, self.channel - 1)

    @property
    def output_channel(self) -> int:
        return self.channel if self.mixdown == "select" else 1


def prepare_clip(clip: AudioClip, policy: ChannelPolicy, sample_rate: int) -> AudioClip:
    """Mix down, then resample to the dataset rate."""
    return resample(policy.apply(clip), sample_rate)


class ClipStore:
    """Decodes, mixes down and resamples recordings once, then serves slices."""

    def __init__(self, audio_dir: str | Path, sample_rate: int, policy: ChannelPolicy):
        self.audio_dir = Path(audio_dir)
        self.sample_rate = int(sample_rate)
        self.policy = policy
        self._cache: dict[str, np.ndarray] = {}

    def path(self, filename: str) -> Path:
        return self.audio_dir / filename

    def samples(self, filename: str) -> np.ndarray:
        if filename not in self._cache:
            path = self.path(filename)
            if not path.is_file():
                raise DataError(f"audio file not found: {path}")
            clip = prepare_clip(decode_wav(path), self.policy, self.sample_rate)
            self._cache[filename] = clip.samples[0]
        return self._cache[filename]

    def duration(self, filename: str) -> float:
        return len(self.samples(filename)) / self.sample_rate

    def slice(self, filename: str, begin_s: float, n_samples: int) -> np.ndarray:
        x = self.samples(filename)
        start = int(round(begin_s * self.sample_rate))
        out = x[start:start + n_samples]
        if len(out) < n_samples:
            out = np.pad(out, (0, n_samples - len(out)))
        return out


def load_records(path: str | Path) -> list[AnnotationRecord]:
    """Load a CSV/Raven file, or every ``*.txt`` selection table in a directory."""
    path = Path(path)
    if path.is_dir():
        records: list[AnnotationRecord] = []
        for table in sorted(path.glob("*.txt")):
            records.extend(load_annotations(table))
        return records
    return load_annotations(path)


def filter_rules(cfg: Mapping[str, Any]) -> FilterRules:
    f = dict(cfg.get("filters", {}))
    drop = float(f.get("drop_duration_equals", 0))
    return FilterRules(
        exclude_files=list(f.get("exclude_files", [])),
        drop_duration_equals=drop if drop > 0 else None,
        keep_labels=list(f.get("keep_labels", [])),
    )


@dataclass
class DataBundle:
    spec: DatasetSpec
    store: ClipStore
    preprocessor: Preprocessor
    train: list[LabeledSegment]
    val: list[LabeledSegment]
    segment_samples: int
    preprocessing: dict[str, Any]

    @property
    def class_names(self) -> list[str]:
        return list(self.spec.classes)

    def input_shape(self) -> tuple[int, int, int]:
        return (1,) + self.preprocessor.output_shape(self.segment_samples)

    def wave(self, seg: LabeledSegment) -> np.ndarray:
        return self.store.slice(seg.filename, seg.begin_s, self.segment_samples)

    def batch(self, segments: Sequence[LabeledSegment], chain: AugmentationChain | None = None,
              rng: np.random.Generator | None = None, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        xs = []
        for seg in segments:
            w = self.wave(seg)
            if chain is not None:
                w = apply_chain(w, chain, rng, self.store.sample_rate)
            xs.append(self.preprocessor(w).values)
        x = np.stack(xs)[:, None].astype(dtype)
        y = np.array([s.class_index for s in segments], dtype=np.int64)
        return x, y


def preprocessing_snapshot(data_cfg: Mapping[str, Any], pre_cfg: Mapping[str, Any]) -> dict[str, Any]:
    return {
        "sample_rate": int(data_cfg["sample_rate"]),
        "segment_len_s": float(data_cfg["segment_len"]),
        "mixdown": str(data_cfg.get("mixdown", "average")),
        "channel": int(data_cfg.get("channel", 1)),
        "mode": str(data_cfg.get("mode", "with-background")),
        "overlap_threshold": float(data_cfg.get("overlap_threshold", 0.5)),
        "classes": list(data_cfg["classes"]),
        "preprocessors": dict(pre_cfg),
    }


def dataset_spec(snapshot: Mapping[str, Any], seed: int = 0) -> DatasetSpec:
    return DatasetSpec(
        segment_len_s=snapshot["segment_len_s"], classes=snapshot["classes"], mode=snapshot["mode"],
        overlap_threshold=snapshot["overlap_threshold"],
        channel=snapshot["channel"] if snapshot["mixdown"] == "select" else 1, seed=seed,
    )


def build_data(data_cfg: Mapping[str, Any], pre_cfg: Mapping[str, Any], seed: int) -> DataBundle:
    """Load, filter, segment and split the dataset described by the config."""
    snap = preprocessing_snapshot(data_cfg, pre_cfg)
    spec = dataset_spec(snap, seed)
    policy = ChannelPolicy(snap["mixdown"], snap["channel"])
    store = ClipStore(data_cfg["audio_dir"], snap["sample_rate"], policy)

    records = filter_annotations(load_records(data_cfg["annotations"]), filter_rules(data_cfg))
    files = sorted({r.filename for r in records})
    if data_cfg.get("include_unannotated", False):
        excluded = set(filter_rules(data_cfg).exclude_files)
        files = sorted(set(files) | {p.name for p in store.audio_dir.glob("*.wav") if p.name not in excluded})
    if not files:
        raise DataError("no annotated audio files found")
    durations = {f: store.duration(f) for f in files}
    segments = segment_dataset(records, durations, spec)

    split = dict(data_cfg.get("split", {}))
    ratios = tuple(float(v) for v in split.get("ratios", [0.9, 0.1]))
    train, val = split_by_group(segments, str(split.get("group_key", "filename")), ratios, seed)
    if not train or not val:
        raise DataError(f"empty split (train={len(train)}, val={len(val)})")
    log.info("dataset: %d files, %d train / %d val segments", len(files), len(train), len(val))
    segment_samples = int(round(snap["segment_len_s"] * snap["sample_rate"]))
    return DataBundle(spec, store, Preprocessor(pre_cfg, snap["sample_rate"]), train, val,
                      segment_samples, snap)
