"""Whole-recording inference, detection events, Raven export and plot bundles."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotations import AnnotationRecord, LabeledSegment, segment_dataset
from .audio_io import AudioClip
from .checkpoint import Checkpoint, load_checkpoint
from .data import ChannelPolicy, dataset_spec, prepare_clip
from .dsp import Preprocessor, TimeFreqGrid, amplitude_to_db, power_spectrogram
from .metrics import Metrics
from .nn import softmax
from .nn.models import Model
from .trainer import EVAL_BATCH, EvalResult, predict_batches, summarize

log = logging.getLogger(__name__)

RAVEN_HEADER = ["Selection", "View", "Channel", "Begin Time (s)", "End Time (s)",
                "Low Freq (Hz)", "High Freq (Hz)", "Annotation"]


class InferenceError(RuntimeError):
    pass


@dataclass
class PredictionRow:
    filename: str
    channel: int
    begin_s: float
    end_s: float
    probs: tuple[float, ...]
    predicted_label: str
    padded: bool = False


@dataclass
class DetectionEvent:
    filename: str
    channel: int
    begin_s: float
    end_s: float
    peak: float
    label: str


class Predictor:
    """A checkpointed model plus the preprocessing it was trained with."""

    def __init__(self, ckpt: Checkpoint, batch_size: int = EVAL_BATCH):
        self.ckpt = ckpt
        self.model: Model = ckpt.build()
        snap = ckpt.preprocessing
        self.class_names = list(ckpt.class_names)
        self.sample_rate = int(snap["sample_rate"])
        self.segment_len_s = float(snap["segment_len_s"])
        self.policy = ChannelPolicy(snap["mixdown"], int(snap["channel"]))
        self.preprocessor = Preprocessor(snap["preprocessors"], self.sample_rate)
        self.segment_samples = int(round(self.segment_len_s * self.sample_rate))
        self.batch_size = batch_size

    @classmethod
    def load(cls, path: str | Path, batch_size: int = EVAL_BATCH) -> "Predictor":
        return cls(load_checkpoint(path), batch_size)

    def prepare(self, clip: AudioClip) -> np.ndarray:
        return prepare_clip(clip, self.policy, self.sample_rate).samples[0]

    def logits(self, waves: Sequence[np.ndarray]) -> np.ndarray:
        inputs = [self.preprocessor(w).values[None] for w in waves]
        return predict_batches(self.model, inputs, self.batch_size)


def tile(samples: np.ndarray, n: int) -> list[tuple[int, np.ndarray, bool]]:
    """Consecutive ``n``-sample windows; a final partial window is zero-padded and flagged."""
    out = []
    for start in range(0, len(samples), n):
        w = samples[start:start + n]
        padded = len(w) < n
        if padded:
            w = np.pad(w, (0, n - len(w)))
        out.append((start, w, padded))
    return out


def infer_file(predictor: Predictor, clip: AudioClip, filename: str | None = None) -> list[PredictionRow]:
    """Per-window class probabilities over the whole clip (hop = window length)."""
    name = filename or (Path(clip.source_path).name if clip.source_path else "<memory>")
    samples = predictor.prepare(clip)
    windows = tile(samples, predictor.segment_samples)
    if not windows:
        return []
    probs = softmax(predictor.logits([w for _, w, _ in windows]))
    sr = predictor.sample_rate
    seg = predictor.segment_len_s
    rows = []
    for (start, _, padded), p in zip(windows, probs):
        begin = start / sr
        rows.append(PredictionRow(name, predictor.policy.output_channel, begin, begin + seg,
                                  tuple(float(v) for v in p), predictor.class_names[int(np.argmax(p))],
                                  padded))
    return rows


# ---------------------------------------------------------------------------
# Predictions CSV
# ---------------------------------------------------------------------------


def write_predictions_csv(rows: Iterable[PredictionRow], path: str | Path, class_names: Sequence[str]) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["filename", "channel", "begin_time", "end_time", *class_names, "predicted_label"])
            for r in rows:
                w.writerow([r.filename, r.channel, f"{r.begin_s:.6f}", f"{r.end_s:.6f}",
                            *(f"{p:.6f}" for p in r.probs), r.predicted_label])
    except OSError as exc:
        raise InferenceError(f"cannot write predictions to {path}: {exc}") from exc


def read_predictions_csv(path: str | Path) -> tuple[list[str], list[PredictionRow]]:
    """Return ``(class_names, rows)`` from a predictions file."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            classes = header[4:-1]
            rows = [PredictionRow(r[0], int(r[1]), float(r[2]), float(r[3]),
                                  tuple(float(v) for v in r[4:-1]), r[-1]) for r in reader if r]
    except OSError as exc:
        raise InferenceError(f"cannot read predictions from {path}: {exc}") from exc
    return classes, rows


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


def _event(run: list[PredictionRow], scores: list[float], class_names: Sequence[str] | None) -> DetectionEvent:
    peak_i = int(np.argmax(scores))
    top = run[peak_i]
    if class_names is not None and len(top.probs) > 1:
        label = class_names[1 + int(np.argmax(top.probs[1:]))]
    else:
        label = "call"
    return DetectionEvent(run[0].filename, run[0].channel, run[0].begin_s, run[-1].end_s,
                          float(scores[peak_i]), label)


def detect(rows: Sequence[PredictionRow], threshold: float = 0.5, min_event_windows: int = 1,
           class_names: Sequence[str] | None = None) -> list[DetectionEvent]:
    """Merge runs of adjacent windows whose positive-class score is ``>= threshold``.

    The positive score is ``1 - P(class 0)``.  Runs never cross file or
    channel boundaries, and only windows that abut in time are adjacent.
    """
    events: list[DetectionEvent] = []
    run: list[PredictionRow] = []
    scores: list[float] = []

    def flush():
        if len(run) >= min_event_windows and run:
            events.append(_event(run, scores, class_names))
        run.clear()
        scores.clear()

    for r in rows:
        score = 1.0 - r.probs[0]
        hot = score >= threshold
        if run and (r.filename != run[-1].filename or r.channel != run[-1].channel
                    or abs(r.begin_s - run[-1].end_s) > 1e-6 or not hot):
            flush()
        if hot:
            run.append(r)
            scores.append(score)
    flush()
    return events


def export_raven(events: Iterable[DetectionEvent], path: str | Path,
                 band: tuple[float, float] | None = None, sample_rate: float | None = None) -> None:
    """Write a Raven selection table; the band defaults to 0 .. Nyquist."""
    if band is None:
        if sample_rate is None:
            raise InferenceError("export_raven needs either a band or the sample rate")
        band = (0.0, sample_rate / 2)
    lo, hi = band
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("\t".join(RAVEN_HEADER) + "\n")
            for i, e in enumerate(events, 1):
                fh.write(f"{i}\tSpectrogram 1\t{e.channel}\t{e.begin_s:.6f}\t{e.end_s:.6f}\t"
                         f"{lo:.6f}\t{hi:.6f}\t{e.label}\n")
    except OSError as exc:
        raise InferenceError(f"cannot write selection table {path}: {exc}") from exc


def records_to_events(records: Iterable[AnnotationRecord]) -> list[DetectionEvent]:
    return [DetectionEvent(r.filename, r.channel, r.begin_s, r.end_s, 1.0, r.label) for r in records]


# ---------------------------------------------------------------------------
# Evaluation on annotated recordings
# ---------------------------------------------------------------------------


def recording_segments(predictor: Predictor, clips: Mapping[str, AudioClip],
                       records: Sequence[AnnotationRecord]) -> tuple[list[LabeledSegment], dict[str, np.ndarray]]:
    """Label full windows of every annotated clip; unannotated clips are skipped with a warning."""
    annotated = {r.filename for r in records}
    usable = sorted(set(clips) & annotated)
    skipped = sorted(set(clips) - annotated)
    if skipped:
        log.warning("%d file(s) without annotations excluded: %s", len(skipped), ", ".join(skipped))
    if not usable:
        raise InferenceError("no overlap between annotation files and supplied recordings")
    samples = {f: predictor.prepare(clips[f]) for f in usable}
    durations = {f: len(samples[f]) / predictor.sample_rate for f in usable}
    spec = dataset_spec(predictor.ckpt.preprocessing)
    recs = [r for r in records if r.filename in samples]
    return segment_dataset(recs, durations, spec), samples


def evaluate_recordings(predictor: Predictor, clips: Mapping[str, AudioClip],
                        records: Sequence[AnnotationRecord], threshold: float = 0.5) -> tuple[Metrics, EvalResult, int]:
    """Window-level metrics against annotations; returns (metrics, details, files skipped)."""
    segments, samples = recording_segments(predictor, clips, records)
    if not segments:
        raise InferenceError("no labeled windows in the supplied recordings")
    sr, n = predictor.sample_rate, predictor.segment_samples
    waves = []
    for s in segments:
        start = int(round(s.begin_s * sr))
        w = samples[s.filename][start:start + n]
        waves.append(np.pad(w, (0, n - len(w))))
    logits = predictor.logits(waves)
    idx = np.array([s.class_index for s in segments], dtype=np.int64)
    result = summarize(idx, logits, predictor.class_names, threshold)
    return result.metrics, result, len(set(clips) - {r.filename for r in records})


# ---------------------------------------------------------------------------
# Plot bundle
# ---------------------------------------------------------------------------


def display_grid(predictor: Predictor, clip: AudioClip) -> TimeFreqGrid:
    """dB power spectrogram of the prepared clip, for visual inspection."""
    samples = predictor.prepare(clip)
    nfft = predictor.preprocessor.nfft
    return amplitude_to_db(power_spectrogram(samples, nfft, predictor.preprocessor.hop, predictor.sample_rate))


def export_visualization(rows: Sequence[PredictionRow], grid: TimeFreqGrid, threshold: float,
                         path: str | Path) -> Path:
    """Write ``spectrogram.csv``, ``probability.csv`` and ``decision.csv`` into ``path``."""
    out = Path(path)
    if rows:
        seg = rows[0].end_s - rows[0].begin_s
        grid_span = grid.values.shape[1] * grid.frame_hop_s
        rows_span = rows[-1].end_s
        if abs(grid_span - rows_span) > seg + 1e-9:
            raise InferenceError(f"grid spans {grid_span:.3f} s but rows span {rows_span:.3f} s")
    out.mkdir(parents=True, exist_ok=True)
    freqs = np.arange(grid.values.shape[0]) * grid.bin_hz
    times = np.arange(grid.values.shape[1]) * grid.frame_hop_s
    with open(out / "spectrogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz", *(f"{t:.6f}" for t in times)])
        for f, row in zip(freqs, grid.values):
            w.writerow([f"{f:.6f}", *(f"{v:.6f}" for v in row)])
    with open(out / "probability.csv", "w", newline="", encoding="utf-8") as fp, \
            open(out / "decision.csv", "w", newline="", encoding="utf-8") as fd:
        for r in rows:
            mid = (r.begin_s + r.end_s) / 2
            p = 1.0 - r.probs[0]
            fp.write(f"{mid:.6f},{p:.6f}\n")
            fd.write(f"{mid:.6f},{int(p >= threshold)}\n")
    return out


def read_visualization(path: str | Path) -> dict[str, np.ndarray]:
    out = Path(path)
    prob = np.loadtxt(out / "probability.csv", delimiter=",", ndmin=2)
    dec = np.loadtxt(out / "decision.csv", delimiter=",", ndmin=2)
    spec = np.loadtxt(out / "spectrogram.csv", delimiter=",", skiprows=1, ndmin=2)
    return {"probability": prob, "decision": dec, "spectrogram": spec[:, 1:], "freqs": spec[:, 0]}
