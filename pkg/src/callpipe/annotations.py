"""Annotation ingest, filtering, window segmentation, splitting and balancing.

Two on-disk formats are accepted by :func:`load_annotations`:

* comma-separated with header
  ``filename,channel,begin_time,end_time,low_freq,high_freq,label``
  (``low_freq``/``high_freq`` optional);
* Raven selection tables (tab-separated, ``Begin Time (s)`` etc.).
"""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

TIME_EPS = 1e-9
CSV_COLUMNS = ("filename", "channel", "begin_time", "end_time", "low_freq", "high_freq", "label")
RAVEN_COLUMNS = (
    "Selection", "View", "Channel", "Begin Time (s)", "End Time (s)",
    "Low Freq (Hz)", "High Freq (Hz)", "Annotation",
)
_RAVEN_SUFFIXES = (".Table.1.selections.txt", ".selections.txt", ".txt")
_DATE_RE = re.compile(r"(\d{8}|\d{2}\.\d{2}\.\d{2})")


class AnnotationError(Exception):
    pass


class SchemaError(AnnotationError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    filename: str
    channel: int
    begin_s: float
    end_s: float
    label: str
    low_hz: float | None = None
    high_hz: float | None = None

    @property
    def duration(self) -> float:
        return self.end_s - self.begin_s


@dataclass(frozen=True)
class LabeledSegment:
    filename: str
    channel: int
    begin_s: float
    end_s: float
    class_index: int


@dataclass
class DatasetSpec:
    segment_len_s: float
    classes: Sequence[str]
    mode: str = "with-background"
    overlap_threshold: float = 0.5
    channel: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("with-background", "no-background"):
            raise ValueError(f"unknown dataset mode {self.mode!r}")
        if not 0 < self.overlap_threshold <= 1:
            raise ValueError("overlap_threshold must lie in (0, 1]")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate class names in {list(self.classes)}")
        if self.segment_len_s <= 0:
            raise ValueError("segment_len_s must be positive")

    @property
    def call_classes(self) -> list[str]:
        return list(self.classes[1:]) if self.mode == "with-background" else list(self.classes)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _raven_filename(path: Path) -> str:
    name = path.name
    for suffix in _RAVEN_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)] + ".wav"
    return path.stem + ".wav"


def _optional_float(value: str | None) -> float | None:
    if value is None or value.strip() == "":
        return None
    return float(value)


def _require(header: Sequence[str], needed: Iterable[str], path: Path) -> None:
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}; present columns: {list(header)}")


def load_annotations(path: str | Path, filename: str | None = None) -> list[AnnotationRecord]:
    """Parse an annotation CSV or a Raven selection table.

    For Raven tables the audio filename comes from ``filename`` if given,
    else a ``Begin File`` column, else the table's own name with the
    ``.Table.1.selections.txt`` suffix replaced by ``.wav``.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        fh.seek(0)
        raven = "\t" in first and "Begin Time (s)" in first
        reader = csv.reader(fh, delimiter="\t" if raven else ",")
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file (no header)") from None
        rows = list(reader)

    records: list[AnnotationRecord] = []
    if raven:
        _require(header, ("Begin Time (s)", "End Time (s)", "Annotation"), path)
        col = {name: i for i, name in enumerate(header)}
        views = [r[col["View"]] for r in rows if "View" in col and len(r) > col["View"]]
        keep_spectrogram = any(v.startswith("Spectrogram") for v in views)
        default_name = filename or _raven_filename(path)
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            get = lambda name: row[col[name]] if name in col and col[name] < len(row) else None  # noqa: E731
            if keep_spectrogram and not (get("View") or "").startswith("Spectrogram"):
                continue
            records.append(_make_record(
                path, lineno,
                filename or get("Begin File") or default_name,
                get("Channel") or "1", get("Begin Time (s)"), get("End Time (s)"),
                get("Annotation"), get("Low Freq (Hz)"), get("High Freq (Hz)"),
            ))
    else:
        _require(header, ("filename", "begin_time", "end_time", "label"), path)
        col = {name: i for i, name in enumerate(header)}
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            get = lambda name: row[col[name]] if name in col and col[name] < len(row) else None  # noqa: E731
            records.append(_make_record(
                path, lineno, get("filename"), get("channel") or "1",
                get("begin_time"), get("end_time"), get("label"),
                get("low_freq"), get("high_freq"),
            ))
    return records


def _make_record(path, lineno, filename, channel, begin, end, label, low, high) -> AnnotationRecord:
    try:
        b, e = float(begin), float(end)
        ch = int(float(channel))
        lo, hi = _optional_float(low), _optional_float(high)
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"{path}:{lineno}: malformed row ({exc})") from exc
    if not filename:
        raise AnnotationError(f"{path}:{lineno}: empty filename")
    if label is None or label.strip() == "":
        raise AnnotationError(f"{path}:{lineno}: empty label")
    if b < 0 or b >= e:
        raise AnnotationError(f"{path}:{lineno}: need 0 <= begin < end, got begin={b}, end={e}")
    return AnnotationRecord(filename, ch, b, e, label.strip(), lo, hi)


def write_annotations_csv(records: Iterable[AnnotationRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.filename, r.channel, f"{r.begin_s:.6f}", f"{r.end_s:.6f}",
                "" if r.low_hz is None else f"{r.low_hz:.6f}",
                "" if r.high_hz is None else f"{r.high_hz:.6f}", r.label,
            ])


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass
class FilterRules:
    exclude_files: Sequence[str] = ()
    drop_duration_equals: float | None = None
    duration_tolerance: float = 1e-3
    keep_labels: Sequence[str] = ()


def filter_annotations(records: Sequence[AnnotationRecord], rules: FilterRules | None = None) -> list[AnnotationRecord]:
    """Drop excluded files, auto-generated fixed-length calls and unwanted labels."""
    rules = rules or FilterRules()
    excluded = set(rules.exclude_files)
    keep = set(rules.keep_labels)
    out = []
    for r in records:
        if r.filename in excluded:
            continue
        if rules.drop_duration_equals is not None:
            # rounded so that a difference of exactly one tolerance survives
            if round(abs(r.duration - rules.drop_duration_equals), 9) < rules.duration_tolerance:
                continue
        if keep and r.label not in keep:
            continue
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def window_starts(duration_s: float, segment_len_s: float) -> np.ndarray:
    """Start times of the full windows tiling ``[0, duration_s]``."""
    n = int(math.floor(duration_s / segment_len_s + TIME_EPS))
    return np.arange(n) * segment_len_s


def overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def label_window(begin: float, end: float, records: Sequence[AnnotationRecord],
                 threshold_s: float) -> tuple[str, AnnotationRecord | None]:
    """Classify one window as ``("call", record)``, ``("background", None)`` or ``("discard", None)``."""
    best = None
    best_key = None
    any_overlap = False
    for r in records:
        ov = overlap(begin, end, r.begin_s, r.end_s)
        if ov <= TIME_EPS:
            continue
        any_overlap = True
        if ov + TIME_EPS >= threshold_s:
            key = (-ov, r.begin_s)
            if best_key is None or key < best_key:
                best, best_key = r, key
    if best is not None:
        return "call", best
    return ("discard", None) if any_overlap else ("background", None)


def segment_dataset(records: Sequence[AnnotationRecord], file_durations: Mapping[str, float],
                    spec: DatasetSpec) -> list[LabeledSegment]:
    """Tile every file into fixed windows and label them from the annotations.

    Files listed in ``file_durations`` without annotations contribute only
    background windows (``with-background`` mode).  Records whose label is
    not a declared class are ignored, so their windows fall back to the
    zero-overlap background rule.
    """
    call_index = {name: i for i, name in enumerate(spec.classes)}
    if spec.mode == "with-background":
        call_index.pop(spec.classes[0], None)
    by_file: dict[str, list[AnnotationRecord]] = {}
    dropped = 0
    for r in records:
        if r.filename not in file_durations:
            raise AnnotationError(f"annotation for unknown file {r.filename!r}")
        if r.label not in call_index:
            dropped += 1
            continue
        by_file.setdefault(r.filename, []).append(r)
    if dropped:
        log.info("ignored %d annotations with undeclared labels", dropped)

    threshold = spec.overlap_threshold * spec.segment_len_s
    out: list[LabeledSegment] = []
    for fname in sorted(file_durations):
        recs = by_file.get(fname, [])
        for begin in window_starts(file_durations[fname], spec.segment_len_s):
            begin = float(begin)
            end = begin + spec.segment_len_s
            kind, rec = label_window(begin, end, recs, threshold)
            if kind == "call":
                out.append(LabeledSegment(fname, rec.channel, begin, end, call_index[rec.label]))
            elif kind == "background" and spec.mode == "with-background":
                out.append(LabeledSegment(fname, spec.channel, begin, end, 0))
    return out


# ---------------------------------------------------------------------------
# Splitting and sampling
# ---------------------------------------------------------------------------


def group_of(filename: str, group_key: str) -> str:
    if group_key == "filename":
        return filename
    if group_key == "date-prefix":
        m = _DATE_RE.search(Path(filename).name)
        if m is None:
            raise AnnotationError(f"no date token in filename {filename!r}")
        return m.group(1)
    raise ValueError(f"unknown group key {group_key!r}")


def split_by_group(segments: Sequence[LabeledSegment], group_key: str = "filename",
                   ratios: tuple[float, float] = (0.9, 0.1), seed: int = 0
                   ) -> tuple[list[LabeledSegment], list[LabeledSegment]]:
    if len(ratios) != 2 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be two positive fractions summing to 1, got {ratios}")
    groups = sorted({group_of(s.filename, group_key) for s in segments})
    if len(groups) < 2:
        raise AnnotationError(f"need at least 2 groups to split, found {len(groups)}")
    order = np.random.default_rng(seed).permutation(len(groups))
    n_train = min(max(int(round(ratios[0] * len(groups))), 1), len(groups) - 1)
    train_groups = {groups[i] for i in order[:n_train]}
    train = [s for s in segments if group_of(s.filename, group_key) in train_groups]
    val = [s for s in segments if group_of(s.filename, group_key) not in train_groups]
    return train, val


def balanced_sampler(segments: Sequence[LabeledSegment], seed: int,
                     class_names: Sequence[str] | None = None, chunk: int = 4096) -> Iterator[int]:
    """Endless stream of segment indices: uniform class, then uniform member.

    Draws are generated in fixed-size chunks, so the stream is a pure
    function of ``(segments, seed)``.
    """
    n_classes = len(class_names) if class_names is not None else max(s.class_index for s in segments) + 1
    members = [[] for _ in range(n_classes)]
    for i, s in enumerate(segments):
        members[s.class_index].append(i)
    for c, m in enumerate(members):
        if not m:
            name = class_names[c] if class_names is not None else str(c)
            raise AnnotationError(f"class {name!r} has no segments")
    arrays = [np.asarray(m) for m in members]
    sizes = np.array([len(m) for m in members])
    rng = np.random.default_rng(seed)
    while True:
        classes = rng.integers(0, n_classes, size=chunk)
        picks = np.floor(rng.random(chunk) * sizes[classes]).astype(np.int64)
        for c, p in zip(classes, picks):
            yield int(arrays[c][p])

