"""Audio ingestion: WAV decoding, transcript-driven participant segmentation,
and fixed-length overlapping windows.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PARTICIPANT = "participant"
INTERVIEWER = "interviewer"


class AudioFormatError(ValueError):
    """Malformed RIFF/WAVE container."""


class UnsupportedEncodingError(ValueError):
    """Valid container, but not 16-bit integer PCM."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    subject_id: str = ""
    label_phq8: int | None = None

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.label_phq8 is not None and not 0 <= self.label_phq8 <= 24:
            raise ValueError(f"PHQ-8 score out of range: {self.label_phq8}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class TranscriptEntry:
    start_s: float
    stop_s: float
    speaker: str

    def __post_init__(self):
        if self.start_s < 0 or self.stop_s <= self.start_s:
            raise ValueError(f"bad transcript interval [{self.start_s}, {self.stop_s})")

    @property
    def is_participant(self) -> bool:
        return self.speaker.strip().lower() == PARTICIPANT


@dataclass(frozen=True)
class AudioWindow:
    samples: np.ndarray
    subject_id: str
    segment_index: int
    window_index: int
    length_s: float = 1.0
    hop_s: float = 0.1

    @property
    def origin(self) -> tuple[str, int, int]:
        return (self.subject_id, self.segment_index, self.window_index)


@dataclass
class IngestStats:
    segments: int = 0
    skipped_short: int = 0
    skipped_out_of_range: int = 0
    windows: int = 0
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# WAV

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def decode_wav(data: bytes, subject_id: str = "", label_phq8: int | None = None) -> AudioClip:
    """Decode a PCM16 little-endian RIFF/WAVE byte string.

    Multi-channel input keeps channel 0. Samples are scaled by 1/32768.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError("missing RIFF/WAVE signature")
    pos = 12
    fmt = None
    pcm = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise AudioFormatError(f"chunk {chunk_id!r} truncated at offset {pos}")
        if chunk_id == b"fmt ":
            if size < 16:
                raise AudioFormatError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE and size >= 26:
                # sub-format GUID starts at byte 24; its first two bytes are the format tag
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            pcm = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise AudioFormatError("no fmt chunk")
    if pcm is None:
        raise AudioFormatError("no data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if tag != _WAVE_FORMAT_PCM or bits != 16:
        raise UnsupportedEncodingError(f"format tag {tag} with {bits} bits; only PCM16 is supported")
    if channels < 1 or rate <= 0:
        raise AudioFormatError(f"invalid header: channels={channels} rate={rate}")
    n_frames = len(pcm) // (2 * channels)
    raw = np.frombuffer(pcm[:n_frames * 2 * channels], dtype="<i2")
    samples = raw.reshape(n_frames, channels)[:, 0].astype(np.float64) / 32768.0
    return AudioClip(samples, int(rate), subject_id, label_phq8)


def encode_wav(samples: np.ndarray, sample_rate: int) -> bytes:
    """Mono PCM16 encoder; inverse of :func:`decode_wav` up to quantization."""
    q = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _WAVE_FORMAT_PCM, 1, sample_rate, sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def read_wav(path: str | Path, subject_id: str = "", label_phq8: int | None = None) -> AudioClip:
    return decode_wav(Path(path).read_bytes(), subject_id, label_phq8)


# ---------------------------------------------------------------------------
# Transcripts

def parse_transcript(text: str) -> list[TranscriptEntry]:
    """Parse a DAIC-WOZ style transcript (tab or comma separated)."""
    lines = text.splitlines()
    if not lines:
        return []
    delimiter = "\t" if "\t" in lines[0] else ","
    reader = csv.DictReader(io.StringIO(text), delimiter=delimiter)
    entries = []
    for row in reader:
        row = {k.strip().lower(): (v or "").strip() for k, v in row.items() if k}
        entries.append(TranscriptEntry(float(row["start_time"]), float(row["stop_time"]), row["speaker"]))
    return entries


def read_transcript(path: str | Path) -> list[TranscriptEntry]:
    return parse_transcript(Path(path).read_text())


def format_transcript(entries: Iterable[TranscriptEntry], values: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["start_time", "stop_time", "speaker", "value"])
    for i, e in enumerate(entries):
        writer.writerow([f"{e.start_s:.3f}", f"{e.stop_s:.3f}", e.speaker, values[i] if values else ""])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Segmentation and windowing

def extract_participant_segments(clip: AudioClip, transcript: Sequence[TranscriptEntry],
                                 stats: IngestStats | None = None) -> list[AudioClip]:
    """Cut one clip per Participant turn; interviewer turns are dropped.

    Start index is floored, the stop index is exclusive and clipped to the
    clip length. Turns starting past the end are skipped with a warning.
    """
    n = len(clip.samples)
    duration = clip.duration_s
    out = []
    for entry in transcript:
        if not entry.is_participant:
            continue
        if entry.start_s >= duration:
            msg = f"{clip.subject_id}: turn at {entry.start_s:.2f}s starts beyond clip end {duration:.2f}s"
            log.warning(msg)
            if stats is not None:
                stats.skipped_out_of_range += 1
                stats.warnings.append(msg)
            continue
        lo = math.floor(entry.start_s * clip.sample_rate)
        hi = min(math.floor(entry.stop_s * clip.sample_rate), n)
        if entry.stop_s > duration:
            msg = f"{clip.subject_id}: turn [{entry.start_s:.2f}, {entry.stop_s:.2f}) clipped to {duration:.2f}s"
            log.warning(msg)
            if stats is not None:
                stats.warnings.append(msg)
        out.append(AudioClip(clip.samples[lo:hi], clip.sample_rate, clip.subject_id, clip.label_phq8))
    if stats is not None:
        stats.segments += len(out)
    return out


def window_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def slice_windows(segment: AudioClip, length_s: float = 1.0, hop_s: float = 0.1,
                  segment_index: int = 0, stats: IngestStats | None = None) -> list[AudioWindow]:
    w = round(length_s * segment.sample_rate)
    h = round(hop_s * segment.sample_rate)
    if w <= 0 or h <= 0:
        raise ValueError("window length and hop must be positive")
    count = window_count(len(segment.samples), w, h)
    if count == 0 and stats is not None:
        stats.skipped_short += 1
    windows = [
        AudioWindow(segment.samples[i * h:i * h + w], segment.subject_id, segment_index, i, length_s, hop_s)
        for i in range(count)
    ]
    if stats is not None:
        stats.windows += count
    return windows


def clip_windows(clip: AudioClip, transcript: Sequence[TranscriptEntry], length_s: float = 1.0,
                 hop_s: float = 0.1, stats: IngestStats | None = None) -> list[AudioWindow]:
    """Segment a clip by transcript and window every participant segment."""
    windows = []
    for k, seg in enumerate(extract_participant_segments(clip, transcript, stats)):
        windows.extend(slice_windows(seg, length_s, hop_s, segment_index=k, stats=stats))
    return windows


# ---------------------------------------------------------------------------
# Manifest

@dataclass(frozen=True)
class ManifestRow:
    subject_id: str
    wav_path: str
    transcript_path: str
    phq8: int
    gender: str


MANIFEST_COLUMNS = ("subject_id", "wav_path", "transcript_path", "phq8", "gender")


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(MANIFEST_COLUMNS) - set(rows[0] if rows else MANIFEST_COLUMNS)
    if missing:
        raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
    out = []
    for r in rows:
        wav = Path(r["wav_path"])
        tr = Path(r["transcript_path"])
        out.append(ManifestRow(
            r["subject_id"],
            str(wav if wav.is_absolute() else path.parent / wav),
            str(tr if tr.is_absolute() else path.parent / tr),
            int(r["phq8"]),
            r["gender"].strip().upper()[:1],
        ))
    return out


def write_manifest(path: str | Path, rows: Iterable[ManifestRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            writer.writerow([r.subject_id, r.wav_path, r.transcript_path, r.phq8, r.gender])
