"""Synthetic interview corpus in the on-disk layout the ingest stage reads.

Each subject gets one interview WAV alternating interviewer and participant
turns plus a transcript CSV with their timestamps. Participant speech is a
harmonic voice (pitch by gender) with spectral markers: a band near
``dep_band_hz`` for PHQ-8 >= 5 and a second band near ``high_band_hz`` for
PHQ-8 >= 10. Marker strength, pitch and noise floor vary per subject.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import (INTERVIEWER, ManifestRow, TranscriptEntry, clip_windows, encode_wav, format_transcript,
                    read_manifest, read_transcript, read_wav, write_manifest)
from .features import FRAME_SIZE, StftConfig, compute_spectrogram, window_to_pixels

DEPRESSION_THRESHOLD = 5
SEVERITY_THRESHOLD = 10


@dataclass(frozen=True)
class SynthCorpusSpec:
    n_subjects: int = 50
    n_depressed: int = 25
    n_high: int = 22
    n_male: int = 25
    sample_rate: int = 16000
    participant_turns_s: tuple[float, ...] = (1.5, 1.5, 0.6)
    interviewer_turn_s: float = 0.8
    dep_band_hz: float = 2500.0
    high_band_hz: float = 5000.0
    marker_amp: float = 0.02
    marker_jitter: float = 0.6
    voice_amp: float = 0.25
    noise_floor: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_high <= self.n_depressed <= self.n_subjects:
            raise ValueError("need 0 <= n_high <= n_depressed <= n_subjects")
        if not 0 <= self.n_male <= self.n_subjects:
            raise ValueError("n_male out of range")


@dataclass(frozen=True)
class SubjectInfo:
    subject_id: str
    phq8: int
    gender: str


def _subject_table(spec: SynthCorpusSpec, rng: np.random.Generator) -> list[SubjectInfo]:
    n = spec.n_subjects
    genders = np.array(["M"] * spec.n_male + ["F"] * (n - spec.n_male))
    # interleave classes within each gender so both stay balanced
    order = np.concatenate([np.flatnonzero(genders == "M"), np.flatnonzero(genders == "F")])
    depressed = np.zeros(n, dtype=bool)
    depressed[order[::2][:spec.n_depressed]] = True
    remaining = spec.n_depressed - depressed.sum()
    if remaining > 0:
        depressed[order[1::2][:remaining]] = True
    dep_idx = rng.permutation(np.flatnonzero(depressed))
    high = np.zeros(n, dtype=bool)
    high[dep_idx[:spec.n_high]] = True
    out = []
    for i in range(n):
        if high[i]:
            phq = int(rng.integers(SEVERITY_THRESHOLD, 25))
        elif depressed[i]:
            phq = int(rng.integers(DEPRESSION_THRESHOLD, SEVERITY_THRESHOLD))
        else:
            phq = int(rng.integers(0, DEPRESSION_THRESHOLD))
        out.append(SubjectInfo(f"S{i:03d}", phq, str(genders[i])))
    return out


def voice(n: int, rate: int, f0: float, amp: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / rate
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / rate
    x = np.zeros(n)
    for h in range(1, int(4000 // f0) + 1):
        x += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
    syllables = 0.6 + 0.4 * np.abs(np.sin(2 * np.pi * rng.uniform(3, 5) * t))
    return amp * x * syllables / 2.0


def band_tone(n: int, rate: int, center: float, amp: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / rate
    x = np.zeros(n)
    for f in center + rng.uniform(-120, 120, size=4):
        x += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return amp * x / 2.0


def synth_subject(info: SubjectInfo, spec: SynthCorpusSpec, rng: np.random.Generator):
    """Return (samples, transcript entries) for one interview."""
    rate = spec.sample_rate
    f0_base = 125.0 if info.gender == "M" else 215.0
    f0 = f0_base * rng.uniform(0.85, 1.15)
    strength = spec.marker_amp * (1.0 + spec.marker_jitter * rng.uniform(-1, 1))
    noise = spec.noise_floor * rng.uniform(0.5, 1.5)
    pieces, entries = [], []
    t = 0.0

    def add(dur: float, speaker: str):
        nonlocal t
        n = round(dur * rate)
        if speaker == INTERVIEWER:
            x = voice(n, rate, 160.0, spec.voice_amp * 0.8, rng)
        else:
            x = voice(n, rate, f0, spec.voice_amp, rng)
            if info.phq8 >= DEPRESSION_THRESHOLD:
                x += band_tone(n, rate, spec.dep_band_hz, strength, rng)
            if info.phq8 >= SEVERITY_THRESHOLD:
                x += band_tone(n, rate, spec.high_band_hz, strength, rng)
        x += rng.normal(0, noise, n)
        pieces.append(x)
        entries.append(TranscriptEntry(round(t, 3), round(t + n / rate, 3), speaker))
        t += n / rate

    add(spec.interviewer_turn_s, INTERVIEWER)
    for d in spec.participant_turns_s:
        add(d, "Participant")
        add(spec.interviewer_turn_s, INTERVIEWER)
    samples = np.clip(np.concatenate(pieces), -1.0, 1.0)
    return samples, entries


def synth_corpus(spec: SynthCorpusSpec, out_dir: str | Path) -> Path:
    """Write WAVs, transcripts and ``manifest.csv`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "transcripts").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    rows = []
    for info in _subject_table(spec, rng):
        samples, entries = synth_subject(info, spec, np.random.default_rng([spec.seed, int(info.subject_id[1:])]))
        wav = Path("audio") / f"{info.subject_id}_AUDIO.wav"
        tr = Path("transcripts") / f"{info.subject_id}_TRANSCRIPT.csv"
        (out / wav).write_bytes(encode_wav(samples, spec.sample_rate))
        (out / tr).write_text(format_transcript(entries, ["..."] * len(entries)))
        rows.append(ManifestRow(info.subject_id, str(wav), str(tr), info.phq8, info.gender))
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


# ---------------------------------------------------------------------------
# Pretext task for backbone pretraining

PRETEXT_BANDS = tuple(float(f) for f in np.geomspace(400.0, 7000.0, 8))


def pretext_frames(n: int, rng: np.random.Generator, rate: int = 16000,
                   bands: tuple[float, ...] = PRETEXT_BANDS) -> tuple[np.ndarray, np.ndarray]:
    """Frames of random voices with one narrow band added; the label is the band index.

    Labels carry no information about depression markers beyond "where is the
    extra energy", so the task only teaches frequency localization.
    """
    x = np.empty((n, 1, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = int(rng.integers(len(bands)))
        s = voice(rate, rate, rng.uniform(100, 260), 0.25, rng)
        s += band_tone(rate, rate, bands[k] * rng.uniform(0.95, 1.05), rng.uniform(0.02, 0.08), rng)
        s += rng.normal(0, rng.uniform(0.005, 0.015), rate)
        x[i, 0] = window_to_pixels(s)
        y[i] = k
    return x, y


# ---------------------------------------------------------------------------
# Separability oracle

def band_energy_ratio(samples: np.ndarray, rate: int, lo: float, hi: float) -> float:
    cfg = StftConfig()
    power = compute_spectrogram(samples, cfg).mean(axis=1)
    freqs = np.arange(len(power)) * rate / cfg.segment_len
    band = power[(freqs >= lo) & (freqs <= hi)].sum()
    return float(np.log(band + 1e-12) - np.log(power.sum() + 1e-12))


def stump_accuracy(scores, labels) -> tuple[float, float]:
    """Best single-threshold accuracy (score > threshold => class 1)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    cands = np.concatenate([[-np.inf], np.sort(scores)])
    best = (0.0, 0.0)
    for c in cands:
        acc = float(np.mean((scores > c).astype(int) == labels))
        if acc > best[0]:
            best = (acc, float(c))
    return best


def oracle_accuracy(manifest: str | Path, threshold: int = DEPRESSION_THRESHOLD, band_hz: float | None = None,
                    spec: SynthCorpusSpec = SynthCorpusSpec()) -> float:
    """Clip accuracy of a band-energy threshold classifier over participant speech."""
    if band_hz is None:
        band_hz = spec.dep_band_hz if threshold == DEPRESSION_THRESHOLD else spec.high_band_hz
    scores, labels = [], []
    for row in read_manifest(manifest):
        clip = read_wav(row.wav_path, row.subject_id)
        windows = clip_windows(clip, read_transcript(row.transcript_path))
        ratios = [band_energy_ratio(w.samples, clip.sample_rate, band_hz - 300, band_hz + 300) for w in windows]
        scores.append(np.mean(ratios))
        labels.append(int(row.phq8 >= threshold))
    return stump_accuracy(scores, labels)[0]
