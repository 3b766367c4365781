"""Manifest -> feature frames for a whole corpus."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import IngestStats, clip_windows, read_manifest, read_transcript, read_wav
from .features import FRAME_SIZE, FeatureSet, StftConfig, window_to_pixels
from .synth import SubjectInfo


@dataclass
class Corpus:
    """Frames for every subject; ``features.labels`` hold PHQ-8 scores."""

    features: FeatureSet
    subjects: dict[str, SubjectInfo]
    stats: IngestStats = field(default_factory=IngestStats)


def featurize_manifest(manifest: str | Path, cfg: StftConfig = StftConfig(), size: int = FRAME_SIZE,
                       length_s: float = 1.0, hop_s: float = 0.1) -> Corpus:
    stats = IngestStats()
    subjects = {}
    pixels, sids, segs, wins, labels = [], [], [], [], []
    for row in read_manifest(manifest):
        subjects[row.subject_id] = SubjectInfo(row.subject_id, row.phq8, row.gender)
        clip = read_wav(row.wav_path, row.subject_id, row.phq8)
        for w in clip_windows(clip, read_transcript(row.transcript_path), length_s, hop_s, stats):
            pixels.append(window_to_pixels(w, cfg, size))
            sids.append(w.subject_id)
            segs.append(w.segment_index)
            wins.append(w.window_index)
            labels.append(row.phq8)
    block = np.stack(pixels) if pixels else np.zeros((0, size, size), np.float32)
    fs = FeatureSet(block.astype(np.float32), sids, np.array(segs, np.int64), np.array(wins, np.int64),
                    np.array(labels, np.int64))
    return Corpus(fs, subjects, stats)
