"""Respiration recordings: types, preprocessing, synthesis, and text I/O.

A recording is a 1-D sample vector at a nominal rate (100 Hz in all
shipped configs) with a three-level pain label.  Preprocessing is
band-pass filtering to the adult breathing band, zero-padding to a fixed
length, and segmentation into fixed-duration windows; each step is a
standalone function so tests can pin its contract in isolation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfiltfilt


class DataError(ValueError):
    """Malformed recording, manifest, or incompatible signal arguments."""


class PainLabel(enum.Enum):
    NO_PAIN = "NoPain"
    LOW_PAIN = "LowPain"
    HIGH_PAIN = "HighPain"

    @classmethod
    def from_string(cls, s: str) -> "PainLabel":
        for member in cls:
            if member.value == s:
                return member
        raise DataError(f"unknown label {s!r}; expected one of {[m.value for m in cls]}")

    @property
    def index(self) -> int:
        return list(type(self)).index(self)


N_CLASSES = len(PainLabel)

# Nominal breathing band (Hz) used by every shipped config.
BAND_LOW_HZ = 0.05
BAND_HIGH_HZ = 0.5
PAD_TARGET = 1150
SAMPLE_RATE_HZ = 100.0


@dataclass(frozen=True)
class RespirationRecord:
    """One recording: samples (float32), rate in Hz, subject id, label."""

    samples: np.ndarray
    sample_rate_hz: float
    subject_id: str
    label: PainLabel

    def __post_init__(self):
        arr = np.ascontiguousarray(self.samples, dtype=np.float32)
        if arr.ndim != 1 or arr.size == 0:
            raise DataError(f"samples must be a non-empty vector, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError(f"record {self.subject_id!r} contains non-finite samples")
        if not self.sample_rate_hz > 0:
            raise DataError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)


@dataclass(frozen=True)
class PreprocessConfig:
    """Filter/pad/window settings shared by training and evaluation."""

    sample_rate_hz: float = SAMPLE_RATE_HZ
    filter_enabled: bool = True
    filter_low_hz: float = BAND_LOW_HZ
    filter_high_hz: float = BAND_HIGH_HZ
    pad_len: int = PAD_TARGET
    window_seconds: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.filter_low_hz < self.filter_high_hz < self.sample_rate_hz / 2.0):
            raise DataError(
                f"band ({self.filter_low_hz}, {self.filter_high_hz}) Hz must satisfy "
                f"0 < low < high < {self.sample_rate_hz / 2.0} (Nyquist)"
            )
        if self.pad_len < 1:
            raise DataError(f"pad_len must be >= 1, got {self.pad_len}")
        if self.window_seconds <= 0:
            raise DataError(f"window_seconds must be positive, got {self.window_seconds}")

    @property
    def n_windows(self) -> int:
        return n_windows_for(self.pad_len, self.window_seconds, self.sample_rate_hz)


# ---------------------------------------------------------------------------
# preprocessing

def bandpass_filter(x: np.ndarray, sample_rate_hz: float,
                    low_hz: float = BAND_LOW_HZ, high_hz: float = BAND_HIGH_HZ) -> np.ndarray:
    """Zero-phase 4th-order Butterworth band-pass.

    Built as a second-order-section cascade (two biquads = four poles) and
    run forward then backward, which squares the magnitude response and
    cancels the phase.  Filtering happens in float64: the low band edge
    sits at 1e-3 of Nyquist, where a transfer-function realization would
    be numerically fragile.
    """
    x = np.asarray(x)
    if x.ndim != 1:
        raise DataError(f"bandpass_filter expects a vector, got shape {x.shape}")
    if not (0.0 < low_hz < high_hz < sample_rate_hz / 2.0):
        raise DataError(
            f"band ({low_hz}, {high_hz}) Hz must satisfy 0 < low < high < {sample_rate_hz / 2.0} (Nyquist)"
        )
    sos = butter(2, [low_hz, high_hz], btype="bandpass", fs=sample_rate_hz, output="sos")
    padlen = 3 * (2 * sos.shape[0] + 1)
    if x.size <= padlen:
        raise DataError(f"signal of {x.size} samples is too short to filter (needs > {padlen})")
    y = sosfiltfilt(sos, x.astype(np.float64))
    return np.ascontiguousarray(y, dtype=np.float32)


def pad_to_fixed(x: np.ndarray, target_len: int = PAD_TARGET) -> np.ndarray:
    """Append zeros up to target_len; longer inputs are rejected."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise DataError(f"pad_to_fixed expects a vector, got shape {x.shape}")
    if x.size > target_len:
        raise DataError(f"signal of {x.size} samples exceeds pad target {target_len}")
    if x.size == target_len:
        return x.copy()
    out = np.zeros(target_len, dtype=np.float32)
    out[: x.size] = x
    return out


def n_windows_for(length: int, window_seconds: float, sample_rate_hz: float) -> int:
    """ceil(length / window_samples) for the given window duration."""
    w = _window_samples(window_seconds, sample_rate_hz)
    return int(math.ceil(length / w))


def _window_samples(window_seconds: float, sample_rate_hz: float) -> int:
    w_exact = window_seconds * sample_rate_hz
    w = int(round(w_exact))
    if w < 1 or abs(w_exact - w) > 1e-9:
        raise DataError(f"window of {window_seconds}s at {sample_rate_hz} Hz is not a whole "
                        f"positive number of samples ({w_exact})")
    return w


@dataclass(frozen=True)
class WindowSet:
    """Non-overlapping segmentation of one signal; last window zero-padded."""

    windows: np.ndarray          # (n_windows, window_samples) float32
    window_seconds: float
    sample_rate_hz: float
    source_length: int

    def flatten(self) -> np.ndarray:
        """Concatenated windows: the source padded to a window multiple."""
        return self.windows.reshape(-1).copy()


def segment_windows(x: np.ndarray, window_seconds: float, sample_rate_hz: float) -> WindowSet:
    """Split into ceil(len/w) contiguous windows of w = window_seconds * rate
    samples, zero-padding the tail so every window has full length."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1 or x.size == 0:
        raise DataError(f"segment_windows expects a non-empty vector, got shape {x.shape}")
    w = _window_samples(window_seconds, sample_rate_hz)
    n = int(math.ceil(x.size / w))
    padded = np.zeros(n * w, dtype=np.float32)
    padded[: x.size] = x
    return WindowSet(windows=padded.reshape(n, w), window_seconds=window_seconds,
                     sample_rate_hz=sample_rate_hz, source_length=x.size)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class _ClassShape:
    carrier_hz: float
    amplitude: float
    am_depth: float
    am_hz: float


# Class-conditional generator constants: breathing rate rises with pain
# level and the envelope becomes deeper and faster.  Carriers sit inside
# the band so the filter passes the discriminative structure.
SYNTH_CLASS_SHAPES: dict[PainLabel, _ClassShape] = {
    PainLabel.NO_PAIN: _ClassShape(carrier_hz=0.15, amplitude=0.8, am_depth=0.10, am_hz=0.05),
    PainLabel.LOW_PAIN: _ClassShape(carrier_hz=0.25, amplitude=1.1, am_depth=0.25, am_hz=0.08),
    PainLabel.HIGH_PAIN: _ClassShape(carrier_hz=0.40, amplitude=1.4, am_depth=0.40, am_hz=0.11),
}
SYNTH_FREQ_JITTER_HZ = 0.01
SYNTH_NOISE_SIGMA = 0.05


def synth_record(label: PainLabel, subject_id: str, rng: np.random.Generator,
                 duration_s: float = 10.0, sample_rate_hz: float = SAMPLE_RATE_HZ) -> RespirationRecord:
    """One synthetic breathing trace for the given class."""
    shape = SYNTH_CLASS_SHAPES[label]
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n, dtype=np.float64) / sample_rate_hz
    f = shape.carrier_hz + rng.uniform(-SYNTH_FREQ_JITTER_HZ, SYNTH_FREQ_JITTER_HZ)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    envelope = 1.0 + shape.am_depth * np.sin(2.0 * np.pi * shape.am_hz * t + am_phase)
    x = shape.amplitude * envelope * np.sin(2.0 * np.pi * f * t + phase)
    x = x + SYNTH_NOISE_SIGMA * rng.standard_normal(n)
    return RespirationRecord(samples=x.astype(np.float32), sample_rate_hz=sample_rate_hz,
                             subject_id=subject_id, label=label)


def synth_dataset(n_per_class: int, seed: int | list[int], duration_s: float = 10.0,
                  sample_rate_hz: float = SAMPLE_RATE_HZ, id_prefix: str = "synth") -> list[RespirationRecord]:
    """Balanced synthetic dataset, bit-reproducible for a given seed."""
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    records = []
    for label in PainLabel:
        for i in range(n_per_class):
            sid = f"{id_prefix}_{label.value}_{i:04d}"
            records.append(synth_record(label, sid, rng, duration_s, sample_rate_hz))
    return records


# ---------------------------------------------------------------------------
# text I/O
#
# One recording per text file:
#     subject_id=<string>
#     label=<NoPain|LowPain|HighPain>
#     <one decimal sample per line>
# A dataset manifest lists "<relative_path>\t<split>" per line with split
# in {train, val, test}.

SPLITS = ("train", "val", "test")


def save_record(path: str | Path, record: RespirationRecord) -> None:
    """Write one recording; sample formatting round-trips float32 exactly."""
    path = Path(path)
    lines = [f"subject_id={record.subject_id}", f"label={record.label.value}"]
    # repr of the exact float64 image of each float32 sample is lossless
    lines.extend(repr(float(v)) for v in record.samples)
    path.write_text("\n".join(lines) + "\n")


def load_record(path: str | Path, sample_rate_hz: float = SAMPLE_RATE_HZ) -> RespirationRecord:
    """Parse one recording file; malformed content raises DataError."""
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read record {path}: {e}") from e
    lines = raw.splitlines()
    if len(lines) < 3:
        raise DataError(f"{path}: expected two header lines plus samples, got {len(lines)} lines")
    if not lines[0].startswith("subject_id="):
        raise DataError(f"{path}: first line must be 'subject_id=<s>', got {lines[0]!r}")
    if not lines[1].startswith("label="):
        raise DataError(f"{path}: second line must be 'label=<level>', got {lines[1]!r}")
    subject_id = lines[0][len("subject_id="):]
    label = PainLabel.from_string(lines[1][len("label="):])
    try:
        samples = np.array([float(s) for s in lines[2:] if s], dtype=np.float32)
    except ValueError as e:
        raise DataError(f"{path}: bad sample line: {e}") from e
    return RespirationRecord(samples=samples, sample_rate_hz=sample_rate_hz,
                             subject_id=subject_id, label=label)


def write_manifest(path: str | Path, entries: list[tuple[str, str]]) -> None:
    """entries: (relative_path, split) rows."""
    path = Path(path)
    for rel, split in entries:
        if split not in SPLITS:
            raise DataError(f"manifest split {split!r} not in {SPLITS}")
    path.write_text("".join(f"{rel}\t{split}\n" for rel, split in entries))


def read_manifest(path: str | Path) -> list[tuple[str, str]]:
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    entries = []
    for ln, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{ln}: expected '<path>\\t<split>', got {line!r}")
        rel, split = parts
        if split not in SPLITS:
            raise DataError(f"{path}:{ln}: split {split!r} not in {SPLITS}")
        entries.append((rel, split))
    if not entries:
        raise DataError(f"{path}: manifest is empty")
    return entries


def load_dataset(manifest_path: str | Path,
                 sample_rate_hz: float = SAMPLE_RATE_HZ) -> dict[str, list[RespirationRecord]]:
    """Load every record listed in a manifest, grouped by split."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    out: dict[str, list[RespirationRecord]] = {s: [] for s in SPLITS}
    for rel, split in read_manifest(manifest_path):
        out[split].append(load_record(root / rel, sample_rate_hz))
    return out
