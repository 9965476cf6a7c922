"""Log-Mel spectrogram frontend and mean-spectrum analysis.

STFT, mel filterbank, and dB conversion are implemented directly on
numpy so every step has a closed-form oracle: Hann window, reflect
center padding, HTK mel scale mel(f) = 2595*log10(1 + f/700), and a
per-spectrogram dB clamp of `top_db` below the maximum.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .audio_io import AudioClip
from .errors import ConfigError, DegenerateBand, TooShort, WrongDuration

SPECTROGRAM_MAGIC = b"IMSPEC1\x00"


@dataclass(frozen=True)
class SpectrogramParams:
    n_fft: int = 2048
    win_length: int = 2048
    hop_length: int = 376
    n_mels: int = 128
    top_db: float = 80.0
    sample_rate_hz: int = 48000
    fmin_hz: float = 0.0
    fmax_hz: float = 24000.0
    standardize: bool = True

    def __post_init__(self):
        if self.n_fft < self.win_length:
            raise ConfigError("n_fft must be >= win_length")
        if self.hop_length <= 0 or self.n_mels <= 0 or self.win_length <= 0:
            raise ConfigError("hop_length, win_length, n_mels must be positive")
        if not (0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2):
            raise ConfigError("need 0 <= fmin < fmax <= Nyquist")
        if self.top_db <= 0:
            raise ConfigError("top_db must be positive")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def frames_per_second(self) -> int:
        return 1 + self.sample_rate_hz // self.hop_length


@dataclass(frozen=True)
class LogMelSpectrogram:
    """Mel-by-frame matrix in clamped decibels (max at 0, floor at -top_db)."""

    values: np.ndarray
    ref_db: float
    params: SpectrogramParams

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ConfigError("spectrogram must be 2-D")
        if not np.all(np.isfinite(values)):
            raise ConfigError("spectrogram values must be finite")
        spread = float(values.max() - values.min())
        if spread > self.params.top_db + 1e-6:
            raise ConfigError(f"dynamic range {spread:.3f} exceeds top_db clamp")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def model_input(self) -> np.ndarray:
        """Matrix fed to the network; standardized when params say so."""
        if not self.params.standardize:
            return np.array(self.values)
        mean = self.values.mean()
        std = self.values.std()
        if std < 1e-12:
            return np.zeros_like(self.values)
        return (self.values - mean) / std


@dataclass(frozen=True)
class MeanSpectrum:
    freqs_hz: np.ndarray
    mean_db: np.ndarray
    std_db: np.ndarray

    def __post_init__(self):
        if not (len(self.freqs_hz) == len(self.mean_db) == len(self.std_db)):
            raise ConfigError("mean spectrum vectors must have equal length")
        if np.any(np.asarray(self.std_db) < 0):
            raise ConfigError("std_db must be nonnegative")
        if np.any(np.diff(self.freqs_hz) <= 0):
            raise ConfigError("freqs_hz must be ascending")


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if x.size == 1:
        return np.full(x.size + 2 * pad, x[0])
    return np.pad(x, pad, mode="reflect")


def stft(samples: Sequence[float], params: SpectrogramParams) -> np.ndarray:
    """One-sided STFT, shape (n_fft//2 + 1, 1 + len//hop).

    Frames are centered: the signal is reflect-padded by n_fft//2 on
    both sides, so frame k covers input positions around k*hop.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ConfigError("stft expects a non-empty 1-D signal")
    pad = params.n_fft // 2
    padded = _reflect_pad(x, pad)

    n_frames = 1 + x.size // params.hop_length
    window = hann_window(params.win_length)
    if params.win_length < params.n_fft:
        lpad = (params.n_fft - params.win_length) // 2
        window = np.pad(window, (lpad, params.n_fft - params.win_length - lpad))

    starts = np.arange(n_frames) * params.hop_length
    frames = padded[starts[:, None] + np.arange(params.n_fft)[None, :]]
    return np.fft.rfft(frames * window, n=params.n_fft, axis=1).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params: SpectrogramParams) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft//2 + 1).

    Band centers are equally spaced in mel between fmin and fmax;
    every filter peaks at 1 on its own center.
    """
    freqs = np.linspace(0.0, params.sample_rate_hz / 2.0, params.n_bins)
    mel_pts = np.linspace(
        hz_to_mel(params.fmin_hz), hz_to_mel(params.fmax_hz), params.n_mels + 2
    )
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((params.n_mels, params.n_bins))
    for m in range(params.n_mels):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (freqs - left) / max(center - left, 1e-12)
        falling = (right - freqs) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
        if not np.any(fb[m] > 0):
            raise DegenerateBand(
                f"mel band {m} covers no FFT bin; reduce n_mels or raise n_fft"
            )
    return fb


def log_mel(clip: AudioClip, params: SpectrogramParams | None = None) -> LogMelSpectrogram:
    """1-second clip -> clamped-dB mel spectrogram (n_mels x frames)."""
    params = params or SpectrogramParams()
    if clip.sample_rate_hz != params.sample_rate_hz:
        raise WrongDuration(
            f"expected {params.sample_rate_hz} Hz input, got {clip.sample_rate_hz}"
        )
    if clip.samples.size != params.sample_rate_hz:
        raise WrongDuration(
            f"expected exactly 1 s ({params.sample_rate_hz} samples), "
            f"got {clip.samples.size}"
        )

    power = np.abs(stft(clip.samples, params)) ** 2
    mel_power = mel_filterbank(params) @ power
    ref = float(mel_power.max())
    if ref <= 0.0:
        values = np.full(mel_power.shape, -params.top_db)
        ref_db = -np.inf
    else:
        floor = ref * 10.0 ** (-params.top_db / 10.0)
        values = 10.0 * np.log10(np.maximum(mel_power, floor) / ref)
        ref_db = 10.0 * np.log10(ref)
    return LogMelSpectrogram(values=values, ref_db=ref_db, params=params)


def mean_spectrum(clip: AudioClip, segment_samples: int = 2048) -> MeanSpectrum:
    """Mean and std of per-segment magnitude spectra in dB.

    The recording is tiled into non-overlapping `segment_samples`
    windows (remainder dropped); each window's magnitude spectrum is
    converted to dB as 20*log10(|X| + 1e-10), then averaged elementwise.
    """
    x = clip.samples
    if x.size < segment_samples:
        raise TooShort(f"need at least {segment_samples} samples, got {x.size}")
    n_seg = x.size // segment_samples
    frames = x[: n_seg * segment_samples].reshape(n_seg, segment_samples)
    mags = np.abs(np.fft.rfft(frames, axis=1))
    db = 20.0 * np.log10(mags + 1e-10)
    freqs = np.linspace(0.0, clip.sample_rate_hz / 2.0, segment_samples // 2 + 1)
    return MeanSpectrum(freqs_hz=freqs, mean_db=db.mean(axis=0), std_db=db.std(axis=0))


def save_mean_spectrum_csv(spec: MeanSpectrum, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["freq_hz", "mean_db", "std_db"])
        for f, m, s in zip(spec.freqs_hz, spec.mean_db, spec.std_db):
            writer.writerow([f"{f:.6f}", f"{m:.8f}", f"{s:.8f}"])


# --- binary spectrogram container -------------------------------------------

def save_spectrogram(values: np.ndarray, path) -> None:
    """Write magic + u32 rows + u32 cols + row-major f32, little-endian."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ConfigError("spectrogram payload must be 2-D")
    with open(path, "wb") as fh:
        fh.write(SPECTROGRAM_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_spectrogram(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != SPECTROGRAM_MAGIC:
            raise ConfigError(f"{path}: bad spectrogram magic {magic!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
    if data.size != rows * cols:
        raise ConfigError(f"{path}: truncated spectrogram payload")
    return data.reshape(rows, cols).astype(np.float64)
