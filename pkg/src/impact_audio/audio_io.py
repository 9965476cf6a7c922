"""WAV ingest, normalization, and fixed-window segmentation.

The pipeline runs recordings through RMS normalization, then z-score
normalization, then cuts them into consecutive 1-second clips. All
functions are pure: clips are never mutated in place.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    DegenerateClip,
    SilentClip,
    UnreadableFile,
    UnsupportedEncoding,
)

SILENCE_RMS = 1e-9
DEGENERATE_STD = 1e-9
SENSOR_TYPES = ("stethoscope", "microphone")

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioClip:
    """Mono sample buffer with its sample rate and provenance."""

    samples: np.ndarray
    sample_rate_hz: int
    source_id: str = ""
    label: Optional[str] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ConfigError("AudioClip requires a non-empty 1-D sample buffer")
        if not np.all(np.isfinite(samples)):
            raise ConfigError("AudioClip samples must be finite")
        if int(self.sample_rate_hz) <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples))))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    machine: str
    class_id: str
    sensor: str


@dataclass
class Manifest:
    """Labeled file listing; one row per recording or clip."""

    entries: list[ManifestEntry] = field(default_factory=list)
    split_seed: Optional[int] = None

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ConfigError("manifest paths must be unique")
        for e in self.entries:
            if not e.class_id:
                raise ConfigError(f"empty class id for {e.path}")
            if e.sensor not in SENSOR_TYPES:
                raise ConfigError(
                    f"sensor {e.sensor!r} for {e.path} not in {SENSOR_TYPES}"
                )

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path) -> Manifest:
    """Read a `path,machine,class,sensor` CSV."""
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"path", "machine", "class", "sensor"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ConfigError(f"manifest {path} must have columns {sorted(required)}")
        for row in reader:
            entries.append(
                ManifestEntry(row["path"], row["machine"], row["class"], row["sensor"])
            )
    return Manifest(entries)


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "machine", "class", "sensor"])
        for e in manifest.entries:
            writer.writerow([e.path, e.machine, e.class_id, e.sensor])


# --- WAV container ----------------------------------------------------------

def read_audio(path) -> AudioClip:
    """Read a PCM WAV file as a mono clip with samples in [-1, 1].

    Supports 8/16/24/32-bit integer and 32-bit float payloads.
    Multi-channel files are averaged down to mono.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc

    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise UnreadableFile(f"{path} is not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise UnreadableFile(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise UnreadableFile(f"{path}: truncated data chunk")
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or data is None:
        raise UnreadableFile(f"{path}: missing fmt or data chunk")

    format_tag, channels, rate, _byte_rate, _block_align, bits = fmt
    if format_tag == _WAVE_FORMAT_EXTENSIBLE:
        # Sub-format GUID starts with the real format tag.
        raise UnsupportedEncoding(f"{path}: WAVE_FORMAT_EXTENSIBLE not supported")
    if channels < 1 or rate <= 0:
        raise UnreadableFile(f"{path}: invalid channel count or rate")

    if format_tag == _WAVE_FORMAT_PCM:
        if bits == 8:
            samples = data_to_float(np.frombuffer(data, dtype=np.uint8), 8)
        elif bits == 16:
            samples = data_to_float(np.frombuffer(data, dtype="<i2"), 16)
        elif bits == 24:
            trimmed = data[: (len(data) // 3) * 3]
            b = np.frombuffer(trimmed, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
            val = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            val = np.where(val >= 1 << 23, val - (1 << 24), val)
            samples = val.astype(np.float64) / float(1 << 23)
        elif bits == 32:
            samples = data_to_float(np.frombuffer(data, dtype="<i4"), 32)
        else:
            raise UnsupportedEncoding(f"{path}: {bits}-bit PCM not supported")
    elif format_tag == _WAVE_FORMAT_IEEE_FLOAT:
        if bits != 32:
            raise UnsupportedEncoding(f"{path}: {bits}-bit float not supported")
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncoding(f"{path}: format tag {format_tag} is not PCM")

    if samples.size == 0:
        raise UnreadableFile(f"{path}: empty data chunk")
    if channels > 1:
        samples = samples[: (samples.size // channels) * channels]
        samples = samples.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples, rate, source_id=str(path))


def data_to_float(ints: np.ndarray, bits: int) -> np.ndarray:
    if bits == 8:
        return (ints.astype(np.float64) - 128.0) / 128.0
    return ints.astype(np.float64) / float(1 << (bits - 1))


def write_audio(clip: AudioClip, path, encoding: str = "int16") -> None:
    """Write a mono WAV file; `encoding` is "int16" or "float32"."""
    if encoding == "int16":
        fmt_tag, bits = _WAVE_FORMAT_PCM, 16
        scaled = np.round(clip.samples * 32768.0)
        payload = np.clip(scaled, -32768, 32767).astype("<i2").tobytes()
    elif encoding == "float32":
        fmt_tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
        payload = clip.samples.astype("<f4").tobytes()
    else:
        raise ConfigError(f"unsupported encoding {encoding!r}")

    rate = clip.sample_rate_hz
    block_align = bits // 8
    fmt_body = struct.pack("<HHIIHH", fmt_tag, 1, rate, rate * block_align, block_align, bits)
    chunks = [(b"fmt ", fmt_body)]
    if fmt_tag == _WAVE_FORMAT_IEEE_FLOAT:
        chunks.append((b"fact", struct.pack("<I", clip.samples.size)))
    chunks.append((b"data", payload))

    body = b"".join(
        cid + struct.pack("<I", len(c)) + c + (b"\x00" if len(c) & 1 else b"")
        for cid, c in chunks
    )
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)


# --- normalization and segmentation -----------------------------------------

def rms_normalize(clip: AudioClip, target_rms: float = 0.1) -> AudioClip:
    """Scale the waveform so its RMS equals `target_rms`."""
    if target_rms <= 0:
        raise ConfigError("target_rms must be positive")
    rms = clip.rms()
    if rms < SILENCE_RMS:
        raise SilentClip(f"{clip.source_id or 'clip'}: RMS {rms:.3e} below {SILENCE_RMS}")
    return replace(clip, samples=clip.samples * (target_rms / rms))


def zscore_normalize(clip: AudioClip) -> AudioClip:
    """Shift/scale to zero mean and unit population standard deviation."""
    mean = float(np.mean(clip.samples))
    std = float(np.std(clip.samples))
    if std < DEGENERATE_STD:
        raise DegenerateClip(f"{clip.source_id or 'clip'}: constant signal")
    return replace(clip, samples=(clip.samples - mean) / std)


def segment(clip: AudioClip, window_s: float = 1.0) -> list[AudioClip]:
    """Cut into consecutive non-overlapping windows; drop the remainder."""
    n = int(round(window_s * clip.sample_rate_hz))
    if n < 1:
        raise ConfigError("window shorter than one sample")
    count = clip.samples.size // n
    return [
        replace(clip, samples=clip.samples[i * n : (i + 1) * n])
        for i in range(count)
    ]


_RESAMPLE_HALF_TAPS = 32


def resample(clip: AudioClip, target_hz: int) -> AudioClip:
    """Band-limited (windowed-sinc) rate conversion.

    Output length is round(len * target / source). Identity when the
    rates already match. Kernel weights are renormalized per output
    sample, so DC is preserved exactly, including at the edges.
    """
    if target_hz <= 0:
        raise ConfigError("target_hz must be positive")
    source_hz = clip.sample_rate_hz
    if target_hz == source_hz:
        return clip

    x = clip.samples
    n_in = x.size
    n_out = int(round(n_in * target_hz / source_hz))
    if n_out < 1:
        n_out = 1
    step = source_hz / target_hz           # input samples per output sample
    cutoff = min(1.0, target_hz / source_hz)
    stretch = max(1.0, step)
    half = int(np.ceil(_RESAMPLE_HALF_TAPS * stretch))
    offsets = np.arange(-half, half + 1)

    out = np.empty(n_out)
    chunk = max(1, (1 << 22) // (2 * half + 1))
    for start in range(0, n_out, chunk):
        centers = np.arange(start, min(start + chunk, n_out)) * step
        idx = np.floor(centers).astype(np.int64)[:, None] + offsets[None, :]
        t = idx - centers[:, None]
        window = 0.5 * (1.0 + np.cos(np.pi * t / half))
        window[np.abs(t) > half] = 0.0
        kernel = np.sinc(cutoff * t) * window
        kernel /= kernel.sum(axis=1, keepdims=True)
        gathered = x[np.clip(idx, 0, n_in - 1)]
        out[start : start + centers.size] = (gathered * kernel).sum(axis=1)

    return AudioClip(out, target_hz, source_id=clip.source_id, label=clip.label)


def normalize_recording(clip: AudioClip, target_rms: float = 0.1) -> AudioClip:
    """RMS normalization followed by z-score normalization."""
    return zscore_normalize(rms_normalize(clip, target_rms))


def ingest_recording(
    clip: AudioClip,
    target_rate_hz: int = 48000,
    target_rms: float = 0.1,
    window_s: float = 1.0,
) -> list[AudioClip]:
    """Full per-recording pipeline: resample, normalize, segment."""
    clip = resample(clip, target_rate_hz)
    return segment(normalize_recording(clip, target_rms), window_s)
