"""Deterministic synthetic machine-sound generator.

Each clip is a sum of three components: a harmonic stack tied to a
fundamental (kinematics), broadband Gaussian noise at a dB offset
relative to the stack (process noise), and Poisson-timed band-limited
bursts (fault transients). Amplitude modulation adds slow operational
periodicity. Everything is reproducible from an integer seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, Manifest, ManifestEntry, save_manifest, write_audio
from .errors import InvalidSpec, IoFailure

AM_RATE_HZ = 7.0          # slow operational periodicity; depth comes from the spec
BURST_LENGTH_S = 0.02
BURST_RMS_GAIN = 2.0      # burst RMS relative to harmonic-stack RMS
PEAK_LEVEL = 0.9


@dataclass(frozen=True)
class MachineSpec:
    """Acoustic signature of one machine state."""

    fundamental_hz: float
    n_harmonics: int = 5
    harmonic_decay: float = 0.6
    noise_floor_db: float = -20.0
    transient_rate_hz: float = 0.0
    transient_band_hz: tuple[float, float] = (4000.0, 8000.0)
    am_depth: float = 0.0

    def __post_init__(self):
        if self.fundamental_hz <= 0:
            raise InvalidSpec("fundamental_hz must be positive")
        if self.n_harmonics < 1:
            raise InvalidSpec("n_harmonics must be >= 1")
        if not (0.0 < self.harmonic_decay <= 1.0):
            raise InvalidSpec("harmonic_decay must be in (0, 1]")
        if self.transient_rate_hz < 0:
            raise InvalidSpec("transient_rate_hz must be nonnegative")
        low, high = self.transient_band_hz
        if not (0.0 < low < high):
            raise InvalidSpec("transient_band_hz must satisfy 0 < low < high")
        if not (0.0 <= self.am_depth <= 1.0):
            raise InvalidSpec("am_depth must be in [0, 1]")


def spec_to_json(spec: MachineSpec) -> str:
    return json.dumps(asdict(spec), indent=2)


def spec_from_json(text: str) -> MachineSpec:
    raw = json.loads(text)
    if "transient_band_hz" in raw:
        raw["transient_band_hz"] = tuple(raw["transient_band_hz"])
    return MachineSpec(**raw)


def synth_clip(
    spec: MachineSpec,
    duration_s: float = 1.0,
    rate_hz: int = 48000,
    rng: np.random.Generator | int = 0,
) -> AudioClip:
    """Render one clip; bit-identical for the same spec and seed."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    nyquist = rate_hz / 2.0
    if spec.fundamental_hz * spec.n_harmonics >= nyquist:
        raise InvalidSpec(
            f"harmonic {spec.n_harmonics} of {spec.fundamental_hz} Hz "
            f"exceeds Nyquist ({nyquist} Hz)"
        )
    if spec.transient_band_hz[1] >= nyquist:
        raise InvalidSpec("transient band exceeds Nyquist")

    n = int(round(duration_s * rate_hz))
    t = np.arange(n) / rate_hz

    phases = rng.uniform(0.0, 2.0 * np.pi, spec.n_harmonics)
    stack = np.zeros(n)
    for k in range(spec.n_harmonics):
        amp = spec.harmonic_decay**k
        stack += amp * np.sin(2.0 * np.pi * (k + 1) * spec.fundamental_hz * t + phases[k])

    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    if spec.am_depth > 0.0:
        stack = stack * (1.0 + spec.am_depth * np.sin(2.0 * np.pi * AM_RATE_HZ * t + am_phase))

    stack_rms = float(np.sqrt(np.mean(stack**2)))
    x = stack.copy()

    noise_sigma = stack_rms * 10.0 ** (spec.noise_floor_db / 20.0)
    if noise_sigma > 0.0:
        x += noise_sigma * rng.standard_normal(n)

    if spec.transient_rate_hz > 0.0:
        n_bursts = int(rng.poisson(spec.transient_rate_hz * duration_s))
        burst_len = max(8, int(round(BURST_LENGTH_S * rate_hz)))
        for _ in range(n_bursts):
            start = int(rng.integers(0, max(1, n - burst_len)))
            burst = _bandlimited_burst(burst_len, rate_hz, spec.transient_band_hz, rng)
            x[start : start + burst_len] += BURST_RMS_GAIN * stack_rms * burst

    peak = float(np.max(np.abs(x)))
    if peak > 0.0:
        x = x * (PEAK_LEVEL / peak)
    return AudioClip(x, rate_hz)


def _bandlimited_burst(length: int, rate_hz: int, band: tuple[float, float], rng) -> np.ndarray:
    """Unit-RMS noise burst confined to `band`, Hann-enveloped."""
    noise = rng.standard_normal(length)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(length, 1.0 / rate_hz)
    spectrum[(freqs < band[0]) | (freqs > band[1])] = 0.0
    shaped = np.fft.irfft(spectrum, n=length)
    envelope = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)
    shaped *= envelope
    rms = np.sqrt(np.mean(shaped**2))
    return shaped / rms if rms > 0 else shaped


FUNDAMENTAL_JITTER = 0.02
NOISE_JITTER_DB = 3.0


def make_corpus(
    specs: list[tuple[str, MachineSpec]],
    clips_per_class: int,
    out_dir,
    base_seed: int = 0,
    duration_s: float = 1.0,
    rate_hz: int = 48000,
    machine: str = "synth",
    sensor: str = "microphone",
    jitter: bool = True,
) -> Manifest:
    """Write a labeled WAV corpus plus its manifest CSV.

    Per-clip seeds are derived as base_seed XOR global clip index, so
    the corpus is reproducible under any generation order. Jitter
    perturbs the fundamental by +-2% and the noise floor by +-3 dB to
    create within-class variance.
    """
    if len(specs) < 1:
        raise InvalidSpec("need at least one class spec")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc

    entries = []
    clip_index = 0
    for class_name, spec in specs:
        for j in range(clips_per_class):
            rng = np.random.default_rng(base_seed ^ clip_index)
            clip_spec = spec
            if jitter:
                f_scale = 1.0 + rng.uniform(-FUNDAMENTAL_JITTER, FUNDAMENTAL_JITTER)
                db_shift = rng.uniform(-NOISE_JITTER_DB, NOISE_JITTER_DB)
                clip_spec = replace(
                    spec,
                    fundamental_hz=spec.fundamental_hz * f_scale,
                    noise_floor_db=spec.noise_floor_db + db_shift,
                )
            clip = synth_clip(clip_spec, duration_s, rate_hz, rng)
            name = f"{class_name}_{j:04d}.wav"
            try:
                write_audio(clip, out_dir / name)
            except OSError as exc:
                raise IoFailure(f"cannot write {out_dir / name}: {exc}") from exc
            entries.append(ManifestEntry(name, machine, class_name, sensor))
            clip_index += 1

    manifest = Manifest(entries, split_seed=base_seed)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def coldspray4_preset() -> list[tuple[str, MachineSpec]]:
    """Four operational states with disjoint fundamentals.

    Deliberately hard: broadband noise sits well above the harmonic
    stack, and each state's burst band overlaps another state's
    fundamental, so single clips are ambiguous while the tonal
    structure stays consistent across a corpus.
    """
    return [
        (
            "normal",
            MachineSpec(
                fundamental_hz=600.0,
                n_harmonics=6,
                harmonic_decay=0.55,
                noise_floor_db=16.0,
                transient_rate_hz=12.0,
                transient_band_hz=(1700.0, 2300.0),
                am_depth=0.6,
            ),
        ),
        (
            "depleted_powder",
            MachineSpec(
                fundamental_hz=900.0,
                n_harmonics=5,
                harmonic_decay=0.6,
                noise_floor_db=18.0,
                transient_rate_hz=12.0,
                transient_band_hz=(500.0, 700.0),
                am_depth=0.7,
            ),
        ),
        (
            "powder_clogging",
            MachineSpec(
                fundamental_hz=1350.0,
                n_harmonics=4,
                harmonic_decay=0.7,
                noise_floor_db=20.0,
                transient_rate_hz=12.0,
                transient_band_hz=(800.0, 1000.0),
                am_depth=0.8,
            ),
        ),
        (
            "no_gas",
            MachineSpec(
                fundamental_hz=2000.0,
                n_harmonics=3,
                harmonic_decay=0.5,
                noise_floor_db=14.0,
                transient_rate_hz=12.0,
                transient_band_hz=(1200.0, 1500.0),
                am_depth=0.5,
            ),
        ),
    ]


PRESETS = {"coldspray4": coldspray4_preset}
