"""Recording ingestion, the fixed-length preprocessing chain and a synthetic
five-class PCG generator used for dataset-free testing.

The synthetic templates are engineering stand-ins and carry no clinical
meaning; they only mimic the gross timing of heart sounds and murmurs.
"""
from __future__ import annotations

import csv
import enum
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

log = logging.getLogger(__name__)


class ClassLabel(enum.IntEnum):
    N = 0
    AS = 1
    MR = 2
    MS = 3
    MVP = 4

    @classmethod
    def parse(cls, value) -> "ClassLabel":
        if isinstance(value, ClassLabel):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown class label {value!r}") from None


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE container."""


class UnsupportedEncodingError(ValueError):
    """Well-formed WAV whose sample encoding is not handled."""


class DegenerateInputError(ValueError):
    """Input has no spread (constant signal or vector)."""


@dataclass
class Recording:
    samples: np.ndarray
    sample_rate: float
    label: Optional[ClassLabel] = None
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("recording samples must be a non-empty 1-D array")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return self.samples.size

    def with_samples(self, samples, sample_rate=None) -> "Recording":
        return replace(self, samples=np.asarray(samples, dtype=np.float64),
                       sample_rate=self.sample_rate if sample_rate is None else sample_rate)


@dataclass(frozen=True)
class PreprocessConfig:
    raw_len: int = 2 ** 14
    downsample_factor: int = 2 ** 3
    raw_rate: float = 8000.0
    anti_alias: bool = True

    def __post_init__(self):
        if self.raw_len <= 0 or self.downsample_factor <= 0:
            raise ValueError("raw_len and downsample_factor must be positive")
        if self.raw_len % self.downsample_factor:
            raise ValueError("raw_len must be divisible by downsample_factor")
        out = self.raw_len // self.downsample_factor
        if out & (out - 1):
            raise ValueError(f"raw_len/downsample_factor = {out} is not a power of two")

    @property
    def length_exponent(self) -> int:
        return (self.raw_len // self.downsample_factor).bit_length() - 1


# --------------------------------------------------------------------- WAV I/O

_INT_SCALE = {np.dtype("uint8"): 128.0, np.dtype("int16"): 32768.0}


def load_wav(path, label=None, rec_id=None) -> Recording:
    """Read a PCM (8/16/24-bit) or IEEE-float (32-bit) WAV file.

    Multichannel audio is averaged to mono and integer samples are scaled to
    [-1, 1): ``x / 2**(bits - 1)``, with 8-bit data re-centred on 128 first.
    """
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported bit depth" in msg or "not supported" in msg:
            raise UnsupportedEncodingError(f"{path}: {msg}") from exc
        raise WavFormatError(f"{path}: {msg}") from exc
    except (EOFError, OSError, IndexError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc

    if data.dtype in _INT_SCALE:
        scale = _INT_SCALE[data.dtype]
        x = data.astype(np.float64)
        if data.dtype == np.uint8:
            x -= 128.0
        x /= scale
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(np.float64) / 2.0 ** 31
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"{path}: unsupported sample type {data.dtype}")

    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise WavFormatError(f"{path}: no samples")
    return Recording(x, float(rate), None if label is None else ClassLabel.parse(label),
                     rec_id if rec_id is not None else path.stem)


def write_wav(path, rec: Recording) -> None:
    """Write a recording as mono 32-bit float WAV (lossless for float32 values)."""
    wavfile.write(Path(path), int(round(rec.sample_rate)), rec.samples.astype("<f4"))


# ----------------------------------------------------------------- preprocess

def clip_or_pad(rec: Recording, raw_len: int) -> Recording:
    if raw_len <= 0:
        raise ValueError("raw_len must be positive")
    x = rec.samples
    if x.size >= raw_len:
        return rec.with_samples(x[:raw_len].copy())
    return rec.with_samples(np.concatenate([x, np.zeros(raw_len - x.size)]))


FIR_ORDER = 64


def antialias_taps(factor: int, order: int = FIR_ORDER) -> np.ndarray:
    """Linear-phase low-pass FIR with cutoff pi/factor and unit DC gain."""
    return sps.firwin(order + 1, 1.0 / factor)


def downsample(rec: Recording, factor: int, anti_alias: bool = True) -> Recording:
    """Low-pass (zero-phase FIR) then keep every ``factor``-th sample.

    The filter delay of ``order/2`` samples is removed by centring the
    convolution, and edges are reflect-padded so constants pass unchanged.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    x = rec.samples
    if x.size % factor:
        raise ValueError(f"length {x.size} is not divisible by factor {factor}")
    if factor == 1:
        return rec.with_samples(x.copy())
    if anti_alias:
        h = antialias_taps(factor)
        half = (h.size - 1) // 2
        mode = "reflect" if x.size > half else "edge"
        xp = np.pad(x, half, mode=mode)
        x = np.convolve(xp, h, mode="valid")
    return rec.with_samples(x[::factor].copy(), rec.sample_rate / factor)


def standardize(rec: Recording) -> Recording:
    """Zero mean, unit population standard deviation."""
    x = rec.samples
    if x.size < 2:
        raise DegenerateInputError("need at least two samples to standardize")
    mu = x.mean()
    sd = x.std()
    if sd == 0 or not np.isfinite(sd) or np.ptp(x) == 0:
        raise DegenerateInputError("cannot standardize a constant signal")
    y = (x - mu) / sd
    # one refinement pass tightens mean/std to ~1e-15
    y -= y.mean()
    y /= y.std()
    return rec.with_samples(y)


def preprocess(rec: Recording, cfg: PreprocessConfig = PreprocessConfig()) -> Recording:
    r = clip_or_pad(rec, cfg.raw_len)
    r = downsample(r, cfg.downsample_factor, anti_alias=cfg.anti_alias)
    return standardize(r)


# ------------------------------------------------------------------ synthetic

@dataclass
class PCGSchedule:
    """Sample-index windows of the generated events, one entry per cycle."""
    s1: list = field(default_factory=list)
    s2: list = field(default_factory=list)
    systole: list = field(default_factory=list)
    diastole: list = field(default_factory=list)
    murmur: list = field(default_factory=list)
    click: list = field(default_factory=list)


def _band_noise(rng, n, lo, hi, fs):
    nyq = fs / 2.0
    hi = min(hi, 0.95 * nyq)
    sos = sps.butter(4, [lo / nyq, hi / nyq], btype="bandpass", output="sos")
    w = rng.standard_normal(n + 256)
    y = sps.sosfilt(sos, w)[256:]
    return y / (np.sqrt(np.mean(y ** 2)) + 1e-300)


def _burst(t, center, width, freq, phase):
    return np.exp(-0.5 * ((t - center) / width) ** 2) * np.cos(2 * np.pi * freq * (t - center) + phase)


def _window(t, start, stop):
    return (t >= start) & (t < stop)


def _pcg(label: ClassLabel, n: int, rng: np.random.Generator, fs: float):
    t = np.arange(n) / fs
    duration = n / fs
    n_cycles = max(1, int(round(duration / 0.8)))
    period = duration / n_cycles * rng.uniform(0.96, 1.0)
    offset = rng.uniform(0.02, 0.06) * period
    f_s1 = rng.uniform(40.0, 60.0)
    f_s2 = rng.uniform(60.0, 85.0)
    x = 0.01 * rng.standard_normal(n)
    sched = PCGSchedule()

    def idx(a, b):
        return (int(np.clip(round(a * fs), 0, n)), int(np.clip(round(b * fs), 0, n)))

    for k in range(n_cycles + 1):
        t0 = offset + k * period
        if t0 >= duration:
            break
        c1 = t0 + 0.04 * period
        c2 = t0 + 0.42 * period
        w1 = 0.012 * rng.uniform(0.9, 1.1)
        w2 = 0.010 * rng.uniform(0.9, 1.1)
        s1_amp = 1.0 * rng.uniform(0.85, 1.15)
        s2_amp = 0.8 * rng.uniform(0.85, 1.15)
        x += s1_amp * _burst(t, c1, w1, f_s1, rng.uniform(0, 2 * np.pi))
        x += s2_amp * _burst(t, c2, w2, f_s2, rng.uniform(0, 2 * np.pi))
        sys_a, sys_b = c1 + 3 * w1, c2 - 3 * w2
        dia_a, dia_b = c2 + 3 * w2, t0 + period
        sched.s1.append(idx(c1 - 3 * w1, c1 + 3 * w1))
        sched.s2.append(idx(c2 - 3 * w2, c2 + 3 * w2))
        sched.systole.append(idx(sys_a, sys_b))
        sched.diastole.append(idx(dia_a, dia_b))
        sys_len = sys_b - sys_a

        if label is ClassLabel.AS:
            # diamond: crescendo-decrescendo peaking early-mid systole
            a, b = sys_a + 0.1 * sys_len, sys_b - 0.1 * sys_len
            peak = a + 0.4 * (b - a)
            env = np.where(t < peak, (t - a) / (peak - a), (b - t) / (b - peak))
            env = np.clip(env, 0.0, None) * _window(t, a, b)
            x += 0.45 * env * _band_noise(rng, n, 150.0, 300.0, fs)
            sched.murmur.append(idx(a, b))
        elif label is ClassLabel.MR:
            a, b = sys_a, sys_b
            env = _window(t, a, b) * 1.0
            x += 0.25 * env * _band_noise(rng, n, 80.0, 220.0, fs)
            sched.murmur.append(idx(a, b))
        elif label is ClassLabel.MS:
            dia_len = dia_b - dia_a
            a, b = dia_a + 0.2 * dia_len, dia_a + 0.75 * dia_len
            env = np.clip(1.0 - (t - a) / (b - a), 0.0, 1.0) * _window(t, a, b)
            x += 0.4 * env * _band_noise(rng, n, 25.0, 90.0, fs)
            sched.murmur.append(idx(a, b))
        elif label is ClassLabel.MVP:
            click = sys_a + 0.45 * sys_len
            x += 0.7 * _burst(t, click, 0.004, rng.uniform(130.0, 170.0), 0.0)
            sched.click.append(idx(click - 0.012, click + 0.012))
            a, b = sys_a + 0.65 * sys_len, sys_b
            env = np.clip((t - a) / (b - a), 0.0, 1.0) * _window(t, a, b)
            x += 0.3 * env * _band_noise(rng, n, 100.0, 250.0, fs)
            sched.murmur.append(idx(a, b))
    return x, sched


def _synth_rng(label: ClassLabel, N: int, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(label), int(N)]))


def synth_pcg(label, N: int, seed: int, sample_rate: float = 1000.0) -> Recording:
    """Deterministic synthetic PCG-like recording of length ``2**N``, standardized.

    Each cycle has two Gaussian-enveloped tone bursts (S1, S2). AS adds a
    diamond-shaped systolic band-noise murmur, MR a flat systolic murmur, MS a
    decaying mid-diastolic rumble and MVP a mid-systolic click followed by a
    late-systolic murmur. Cycle length adapts so at least one cycle fits.
    """
    label = ClassLabel.parse(label)
    if N < 5:
        raise ValueError("N must be >= 5")
    x, _ = _pcg(label, 2 ** N, _synth_rng(label, N, seed), sample_rate)
    rec = Recording(x, sample_rate, label, f"synth-{label.name}-{N}-{seed}")
    return standardize(rec)


def pcg_schedule(label, N: int, seed: int, sample_rate: float = 1000.0) -> PCGSchedule:
    """Event windows used by :func:`synth_pcg` for the same arguments."""
    label = ClassLabel.parse(label)
    _, sched = _pcg(label, 2 ** N, _synth_rng(label, N, seed), sample_rate)
    return sched


# -------------------------------------------------------------------- dataset

MANIFEST_FIELDS = ("id", "path", "label", "length", "rate")


@dataclass
class ManifestRow:
    id: str
    path: str
    label: Optional[ClassLabel]
    length: int
    rate: float


def scan_dataset(root) -> list[ManifestRow]:
    """Index ``root/<LABEL>/*.wav``; subdirectories not naming a class are skipped."""
    root = Path(root)
    rows = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            label = ClassLabel.parse(sub.name)
        except ValueError:
            log.warning("skipping non-class directory %s", sub)
            continue
        for wav in sorted(sub.glob("*.wav")):
            rec = load_wav(wav, label)
            rows.append(ManifestRow(wav.stem, str(wav.relative_to(root)), label, len(rec), rec.sample_rate))
    return rows


def write_manifest(path, rows: Iterable[ManifestRow], header_lines: Iterable[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.id, r.path, "" if r.label is None else r.label.name, r.length, repr(float(r.rate))])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        label = ClassLabel.parse(rec["label"]) if rec["label"] else None
        rows.append(ManifestRow(rec["id"], rec["path"], label, int(rec["length"]), float(rec["rate"])))
    return rows
