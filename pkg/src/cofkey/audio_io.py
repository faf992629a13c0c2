"""Audio file ingestion: WAV/FLAC reading, mono mixdown, resampling.

Every clip is normalized at load time to a float64 mono signal in [-1, 1] at
the caller's target sample rate, so downstream feature code never deals with
formats again.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .flac import FlacError, read_flac


class AudioIOError(ValueError):
    pass


_PCM_SCALE = {np.dtype(np.int16): 32768.0, np.dtype(np.int32): 2147483648.0,
              np.dtype(np.uint8): 128.0}


def _to_float(samples: np.ndarray) -> np.ndarray:
    if samples.dtype in (np.float32, np.float64):
        return samples.astype(np.float64)
    if samples.dtype == np.uint8:
        return (samples.astype(np.float64) - 128.0) / 128.0
    scale = _PCM_SCALE.get(samples.dtype)
    if scale is None:
        raise AudioIOError(f"unsupported sample dtype {samples.dtype}")
    return samples.astype(np.float64) / scale


def mixdown(samples: np.ndarray) -> np.ndarray:
    """Average channels to mono. Accepts (n,) or (n, channels)."""
    if samples.ndim == 1:
        return samples
    if samples.ndim != 2:
        raise AudioIOError(f"bad sample array shape {samples.shape}")
    return samples.mean(axis=1)


def resample(samples: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return samples
    frac = Fraction(sr_out, sr_in)
    return resample_poly(samples, frac.numerator, frac.denominator)


def load_audio(path, target_sr: int | None = None) -> tuple[np.ndarray, int]:
    """Read a WAV or FLAC file as mono float64 in [-1, 1].

    Returns (samples, sample_rate); resamples when target_sr is given.
    """
    path = Path(path)
    if not path.exists():
        raise AudioIOError(f"audio file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".wav":
        sr, raw = wavfile.read(str(path))
        mono = mixdown(_to_float(raw))
    elif suffix == ".flac":
        try:
            samples_i, sr, bits = read_flac(path)
        except FlacError as exc:
            raise AudioIOError(f"cannot decode {path}: {exc}") from exc
        mono = mixdown(samples_i.astype(np.float64) / float(1 << (bits - 1)))
    else:
        raise AudioIOError(f"unsupported audio format {suffix!r} (expected .wav or .flac)")

    if target_sr is not None:
        mono = resample(mono, sr, target_sr)
        sr = target_sr
    return mono, sr


def save_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples in [-1, 1] as 16-bit PCM WAV."""
    samples = np.asarray(samples, dtype=np.float64)
    clipped = np.clip(samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)
