"""Constant-Q frontend and pitch-transposition crops.

The analysis grid is 99 logarithmically spaced bins, 12 per octave, with bin p
centered at fmin * 2^(p/12) Hz (fmin defaults to 27.5 Hz, i.e. A0). Bins are
computed with the FFT spectral-kernel method: one complex windowed exponential
per bin, correlated against each frame's spectrum through a sparse matrix.

Crops reduce 99 rows to 84 (seven octaves). `transpose_crop(x, c)` keeps rows
[c, c+84). The musically signed operation used everywhere else is
`crop_for_transposition(x, s)`: transposing UP by s semitones corresponds to
slice offset (15 - s). The direction is a global convention chosen so that a
translation-covariant network yields exactly zero invariance/equivariance loss
(see the sign-convention tests in the objectives suite).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import sparse


N_BINS = 99
N_CROPPED = 84
CROP_SEMITONES = N_BINS - N_CROPPED  # 15


class CqtError(ValueError):
    pass


@dataclass(frozen=True)
class CqtParams:
    """Constant-Q analysis parameters; frozen so kernel caches can key on it."""

    sample_rate: int = 22050
    hop: int = 1024
    fmin: float = 27.5
    n_bins: int = N_BINS
    bins_per_octave: int = 12
    log_gain: float = 10.0
    kernel_threshold: float = 5e-3

    def __post_init__(self):
        if self.hop <= 0:
            raise CqtError("hop must be positive")
        if self.n_bins != N_BINS or self.bins_per_octave != 12:
            raise CqtError("analysis grid is fixed at 99 bins, 12 per octave")
        if self.sample_rate < 2 * self.fmax:
            raise CqtError(
                f"insufficient bandwidth: sample rate {self.sample_rate} Hz cannot "
                f"represent bins up to {self.fmax:.0f} Hz")

    @property
    def q_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    @property
    def fmax(self) -> float:
        # exclusive upper edge of the analyzed band
        return self.fmin * 2.0 ** (self.n_bins / self.bins_per_octave)

    def bin_frequency(self, p: int) -> float:
        return self.fmin * 2.0 ** (p / self.bins_per_octave)

    @property
    def max_window(self) -> int:
        return int(np.ceil(self.q_factor * self.sample_rate / self.fmin))


@dataclass
class AudioClip:
    """Mono audio at a known sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise CqtError("AudioClip expects mono samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@functools.lru_cache(maxsize=4)
def _spectral_kernels(params: CqtParams) -> tuple[sparse.csr_matrix, int]:
    """Sparse conjugated spectral kernels [n_bins, n_fft//2+1] and n_fft."""
    n_fft = 1 << int(np.ceil(np.log2(params.max_window)))
    rows = np.zeros((params.n_bins, n_fft // 2 + 1), dtype=np.complex128)
    for p in range(params.n_bins):
        f = params.bin_frequency(p)
        n_win = int(round(params.q_factor * params.sample_rate / f))
        n_win = min(n_win, n_fft)
        window = np.hanning(n_win)
        n = np.arange(n_win)
        kernel = window * np.exp(2j * np.pi * f * n / params.sample_rate)
        kernel *= 2.0 / window.sum()  # unit response to a unit-amplitude sine
        buf = np.zeros(n_fft, dtype=np.complex128)
        start = (n_fft - n_win) // 2
        buf[start:start + n_win] = kernel
        spec = np.fft.fft(buf)[:n_fft // 2 + 1]
        mag = np.abs(spec)
        spec[mag < params.kernel_threshold * mag.max()] = 0.0
        rows[p] = np.conj(spec)
    return sparse.csr_matrix(rows.astype(np.complex64)), n_fft


def compute_cqt(clip: AudioClip, params: CqtParams) -> np.ndarray:
    """Log-compressed constant-Q magnitudes, shape [n_bins, n_frames] float32.

    Silence maps to exactly 0 (the compression floor is log1p(0)).
    """
    if clip.sample_rate != params.sample_rate:
        raise CqtError(
            f"sample rate mismatch: clip at {clip.sample_rate} Hz, analysis expects "
            f"{params.sample_rate} Hz; resample at ingestion")
    x = np.asarray(clip.samples, dtype=np.float32)
    if len(x) < params.max_window:
        raise CqtError(
            f"clip too short: {len(x)} samples, need at least {params.max_window} "
            f"(one analysis window at {params.fmin} Hz)")
    kernels, n_fft = _spectral_kernels(params)
    pad = n_fft // 2
    n_frames = 1 + len(x) // params.hop
    padded = np.concatenate([
        np.zeros(pad, dtype=np.float32), x,
        np.zeros(pad + params.hop, dtype=np.float32)])
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::params.hop][:n_frames]
    spectra = np.fft.rfft(frames, axis=1)  # [T, n_fft//2+1] complex64
    mags = np.abs(kernels @ spectra.T) / n_fft  # [n_bins, T]
    return np.log1p(params.log_gain * mags).astype(np.float32)


def transpose_crop(x: np.ndarray, c: int) -> np.ndarray:
    """Keep rows [c, c+84) of a 99-row constant-Q matrix."""
    x = np.asarray(x)
    if x.shape[0] != N_BINS:
        raise CqtError(f"bad frequency span: expected {N_BINS} rows, got {x.shape[0]}")
    if not (isinstance(c, (int, np.integer)) and 0 <= c <= CROP_SEMITONES):
        raise CqtError(f"crop out of range: c={c!r}, must be an int in [0, {CROP_SEMITONES}]")
    return x[c:c + N_CROPPED]


def crop_for_transposition(x: np.ndarray, semitones: int) -> np.ndarray:
    """Crop that realizes an upward pitch transposition by `semitones`.

    Transposing up moves spectral content toward higher row indices of the
    84-row output, which is realized by slicing with offset (15 - semitones).
    """
    if not (isinstance(semitones, (int, np.integer)) and 0 <= semitones <= CROP_SEMITONES):
        raise CqtError(
            f"crop out of range: transposition {semitones!r}, must be an int in "
            f"[0, {CROP_SEMITONES}]")
    return transpose_crop(x, CROP_SEMITONES - int(semitones))


def analysis_windows(x: np.ndarray, frames: int) -> list[np.ndarray]:
    """Cut a [..., T] matrix into length-`frames` windows covering every frame.

    Non-overlapping stride, plus one tail window ending at T when the length
    is not a multiple (so the tail overlaps its neighbour). Inputs shorter
    than `frames` come back whole as a single window.
    """
    if not (isinstance(frames, (int, np.integer)) and frames > 0):
        raise CqtError(f"window length must be a positive int, got {frames!r}")
    total = x.shape[-1]
    if total <= frames:
        return [x]
    starts = list(range(0, total - frames + 1, frames))
    if starts[-1] != total - frames:
        starts.append(total - frames)
    return [x[..., s:s + frames] for s in starts]


@dataclass
class SegmentPair:
    """Constant-Q matrices of two disjoint windows of the same source."""

    xa: np.ndarray
    xb: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.xa.shape[0] != N_BINS or self.xb.shape[0] != N_BINS:
            raise CqtError("segment matrices must have 99 rows")


def extract_segment_pair(clip: AudioClip, params: CqtParams, segment_seconds: float,
                         rng: np.random.Generator, source_id: str = "") -> SegmentPair:
    """Two non-overlapping random windows of a clip, as constant-Q matrices.

    With zero slack (duration == 2 * segment_seconds) the windows tile the clip
    exactly, in random order.
    """
    seg = int(round(segment_seconds * params.sample_rate))
    n = len(clip.samples)
    if n < 2 * seg:
        raise CqtError(
            f"clip too short: need at least {2 * segment_seconds:.2f}s for two "
            f"disjoint {segment_seconds:.2f}s windows, have {clip.duration:.2f}s")
    s1 = int(rng.integers(0, n - 2 * seg + 1))
    s2 = int(rng.integers(s1 + seg, n - seg + 1))
    if rng.random() < 0.5:
        s1, s2 = s2, s1
    xa = compute_cqt(AudioClip(clip.samples[s1:s1 + seg], params.sample_rate), params)
    xb = compute_cqt(AudioClip(clip.samples[s2:s2 + seg], params.sample_rate), params)
    return SegmentPair(xa=xa, xb=xb, source_id=source_id)
