"""Signal processing: resampling, STFT, mel filterbank, DCT, MFCCs and spectrogram images."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import List, Optional

import numpy as np

from .ingest import AudioClip

SPEC_SIZE = 227
SPEC_WINDOW_MS = 16.0
SPEC_HOP_MS = 8.0
SPEC_FFT = 1024

MFCC_FFT = 2048
MFCC_HOP = 1024
MFCC_MELS = 128
MFCC_COEFFS = 40
MFCC_RATE = 44100
LOG_FLOOR = 1e-10

RESAMPLE_TAPS = 64
RESAMPLE_CUTOFF = 0.45
RESAMPLE_BETA = 6.0


@dataclass
class FrameMatrix:
    values: np.ndarray
    frame_period_ms: float
    descriptor_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"FrameMatrix needs a non-empty T x D array, got {self.values.shape}")
        if not self.descriptor_names:
            self.descriptor_names = [f"d{i}" for i in range(self.values.shape[1])]
        if len(self.descriptor_names) != self.values.shape[1]:
            raise ValueError("descriptor_names length must equal D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("FrameMatrix values must be finite")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SpectrogramImage:
    values: np.ndarray
    source_window_ms: float = SPEC_WINDOW_MS
    source_hop_ms: float = SPEC_HOP_MS

    def __post_init__(self):
        if self.values.shape != (SPEC_SIZE, SPEC_SIZE):
            raise ValueError(f"spectrogram image must be {SPEC_SIZE}x{SPEC_SIZE}")


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # n_filters x n_bins
    f_min: float
    f_max: float

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


# --------------------------------------------------------------------------
# resampling


@lru_cache(maxsize=8)
def _polyphase_table(up: int, down: int, taps: int, cutoff_hz: float, in_rate: float,
                     beta: float) -> np.ndarray:
    """Kaiser-windowed sinc, one row of `taps` input-sample weights per output phase."""
    half = taps // 2
    phases = np.arange(up) / up  # fractional input offset of each phase
    k = np.arange(-half + 1, half + 1)  # tap offsets relative to floor(position)
    d = k[None, :] - phases[:, None]
    fc = cutoff_hz / in_rate  # cycles per input sample
    h = 2 * fc * np.sinc(2 * fc * d)
    h *= _kaiser(d / half, beta)
    h /= h.sum(axis=1, keepdims=True)
    return h


def _kaiser(u: np.ndarray, beta: float) -> np.ndarray:
    u = np.clip(u, -1.0, 1.0)
    return np.i0(beta * np.sqrt(1.0 - u * u)) / np.i0(beta)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Rational-ratio windowed-sinc downsampling (e.g. 44.1 kHz -> 16 kHz is 160/441)."""
    src = clip.sample_rate
    if target_rate > src:
        raise ValueError(f"upsampling not supported ({src} -> {target_rate} Hz)")
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if clip.samples.size == 0:
        raise ValueError("zero-length clip")
    if target_rate == src:
        return AudioClip(clip.samples.copy(), src, clip.source)
    ratio = Fraction(target_rate, src)
    up, down = ratio.numerator, ratio.denominator
    x = clip.samples
    n_out = int(np.ceil(x.size * up / down))
    table = _polyphase_table(up, down, RESAMPLE_TAPS, RESAMPLE_CUTOFF * target_rate,
                             float(src), RESAMPLE_BETA)
    half = RESAMPLE_TAPS // 2
    m = np.arange(n_out, dtype=np.int64) * down
    base = m // up
    phase = m % up
    idx = base[:, None] + np.arange(-half + 1, half + 1)[None, :]
    padded = np.concatenate([np.zeros(half), x, np.zeros(half + 1)])
    y = np.einsum("ij,ij->i", padded[idx + half], table[phase])
    return AudioClip(y, target_rate, clip.source)


# --------------------------------------------------------------------------
# framing / STFT


def hann_window(n: int) -> np.ndarray:
    """Periodic (DFT-even) Hann window."""
    if n < 2:
        raise ValueError("window length must be >= 2")
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def ms_to_samples(ms: float, rate: int) -> int:
    return int(round(ms * rate / 1000.0))


def fit_length(x: np.ndarray, n: int, what: str = "clip", tol_ms: float = 5.0) -> np.ndarray:
    """Trim or zero-pad ``x`` to ``n`` samples; jitter beyond ``tol_ms`` (at ``n`` per second) is an error."""
    if abs(x.size - n) > n * tol_ms / 1000.0:
        raise ValueError(f"{what} expects a 1000 ms clip, got {x.size} samples")
    if x.size >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - x.size)])


def frame_count(n: int, win: int, hop: int) -> int:
    return (n - win) // hop + 1


def stft(clip: AudioClip, window_ms: float, hop_ms: float, fft_size: int) -> np.ndarray:
    """Complex T x (fft_size/2 + 1) STFT, frames starting at sample 0, no centre padding."""
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ValueError("fft_size must be a power of two")
    if hop_ms <= 0:
        raise ValueError("hop_ms must be positive")
    rate = clip.sample_rate
    win = ms_to_samples(window_ms, rate)
    hop = ms_to_samples(hop_ms, rate)
    if win > fft_size:
        raise ValueError(f"window of {win} samples exceeds fft_size {fft_size}")
    if hop < 1:
        raise ValueError("hop shorter than one sample")
    x = clip.samples
    if x.size < win:
        raise ValueError(f"clip shorter than one window ({x.size} < {win} samples)")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    return np.fft.rfft(frames * hann_window(win), n=fft_size, axis=1)


def _linear_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """n_out x n_in linear interpolation weights, corner-aligned."""
    if n_in == 1:
        return np.ones((n_out, 1))
    pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(img: np.ndarray, shape) -> np.ndarray:
    rows = _linear_resize_matrix(img.shape[0], shape[0])
    cols = _linear_resize_matrix(img.shape[1], shape[1])
    return rows @ img @ cols.T


def spectrogram_image(clip: AudioClip) -> SpectrogramImage:
    """227 x 227 (time x frequency) min-max normalized log(1 + |STFT|) image."""
    mag = np.abs(stft(clip, SPEC_WINDOW_MS, SPEC_HOP_MS, SPEC_FFT))
    img = bilinear_resize(np.log1p(mag), (SPEC_SIZE, SPEC_SIZE))
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-6:
        raise ValueError("constant spectrogram image (silent clip?)")
    return SpectrogramImage((img - lo) / (hi - lo))


# --------------------------------------------------------------------------
# mel / cepstrum


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, fft_size: int, sample_rate: int,
                   f_min: float = 0.0, f_max: Optional[float] = None) -> MelFilterbank:
    if f_max is None:
        f_max = sample_rate / 2.0
    if n_filters < 1:
        raise ValueError("n_filters must be >= 1")
    if f_min >= f_max:
        raise ValueError("f_min must be below f_max")
    if f_max > sample_rate / 2.0 + 1e-9:
        raise ValueError("f_max exceeds Nyquist")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_filters + 2))
    bins = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (bins[None, :] - lower) / (centre - lower)
    fall = (upper - bins[None, :]) / (upper - centre)
    w = np.maximum(0.0, np.minimum(rise, fall))
    return MelFilterbank(w, float(f_min), float(f_max))


@lru_cache(maxsize=16)
def dct_matrix(m: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows = coefficients."""
    k = np.arange(m)[:, None]
    j = np.arange(m)[None, :]
    basis = np.cos(np.pi * k * (2 * j + 1) / (2 * m)) * np.sqrt(2.0 / m)
    basis[0] /= np.sqrt(2.0)
    basis.setflags(write=False)
    return basis


def dct_ii(matrix: np.ndarray, n_out: int) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    m = matrix.shape[1]
    if n_out > m:
        raise ValueError(f"n_out={n_out} exceeds input width {m}")
    return matrix @ dct_matrix(m)[:n_out].T


def idct_ii(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.atleast_2d(coeffs)
    return coeffs @ dct_matrix(coeffs.shape[1])


@lru_cache(maxsize=4)
def _mfcc_bank(fft_size: int, rate: int, n_mels: int) -> np.ndarray:
    return mel_filterbank(n_mels, fft_size, rate, 0.0, rate / 2.0).weights


def mfcc(clip: AudioClip, n_mfcc: int = MFCC_COEFFS) -> FrameMatrix:
    """40 MFCCs on centred 2048-point frames, 1024-sample hop: 44 x 40 per second at 44.1 kHz."""
    if clip.sample_rate != MFCC_RATE:
        raise ValueError(f"mfcc expects {MFCC_RATE} Hz audio, got {clip.sample_rate}")
    x = fit_length(clip.samples, MFCC_RATE, "mfcc")
    half = MFCC_FFT // 2
    x = np.concatenate([np.zeros(half), x, np.zeros(half)])
    frames = np.lib.stride_tricks.sliding_window_view(x, MFCC_FFT)[::MFCC_HOP]
    power = np.abs(np.fft.rfft(frames * hann_window(MFCC_FFT), axis=1)) ** 2
    mel = power @ _mfcc_bank(MFCC_FFT, MFCC_RATE, MFCC_MELS).T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    return FrameMatrix(dct_ii(logmel, n_mfcc), 1000.0 * MFCC_HOP / MFCC_RATE,
                       [f"mfcc{i}" for i in range(n_mfcc)])
