"""Frame-level low-level descriptors (LLDs), deltas, smoothing, functionals and aggregation.

The descriptor set is a documented reduced analogue of the 130-dim ComParE LLDs.
In padded-130 mode the 25 base descriptors are followed by reserved all-zero
channels up to 65, and deltas of all 65 are appended, giving the 100 x 130
frame matrix (13 000 values when flattened) for a one second clip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .dsp import FrameMatrix, hann_window, resample
from .ingest import AudioClip

LLD_RATE = 16000
FRAME_MS = 10.0
WIN = 400        # 25 ms
HOP = 160        # 10 ms
PITCH_WIN = 640  # 40 ms; must cover two periods of F0_MIN
FFT = 512
F0_MIN = 60.0
F0_MAX = 1200.0
VOICING_THRESHOLD = 0.45
OCTAVE_RATIO = 0.9
PADDED_BASE = 65

BAND_EDGES = (0, 250, 500, 1000, 1500, 2000, 3000, 4500, 8000)
ENERGY_CHANNELS = ["rms_energy", "log_energy", "zcr", "loudness_proxy"]
SPECTRAL_CHANNELS = (["spectral_centroid", "spectral_spread", "spectral_flux", "spectral_rolloff85",
                      "spectral_entropy", "spectral_flatness", "spectral_slope", "alpha_ratio"]
                     + [f"band_energy_{lo}_{hi}" for lo, hi in zip(BAND_EDGES[:-1], BAND_EDGES[1:])])
VOICE_CHANNELS = ["f0", "voicing", "jitter", "shimmer", "hnr"]
BASE_CHANNELS = ENERGY_CHANNELS + SPECTRAL_CHANNELS + VOICE_CHANNELS

COMPARE_FUNCTIONALS = ("mean", "std", "min", "max", "range", "pctl20", "pctl50", "pctl80",
                       "pctlrange20_50", "pctlrange50_80", "pctlrange20_80", "slope", "offset",
                       "skewness", "kurtosis", "peak_rate", "peak_mean")
EGEMAPS_FUNCTIONALS = ("mean", "std", "pctl20", "pctl50", "pctl80", "slope", "rising_slope_mean",
                       "peak_rate")
EGEMAPS_CHANNELS = ("f0", "loudness_proxy", "jitter", "shimmer", "hnr", "spectral_slope",
                    "alpha_ratio")
COMPARE_SCHEMA_VERSION = "compare-like/1"
EGEMAPS_SCHEMA_VERSION = "egemaps-like/1"
LLD_SCHEMA_VERSION = "lld/1"


@dataclass
class FunctionalVector:
    values: np.ndarray
    schema: List[Tuple[str, str]]
    version: str

    def __post_init__(self):
        if self.values.shape != (len(self.schema),):
            raise ValueError("functional vector dimension must equal schema length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("functional values must be finite")


@dataclass
class AggregatedVector:
    values: np.ndarray
    aggregation: str
    source_shape: Tuple[int, int]


# --------------------------------------------------------------------------
# pitch


def _normalized_autocorr(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """r[t, lag] = <x[:N-lag], x[lag:]> / sqrt(|x[:N-lag]|^2 |x[lag:]|^2) for lag 0..max_lag."""
    n = frames.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, :max_lag + 1]
    cs = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    head = cs[:, n - lags]
    tail = cs[:, n:n + 1] - cs[:, lags]
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-20, acf / np.where(denom > 0, denom, 1.0), 0.0)
    return r


def _pitch_frames(frames: np.ndarray, rate: int):
    """Vectorized F0 / voicing / raw peak height for each row of ``frames``."""
    frames = frames - frames.mean(axis=1, keepdims=True)
    lag_min = max(2, int(np.floor(rate / F0_MAX)))
    lag_max = int(np.ceil(rate / F0_MIN))
    if frames.shape[1] < 2 * lag_max:
        raise ValueError(f"pitch frame must hold >= {2 * lag_max} samples")
    r = _normalized_autocorr(frames, lag_max + 1)
    energy = np.sum(frames ** 2, axis=1)
    n_frames = frames.shape[0]
    f0 = np.zeros(n_frames)
    voicing = np.zeros(n_frames)
    peak = np.zeros(n_frames)
    mid = r[:, lag_min:lag_max + 1]
    left = r[:, lag_min - 1:lag_max]
    right = r[:, lag_min + 1:lag_max + 2]
    is_peak = (mid > left) & (mid >= right) & (mid > 0)
    for i in range(n_frames):
        if energy[i] < 1e-10 * frames.shape[1]:
            continue
        cand = np.flatnonzero(is_peak[i])
        if cand.size == 0:
            continue
        heights = mid[i, cand]
        best = heights.max()
        peak[i] = best
        # shortest lag whose peak is within OCTAVE_RATIO of the best one
        j = cand[np.argmax(heights >= OCTAVE_RATIO * best)]
        lag = lag_min + j
        a, b, c = r[i, lag - 1], r[i, lag], r[i, lag + 1]
        den = a - 2 * b + c
        shift = 0.5 * (a - c) / den if den < 0 else 0.0
        height = float(b)
        if height < VOICING_THRESHOLD:
            continue
        f0[i] = rate / (lag + float(np.clip(shift, -0.5, 0.5)))
        voicing[i] = min(height, 1.0)
    return f0, voicing, peak


def f0_autocorrelation(frame: np.ndarray, rate: int) -> Tuple[float, float]:
    """F0 (Hz, 0 when unvoiced) and voicing strength of one analysis frame.

    The frame must span two periods of the 60 Hz floor; search covers 60-1200 Hz.
    """
    frame = np.asarray(frame, dtype=np.float64)
    f0, voicing, _ = _pitch_frames(frame[None, :], rate)
    return float(f0[0]), float(voicing[0])


# --------------------------------------------------------------------------
# LLD extraction


def _centred_frames(x: np.ndarray, n_frames: int, width: int) -> np.ndarray:
    """Frame t is centred on sample t*HOP + HOP/2; signal is zero-padded at both ends."""
    pad = width
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + HOP * n_frames)])
    starts = np.arange(n_frames) * HOP + HOP // 2 - width // 2 + pad
    return np.lib.stride_tricks.sliding_window_view(xp, width)[starts]


def _spectral(power: np.ndarray, rate: int) -> np.ndarray:
    n_frames, n_bins = power.shape
    freqs = np.arange(n_bins) * rate / FFT
    total = power.sum(axis=1)
    live = total > 1e-12
    safe = np.where(live, total, 1.0)[:, None]
    p = power / safe

    centroid = p @ freqs
    spread = np.sqrt(np.maximum(p @ freqs ** 2 - centroid ** 2, 0.0))

    mag = np.sqrt(power)
    msum = mag.sum(axis=1, keepdims=True)
    nmag = mag / np.where(msum > 0, msum, 1.0)
    flux = np.zeros(n_frames)
    flux[1:] = np.sum(np.diff(nmag, axis=0) ** 2, axis=1)

    cum = np.cumsum(p, axis=1)
    rolloff = freqs[np.argmax(cum >= 0.85, axis=1)]

    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    entropy = -plogp.sum(axis=1) / np.log2(n_bins)

    logp = np.log(power + 1e-20)
    flatness = np.exp(logp.mean(axis=1)) / (power.mean(axis=1) + 1e-20)

    db = 10.0 * np.log10(power + 1e-12)
    fk = freqs / 1000.0
    fc = fk - fk.mean()
    slope = (db - db.mean(axis=1, keepdims=True)) @ fc / np.sum(fc ** 2)

    low = power[:, (freqs >= 50) & (freqs < 1000)].sum(axis=1)
    high = power[:, (freqs >= 1000) & (freqs < 5000)].sum(axis=1)
    alpha = 10.0 * np.log10((low + 1e-12) / (high + 1e-12))

    bands = [np.log1p(power[:, (freqs >= lo) & (freqs < hi)].sum(axis=1))
             for lo, hi in zip(BAND_EDGES[:-1], BAND_EDGES[1:])]

    feats = np.column_stack([centroid, spread, flux, rolloff, entropy, flatness, slope, alpha]
                            + bands)
    feats[~live] = 0.0
    return feats


def _relative_change(values: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    both = voiced[1:] & voiced[:-1]
    mean = 0.5 * (values[1:] + values[:-1])
    ok = both & (mean > 0)
    out[1:][ok] = np.abs(np.diff(values))[ok] / mean[ok]
    return out


def base_llds(clip: AudioClip) -> np.ndarray:
    """T x 25 base descriptor matrix (energy, spectral, voice groups) for a 16 kHz clip."""
    if clip.sample_rate != LLD_RATE:
        raise ValueError(f"LLD extraction expects {LLD_RATE} Hz audio, got {clip.sample_rate}")
    x = clip.samples
    if x.size < WIN:
        raise ValueError(f"clip shorter than one {WIN}-sample window")
    n_frames = int(np.ceil(x.size / HOP))
    frames = _centred_frames(x, n_frames, WIN)

    ms = np.mean(frames ** 2, axis=1)
    rms = np.sqrt(ms)
    log_energy = np.log1p(np.sum(frames ** 2, axis=1))
    signs = np.signbit(frames)
    nz = frames != 0
    crossings = (signs[:, 1:] != signs[:, :-1]) & nz[:, 1:] & nz[:, :-1]
    zcr = crossings.sum(axis=1) / (WIN - 1)
    loudness = rms ** 0.6

    power = np.abs(np.fft.rfft(frames * hann_window(WIN), FFT, axis=1)) ** 2
    spectral = _spectral(power, LLD_RATE)

    f0, voicing, peak = _pitch_frames(_centred_frames(x, n_frames, PITCH_WIN), LLD_RATE)
    voiced = f0 > 0
    r = np.clip(peak, 1e-4, 1 - 1e-4)
    hnr = np.where(voiced, 10.0 * np.log10(r / (1 - r)), 0.0)
    period = np.where(voiced, 1.0 / np.where(voiced, f0, 1.0), 0.0)
    jitter = _relative_change(period, voiced)
    shimmer = _relative_change(rms, voiced)

    energy = np.column_stack([rms, log_energy, zcr, loudness])
    voice = np.column_stack([f0, voicing, jitter, shimmer, hnr])
    return np.concatenate([energy, spectral, voice], axis=1)


def extract_llds(clip: AudioClip, padded: bool = True) -> FrameMatrix:
    """LLDs + deltas at a 10 ms frame period. Non-16 kHz input is resampled first."""
    if clip.sample_rate != LLD_RATE:
        clip = resample(clip, LLD_RATE)
    base = base_llds(clip)
    names = list(BASE_CHANNELS)
    if padded:
        extra = PADDED_BASE - base.shape[1]
        base = np.concatenate([base, np.zeros((base.shape[0], extra))], axis=1)
        names += [f"reserved{i}" for i in range(extra)]
    return deltas(FrameMatrix(base, FRAME_MS, names))


# --------------------------------------------------------------------------
# contour processing


def deltas(matrix: FrameMatrix, half_width: int = 2) -> FrameMatrix:
    """Append regression deltas over +-half_width frames (edges replicated)."""
    x = matrix.values
    if x.shape[0] < 2:
        raise ValueError("deltas need at least 2 frames")
    n = half_width
    padded = np.concatenate([np.repeat(x[:1], n, axis=0), x, np.repeat(x[-1:], n, axis=0)])
    t = x.shape[0]
    d = np.zeros_like(x)
    for k in range(1, n + 1):
        d += k * (padded[n + k:n + k + t] - padded[n - k:n - k + t])
    d /= 2 * sum(k * k for k in range(1, n + 1))
    names = matrix.descriptor_names + [f"{nm}Δ" for nm in matrix.descriptor_names]
    return FrameMatrix(np.concatenate([x, d], axis=1), matrix.frame_period_ms, names)


def smooth_moving_average(matrix: FrameMatrix, width: int = 3) -> FrameMatrix:
    if width < 1 or width % 2 == 0:
        raise ValueError("smoothing width must be odd")
    x = matrix.values
    h = width // 2
    padded = np.concatenate([np.repeat(x[:1], h, axis=0), x, np.repeat(x[-1:], h, axis=0)])
    c = np.cumsum(np.concatenate([np.zeros((1, x.shape[1])), padded]), axis=0)
    out = (c[width:] - c[:-width]) / width
    return FrameMatrix(out, matrix.frame_period_ms, list(matrix.descriptor_names))


# --------------------------------------------------------------------------
# functionals


def _regression(x: np.ndarray):
    t = np.arange(x.shape[0], dtype=np.float64)
    tc = t - t.mean()
    slope = tc @ (x - x.mean(axis=0)) / np.sum(tc ** 2)
    offset = x.mean(axis=0) - slope * t.mean()
    return slope, offset


def _moments(x: np.ndarray):
    mu = x.mean(axis=0)
    c = x - mu
    m2 = np.mean(c ** 2, axis=0)
    m3 = np.mean(c ** 3, axis=0)
    m4 = np.mean(c ** 4, axis=0)
    flat = m2 <= 1e-24 * np.maximum(1.0, mu ** 2)
    safe = np.where(flat, 1.0, m2)
    skew = np.where(flat, 0.0, m3 / safe ** 1.5)
    kurt = np.where(flat, 0.0, m4 / safe ** 2)
    return skew, kurt


def _peaks(x: np.ndarray):
    """Local maxima (x[t-1] < x[t] >= x[t+1]) per channel: counts and mean heights."""
    is_peak = (x[1:-1] > x[:-2]) & (x[1:-1] >= x[2:])
    count = is_peak.sum(axis=0)
    total = np.where(is_peak, x[1:-1], 0.0).sum(axis=0)
    mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return count, mean


def _compare_table(x: np.ndarray, frame_period_ms: float) -> np.ndarray:
    """F x D table of ComParE-like functionals."""
    if x.shape[0] < 3:
        raise ValueError("functionals need at least 3 frames")
    p20, p25, p50, p75, p80 = np.percentile(x, [20, 25, 50, 75, 80], axis=0)
    mn, mx = x.min(axis=0), x.max(axis=0)
    slope, offset = _regression(x)
    skew, kurt = _moments(x)
    count, pmean = _peaks(x)
    seconds = x.shape[0] * frame_period_ms / 1000.0
    return np.stack([x.mean(axis=0), x.std(axis=0), mn, mx, mx - mn, p20, p50, p80,
                     p50 - p20, p80 - p50, p80 - p20, slope, offset, skew, kurt,
                     count / seconds, pmean])


def functionals_compare_like(matrix: FrameMatrix) -> FunctionalVector:
    """17 statistics per channel, channel-major order."""
    table = _compare_table(matrix.values, matrix.frame_period_ms)
    schema = [(ch, fn) for ch in matrix.descriptor_names for fn in COMPARE_FUNCTIONALS]
    return FunctionalVector(table.T.reshape(-1), schema, COMPARE_SCHEMA_VERSION)


def functionals_egemaps_like(matrix: FrameMatrix) -> FunctionalVector:
    """Eight functionals over the prosodic / voice-quality channels of a smoothed LLD matrix.

    Slopes are per second.
    """
    names = matrix.descriptor_names
    missing = [c for c in EGEMAPS_CHANNELS if c not in names]
    if missing:
        raise ValueError(f"LLD matrix lacks channels {missing}")
    x = matrix.values[:, [names.index(c) for c in EGEMAPS_CHANNELS]]
    if x.shape[0] < 3:
        raise ValueError("functionals need at least 3 frames")
    fps = 1000.0 / matrix.frame_period_ms
    p20, p50, p80 = np.percentile(x, [20, 50, 80], axis=0)
    slope, _ = _regression(x)
    diff = np.diff(x, axis=0)
    rising = diff > 0
    rise_mean = np.where(rising.any(axis=0),
                         np.where(rising, diff, 0.0).sum(axis=0) / np.maximum(rising.sum(axis=0), 1),
                         0.0) * fps
    count, _ = _peaks(x)
    seconds = x.shape[0] / fps
    table = np.stack([x.mean(axis=0), x.std(axis=0), p20, p50, p80, slope * fps, rise_mean,
                      count / seconds])
    schema = [(ch, fn) for ch in EGEMAPS_CHANNELS for fn in EGEMAPS_FUNCTIONALS]
    return FunctionalVector(table.T.reshape(-1), schema, EGEMAPS_SCHEMA_VERSION)


def schema_document(vector_or_kind) -> str:
    """Ordered functional schema as a JSON document."""
    if isinstance(vector_or_kind, FunctionalVector):
        schema, version = vector_or_kind.schema, vector_or_kind.version
    elif vector_or_kind == "egemaps":
        schema = [(ch, fn) for ch in EGEMAPS_CHANNELS for fn in EGEMAPS_FUNCTIONALS]
        version = EGEMAPS_SCHEMA_VERSION
    elif vector_or_kind == "compare":
        names = BASE_CHANNELS + [f"{c}Δ" for c in BASE_CHANNELS]
        schema = [(ch, fn) for ch in names for fn in COMPARE_FUNCTIONALS]
        version = COMPARE_SCHEMA_VERSION
    else:
        raise ValueError(f"unknown schema {vector_or_kind!r}")
    return json.dumps({"version": version, "names": [f"{c}__{f}" for c, f in schema]},
                      ensure_ascii=False, indent=1)


# --------------------------------------------------------------------------
# aggregation

AGGREGATIONS = ("mean", "middle", "flat")


def aggregate(matrix, kind: str) -> AggregatedVector:
    x = matrix.values if isinstance(matrix, FrameMatrix) else np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("aggregate expects a T x D matrix with T >= 1")
    if kind == "mean":
        v = x.mean(axis=0)
    elif kind == "middle":
        v = x[x.shape[0] // 2].copy()
    elif kind == "flat":
        v = x.reshape(-1).copy()
    else:
        raise ValueError(f"unknown aggregation {kind!r}; expected one of {AGGREGATIONS}")
    return AggregatedVector(v, kind, tuple(x.shape))


def clip_f0(clip: AudioClip) -> float:
    """Median F0 over voiced frames (0 if none)."""
    if clip.sample_rate != LLD_RATE:
        clip = resample(clip, LLD_RATE)
    f0 = base_llds(clip)[:, BASE_CHANNELS.index("f0")]
    voiced = f0[f0 > 0]
    return float(np.median(voiced)) if voiced.size else 0.0


def channel(matrix: FrameMatrix, name: str) -> np.ndarray:
    return matrix.values[:, matrix.descriptor_names.index(name)]


__all__: Sequence[str] = [
    "FunctionalVector", "AggregatedVector", "f0_autocorrelation", "extract_llds", "base_llds",
    "deltas", "smooth_moving_average", "functionals_compare_like", "functionals_egemaps_like",
    "aggregate", "schema_document", "clip_f0", "channel",
]
