"""Corpus ingestion: manifests, WAV I/O, clip slicing and the synthetic grunt generator."""

from __future__ import annotations

import csv
import io
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

CLIP_MS = 1000
SEXES = ("female", "male")
SCORES = ("scored", "not_scored")
MANIFEST_HEADER = ("recording_id", "player_id", "start_ms", "duration_ms", "sex", "score")


class ManifestError(ValueError):
    """Raised for malformed manifest documents."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class WavError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    recording_id: str
    player_id: str
    start_ms: int
    duration_ms: int
    sex: str
    score: str

    def __post_init__(self):
        if self.duration_ms != CLIP_MS:
            raise ValueError(f"duration must be {CLIP_MS} ms (got {self.duration_ms})")
        if self.start_ms < 0:
            raise ValueError("start_ms must be >= 0")
        if not self.player_id:
            raise ValueError("player_id must be non-empty")
        if not self.recording_id:
            raise ValueError("recording_id must be non-empty")
        if self.sex not in SEXES:
            raise ValueError(f"unknown sex {self.sex!r}")
        if self.score not in SCORES:
            raise ValueError(f"unknown score {self.score!r}")

    @property
    def key(self) -> str:
        """Clip identifier, also the clip-store file stem."""
        return f"{self.recording_id}_{self.start_ms}"


@dataclass
class DatasetManifest:
    records: List[AnnotationRecord] = field(default_factory=list)
    audio_paths: Dict[str, str] = field(default_factory=dict)

    def players(self) -> List[str]:
        seen = dict.fromkeys(r.player_id for r in self.records)
        return list(seen)

    def player_sex(self) -> Dict[str, str]:
        return {r.player_id: r.sex for r in self.records}

    def subset(self, sex: Optional[str]) -> "DatasetManifest":
        if sex is None:
            return self
        recs = [r for r in self.records if r.sex == sex]
        paths = {r.recording_id: self.audio_paths[r.recording_id]
                 for r in recs if r.recording_id in self.audio_paths}
        return DatasetManifest(recs, paths)

    def resolve_audio(self, recordings_dir) -> "DatasetManifest":
        """Map every recording id to ``<recordings_dir>/<recording_id>.wav``."""
        base = Path(recordings_dir)
        paths = {r.recording_id: str(base / f"{r.recording_id}.wav") for r in self.records}
        return DatasetManifest(list(self.records), paths)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source: Optional[AnnotationRecord] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("clip samples must be a non-empty 1-D array")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


# --------------------------------------------------------------------------
# manifest


def parse_manifest(text: str) -> DatasetManifest:
    """Parse the CSV manifest; record order is preserved.

    Raises ManifestError with the offending (1-based) line number.
    """
    lines = text.splitlines()
    if not lines or tuple(c.strip() for c in lines[0].split(",")) != MANIFEST_HEADER:
        raise ManifestError("bad or missing header, expected " + ",".join(MANIFEST_HEADER), 1)
    records = []
    seen = set()
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", lineno)
        rec_id, player, start, dur, sex, score = (c.strip() for c in row)
        try:
            start_i, dur_i = int(start), int(dur)
        except ValueError:
            raise ManifestError("start_ms and duration_ms must be integers", lineno) from None
        try:
            rec = AnnotationRecord(rec_id, player, start_i, dur_i, sex, score)
        except ValueError as exc:
            raise ManifestError(str(exc), lineno) from None
        if (rec_id, start_i) in seen:
            raise ManifestError(f"duplicate record {rec_id}@{start_i}", lineno)
        seen.add((rec_id, start_i))
        records.append(rec)
    return DatasetManifest(records, {})


def serialize_manifest(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        w.writerow([r.recording_id, r.player_id, r.start_ms, r.duration_ms, r.sex, r.score])
    return buf.getvalue()


def read_manifest(path) -> DatasetManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


@dataclass
class ValidationReport:
    clips_per_player: Dict[str, int]
    score_balance: Dict[str, Tuple[int, int]]
    players_per_sex: Dict[str, int]
    violations: List[str]
    warnings: List[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def render(self) -> str:
        lines = [f"players: {len(self.clips_per_player)}  clips: {sum(self.clips_per_player.values())}",
                 "players per sex: " + ", ".join(f"{k}={v}" for k, v in self.players_per_sex.items())]
        for p, n in self.clips_per_player.items():
            s, ns = self.score_balance[p]
            lines.append(f"  {p}: {n} clips ({s} scored / {ns} not)")
        lines += [f"WARNING: {w}" for w in self.warnings]
        lines += [f"VIOLATION: {v}" for v in self.violations]
        lines.append("OK" if self.ok else f"{len(self.violations)} violation(s)")
        return "\n".join(lines)


def validate_manifest(manifest: DatasetManifest) -> ValidationReport:
    counts = Counter(r.player_id for r in manifest.records)
    balance: Dict[str, List[int]] = defaultdict(lambda: [0, 0])
    sexes: Dict[str, set] = defaultdict(set)
    recordings: Dict[str, set] = defaultdict(set)
    for r in manifest.records:
        balance[r.player_id][SCORES.index(r.score)] += 1
        sexes[r.player_id].add(r.sex)
        recordings[r.player_id].add(r.recording_id)

    violations, warnings = [], []
    if not manifest.records:
        warnings.append("empty manifest")
    for p, (s, ns) in balance.items():
        if s != ns:
            violations.append(f"player {p} has unbalanced score labels ({s} scored / {ns} not)")
        if len(sexes[p]) > 1:
            violations.append(f"player {p} carries more than one sex label")
        if len(recordings[p]) > 1:
            violations.append(f"player {p} spans {len(recordings[p])} recordings")
    rec_players: Dict[str, set] = defaultdict(set)
    for r in manifest.records:
        rec_players[r.recording_id].add(r.player_id)
    for rec, ps in rec_players.items():
        if len(ps) > 1:
            violations.append(f"recording {rec} annotated for {len(ps)} players")
    if manifest.audio_paths:
        missing = sorted({r.recording_id for r in manifest.records} - set(manifest.audio_paths))
        if missing:
            violations.append(f"unresolved recordings: {', '.join(missing)}")

    per_sex = Counter(next(iter(s)) for s in sexes.values())
    return ValidationReport(
        clips_per_player=dict(counts),
        score_balance={p: tuple(v) for p, v in balance.items()},
        players_per_sex={s: per_sex.get(s, 0) for s in SEXES},
        violations=violations,
        warnings=warnings,
    )


# --------------------------------------------------------------------------
# WAV


def decode_wav(data: bytes) -> AudioClip:
    """Decode a 16-bit PCM RIFF/WAVE byte string to a mono clip in [-1, 1)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError("not a RIFF/WAVE stream")
    pos = 12
    fmt = None
    pcm = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError("truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            fmt_body = body
        elif cid == b"data":
            if len(body) < size:
                raise WavError("truncated stream: data chunk shorter than declared")
            pcm = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError("missing fmt chunk")
    if pcm is None:
        raise WavError("truncated stream: no data chunk")
    codec, channels, rate, _, block_align, bits = fmt
    if codec == 0xFFFE:
        # WAVE_FORMAT_EXTENSIBLE; only the PCM subformat is accepted
        sub = struct.unpack_from("<H", fmt_body, 24)[0] if len(fmt_body) >= 26 else None
        codec = 1 if sub == 1 else codec
    if codec != 1:
        raise WavError(f"unsupported codec {codec:#x}; only linear PCM is supported")
    if bits != 16:
        raise WavError(f"unsupported bit depth {bits}; only 16-bit is supported")
    if channels not in (1, 2):
        raise WavError(f"unsupported channel count {channels}")
    n = len(pcm) // (2 * channels)
    if n == 0:
        raise WavError("truncated stream: empty data chunk")
    ints = np.frombuffer(pcm[: n * 2 * channels], dtype="<i2").astype(np.float64)
    samples = ints.reshape(n, channels).mean(axis=1) / 32768.0
    return AudioClip(samples, int(rate))


def encode_wav(clip: AudioClip) -> bytes:
    ints = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
                         b"fmt ", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16,
                         b"data", len(payload))
    return header + payload


def read_wav(path) -> AudioClip:
    return decode_wav(Path(path).read_bytes())


def write_wav(path, clip: AudioClip) -> None:
    Path(path).write_bytes(encode_wav(clip))


# --------------------------------------------------------------------------
# clips


def extract_clip(recording: AudioClip, record: AnnotationRecord) -> AudioClip:
    rate = recording.sample_rate
    start = int(round(rate * record.start_ms / 1000.0))
    n = int(round(rate * record.duration_ms / 1000.0))
    if start + n > recording.samples.size:
        raise IndexError(
            f"clip window {record.start_ms}+{record.duration_ms} ms exceeds recording "
            f"length {1000.0 * recording.samples.size / rate:.1f} ms")
    return AudioClip(recording.samples[start:start + n].copy(), rate, record)


def normalize_peak(clip: AudioClip) -> AudioClip:
    peak = np.max(np.abs(clip.samples))
    if peak == 0:
        raise ValueError("silent clip")
    if peak == 1.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.source)
    return AudioClip(clip.samples / peak, clip.sample_rate, clip.source)


def clip_path(store_dir, record: AnnotationRecord) -> Path:
    return Path(store_dir) / f"{record.key}.wav"


def load_clip_store(store_dir, manifest: DatasetManifest) -> Dict[str, AudioClip]:
    out = {}
    for r in manifest.records:
        path = clip_path(store_dir, r)
        if not path.exists():
            raise FileNotFoundError(f"missing audio for {r.key}: {path}")
        clip = read_wav(path)
        out[r.key] = AudioClip(clip.samples, clip.sample_rate, r)
    return out


def write_clip_store(store_dir, manifest: DatasetManifest, clips: Dict[str, AudioClip]) -> None:
    store = Path(store_dir)
    store.mkdir(parents=True, exist_ok=True)
    for r in manifest.records:
        write_wav(clip_path(store, r), clips[r.key])
    (store / "manifest.csv").write_text(serialize_manifest(manifest), encoding="utf-8")


def slice_recordings(manifest: DatasetManifest, normalize: bool = True) -> Dict[str, AudioClip]:
    """Cut every annotated window out of the resolved recordings."""
    if not manifest.audio_paths:
        raise ValueError("manifest has no resolved audio paths")
    cache: Dict[str, AudioClip] = {}
    out = {}
    for r in manifest.records:
        if r.recording_id not in manifest.audio_paths:
            raise KeyError(f"recording {r.recording_id} has no audio path")
        if r.recording_id not in cache:
            cache[r.recording_id] = read_wav(manifest.audio_paths[r.recording_id])
        clip = extract_clip(cache[r.recording_id], r)
        out[r.key] = normalize_peak(clip) if normalize else clip
    return out


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic grunt corpus.

    ``f0_range_a`` is used for male players and ``f0_range_b`` for female players.
    Scored clips get ``(1 + amplitude_effect)`` louder and ``(1 + duration_effect)``
    longer envelopes.
    """

    n_players: int = 20
    clips_per_player: int = 30
    f0_range_a: Tuple[float, float] = (150.0, 300.0)
    f0_range_b: Tuple[float, float] = (400.0, 600.0)
    amplitude_effect: float = 0.20
    duration_effect: float = 0.10
    seed: int = 0
    sample_rate: int = 44100
    noise_db: float = -30.0
    separable: bool = True

    def validate(self) -> None:
        if self.n_players < 1:
            raise ValueError("n_players must be >= 1")
        if self.clips_per_player < 2 or self.clips_per_player % 2:
            raise ValueError("clips_per_player must be even (half scored, half not)")
        for lo, hi in (self.f0_range_a, self.f0_range_b):
            if not 0 < lo <= hi:
                raise ValueError("f0 ranges must satisfy 0 < low <= high")
            if hi >= self.sample_rate / 4:
                raise ValueError("f0 range too high for the sample rate")
        if self.separable:
            a, b = self.f0_range_a, self.f0_range_b
            if not (a[1] < b[0] or b[1] < a[0]):
                raise ValueError("f0 ranges must be disjoint when separable=True")
        if self.amplitude_effect < 0 or self.duration_effect < 0:
            raise ValueError("score effects must be non-negative")
        if self.sample_rate < 16000:
            raise ValueError("sample_rate must be >= 16 kHz")


# vowel-like formant centres/bandwidths (Hz) for an open grunt
_FORMANTS = ((750.0, 90.0), (1250.0, 110.0), (2600.0, 160.0))


def _formant_gain(freqs: np.ndarray, formants) -> np.ndarray:
    g = np.zeros_like(freqs)
    for fc, bw in formants:
        # magnitude of a two-pole resonance, normalized to 1 at its centre
        g += 1.0 / np.sqrt(1.0 + ((freqs ** 2 - fc ** 2) / (freqs * bw + 1e-9)) ** 2)
    return g + 0.02


def _envelope(n: int, rate: int, onset_s: float, length_s: float) -> np.ndarray:
    t = np.arange(n) / rate - onset_s
    attack = 0.03
    env = np.zeros(n)
    rise = (t >= 0) & (t < attack)
    env[rise] = 0.5 - 0.5 * np.cos(np.pi * t[rise] / attack)
    body = (t >= attack) & (t < length_s)
    # exponential-ish decay across the body of the grunt
    env[body] = np.exp(-1.2 * (t[body] - attack) / length_s)
    tail = (t >= length_s) & (t < length_s + 0.04)
    env[tail] = np.exp(-1.2) * (0.5 + 0.5 * np.cos(np.pi * (t[tail] - length_s) / 0.04))
    return env


def _grunt(rng: np.random.Generator, rate: int, f0: float, formants, amp: float,
           length_s: float, noise_rms: float) -> np.ndarray:
    n = rate  # one second
    t = np.arange(n) / rate
    top = min(8000.0, 0.45 * rate)
    k = np.arange(1, int(top // f0) + 1, dtype=np.float64)
    # glottal source spectrum (~ -12 dB/oct) shaped by the vocal-tract resonances
    weights = k ** -1.0 * _formant_gain(k * f0, formants)
    phases = rng.uniform(0, 2 * np.pi, size=k.size)
    voiced = np.zeros(n)
    for kk, wk, ph in zip(k, weights, phases):
        voiced += wk * np.sin(2 * np.pi * kk * f0 * t + ph)
    voiced /= np.max(np.abs(voiced))
    onset = rng.uniform(0.08, 0.95 - length_s - 0.04)
    sig = amp * voiced * _envelope(n, rate, onset, length_s)
    sig += noise_rms * rng.standard_normal(n)
    return np.clip(sig, -0.999, 0.999)


def generate_synthetic_corpus(spec: SyntheticSpec) -> Tuple[DatasetManifest, Dict[str, AudioClip]]:
    """Deterministic corpus of glottal-pulse "grunts" with sex and score labels."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    player_seeds = root.spawn(spec.n_players)
    records: List[AnnotationRecord] = []
    clips: Dict[str, AudioClip] = {}
    noise_rms = 10 ** (spec.noise_db / 20.0)
    for p in range(spec.n_players):
        rng = np.random.default_rng(player_seeds[p])
        sex = SEXES[p % 2]
        f0_lo, f0_hi = spec.f0_range_b if sex == "female" else spec.f0_range_a
        player_id = f"P{p:03d}"
        rec_id = f"rec{p:03d}"
        formants = [(fc * rng.uniform(0.9, 1.1), bw) for fc, bw in _FORMANTS]
        gain = rng.uniform(0.35, 0.65)
        base_len = rng.uniform(0.28, 0.40)
        labels = np.array([SCORES[0], SCORES[1]] * (spec.clips_per_player // 2))
        labels = labels[rng.permutation(labels.size)]
        for i, score in enumerate(labels):
            scored = score == SCORES[0]
            amp = gain * np.exp(0.12 * rng.standard_normal())
            length = base_len * np.exp(0.10 * rng.standard_normal())
            if scored:
                amp *= 1.0 + spec.amplitude_effect
                length *= 1.0 + spec.duration_effect
            amp = min(amp, 0.95)
            length = float(np.clip(length, 0.15, 0.7))
            f0 = rng.uniform(f0_lo, f0_hi)
            rec = AnnotationRecord(rec_id, player_id, i * CLIP_MS, CLIP_MS, sex, str(score))
            samples = _grunt(rng, spec.sample_rate, f0, formants, amp, length, noise_rms)
            # quantize through 16-bit so in-memory and on-disk stores agree exactly
            samples = np.round(samples * 32768.0) / 32768.0
            records.append(rec)
            clips[rec.key] = AudioClip(samples, spec.sample_rate, rec)
    paths = {r.recording_id: f"{r.recording_id}.wav" for r in records}
    return DatasetManifest(records, paths), clips


def shuffle_scores_within_players(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Permute score labels inside each player (keeps per-player balance, destroys signal)."""
    rng = np.random.default_rng(seed)
    by_player: Dict[str, List[int]] = defaultdict(list)
    for i, r in enumerate(manifest.records):
        by_player[r.player_id].append(i)
    new = list(manifest.records)
    for p in sorted(by_player):
        idx = by_player[p]
        perm = rng.permutation(len(idx))
        scores = [manifest.records[i].score for i in idx]
        for j, i in enumerate(idx):
            r = manifest.records[i]
            new[i] = AnnotationRecord(r.recording_id, r.player_id, r.start_ms, r.duration_ms,
                                      r.sex, scores[perm[j]])
    return DatasetManifest(new, dict(manifest.audio_paths))


def iter_keys(manifest: DatasetManifest) -> Iterable[str]:
    return (r.key for r in manifest.records)
