"""Named feature extractors and the on-disk feature cache (``GRNT`` records + JSON index)."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from . import dsp, lld
from .ingest import AudioClip

MAGIC = b"GRNT"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHII")

SEQUENCE_FEATURES = ("lld", "mfcc", "spectrogram")
VECTOR_FEATURES = ("compare_functionals", "egemaps_functionals")
FEATURES = SEQUENCE_FEATURES + VECTOR_FEATURES

FEATURE_VERSIONS = {
    "lld": f"{lld.LLD_SCHEMA_VERSION}+padded130",
    "mfcc": "mfcc/1:44k1,fft2048,hop1024,mel128,c40",
    "spectrogram": "spectrogram/1:44k1,win16ms,hop8ms,fft1024,227x227,time-x-freq",
    "compare_functionals": f"{lld.COMPARE_SCHEMA_VERSION}+{lld.LLD_SCHEMA_VERSION}",
    "egemaps_functionals": f"{lld.EGEMAPS_SCHEMA_VERSION}+{lld.LLD_SCHEMA_VERSION}+sma3",
}


def _lld(clip: AudioClip) -> np.ndarray:
    return lld.extract_llds(clip, padded=True).values


def _mfcc(clip: AudioClip) -> np.ndarray:
    return dsp.mfcc(clip).values


def _spectrogram(clip: AudioClip) -> np.ndarray:
    return dsp.spectrogram_image(clip).values


def _compare(clip: AudioClip) -> np.ndarray:
    return lld.functionals_compare_like(lld.extract_llds(clip, padded=False)).values[None, :]


def _egemaps(clip: AudioClip) -> np.ndarray:
    smoothed = lld.smooth_moving_average(lld.extract_llds(clip, padded=False), 3)
    return lld.functionals_egemaps_like(smoothed).values[None, :]


EXTRACTORS: Dict[str, Callable[[AudioClip], np.ndarray]] = {
    "lld": _lld,
    "mfcc": _mfcc,
    "spectrogram": _spectrogram,
    "compare_functionals": _compare,
    "egemaps_functionals": _egemaps,
}


def extract_feature(clip: AudioClip, name: str) -> np.ndarray:
    """2-D feature array for one clip; functional sets come back as a 1 x D row."""
    if name not in EXTRACTORS:
        raise ValueError(f"unknown feature {name!r}; choose from {', '.join(FEATURES)}")
    return EXTRACTORS[name](clip)


def clip_hash(clip: AudioClip) -> str:
    h = hashlib.sha256()
    h.update(str(clip.sample_rate).encode())
    h.update(np.ascontiguousarray(clip.samples, dtype="<f8").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# binary records


def encode_record(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError("cache records hold 2-D arrays")
    t, d = values.shape
    return _HEADER.pack(MAGIC, CACHE_VERSION, t, d) + np.ascontiguousarray(values).tobytes()


def decode_record(buf, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Array stored at ``offset`` and the offset just past it."""
    if len(buf) < offset + _HEADER.size:
        raise ValueError("corrupt cache: truncated record header")
    magic, version, t, d = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ValueError("corrupt cache: bad magic")
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported cache version {version}")
    start = offset + _HEADER.size
    end = start + 8 * t * d
    if len(buf) < end:
        raise ValueError("corrupt cache: truncated record payload")
    arr = np.frombuffer(bytes(buf[start:end]), dtype="<f8").reshape(t, d).astype(np.float64)
    return arr, end


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class FeatureCache:
    """One ``<feature>.grnt`` data file plus ``<feature>.index.json`` per feature.

    Index entries map clip id -> {offset, hash, version}; an entry is reused only
    when clip content hash and feature schema version both match.
    """

    def __init__(self, directory):
        self.dir = Path(directory)

    def _paths(self, feature: str):
        return self.dir / f"{feature}.grnt", self.dir / f"{feature}.index.json"

    def load(self, feature: str) -> Tuple[Dict[str, np.ndarray], Dict[str, dict]]:
        data_path, index_path = self._paths(feature)
        if not index_path.exists():
            return {}, {}
        try:
            index = json.loads(index_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt cache index {index_path}: {exc}") from None
        buf = data_path.read_bytes() if data_path.exists() else b""
        arrays = {}
        for key, meta in index.get("entries", {}).items():
            arrays[key], _ = decode_record(buf, int(meta["offset"]))
        return arrays, index.get("entries", {})

    def save(self, feature: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, dict]) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        data_path, index_path = self._paths(feature)
        chunks, entries, offset = [], {}, 0
        for key in sorted(arrays):
            rec = encode_record(arrays[key])
            entries[key] = {"offset": offset, "hash": meta[key]["hash"],
                            "version": meta[key]["version"]}
            chunks.append(rec)
            offset += len(rec)
        _atomic_write(data_path, b"".join(chunks))
        index = {"feature": feature, "format": "GRNT", "format_version": CACHE_VERSION,
                 "entries": entries}
        _atomic_write(index_path, json.dumps(index, indent=1, sort_keys=True).encode())


def _extract_one(args):
    clip, feature = args
    return extract_feature(clip, feature)


def extract_all(clips: Mapping[str, AudioClip], feature: str, cache_dir=None,
                jobs: int = 1) -> Tuple[Dict[str, np.ndarray], int]:
    """Features for every clip, reusing up-to-date cache entries.

    Returns the feature map and the number of clips actually (re)computed.
    """
    if feature not in EXTRACTORS:
        raise ValueError(f"unknown feature {feature!r}")
    version = FEATURE_VERSIONS[feature]
    cache = FeatureCache(cache_dir) if cache_dir is not None else None
    cached, meta = cache.load(feature) if cache else ({}, {})
    hashes = {k: clip_hash(c) for k, c in clips.items()}
    out: Dict[str, np.ndarray] = {}
    todo = []
    for key in clips:
        m = meta.get(key)
        if m and m["hash"] == hashes[key] and m["version"] == version and key in cached:
            out[key] = cached[key]
        else:
            todo.append(key)
    if todo:
        work = [(clips[k], feature) for k in todo]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_extract_one, work, chunksize=8))
        else:
            results = [_extract_one(w) for w in work]
        out.update(zip(todo, results))
    if cache is not None and (todo or set(cached) != set(out)):
        keep = dict(cached)
        keep.update(out)
        new_meta = {k: v for k, v in meta.items() if k in keep}
        for k in todo:
            new_meta[k] = {"hash": hashes[k], "version": version}
        cache.save(feature, keep, new_meta)
    return out, len(todo)


def feature_shape(name: str) -> Tuple[int, int]:
    return {"lld": (100, 130), "mfcc": (44, 40), "spectrogram": (227, 227)}[name]


def iter_features(features: Mapping[str, np.ndarray], keys: Iterable[str]):
    for k in keys:
        if k not in features:
            raise KeyError(f"no features for clip {k}")
        yield features[k]
