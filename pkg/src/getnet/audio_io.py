"""PCM16 mono WAV reading/writing and the JSON-lines corpus manifest."""

from __future__ import annotations

import json
import wave
from pathlib import Path

import numpy as np

from .dsp import Annotation, AudioClip
from .errors import DataError


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write ``samples`` (floats in [-1, 1]) as 16-bit little-endian mono PCM."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[int, np.ndarray]:
    """Return ``(sample_rate, samples)`` with samples scaled to [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            if wf.getcomptype() != "NONE":
                raise DataError(f"{path}: compressed WAV is not supported")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return rate, samples


def write_manifest(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return records


def load_clip(record: dict, root=None, expected_rate: int | None = None) -> AudioClip:
    """Load the clip described by one manifest record.

    The WAV header rate must match the manifest; audio is never resampled.
    """
    for key in ("id", "site", "year", "path", "sample_rate"):
        if key not in record:
            raise DataError(f"manifest record missing {key!r}: {record.get('id', '?')}")
    path = Path(record["path"])
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    rate, samples = read_wav(path)
    if rate != int(record["sample_rate"]):
        raise DataError(f"{path}: header rate {rate} Hz != manifest rate {record['sample_rate']} Hz")
    if expected_rate is not None and rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, pipeline expects {expected_rate} Hz")
    anns = [Annotation(float(a["t0"]), float(a["t1"]), a.get("label", "dcall"))
            for a in record.get("annotations", [])]
    return AudioClip(id=record["id"], site=str(record["site"]), year=int(record["year"]),
                     sample_rate=rate, samples=samples, annotations=anns)
