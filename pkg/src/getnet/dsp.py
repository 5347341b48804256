"""Audio front end: windowing, STFT, log-power min-max spectrograms.

Canonical parameters are 250 Hz audio cut into 16384-sample windows with an
8192-sample hop, and a 256-point STFT with hop 64, giving 128 x 256
spectrograms (frequency x time).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ClipTooShortError, DataError

EPS = 1e-12


@dataclass(frozen=True)
class Annotation:
    t_start: float
    t_end: float
    label: str = "dcall"

    def __post_init__(self):
        if not (0.0 <= self.t_start < self.t_end):
            raise DataError(f"annotation must satisfy 0 <= t_start < t_end, got "
                            f"({self.t_start}, {self.t_end})")


@dataclass
class AudioClip:
    id: str
    site: str
    year: int
    sample_rate: int
    samples: np.ndarray
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DataError(f"clip {self.id}: sample_rate must be positive")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError(f"clip {self.id}: samples must be a non-empty 1-D sequence")
        dur = self.duration
        for ann in self.annotations:
            if ann.t_end > dur + 1e-9:
                raise DataError(f"clip {self.id}: annotation {ann} beyond duration {dur:.3f}s")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class WindowSegment:
    clip_id: str
    index: int
    start_sample: int
    samples: np.ndarray
    label: int = 0


@dataclass
class Spectrogram:
    """Normalized log-power grid, shape (M, N) = (frequency bins, time frames)."""

    values: np.ndarray
    freq_resolution: float
    hop_samples: int
    window_len: int
    label: int = 0
    clip_id: str = ""
    index: int = 0
    degenerate: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FrontendParams:
    sample_rate: int = 250
    window: int = 16384
    hop: int = 8192
    n_fft: int = 256
    stft_hop: int = 64
    eps: float = EPS
    taper: str = "hann"
    overlap_fraction: float = 0.5

    @property
    def spectrogram_shape(self) -> tuple[int, int]:
        return self.n_fft // 2, self.window // self.stft_hop


CANONICAL = FrontendParams()
# 32 x 64 spectrograms (8.2 s windows) for desk-scale experiments
DESK = FrontendParams(window=2048, hop=1024, n_fft=64, stft_hop=32)


def window_count(s: int, h: int) -> int:
    return (s - h) // h


def segment(clip: AudioClip, w: int, h: int) -> list[WindowSegment]:
    """Cut ``clip`` into windows of ``w`` samples with hop ``h`` (w = 2h).

    Any truncated tail is discarded, so a clip of ``s`` samples yields
    ``floor((s - h) / h)`` windows.
    """
    if h < 1 or w != 2 * h:
        raise DataError(f"window/hop must satisfy w = 2h with h >= 1, got w={w}, h={h}")
    s = clip.samples.size
    if s < w:
        raise ClipTooShortError(f"clip {clip.id}: {s} samples is shorter than one window ({w})")
    n = window_count(s, h)
    return [WindowSegment(clip.id, i, i * h, clip.samples[i * h:i * h + w].copy())
            for i in range(n)]


def label_window(seg: WindowSegment, annotations: Iterable[Annotation], sample_rate: int,
                 min_fraction: float = 0.5) -> int:
    """1 if an annotation lies fully inside the window or overlaps it by at
    least ``min_fraction`` of the annotation's own duration."""
    t0 = seg.start_sample / sample_rate
    t1 = (seg.start_sample + seg.samples.size) / sample_rate
    for ann in annotations:
        if ann.t_start >= t0 and ann.t_end <= t1:
            return 1
        overlap = min(t1, ann.t_end) - max(t0, ann.t_start)
        if overlap > 0 and overlap >= min_fraction * (ann.t_end - ann.t_start):
            return 1
    return 0


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def taper_window(name: str, length: int) -> np.ndarray:
    if name == "hann":
        # periodic Hann, the usual choice for spectral analysis
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)
    if name in ("rect", "rectangular", "boxcar"):
        return np.ones(length)
    raise DataError(f"unknown taper {name!r}")


def frame_signal(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """(floor(T/hop), n_fft) frames; the tail is zero-padded so the last
    frames are complete."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = x.size // hop
    need = (n_frames - 1) * hop + n_fft
    if need > x.size:
        x = np.concatenate([x, np.zeros(need - x.size)])
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(x, n_fft: int, hop: int, taper: str | np.ndarray = "hann") -> np.ndarray:
    """Complex STFT, shape (frames, n_fft), frames = floor(T / hop).

    ``x`` may be a :class:`WindowSegment` or a 1-D array.
    """
    samples = x.samples if isinstance(x, WindowSegment) else np.asarray(x, dtype=np.float64)
    if not _is_pow2(n_fft):
        raise DataError(f"FFT length must be a power of two, got {n_fft}")
    if hop < 1 or hop > n_fft:
        raise DataError(f"STFT hop must be in [1, {n_fft}], got {hop}")
    if n_fft > samples.size:
        raise DataError(f"FFT length {n_fft} exceeds segment length {samples.size}")
    win = taper_window(taper, n_fft) if isinstance(taper, str) else np.asarray(taper, float)
    frames = frame_signal(samples, n_fft, hop)
    return np.fft.fft(frames * win[None, :], axis=1)


def minmax_scale(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale to [0, 1]; a constant grid maps to zeros and is reported degenerate."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values), True
    return (values - lo) / (hi - lo), False


def log_power_normalize(grid: np.ndarray, eps: float = EPS, *, sample_rate: float = 250.0,
                        hop: int = 0, label: int = 0, clip_id: str = "",
                        index: int = 0) -> Spectrogram:
    """Log-power + min-max normalization of a complex (frames, L) STFT grid.

    Keeps bins ``0 .. L/2 - 1`` and returns values transposed to (M, N).
    """
    grid = np.asarray(grid)
    if grid.size == 0:
        raise DataError("empty STFT grid")
    n_fft = grid.shape[1]
    half = grid[:, :n_fft // 2] if n_fft > 1 else grid
    p_db = 10.0 * np.log10(np.abs(half) ** 2 + eps)
    scaled, degenerate = minmax_scale(p_db)
    return Spectrogram(values=scaled.T.astype(np.float32), freq_resolution=sample_rate / n_fft,
                       hop_samples=hop, window_len=n_fft, label=label, clip_id=clip_id,
                       index=index, degenerate=degenerate)


def receptive_field(k_t: int, n_fft: int, hop: int) -> int:
    """Time-axis receptive field, in samples, of a kernel spanning ``k_t`` frames."""
    if k_t < 1:
        raise DataError("kernel extent must be >= 1 frame")
    return n_fft + (k_t - 1) * hop


def extract_clip(clip: AudioClip, params: FrontendParams = CANONICAL) -> list[Spectrogram]:
    """Window, label and transform one clip."""
    if clip.sample_rate != params.sample_rate:
        raise DataError(f"clip {clip.id}: {clip.sample_rate} Hz, expected {params.sample_rate} Hz "
                        "(resampling is not supported)")
    out = []
    for seg in segment(clip, params.window, params.hop):
        seg.label = label_window(seg, clip.annotations, clip.sample_rate, params.overlap_fraction)
        grid = stft(seg, params.n_fft, params.stft_hop, params.taper)
        out.append(log_power_normalize(grid, params.eps, sample_rate=clip.sample_rate,
                                       hop=params.stft_hop, label=seg.label,
                                       clip_id=clip.id, index=seg.index))
    return out


def merge_adjacent_positives(records: Sequence[dict], max_run: int = 3) -> list[dict]:
    """Merge runs of consecutive positive windows into scored events.

    ``records`` carry ``clip_id``, ``index``, ``label`` and ``score``.  Within a
    clip, consecutive positive windows are grouped into events of at most
    ``max_run`` windows scored by their maximum; negatives are kept as-is.
    """
    if max_run < 1:
        raise DataError("max_run must be >= 1")
    ordered = sorted(records, key=lambda r: (r["clip_id"], r["index"]))
    events: list[dict] = []
    run: list[dict] = []

    def flush():
        if run:
            events.append({"clip_id": run[0]["clip_id"], "index": run[0]["index"],
                           "label": 1, "score": max(r["score"] for r in run),
                           "windows": len(run)})
            run.clear()

    for rec in ordered:
        if rec["label"] == 1:
            if run and (rec["clip_id"] != run[-1]["clip_id"]
                        or rec["index"] != run[-1]["index"] + 1 or len(run) == max_run):
                flush()
            run.append(rec)
        else:
            flush()
            events.append({"clip_id": rec["clip_id"], "index": rec["index"], "label": 0,
                           "score": rec["score"], "windows": 1})
    flush()
    return events


def write_spectrogram(path, spec: Spectrogram, sample_rate: int) -> None:
    """Cache format: one JSON header line, then float32 LE values, frequency-major."""
    m, n = spec.values.shape
    header = {"M": m, "N": n, "L": spec.window_len, "b": spec.hop_samples, "fs": sample_rate,
              "clip_id": spec.clip_id, "index": spec.index, "label": int(spec.label)}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def read_spectrogram(path) -> Spectrogram:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    m, n = header["M"], header["N"]
    if len(raw) != 4 * m * n:
        raise DataError(f"{path}: expected {4 * m * n} data bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4").reshape(m, n).astype(np.float32)
    return Spectrogram(values=values, freq_resolution=header["fs"] / header["L"],
                       hop_samples=header["b"], window_len=header["L"], label=header["label"],
                       clip_id=header["clip_id"], index=header["index"])
