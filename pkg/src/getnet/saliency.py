"""Input-gradient saliency and spectrogram overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .dsp import FrontendParams, Spectrogram
from .errors import DataError
from .model import Model, as_batch
from .nn import ops
from .nn.tensor import Tensor


@dataclass
class SaliencyMap:
    """Nonnegative (M, N) map of |d y_k / d input| with its source."""

    values: np.ndarray
    source: Spectrogram | None
    target: int


def _values(spec) -> np.ndarray:
    return spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)


def saliency_batch(model: Model, batch, target: int = 1, dtype=np.float64) -> np.ndarray:
    """(n, M, N) saliency for a batch in infer mode, one backward pass.

    Samples do not interact in infer mode, so the gradient of the summed
    outputs gives every sample's own input gradient.
    """
    if target not in (0, 1):
        raise DataError("target class must be 0 or 1")
    x = as_batch(batch, dtype)
    if tuple(x.shape[1:3]) != model.config.input_shape:
        raise DataError(f"input shape {tuple(x.shape[1:3])} != configured "
                        f"{model.config.input_shape}")
    net = model if _dtype_of(model) == np.dtype(dtype) else model.astype(dtype)
    xt = Tensor(x, requires_grad=True)
    out = net.forward_tensor(xt, ops.INFER)
    # y_0 = 1 - y_1 for a single sigmoid output
    sign = 1.0 if target == 1 else -1.0
    out.backward(np.full(out.shape, sign, dtype=out.dtype))
    return np.abs(xt.grad).max(axis=-1)


def _dtype_of(model: Model) -> np.dtype:
    return next(iter(model.named_params().values())).dtype


def saliency_map(model: Model, spectrogram, target: int = 1, dtype=np.float64) -> SaliencyMap:
    """Channel-max of the absolute gradient of class ``target`` w.r.t. the input."""
    vals = _values(spectrogram)
    if vals.ndim != 2:
        raise DataError("saliency_map takes one (M, N) spectrogram")
    sal = saliency_batch(model, vals[None], target, dtype)[0]
    return SaliencyMap(sal, spectrogram if isinstance(spectrogram, Spectrogram) else None, target)


def call_mask(shape: tuple[int, int], intervals: Sequence[tuple[float, float]],
              params: FrontendParams, band: tuple[float, float] | None = None) -> np.ndarray:
    """Boolean (M, N) mask of the time-frequency cells covered by calls.

    ``intervals`` are in seconds relative to the window start.  A frame is
    inside when its span overlaps an interval; with ``band`` only bins whose
    centre frequency lies in [lo, hi] Hz are marked.
    """
    m, n = shape
    fs, b, L = params.sample_rate, params.stft_hop, params.n_fft
    starts = np.arange(n) * b / fs
    ends = starts + L / fs
    cols = np.zeros(n, dtype=bool)
    for t0, t1 in intervals:
        cols |= (starts < t1) & (ends > t0)
    rows = np.ones(m, dtype=bool)
    if band is not None:
        freqs = np.arange(m) * fs / L
        rows = (freqs >= band[0]) & (freqs <= band[1])
    return rows[:, None] & cols[None, :]


def window_intervals(annotations: Sequence[tuple[float, float]], index: int,
                     params: FrontendParams) -> list[tuple[float, float]]:
    """Annotation intervals clipped to window ``index`` and shifted to its start."""
    t0w = index * params.hop / params.sample_rate
    t1w = t0w + params.window / params.sample_rate
    out = []
    for a, b in annotations:
        lo, hi = max(a, t0w), min(b, t1w)
        if hi > lo:
            out.append((lo - t0w, hi - t0w))
    return out


def localization_ratio(values: np.ndarray, mask: np.ndarray) -> float:
    """Mean saliency inside ``mask`` over mean saliency outside it."""
    if mask.shape != values.shape or not mask.any() or mask.all():
        raise DataError("mask must match the map and split it into two non-empty parts")
    outside = float(values[~mask].mean())
    inside = float(values[mask].mean())
    return inside / outside if outside > 0 else float("inf")


def _gray(spec: np.ndarray) -> np.ndarray:
    lo, hi = float(spec.min()), float(spec.max())
    g = (spec - lo) / (hi - lo) if hi > lo else np.zeros_like(spec, dtype=np.float64)
    return g


def render_overlay(spectrogram, saliency, colormap: str = "viridis",
                   scale: int = 1) -> np.ndarray:
    """(M*scale, N*scale, 3) uint8 image, low frequencies at the bottom.

    Each pixel blends the grayscale spectrogram with the colormap colour of
    the normalized saliency, using the normalized saliency as alpha.
    """
    spec = np.asarray(_values(spectrogram), dtype=np.float64)
    sal = np.asarray(saliency.values if isinstance(saliency, SaliencyMap) else saliency,
                     dtype=np.float64)
    if spec.shape != sal.shape or spec.ndim != 2:
        raise DataError(f"spectrogram {spec.shape} and saliency {sal.shape} must match")
    if np.any(sal < 0):
        raise DataError("saliency must be nonnegative")
    peak = float(sal.max())
    alpha = sal / peak if peak > 0 else np.zeros_like(sal)
    gray = np.repeat(_gray(spec)[..., None], 3, axis=-1)
    heat = colormaps[colormap](alpha)[..., :3]
    rgb = (1 - alpha[..., None]) * gray + alpha[..., None] * heat
    img = np.round(rgb[::-1] * 255).astype(np.uint8)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    return img


def top_salient(saliency, j: int, spec: Spectrogram | None = None,
                params: FrontendParams | None = None) -> list[dict]:
    """The ``j`` largest cells as (time index, frequency index, value) records."""
    vals = np.asarray(saliency.values if isinstance(saliency, SaliencyMap) else saliency)
    flat = np.argsort(-vals, axis=None, kind="stable")[:j]
    out = []
    for k in flat:
        f, i = np.unravel_index(k, vals.shape)
        rec = {"time_index": int(i), "freq_index": int(f), "value": float(vals[f, i])}
        if params is not None:
            start = (spec.index * params.hop if spec is not None else 0) / params.sample_rate
            rec["time_s"] = start + i * params.stft_hop / params.sample_rate
            rec["freq_hz"] = f * params.sample_rate / params.n_fft
        out.append(rec)
    return out


def export_overlay(spectrogram, saliency, path, *, colormap: str = "viridis", scale: int = 1,
                   top_j: int = 0, params: FrontendParams | None = None) -> Path:
    """Write an 8-bit RGB PNG overlay; with ``top_j`` also a ``.json`` sidecar."""
    path = Path(path)
    img = render_overlay(spectrogram, saliency, colormap, scale)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")
    if top_j:
        spec = spectrogram if isinstance(spectrogram, Spectrogram) else None
        side = {"clip_id": spec.clip_id if spec else None,
                "index": spec.index if spec else None,
                "top": top_salient(saliency, top_j, spec, params)}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2) + "\n", encoding="utf-8")
    return path
