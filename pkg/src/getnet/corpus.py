"""Synthetic multi-site-year corpus of down-swept FM calls in colored noise.

Each site-year profile controls the ambient noise color, the call SNR, the call
count and optional interference (tonal hum, impulses, up-swept FM confounders
that share the call band).  All randomness derives from one corpus seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_io import write_manifest, write_wav
from .dsp import DESK, FrontendParams, window_count
from .errors import DataError
from .rng import RandomState

INTERFERENCE = ("tonal_hum", "impulsive_pulse", "fm_confounder")


@dataclass(frozen=True)
class DcallSpec:
    f_start: float = 90.0
    f_end: float = 35.0
    duration: float | None = None  # None: uniform in duration_range
    duration_range: tuple[float, float] = (2.0, 6.0)
    amplitude: float = 1.0
    contour: str = "linear"  # or "log" (linear-in-log-frequency sweep)

    def __post_init__(self):
        if not self.f_start > self.f_end > 0:
            raise DataError("a D-call sweeps downward: need f_start > f_end > 0")


@dataclass(frozen=True)
class SiteProfile:
    site: str
    year: int
    noise_slope: float = 0.0  # dB/octave of the ambient PSD
    snr_db: float = 6.0
    snr_spread: float = 0.0
    call_rate: float = 60.0  # calls/hour, used when n_calls is None
    n_calls: int | None = None
    interference: frozenset = frozenset()
    interference_level: float = 1.0  # relative to unit-RMS ambient noise
    call: DcallSpec = field(default_factory=DcallSpec)
    seed: int = 0
    placement: str = "free"  # or "aligned": one call per hop-length slot

    def __post_init__(self):
        if self.snr_spread < 0 or self.call_rate < 0:
            raise DataError("snr_spread and call_rate must be nonnegative")
        if self.placement not in ("free", "aligned"):
            raise DataError(f"unknown call placement {self.placement!r}")
        bad = set(self.interference) - set(INTERFERENCE)
        if bad:
            raise DataError(f"unknown interference kinds: {sorted(bad)}")
        object.__setattr__(self, "interference", frozenset(self.interference))

    @property
    def key(self) -> tuple[str, int]:
        return self.site, self.year


def _sweep_phase(f0: float, f1: float, n: int, fs: float, contour: str) -> np.ndarray:
    t = np.arange(n) / fs
    dur = n / fs
    if contour == "linear":
        return 2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * dur))
    if contour == "log":
        k = np.log(f1 / f0) / dur
        return 2 * np.pi * f0 * (np.exp(k * t) - 1) / k
    raise DataError(f"unknown chirp contour {contour!r}")


def raised_cosine_envelope(n: int, taper: float = 0.25) -> np.ndarray:
    """Flat-topped envelope with cosine ramps over ``taper`` of each end."""
    env = np.ones(n)
    m = max(1, int(round(taper * n)))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
    env[:m] = ramp
    env[n - m:] = ramp[::-1]
    return env


def synth_dcall(spec: DcallSpec, fs: float, rs: RandomState) -> tuple[np.ndarray, tuple[float, float]]:
    """Unit-peak (times ``amplitude``) down-swept chirp and its exact interval."""
    if spec.f_start >= fs / 2:
        raise DataError(f"call band up to {spec.f_start} Hz exceeds Nyquist {fs / 2} Hz")
    gen = rs.generator()
    dur = spec.duration if spec.duration is not None else gen.uniform(*spec.duration_range)
    n = int(round(dur * fs))
    phase = _sweep_phase(spec.f_start, spec.f_end, n, fs, spec.contour) + gen.uniform(0, 2 * np.pi)
    x = np.sin(phase) * raised_cosine_envelope(n)
    peak = np.max(np.abs(x)) if n else 0.0
    if peak > 0:
        x = x / peak
    return spec.amplitude * x, (0.0, n / fs)


def colored_noise(n: int, slope_db_per_octave: float, gen: np.random.Generator) -> np.ndarray:
    """Unit-RMS Gaussian noise with PSD slope in dB/octave (0 = white)."""
    spec = gen.normal(size=n // 2 + 1) + 1j * gen.normal(size=n // 2 + 1)
    f = np.arange(n // 2 + 1, dtype=float)
    exponent = slope_db_per_octave / (20 * np.log10(2))  # amplitude exponent
    scale = np.zeros_like(f)
    scale[1:] = f[1:] ** exponent
    x = np.fft.irfft(spec * scale, n=n)
    return x / np.sqrt(np.mean(x ** 2))


def synth_ambient(profile: SiteProfile, duration: float, fs: float, rs: RandomState) -> np.ndarray:
    """Colored ambient noise plus the profile's interference sources."""
    if duration <= 0:
        raise DataError("duration must be positive")
    n = int(round(duration * fs))
    gen = rs.child("ambient").generator()
    x = colored_noise(n, profile.noise_slope, gen)
    lvl = profile.interference_level
    t = np.arange(n) / fs
    if "tonal_hum" in profile.interference:
        f = gen.uniform(20, 110)
        x += lvl * np.sqrt(2) * np.sin(2 * np.pi * f * t + gen.uniform(0, 2 * np.pi))
    if "impulsive_pulse" in profile.interference:
        for start in gen.integers(0, n, size=max(1, int(duration / 10))):
            m = min(n - start, int(0.2 * fs))
            x[start:start + m] += lvl * 4 * gen.normal(size=m) * np.exp(-np.arange(m) / (0.03 * fs))
    if "fm_confounder" in profile.interference:
        spec = profile.call
        for k in range(max(1, int(duration / 30))):
            up, _ = synth_dcall(DcallSpec(spec.f_start, spec.f_end, None, spec.duration_range),
                                fs, rs.child("confounder", k))
            up = up[::-1]  # time-reversed down-sweep: an up-sweep in the same band
            if up.size >= n:
                continue
            start = int(gen.integers(0, n - up.size))
            x[start:start + up.size] += lvl * 2 * up
    return x


def band_power(x: np.ndarray, fs: float, lo: float, hi: float) -> float:
    """Mean power of ``x`` restricted to the [lo, hi] Hz band."""
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(x.size, 1 / fs)
    mask = (f >= lo) & (f <= hi)
    # Parseval over the one-sided spectrum
    weights = np.where((f == 0) | (f == fs / 2), 1.0, 2.0)
    return float(np.sum(weights[mask] * np.abs(spec[mask]) ** 2) / x.size ** 2)


def embed_call(noise: np.ndarray, call: np.ndarray, start: int, snr_db: float, fs: float,
               band: tuple[float, float]) -> np.ndarray:
    """Scale ``call`` so its power over its support is ``snr_db`` above the
    in-band power of the noise it overlaps; returns the scaled call."""
    seg = noise[start:start + call.size]
    p_noise = band_power(seg, fs, *band)
    p_call = float(np.mean(call ** 2))
    if p_call == 0 or p_noise == 0:
        return call * 0.0
    return call * np.sqrt(p_noise * 10 ** (snr_db / 10) / p_call)


def _place_calls(gen, durations, span, margin=0.5, gap=1.0):
    """Non-overlapping start times for calls within [margin, span - margin]."""
    starts = []
    for d in durations:
        for _ in range(200):
            t0 = gen.uniform(margin, span - margin - d)
            if all(t0 + d + gap <= s or t0 >= s + sd + gap for s, sd in starts):
                starts.append((t0, d))
                break
        else:
            raise DataError(f"could not place {len(durations)} calls in {span:.1f}s")
    return [s for s, _ in starts]


def _place_aligned(gen, durations, n_slots: int, slot: float, margin: float = 0.05):
    """Start times with each call inside its own hop-length slot.

    With windows two hops long and one hop apart, a call confined to one
    slot lies fully inside both windows covering that slot and touches no
    other window, so every window holds either whole calls or none.
    """
    if len(durations) > n_slots:
        raise DataError(f"{len(durations)} calls do not fit in {n_slots} slots")
    slots = gen.choice(n_slots, size=len(durations), replace=False)
    starts = []
    for d, k in zip(durations, slots):
        room = slot - d - 2 * margin
        if room < 0:
            raise DataError(f"a {d:.2f}s call does not fit a {slot:.2f}s slot")
        starts.append(k * slot + margin + gen.uniform(0, room))
    return starts


def synth_clip(profile: SiteProfile, clip_index: int, n_calls: int, clip_seconds: float,
               fs: int, rs: RandomState, frontend: FrontendParams = DESK):
    """One clip: (samples, annotations, components) with components used by tests."""
    crs = rs.child(profile.site, profile.year, profile.seed, "clip", clip_index)
    n = int(round(clip_seconds * fs))
    noise = synth_ambient(profile, clip_seconds, fs, crs)
    gen = crs.child("calls").generator()
    calls = [synth_dcall(profile.call, fs, crs.child("call", k)) for k in range(n_calls)]
    # calls must fall inside the span actually covered by analysis windows
    covered = (window_count(n, frontend.hop) + 1) * frontend.hop / fs
    durations = [iv[1] for _, iv in calls]
    if profile.placement == "aligned":
        starts = _place_aligned(gen, durations, window_count(n, frontend.hop) + 1,
                                frontend.hop / fs)
    else:
        starts = _place_calls(gen, durations, covered)
    band = (profile.call.f_end, profile.call.f_start)
    signal = np.zeros(n)
    anns, snrs = [], []
    for (x, (_, dur)), t0 in zip(calls, starts):
        i0 = int(round(t0 * fs))
        snr = profile.snr_db + (gen.uniform(-profile.snr_spread, profile.snr_spread)
                                if profile.snr_spread else 0.0)
        scaled = embed_call(noise, x, i0, snr, fs, band)
        signal[i0:i0 + x.size] += scaled
        anns.append((i0 / fs, (i0 + x.size) / fs))
        snrs.append(snr)
    return noise + signal, anns, {"noise": noise, "signal": signal, "snr_db": snrs}


def _calls_per_clip(profile: SiteProfile, clips: int, clip_seconds: float,
                    gen: np.random.Generator) -> list[int]:
    if profile.n_calls is not None:
        base, extra = divmod(profile.n_calls, clips)
        counts = [base + (1 if i < extra else 0) for i in range(clips)]
        return list(gen.permutation(counts))
    lam = profile.call_rate * clip_seconds / 3600.0
    return [int(v) for v in gen.poisson(lam, size=clips)]


def generate_corpus(profiles: Sequence[SiteProfile], clips_per_block: int, clip_seconds: float,
                    out_dir, seed: int = 0, fs: int = 250,
                    frontend: FrontendParams = DESK) -> list[dict]:
    """Write one WAV per clip plus ``manifest.jsonl``; returns the manifest records."""
    if len(profiles) < 2:
        raise DataError("need at least two site-year profiles")
    keys = [p.key for p in profiles]
    if len(set(keys)) != len(keys):
        raise DataError("site-year keys must be unique")
    if clip_seconds * fs < 2 * frontend.window:
        raise DataError(f"clip_seconds must be >= {2 * frontend.window / fs:.3f}s")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    root = RandomState(seed)
    records = []
    for profile in profiles:
        gen = root.child(profile.site, profile.year, profile.seed, "counts").generator()
        counts = _calls_per_clip(profile, clips_per_block, clip_seconds, gen)
        for c, k in enumerate(counts):
            x, anns, _ = synth_clip(profile, c, k, clip_seconds, fs, root, frontend)
            clip_id = f"{profile.site}_{profile.year}_{c:03d}"
            rel = Path("audio") / f"{clip_id}.wav"
            peak = np.max(np.abs(x))
            write_wav(out_dir / rel, 0.9 * x / peak if peak > 0 else x, fs)
            records.append({"id": clip_id, "site": profile.site, "year": profile.year,
                            "path": rel.as_posix(), "sample_rate": fs,
                            "duration_s": x.size / fs,
                            "annotations": [{"t0": round(a, 6), "t1": round(b, 6),
                                             "label": "dcall"} for a, b in anns]})
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def desk_profiles(scale: float = 0.03, min_calls: int = 3,
                  separable: bool = False) -> list[SiteProfile]:
    """Rich / medium / sparse support blocks in the 1180:553:47 call ratio, scaled.

    The sparse block also carries a shifted noise regime with interference.
    Calls last 2-4 s so each fits inside one 8.2 s desk window.

    ``separable=True`` gives the easy variant used for learnability checks:
    calls at 10 dB, aligned to window slots, and a sparse block that differs
    only in its noise slope (no interference).
    """
    counts = [max(min_calls, int(round(c * scale))) for c in (1180, 553, 47)]
    if separable:
        call = DcallSpec(duration_range=(2.0, 3.5))
        common = dict(snr_db=10.0, snr_spread=2.0, call=call, placement="aligned")
        return [
            SiteProfile("kerguelen", 2015, noise_slope=-3.0, n_calls=counts[0], seed=1, **common),
            SiteProfile("casey", 2017, noise_slope=-3.0, n_calls=counts[1], seed=2, **common),
            SiteProfile("balleny", 2015, noise_slope=-9.0, n_calls=counts[2], seed=3, **common),
        ]
    call = DcallSpec(duration_range=(2.0, 4.0))
    return [
        SiteProfile("kerguelen", 2015, noise_slope=-3.0, snr_db=6.0, snr_spread=2.0,
                    n_calls=counts[0], call=call, seed=1),
        SiteProfile("casey", 2017, noise_slope=-3.0, snr_db=6.0, snr_spread=2.0,
                    n_calls=counts[1], call=call, seed=2),
        SiteProfile("balleny", 2015, noise_slope=-9.0, snr_db=4.0, snr_spread=2.0,
                    n_calls=counts[2], interference=frozenset({"tonal_hum", "fm_confounder"}),
                    call=call, seed=3),
    ]
