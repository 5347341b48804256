import numpy as np
import pytest
from scipy.signal import welch

from conftest import small_profiles
from getnet.audio_io import read_manifest, read_wav
from getnet.corpus import (INTERFERENCE, DcallSpec, SiteProfile, colored_noise, desk_profiles,
                           generate_corpus, synth_ambient, synth_clip, synth_dcall)
from getnet.dsp import DESK, Annotation, AudioClip, extract_clip, stft
from getnet.errors import DataError
from getnet.rng import RandomState

FS = 250


def test_midpoint_frequency_by_ridge():
    x, (t0, t1) = synth_dcall(DcallSpec(duration=6.0), FS, RandomState(0))
    mid = x.size // 2
    frame = x[mid - 64:mid + 64] * np.hanning(128)
    spec = np.abs(np.fft.rfft(frame, 8192))
    f = np.fft.rfftfreq(8192, 1 / FS)
    assert abs(f[spec.argmax()] - (90 + 35) / 2) <= 1.0
    assert (t0, t1) == (0.0, 6.0)


def test_call_is_down_swept():
    x, _ = synth_dcall(DcallSpec(duration=5.0), FS, RandomState(1))
    grid = np.abs(stft(x, 128, 32, "hann"))[:, :64]
    ridge = grid.argmax(axis=1)
    active = grid.max(axis=1) > 0.2 * grid.max()
    r = ridge[active]
    assert r[0] > r[-1] and np.all(np.diff(r) <= 1)


def test_duration_samples_and_peak():
    x, iv = synth_dcall(DcallSpec(duration=4.0), FS, RandomState(2))
    assert x.size == 1000 and iv == (0.0, 4.0)
    assert np.isclose(np.abs(x).max(), 1.0)


def test_zero_amplitude_is_silent():
    x, _ = synth_dcall(DcallSpec(duration=2.0, amplitude=0.0), FS, RandomState(0))
    assert not np.any(x)


def test_band_violations():
    with pytest.raises(DataError):
        DcallSpec(f_start=30, f_end=40)
    with pytest.raises(DataError):
        synth_dcall(DcallSpec(f_start=130, f_end=40), FS, RandomState(0))


def psd(x):
    f, p = welch(x, fs=FS, nperseg=512)
    band = (f >= 5) & (f <= 120)
    return f[band], 10 * np.log10(p[band])


def test_white_noise_is_flat():
    x = colored_noise(FS * 600, 0.0, np.random.default_rng(0))
    _, db = psd(x)
    assert np.ptp(db - db.mean()) <= 6.0  # within +-3 dB


@pytest.mark.parametrize("slope", [-6.0, -3.0, -9.0])
def test_noise_slope_regression(slope):
    x = colored_noise(FS * 600, slope, np.random.default_rng(1))
    f, db = psd(x)
    fit = np.polyfit(np.log2(f), db, 1)[0]
    assert abs(fit - slope) <= 1.5


def test_ambient_determinism_and_errors():
    prof = SiteProfile("a", 1, noise_slope=-3, interference=frozenset(INTERFERENCE))
    a = synth_ambient(prof, 60.0, FS, RandomState(4))
    b = synth_ambient(prof, 60.0, FS, RandomState(4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, synth_ambient(prof, 60.0, FS, RandomState(5)))
    with pytest.raises(DataError):
        synth_ambient(prof, 0.0, FS, RandomState(0))
    with pytest.raises(DataError):
        SiteProfile("a", 1, interference=frozenset({"sonar"}))


def measured_snr(signal, noise, start, stop, band=(35.0, 90.0)):
    """In-band SNR via brick-wall filtering of the overlapped noise segment."""
    seg = noise[start:stop]
    spec = np.fft.rfft(seg)
    f = np.fft.rfftfreq(seg.size, 1 / FS)
    spec[(f < band[0]) | (f > band[1])] = 0
    p_noise = np.mean(np.fft.irfft(spec, seg.size) ** 2)
    p_call = np.mean(signal[start:stop] ** 2)
    return 10 * np.log10(p_call / p_noise)


@pytest.mark.parametrize("slope,target", [(0.0, 6.0), (-9.0, 0.0)])
def test_snr_control(slope, target):
    prof = SiteProfile("s", 1, noise_slope=slope, snr_db=target, snr_spread=2.0,
                       call=DcallSpec(duration_range=(2.0, 4.0)))
    vals = []
    for c in range(10):
        _, anns, parts = synth_clip(prof, c, 6, 65.536, FS, RandomState(9))
        for (t0, t1), want in zip(anns, parts["snr_db"]):
            i0, i1 = int(round(t0 * FS)), int(round(t1 * FS))
            vals.append(measured_snr(parts["signal"], parts["noise"], i0, i1) - want)
    assert len(vals) >= 50
    assert abs(np.mean(vals)) <= 2.0


def test_corpus_manifest(tmp_path):
    recs = generate_corpus(small_profiles(), 2, 32.768, tmp_path, seed=1)
    assert recs == read_manifest(tmp_path / "manifest.jsonl")
    assert len({(r["site"], r["year"]) for r in recs}) == 3
    for r in recs:
        path = tmp_path / r["path"]
        assert path.exists()
        rate, x = read_wav(path)
        assert rate == FS and x.size / FS == r["duration_s"]
        for a in r["annotations"]:
            assert 0 <= a["t0"] < a["t1"] <= r["duration_s"]
    counts = {}
    for r in recs:
        counts[r["site"]] = counts.get(r["site"], 0) + len(r["annotations"])
    assert counts == {"alpha": 6, "beta": 4, "gamma": 3}


def test_corpus_is_deterministic(tmp_path):
    generate_corpus(small_profiles(), 2, 32.768, tmp_path / "a", seed=3)
    generate_corpus(small_profiles(), 2, 32.768, tmp_path / "b", seed=3)
    for wav in sorted((tmp_path / "a" / "audio").iterdir()):
        assert wav.read_bytes() == (tmp_path / "b" / "audio" / wav.name).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_text() == \
        (tmp_path / "b" / "manifest.jsonl").read_text().replace(str(tmp_path / "b"), str(tmp_path / "a"))


def test_zero_call_rate_gives_no_annotations(tmp_path):
    profs = [SiteProfile("a", 1, call_rate=0.0), SiteProfile("b", 1, call_rate=120.0)]
    recs = generate_corpus(profs, 2, 32.768, tmp_path)
    assert all(not r["annotations"] for r in recs if r["site"] == "a")


def test_corpus_errors(tmp_path):
    with pytest.raises(DataError):
        generate_corpus(small_profiles()[:1], 1, 32.768, tmp_path)
    with pytest.raises(DataError):
        generate_corpus([SiteProfile("a", 1), SiteProfile("a", 1)], 1, 32.768, tmp_path)
    with pytest.raises(DataError):
        generate_corpus(small_profiles(), 1, 10.0, tmp_path)


@pytest.mark.parametrize("placement", ["free", "aligned"])
def test_every_annotation_has_a_positive_window(placement):
    call = DcallSpec(duration_range=(2.0, 4.0))
    prof = SiteProfile("s", 1, snr_db=5, call=call, placement=placement)
    for c in range(6):
        x, anns, _ = synth_clip(prof, c, 5, 65.536, FS, RandomState(c))
        clip = AudioClip("c", "s", 1, FS, x, [Annotation(a, b) for a, b in anns])
        specs = extract_clip(clip, DESK)
        hop = DESK.hop / FS
        for a, b in anns:
            assert any(s.index * hop <= a and b <= s.index * hop + 2 * hop and s.label == 1
                       for s in specs)


def test_aligned_windows_hold_whole_calls_or_none():
    prof = SiteProfile("s", 1, call=DcallSpec(duration_range=(2.0, 3.5)), placement="aligned")
    hop = DESK.hop / FS
    for c in range(6):
        _, anns, _ = synth_clip(prof, c, 4, 65.536, FS, RandomState(c))
        for a, b in anns:
            assert int(a // hop) == int(b // hop)  # one slot per call
        for k in range(7):
            w0, w1 = k * hop, (k + 2) * hop
            for a, b in anns:
                inside = w0 <= a and b <= w1
                disjoint = b <= w0 or a >= w1
                assert inside or disjoint


def test_aligned_overflow():
    prof = SiteProfile("s", 1, call=DcallSpec(duration_range=(2.0, 3.5)), placement="aligned")
    with pytest.raises(DataError):
        synth_clip(prof, 0, 50, 65.536, FS, RandomState(0))
    with pytest.raises(DataError):
        SiteProfile("s", 1, placement="grid")


def test_noise_slope_shifts_spectrogram_population():
    def population(slope):
        prof = SiteProfile("s", 1, noise_slope=slope)
        out = []
        for c in range(6):
            x = synth_ambient(prof, 65.536, FS, RandomState(c))
            clip = AudioClip(f"c{c}", "s", 1, FS, x, [])
            out.extend(s.values for s in extract_clip(clip, DESK))
        return np.array(out)

    a, b = population(-3.0), population(-9.0)
    between = np.linalg.norm(a.mean(axis=0) - b.mean(axis=0))
    within = max(np.sqrt(np.mean(np.sum((p - p.mean(axis=0)) ** 2, axis=(1, 2)))) for p in (a, b))
    assert between > within


def test_desk_profiles_scale_support_ratio():
    profs = desk_profiles(scale=0.1)
    assert [p.n_calls for p in profs] == [118, 55, 5]
    assert profs[2].noise_slope != profs[0].noise_slope
    assert [p.n_calls for p in desk_profiles()] == [35, 17, 3]


def test_separable_profiles_shift_only_the_noise_slope():
    a, b, c = desk_profiles(separable=True)
    assert [p.n_calls for p in (a, b, c)] == [35, 17, 3]
    assert a.noise_slope == b.noise_slope != c.noise_slope
    assert all(not p.interference and p.placement == "aligned" for p in (a, b, c))
    assert {(p.snr_db, p.call) for p in (a, b, c)} == {(a.snr_db, a.call)}


def test_loaded_windows_carry_labels(small_set):
    assert set(np.unique(small_set.y)) == {0, 1}
    assert small_set.x.shape[1:] == DESK.spectrogram_shape
    assert set(small_set.site) == {"alpha", "beta", "gamma"}
