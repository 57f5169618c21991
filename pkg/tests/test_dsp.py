import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from callpipe.dsp import (PcenParams, Preprocessor, TimeFreqGrid, amplitude_to_db, hann, hz_to_mel, mel_band_edges,
                          mel_filterbank, normalize_peak, normalize_sliding, normalize_unit, pcen, power_spectrogram,
                          stft, triangle_weights)


def grid(values):
    v = np.asarray(values, dtype=np.float64)
    return TimeFreqGrid(v, np.arange(v.shape[0], dtype=float), 0.01, "power")


def two_sided_power(frame_spec, nfft):
    p = np.abs(frame_spec) ** 2
    return (p[0] + p[-1] + 2 * p[1:-1].sum()) / nfft


def test_stft_shape_and_tone_bin():
    sr, nfft, hop = 8000, 256, 64
    t = np.arange(4000) / sr
    x = np.cos(2 * np.pi * (5 * sr / nfft) * t)
    X = stft(x, nfft, hop)
    assert X.shape == (nfft // 2 + 1, len(x) // hop + 1)
    assert np.argmax(np.abs(X).mean(axis=1)) == 5


def test_stft_zero_and_empty():
    assert not np.any(stft(np.zeros(1000), 64, 16))
    assert stft(np.zeros(0), 64, 16).shape == (33, 0)


@pytest.mark.parametrize("nfft,hop", [(6, 3), (100, 10), (64, 0), (64, 65)])
def test_stft_rejects_bad_params(nfft, hop):
    with pytest.raises(ValueError):
        stft(np.zeros(100), nfft, hop)


def test_parseval(rng):
    nfft, hop = 128, 32
    x = rng.standard_normal(2000)
    X = stft(x, nfft, hop)
    padded = np.pad(x, nfft // 2, mode="reflect")
    w = hann(nfft)
    for t in range(X.shape[1]):
        frame = padded[t * hop:t * hop + nfft] * w
        energy = np.sum(frame ** 2)
        assert abs(two_sided_power(X[:, t], nfft) - energy) <= 1e-6 * energy


def test_power_homogeneity(rng):
    x = rng.standard_normal(1000)
    a = power_spectrogram(x, 64, 16).values
    b = power_spectrogram(3.0 * x, 64, 16).values
    assert np.allclose(b, 9.0 * a, rtol=1e-12, atol=0)
    assert power_spectrogram(x, 64, 16).scale == "power"


def test_peak_bin_power_closed_form():
    sr, nfft, A = 8000, 256, 0.7
    t = np.arange(8000) / sr
    x = A * np.cos(2 * np.pi * (10 * sr / nfft) * t)
    g = power_spectrogram(x, nfft, 64, sr)
    peak = g.values[10, 5:-5].mean()
    expected = (A * nfft * 0.5 / 2) ** 2
    assert abs(peak / expected - 1) < 0.01
    assert g.bin_hz[10] == 10 * sr / nfft


def test_db_examples():
    out = amplitude_to_db(grid([[1.0, 100.0, 0.0]])).values[0]
    assert out[0] == 0.0
    assert out[1] == pytest.approx(20.0)
    assert out[2] == pytest.approx(-100.0)
    floored = amplitude_to_db(grid([[1.0, 100.0, 0.0]]), top_db=30).values[0]
    assert floored.tolist() == pytest.approx([0.0, 20.0, -10.0])
    with pytest.raises(ValueError):
        amplitude_to_db(grid([[1.0]]), eps=0)


def test_mel_curve():
    assert hz_to_mel(0) == 0
    assert hz_to_mel(700) == pytest.approx(781.177, abs=0.01)


def test_filterbank_apex_and_coverage():
    sr, nfft, n_mels = 8000, 512, 24
    fb = mel_filterbank(sr, nfft, n_mels)
    assert fb.shape == (n_mels, nfft // 2 + 1)
    assert np.all(fb >= 0)
    freqs = np.fft.rfftfreq(nfft, 1 / sr)
    edges = mel_band_edges(n_mels, 0, sr / 2)
    # each filter peaks at its own centre frequency with value 1, above any bin sample
    at_centres = triangle_weights(edges[1:-1], edges)
    assert np.allclose(np.diag(at_centres), 1.0)
    assert np.all(np.diag(at_centres) >= at_centres.max(axis=1) - 1e-12)
    assert np.all(fb.max(axis=1) <= 1.0 + 1e-12)
    inner = (freqs > edges[1]) & (freqs < edges[-2])
    assert np.all(fb[:, inner].sum(axis=0) > 0)


@pytest.mark.parametrize("kw", [dict(fmin=-1), dict(fmin=100, fmax=50), dict(fmax=5000), dict(n_mels=0)])
def test_filterbank_preconditions(kw):
    args = dict(sr=8000, nfft=256, n_mels=8)
    args.update(kw)
    with pytest.raises(ValueError):
        mel_filterbank(**args)


def test_pcen_examples(rng):
    e = rng.random((4, 50))
    same = pcen(grid(e), PcenParams(alpha=0, delta=0, r=1, eps=0)).values
    assert np.array_equal(same, e)
    const = np.full((3, 20), 2.5)
    ones = pcen(grid(const), PcenParams(alpha=1, delta=0, r=1, eps=0)).values
    assert np.allclose(ones, 1.0, rtol=0, atol=1e-12)
    zero = pcen(grid(np.zeros((2, 10))), PcenParams(delta=1, r=0.5)).values
    assert np.all(zero == 0)
    with pytest.raises(ValueError):
        pcen(grid(-e))


def test_pcen_params_validation():
    for kw in (dict(eps=-1), dict(s=0), dict(s=1.5), dict(r=0)):
        with pytest.raises(ValueError):
            PcenParams(**kw)


def test_pcen_zero_init_differs_at_start():
    e = np.full((1, 5), 4.0)
    a = pcen(grid(e), init="first-frame").values
    b = pcen(grid(e), init="zeros").values
    assert b[0, 0] > a[0, 0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 12), elements=st.floats(1e-3, 1e3)), st.floats(1e-3, 1e3))
def test_pcen_agc_invariance(e, c):
    p = PcenParams(alpha=1.0, delta=0.0, r=0.5, eps=0.0)
    a = pcen(grid(e), p).values
    b = pcen(grid(c * e), p).values
    assert np.allclose(b, a, rtol=1e-6, atol=0)


def test_normalize_examples():
    assert normalize_peak(np.array([0.5, -2.0, 1.0])).tolist() == [0.25, -1.0, 0.5]
    assert not np.any(normalize_peak(np.zeros(4)))
    assert normalize_unit(np.array([1.0, 3.0])).tolist() == [-1.0, 1.0]
    assert not np.any(normalize_unit(np.full(5, 7.0)))


def test_sliding_examples():
    g = grid([[0, 0, 10, 0, 0]])
    assert normalize_sliding(g, 3).values[0, 2] == pytest.approx(1.4142, abs=1e-4)
    assert not np.any(normalize_sliding(g, 1).values)
    assert not np.any(normalize_sliding(grid(np.full((2, 6), 3.0)), 5).values)
    with pytest.raises(ValueError):
        normalize_sliding(g, 4)


finite_grids = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 12)), elements=st.floats(-1e3, 1e3))


@settings(max_examples=100, deadline=None)
@given(finite_grids)
def test_peak_idempotent(x):
    once = normalize_peak(x)
    if np.max(np.abs(x)) >= 1e-12:
        assert np.max(np.abs(once)) == pytest.approx(1.0)
    assert np.allclose(normalize_peak(once), once, rtol=0, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(finite_grids)
def test_unit_idempotent(x):
    once = normalize_unit(x)
    if x.std() >= 1e-6:
        assert abs(once.mean()) < 1e-9
        assert abs(once.std() - 1) < 1e-6
    assert np.allclose(normalize_unit(once), once, rtol=0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(0, 3000), elements=st.floats(-1, 1)))
def test_power_grid_invariants(x):
    g = power_spectrogram(x, 64, 32)
    assert np.all(g.values >= 0) and np.all(np.isfinite(g.values))
    if x.size:
        assert g.shape == (33, x.size // 32 + 1)


def test_preprocessor_shapes_and_modes(rng):
    x = rng.standard_normal(8000) * 0.1
    for norm in ("peak", "unit", "sliding", "none"):
        pre = Preprocessor({"representation": "mel_db", "nfft": 256, "hop": 256, "n_mels": 32,
                            "normalization": norm}, 8000)
        out = pre(x)
        assert out.shape == pre.output_shape(8000) == (32, 32)
        assert np.all(np.isfinite(out.values))
    lin = Preprocessor({"representation": "spectrogram", "nfft": 128, "hop": 64, "normalization": "none"}, 8000)
    assert lin(x).shape == (65, 8000 // 64 + 1)
    with pytest.raises(ValueError):
        Preprocessor({"representation": "cqt"}, 8000)
