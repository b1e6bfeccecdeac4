import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vcrestore.degrade import mix_at_snr
from vcrestore.metrics import (
    MetricError,
    MetricReport,
    cer,
    edit_distance,
    gcc_phat_align,
    lsd,
    measured_snr,
    normalize_text,
    secs,
    shift,
    stoi,
)
from vcrestore.signal import SAMPLE_RATE, MelSpectrogram, Waveform

SR = SAMPLE_RATE


def babble(seconds=2.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(seconds * SR)
    t = np.arange(n) / SR
    env = 0.5 + 0.5 * np.sin(2 * np.pi * 3 * t + rng.uniform(0, 6))
    x = np.convolve(rng.standard_normal(n), np.hanning(9), "same") * env
    return Waveform(0.3 * x / np.abs(x).max(), SR)


# STOI


def test_stoi_requires_alignment():
    with pytest.raises(MetricError, match="align first"):
        stoi(babble(), babble(1.5))


def test_stoi_rejects_silent_clean():
    with pytest.raises(MetricError):
        stoi(Waveform(np.zeros(SR), SR), babble(1.0))


def test_stoi_self_and_scale():
    x = babble()
    assert abs(stoi(x, x) - 1.0) < 1e-6
    assert abs(stoi(x, x.with_samples(0.37 * x.samples)) - 1.0) < 1e-6


def test_stoi_drops_with_noise():
    x = babble()
    noise = Waveform(np.random.default_rng(3).standard_normal(len(x)), SR)
    scores = [stoi(x, mix_at_snr(x, noise, s)) for s in (20, 0, -10)]
    assert scores[0] > scores[1] > scores[2]
    assert all(-1 <= s <= 1 for s in scores)


# GCC-PHAT


def test_gcc_identity_is_zero_lag():
    x = babble(1.0)
    lag, aligned = gcc_phat_align(x, x, 500)
    assert lag == 0
    assert np.array_equal(aligned.samples, x.samples)


def test_gcc_sign_convention_and_realignment():
    x = babble(1.0, seed=2)
    delayed = x.with_samples(shift(x.samples, 137, len(x)))
    lag, aligned = gcc_phat_align(x, delayed, 400)
    assert lag == -137
    assert np.array_equal(aligned.samples[: len(x) - 137], x.samples[: len(x) - 137])


def test_gcc_noisy_scaled_delay(rng):
    x = babble(1.0, seed=4)
    est = x.with_samples(0.3 * shift(x.samples, 50, len(x)))
    noisy = mix_at_snr(est, Waveform(rng.standard_normal(len(x)), SR), 10.0)
    lag, _ = gcc_phat_align(x, noisy, 400)
    assert abs(lag + 50) <= 1


def test_gcc_errors():
    x = babble(0.1)
    with pytest.raises(MetricError):
        gcc_phat_align(x, Waveform(np.zeros(len(x)), SR), 10)
    with pytest.raises(MetricError):
        gcc_phat_align(x, x, len(x))


def test_shift_pads_and_trims():
    x = np.arange(1.0, 6.0)
    assert shift(x, 2, 5).tolist() == [0, 0, 1, 2, 3]
    assert shift(x, -2, 4).tolist() == [3, 4, 5, 0]


# SECS


def test_secs_extremes():
    e = np.array([0.6, 0.8])
    assert secs(e, e) == pytest.approx(1.0)
    assert secs(e, -e) == pytest.approx(-1.0)
    assert secs(e, np.array([-0.8, 0.6])) == pytest.approx(0.0, abs=1e-12)


# text and CER


def test_normalize_examples():
    assert normalize_text("Hello,  WORLD.") == "hello world"
    assert normalize_text("don't") == "don't"
    assert normalize_text("‘Tis the rock’n’roll 'quote'") == "tis the rock'n'roll quote"


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40))
def test_normalize_idempotent(s):
    n = normalize_text(s)
    assert normalize_text(n) == n


def test_cer_examples():
    assert cer("the cat", "The cat!") == 0.0
    assert cer("abc", "axc") == pytest.approx(1 / 3)
    assert cer("abc", "") == 1.0
    with pytest.raises(MetricError):
        cer("?!", "abc")


@settings(max_examples=100, deadline=None)
@given(st.text("abc ", max_size=12), st.text("abc ", max_size=12))
def test_edit_distance_symmetric_and_bounded(a, b):
    d = edit_distance(a, b)
    assert d == edit_distance(b, a)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
    assert (d == 0) == (a == b)


# SNR and LSD


def test_measured_snr_examples():
    x = babble(0.5)
    assert measured_snr(x, x.with_samples(2 * x.samples)) == pytest.approx(0.0, abs=1e-12)
    noise = Waveform(np.random.default_rng(0).standard_normal(len(x)), SR)
    mix = mix_at_snr(x, noise, 15.0)
    assert abs(measured_snr(x, mix) - 15.0) < 0.01
    scaled = measured_snr(x.with_samples(3 * x.samples), mix.with_samples(3 * mix.samples))
    assert scaled == pytest.approx(measured_snr(x, mix), abs=1e-9)
    assert measured_snr(x, x) == math.inf
    with pytest.raises(MetricError):
        measured_snr(x, babble(0.4))


def test_lsd_examples(rng):
    a = MelSpectrogram(rng.normal(size=(20, 64)))
    b = MelSpectrogram(rng.normal(size=(20, 64)))
    assert lsd(a, a) == 0.0
    assert lsd(a, MelSpectrogram(a.values + 1.0)) == pytest.approx(10 / math.log(10), abs=1e-12)
    assert lsd(a, b) == lsd(b, a)
    with pytest.raises(MetricError):
        lsd(a, MelSpectrogram(rng.normal(size=(19, 64))))


def test_metric_report_fields():
    r = MetricReport("u", 5.0, "noisy", stoi=0.9)
    d = r.to_dict()
    assert d["utt_id"] == "u" and d["cer"] is None and d["stoi"] == 0.9
