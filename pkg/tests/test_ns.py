import numpy as np
import pytest
import torch

from vcrestore import training as T
from vcrestore.checkpoint import ModelError
from vcrestore.degrade import mix_at_snr
from vcrestore.ns import (
    NsConfig,
    build_ns,
    init_train_state,
    load_ns,
    ns_enhance,
    ns_forward,
    ns_train_step,
    save_ns,
)
from vcrestore.signal import HOP, N_MELS, SAMPLE_RATE, MelSpectrogram, Waveform, mel_analyze


def random_mel(frames, seed=0):
    return MelSpectrogram(np.random.default_rng(seed).uniform(-10, 3, size=(frames, N_MELS)))


def test_config_fixes_band_count():
    with pytest.raises(ValueError):
        NsConfig(mel_bands=80)
    assert build_ns().config.mel_bands == N_MELS


def test_parameter_count_is_reported():
    n = build_ns().n_parameters
    assert 100_000 < n < 1_000_000


def test_zero_head_gives_identity():
    model = build_ns(seed=1).zero_residual_head()
    m = random_mel(23)
    assert np.array_equal(ns_forward(model, m).values, m.values.astype(np.float32).astype(np.float64))


def test_output_equals_input_plus_residual():
    model = build_ns(seed=2).eval()
    x = torch.as_tensor(random_mel(20).values, dtype=torch.float32)[None]
    with torch.no_grad():
        assert torch.equal(model(x) - x, (x + model.residual(x)) - x)


@pytest.mark.parametrize("frames", [1, 17, 34])
def test_any_frame_count(frames):
    out = ns_forward(build_ns(), random_mel(frames))
    assert out.values.shape == (frames, N_MELS)
    assert np.all(np.isfinite(out.values))


def test_band_mismatch_raises():
    with pytest.raises(ValueError, match="Mel bands"):
        ns_forward(build_ns(), MelSpectrogram(np.zeros((5, 80))))


def test_residual_is_time_equivariant():
    model = build_ns(seed=3).eval()
    base = random_mel(120, seed=4).values
    k = 4
    shifted = np.concatenate([random_mel(k, seed=5).values, base])
    with torch.no_grad():
        r0 = model.residual(torch.as_tensor(base, dtype=torch.float32)[None])[0].numpy()
        r1 = model.residual(torch.as_tensor(shifted, dtype=torch.float32)[None])[0].numpy()
    interior = slice(40, 80)
    np.testing.assert_allclose(r1[k:][interior], r0[interior], atol=1e-5)


def test_train_step_zero_loss_on_identity_pairs():
    state = init_train_state(seed=0)
    state.model.zero_residual_head()
    m = random_mel(16).values[None]
    _, loss = ns_train_step(state, (m, m))
    assert loss == pytest.approx(0.0, abs=1e-7)
    assert state.step == 1


def test_train_step_rejects_unpaired_and_nan():
    state = init_train_state(seed=0)
    with pytest.raises(ValueError):
        ns_train_step(state, (np.zeros((1, 8, N_MELS)), np.zeros((1, 9, N_MELS))))
    bad = np.full((1, 8, N_MELS), np.nan)
    with pytest.raises(FloatingPointError):
        ns_train_step(state, (bad, bad))


def test_identical_seeds_give_identical_trajectories():
    rng = np.random.default_rng(0)
    batches = [(rng.normal(size=(2, 16, N_MELS)), rng.normal(size=(2, 16, N_MELS))) for _ in range(4)]
    runs = []
    for _ in range(2):
        state = init_train_state(seed=5)
        runs.append([ns_train_step(state, b)[1] for b in batches])
    assert runs[0] == runs[1]


def test_checkpoint_round_trip_is_exact(tmp_path):
    state = init_train_state(seed=6)
    m = random_mel(16).values[None]
    ns_train_step(state, (m, m - 1.0))
    save_ns(tmp_path / "ns.pt", state)
    back = load_ns(tmp_path / "ns.pt")
    assert back.step == 1 and back.rng_seed == 6
    for (k, a), (_, b) in zip(state.model.state_dict().items(), back.model.state_dict().items()):
        assert torch.equal(a, b), k
    assert np.array_equal(ns_forward(state.model.eval(), random_mel(9)).values, ns_forward(back.model, random_mel(9)).values)


def test_load_rejects_wrong_kind(tmp_path):
    from vcrestore import checkpoint

    checkpoint.save(tmp_path / "x.pt", kind="vc", config={}, modules={}, step=0, seed=0)
    with pytest.raises(ModelError, match="expected 'ns'"):
        load_ns(tmp_path / "x.pt")
    with pytest.raises(ModelError, match="not found"):
        load_ns(tmp_path / "missing.pt")


def test_enhance_untrained_zero_head_and_duration():
    model = build_ns().zero_residual_head()
    w = Waveform(np.random.default_rng(1).standard_normal(SAMPLE_RATE // 2) * 0.1, SAMPLE_RATE)
    wav, mel = ns_enhance(model, w, griffin_lim_iters=2)
    np.testing.assert_allclose(mel.values, mel_analyze(w).values, atol=1e-5)
    assert abs(len(wav) - len(w)) <= HOP


def test_training_reduces_loss_on_small_set(toy_corpus):
    utts = T.load_utts(toy_corpus.manifest, ("train",))[:10]
    rng = np.random.default_rng(0)
    noisy, clean = [], []
    for u in utts:
        n = T._noise_for(rng, toy_corpus.bank, len(u.wav))
        mel = mel_analyze(mix_at_snr(u.wav, n, 5.0)).values
        start = (len(mel) - 32) // 2
        noisy.append(mel[start : start + 32])
        clean.append(u.mel[start : start + 32])
    batch = (np.stack(noisy), np.stack(clean))
    state = init_train_state(NsConfig(lr=1e-3), seed=0)
    torch.manual_seed(0)
    losses = [ns_train_step(state, batch)[1] for _ in range(200)]
    state.model.eval()
    with torch.no_grad():
        final = float(state.model(torch.as_tensor(batch[0], dtype=torch.float32)).sub(
            torch.as_tensor(batch[1], dtype=torch.float32)).abs().mean())
    assert final < losses[0]


def test_trained_ns_improves_held_out_5db(trained, toy_corpus):
    utts = T.load_utts(toy_corpus.manifest, ("eval",))
    rng = np.random.default_rng(11)
    before, after = [], []
    for u in utts:
        noisy = mix_at_snr(u.wav, T._noise_for(rng, toy_corpus.bank, len(u.wav)), 5.0)
        m = mel_analyze(noisy)
        before.append(np.abs(m.values - u.mel).mean())
        after.append(np.abs(ns_forward(trained.ns, m).values - u.mel).mean())
    assert np.mean(after) < np.mean(before)
