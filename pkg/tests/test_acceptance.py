"""Acceptance criteria. Each test prints one [PASS]/[FAIL] line and records it for the session summary."""

import itertools
import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from vcrestore import cli
from vcrestore import training as T
from vcrestore.content import ContentConfig, ContentPath, encoder_loss, noise_robust_loss
from vcrestore.degrade import DegradationSpec, EVAL_SNR_GRID, apply_spec, drop_regions, mix_at_snr
from vcrestore.diffusion import (
    DEFAULT_SCHEDULE,
    ScoreConfig,
    ScoreNet,
    diffusion_loss,
    forward_diffuse,
    total_loss,
)
from vcrestore.harness import choose_reference
from vcrestore.metrics import cer, edit_distance, gcc_phat_align, measured_snr, shift, stoi
from vcrestore.ns import NsModel, ns_forward, ns_loss
from vcrestore.signal import N_MELS, SAMPLE_RATE, Waveform, mel_analyze, mel_invert
from vcrestore.vc import RestoreOptions, restore


def record(key, ok, line):
    ACCEPTANCE[key] = (bool(ok), line)
    print(f"[{'PASS' if ok else 'FAIL'}] {key} {line}")
    assert ok, line


# 1


def test_c1_total_loss_values():
    t0 = time.perf_counter()
    clean = total_loss("clean_stage", 1.0, 2.0)
    adapt = total_loss("adapt_stage", 1.0, 2.0, 3.0)
    elapsed = time.perf_counter() - t0
    ok = abs(clean - 1.2) <= 1e-12 and abs(adapt - 1.5) <= 1e-12 and elapsed < 1.0
    record("1", ok, f"total_loss clean={clean!r} adapt={adapt!r} ({elapsed * 1e3:.3f} ms)")


# 2


def test_c2_noise_prediction_loss_plumbing():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    frames, batch = 16, 1
    m0 = torch.randn(batch, frames, N_MELS, generator=g, dtype=torch.float64)
    mhat = torch.randn(batch, frames, N_MELS, generator=g, dtype=torch.float64)
    spk = torch.randn(batch, 128, generator=g, dtype=torch.float64)

    noise = torch.randn(m0.shape, generator=g, dtype=torch.float64)
    teacher = diffusion_loss(lambda *a: -noise, m0, mhat, spk, g, noise=noise).item()

    zero = lambda mt, *a: torch.zeros_like(mt)  # noqa: E731
    draws = [diffusion_loss(zero, m0, mhat, spk, g).item() for _ in range(1000)]
    n_elem = frames * N_MELS
    rel = abs(np.mean(draws) - n_elem) / n_elem
    elapsed = time.perf_counter() - t0
    ok = teacher == 0.0 and rel < 0.05 and elapsed < 30
    record("2", ok, f"teacher-forced loss={teacher}; zero predictor mean={np.mean(draws):.1f} vs "
                    f"{n_elem} elements ({rel:.2%}) in {elapsed:.1f}s")


# 3


def test_c3_cfg_dropout_rate():
    seen = []

    def spy(mt, t, mhat, spk, mhat_mask, spk_mask):
        seen.append((float(mhat_mask[0]), float(spk_mask[0])))
        return torch.zeros_like(mt)

    g = torch.Generator().manual_seed(1)
    x = torch.zeros(1, 2, 3)
    for _ in range(10_000):
        diffusion_loss(spy, x, x, torch.zeros(1, 4), g)
    masks = np.array(seen)
    p_mhat, p_spk = (masks == 0).mean(axis=0)
    both = np.mean((masks[:, 0] == 0) & (masks[:, 1] == 0))
    ok = abs(p_mhat - 0.1) <= 0.01 and abs(p_spk - 0.1) <= 0.01
    record("3", ok, f"unconditional rate mhat={p_mhat:.4f} spk={p_spk:.4f} (joint {both:.4f}) over 10^4 draws")


# 4


def test_c4_forward_marginals():
    beta0, beta1 = DEFAULT_SCHEDULE.beta0, DEFAULT_SCHEDULE.beta1
    n = 10_000
    g = torch.Generator().manual_seed(2)
    m0, mhat = 2.5, -1.0
    lines, ok = [], True
    for t in (0.1, 0.5, 0.9):
        big_b = beta0 * t + (beta1 - beta0) * t * t / 2
        mean = mhat + (m0 - mhat) * math.exp(-big_b / 2)
        var = 1 - math.exp(-big_b)
        noise = torch.randn(n, 1, generator=g, dtype=torch.float64)
        mt, _ = forward_diffuse(torch.full((n, 1), m0, dtype=torch.float64),
                                torch.full((n, 1), mhat, dtype=torch.float64), t, noise)
        x = mt[:, 0].numpy()
        z_mean = (x.mean() - mean) / math.sqrt(var / n)
        z_var = (x.var(ddof=1) - var) / (var * math.sqrt(2 / (n - 1)))
        ok &= abs(z_mean) < 3 and abs(z_var) < 3
        lines.append(f"t={t}: z_mean={z_mean:+.2f} z_var={z_var:+.2f}")
    record("4", ok, "; ".join(lines))


# 5


def test_c5_snr_calibration(toy_corpus):
    utts = T.load_utts(toy_corpus.manifest, ("train",))[:12]
    noises = toy_corpus.bank.ids()[:5]
    worst, pairs = 0.0, 0
    for u, nid in itertools.product(utts, noises):
        noise = toy_corpus.bank.segment(nid, len(u.wav), seed=pairs)
        for snr in EVAL_SNR_GRID:
            worst = max(worst, abs(measured_snr(u.wav, mix_at_snr(u.wav, noise, snr)) - snr))
        pairs += 1
    ok = pairs >= 50 and worst < 0.01
    record("5", ok, f"{pairs} utterance-noise pairs x {len(EVAL_SNR_GRID)} SNRs, max deviation {worst:.2e} dB")


# 6


def test_c6_stoi_suite(toy_corpus):
    utts = T.load_utts(toy_corpus.manifest, ("train",))[:10]
    rng = np.random.default_rng(6)
    identity, scale, monotone = 0.0, 0.0, 0
    for u in utts:
        identity = max(identity, abs(stoi(u.wav, u.wav) - 1.0))
        scale = max(scale, abs(stoi(u.wav, u.wav.with_samples(0.3 * u.wav.samples)) - 1.0))
        noise = T._noise_for(rng, toy_corpus.bank, len(u.wav))
        s = [stoi(u.wav, mix_at_snr(u.wav, noise, snr)) for snr in (20, 0, -10)]
        monotone += s[0] > s[1] > s[2]
    ok = identity < 1e-6 and scale < 1e-6 and monotone == len(utts)
    record("6", ok, f"identity err {identity:.1e}, scale err {scale:.1e}, "
                    f"monotone on {monotone}/{len(utts)} utterances")


# 7


def test_c7_gcc_phat(toy_corpus):
    rng = np.random.default_rng(7)
    ref = Waveform(rng.standard_normal(SAMPLE_RATE), SAMPLE_RATE)
    speech = T.load_utts(toy_corpus.manifest, ("train",))[0].wav
    exact, noisy, total = 0, 0, 0
    worst_noisy = 0
    for sig in (ref, speech):
        for d in (1, -1, 50, -50, 137, -137, 1000, -1000):
            total += 1
            delayed = sig.with_samples(shift(sig.samples, d, len(sig)))
            lag, _ = gcc_phat_align(sig, delayed, 1600)
            exact += lag == -d
            mixed = mix_at_snr(delayed, Waveform(rng.standard_normal(len(sig)), SAMPLE_RATE), 10.0)
            lag_n, _ = gcc_phat_align(sig, mixed, 1600)
            worst_noisy = max(worst_noisy, abs(lag_n + d))
            noisy += abs(lag_n + d) <= 1
    ok = exact == total and noisy == total
    record("7", ok, f"exact {exact}/{total}, within 1 sample at 10 dB {noisy}/{total} (worst {worst_noisy})")


# 8


def brute_force_distance(a, b):
    """Minimum cost over every alignment path, explored exhaustively without memoization."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        brute_force_distance(a[1:], b) + 1,
        brute_force_distance(a, b[1:]) + 1,
        brute_force_distance(a[1:], b[1:]) + (a[0] != b[0]),
    )


def test_c8_cer():
    rng = np.random.default_rng(8)
    agree = 0
    for _ in range(1000):
        a = "".join(rng.choice(list("abc"), size=rng.integers(1, 6)))
        b = "".join(rng.choice(list("abc"), size=rng.integers(0, 6)))
        oracle = brute_force_distance(a, b)
        agree += edit_distance(a, b) == oracle and cer(a, b) == oracle / len(a)
    pair1 = cer("Throughout the centuries people have explained the rainbow in various ways.",
                "Throughout the centuries, people have exclaimed to Abar in various ways.")
    pair2 = cer("Others have tried to explain the phenomenon physically.",
                "Others will try to explain the phenomenon physically.")
    ok = agree == 1000 and 0.10 <= pair1 <= 0.15 and 0.09 <= pair2 <= 0.15
    record("8", ok, f"oracle agreement {agree}/1000; pair 1 CER {pair1:.3%}, pair 2 CER {pair2:.3%}")


# 9


def test_c9a_adaptation_lowers_noise_robust_loss(toy_eval):
    means = {m: np.mean([r.l_nr for r in toy_eval.reports[m] if r.snr_condition_db == 10.0])
             for m in ("vc_e", "vc_ae")}
    ok = means["vc_ae"] < means["vc_e"]
    record("9a", ok, f"mean L_nr at 10 dB: vc_e {means['vc_e']:.4f}, vc_ae {means['vc_ae']:.4f}")


def test_c9b_restoration_raises_speaker_similarity(toy_eval, trained):
    means = {m: np.mean([r.secs for r in toy_eval.reports[m] if r.snr_condition_db == 5.0])
             for m in ("noisy", "ns_only", "vc_e", "vc_ae")}
    ok = means["vc_ae"] > means["ns_only"]
    record("9b", ok, f"mean SECS at 5 dB: restored (vc_ae) {means['vc_ae']:.4f} > NS {means['ns_only']:.4f} "
                     f"(vc_e {means['vc_e']:.4f}, noisy {means['noisy']:.4f}); "
                     f"training took {trained.train_seconds / 60:.1f} min")


def test_c9c_packet_drop_inpainting(trained, toy_corpus):
    cfg = trained.cfg
    manifest = toy_corpus.manifest
    ns_energy, vc_energy = [], []
    for e in manifest.split("eval"):
        clean = T.read_wav(manifest.path(e))
        start = round(clean.duration / 2 - 0.05, 3)
        spec = DegradationSpec(noise_id="white", snr_db=20.0, drops=[(start, 0.1)], seed=1)
        y = apply_spec(clean, spec, toy_corpus.bank)
        lo, hi = drop_regions(spec.drops, SAMPLE_RATE, len(y))[0]
        assert hi - lo == 1600
        enhanced = ns_forward(trained.ns, mel_analyze(y))
        ns_wav = mel_invert(enhanced, cfg.griffin_lim_iters, length=len(y))
        ref = T.read_wav(manifest.path(choose_reference(manifest, e.speaker_id)))
        out = restore(enhanced, ref, trained.vc_ae, RestoreOptions(cfg.steps, cfg.guidance_w, cfg.seed), len(y))
        ns_energy.append(np.mean(ns_wav.samples[lo:hi] ** 2))
        vc_energy.append(np.mean(out.samples[lo:hi] ** 2))
    wins = int(np.sum(np.array(vc_energy) > np.array(ns_energy)))
    ok = np.mean(vc_energy) > np.mean(ns_energy)
    record("9c", ok, f"mean energy in 100 ms gap: restored {np.mean(vc_energy):.2e} vs NS {np.mean(ns_energy):.2e} "
                     f"(restored higher on {wins}/{len(ns_energy)} utterances)")


# 10


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b))


def _fd_check(module, loss_fn, rng, n=10, h=1e-5):
    """Central differences on randomly drawn scalar parameters with a nonzero analytic gradient."""
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params], dtype=float)
    errs = []
    tries = 0
    while len(errs) < n and tries < 50 * n:
        tries += 1
        p = params[rng.choice(len(params), p=sizes / sizes.sum())]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        if abs(analytic) < 1e-8:
            continue
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
        errs.append(_rel_err((up - down) / (2 * h), analytic))
    return errs


def test_c10_gradient_checks():
    torch.manual_seed(10)
    rng = np.random.default_rng(10)
    g = torch.Generator().manual_seed(10)
    frames = 16
    clean = torch.randn(2, frames, N_MELS, generator=g, dtype=torch.float64) * 2 - 4
    noisy = clean + torch.randn(2, frames, N_MELS, generator=g, dtype=torch.float64)

    ns = NsModel().double().eval()
    ns_errs = _fd_check(ns, lambda: ns_loss(ns, noisy, clean), rng)

    content = ContentPath(ContentConfig()).double().eval()
    content.use_vq = False
    score = ScoreNet(ScoreConfig()).double().eval()
    torch.nn.init.normal_(score.out[-1].weight, std=0.02)  # the head starts at zero; give upstream layers a gradient
    spk = torch.nn.functional.normalize(torch.randn(2, 128, generator=g, dtype=torch.float64), dim=1)
    t = torch.tensor([0.3, 0.7], dtype=torch.float64)
    eps = torch.randn(clean.shape, generator=g, dtype=torch.float64)
    masks = (torch.ones(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64))

    def full_loss():
        mhat, _, _ = content(clean, update_codebook=False)
        mhat_vc, _, _ = content(noisy, update_codebook=False)
        l_d = diffusion_loss(score, clean, mhat, spk, t=t, noise=eps, masks=masks)
        return total_loss("adapt_stage", l_d, encoder_loss(mhat, clean), noise_robust_loss(mhat_vc, clean))

    content_errs = _fd_check(content, full_loss, rng)
    score_errs = _fd_check(score, full_loss, rng)
    worst = {k: max(v) if v else float("inf") for k, v in
             (("ns", ns_errs), ("content", content_errs), ("score", score_errs))}
    counts = {k: len(v) for k, v in (("ns", ns_errs), ("content", content_errs), ("score", score_errs))}
    ok = all(c >= 10 for c in counts.values()) and all(w <= 1e-3 for w in worst.values())
    record("10", ok, "max relative FD error " + ", ".join(
        f"{k} {worst[k]:.1e} ({counts[k]} params)" for k in worst))


# 11


def test_c11_evaluate_is_deterministic(trained, toy_corpus, tmp_path):
    common = ["--manifest", str(toy_corpus.manifest_path), "--work-dir", str(trained.work),
              "--eval-dir", str(tmp_path / "eval")]
    assert cli.main(["degrade", *common, "--noise-dir", str(toy_corpus.noise_dir), "--snr-grid", "5"]) == 0
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}.jsonl"
        code = cli.main(["evaluate", *common, "--report-dir", str(tmp_path / f"rep{i}"),
                         "--set", "snr_grid=[5]", "--out", str(out)])
        assert code == 0
        outs.append(out.read_bytes())
    lines = outs[0].decode().count("\n")
    ok = outs[0] == outs[1] and lines == 4 * len(toy_corpus.manifest.split("eval"))
    record("11", ok, f"two evaluate runs, {lines} report lines each, byte-identical={outs[0] == outs[1]}")
