"""Two-stage training protocol on a manifest corpus: NS, speaker encoder, VC on clean pairs, content-path adaptation."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import ExperimentConfig
from .content import ContentConfig, encoder_loss, noise_robust_loss
from .corpus import CorpusManifest
from .degrade import NoiseBank, bandlimit, fit_noise, mix_at_snr, packet_drop
from .diffusion import diffusion_loss, total_loss
from .ns import NsConfig, NsTrainState, init_train_state, ns_forward, ns_train_step
from .signal import Waveform, mel_analyze, read_wav
from .speaker import SpeakerEncoder
from .vc import VcModel, build_vc

log = logging.getLogger(__name__)


@dataclass
class Utt:
    utt_id: str
    speaker_id: str
    wav: Waveform
    mel: np.ndarray  # [frames, n_mels]
    transcript: str = ""


def load_utts(manifest: CorpusManifest, splits=("train",)) -> list[Utt]:
    out = []
    for e in manifest.entries:
        if e.split in splits:
            w = read_wav(manifest.path(e))
            out.append(Utt(e.utt_id, e.speaker_id, w, mel_analyze(w).values, e.transcript))
    if not out:
        raise ValueError(f"no utterances in splits {splits}")
    return out


def epoch_steps(n_utts: int, epochs: int, cfg) -> int:
    return max(1, math.ceil(epochs * n_utts * cfg.crops_per_utterance / cfg.batch_size))


def _crop_start(rng, n_frames, crop):
    return int(rng.integers(0, max(1, n_frames - crop + 1)))


def _crop(values, start, crop):
    out = values[start : start + crop]
    if len(out) < crop:
        # repeat-pad short utterances along time
        reps = math.ceil(crop / max(len(out), 1))
        out = np.concatenate([out] * reps)[:crop]
    return out


def _noise_for(rng, bank: NoiseBank, n: int) -> Waveform:
    clip = bank.get(bank.ids()[int(rng.integers(len(bank.ids())))])
    return clip.with_samples(fit_noise(clip.samples, n, int(rng.integers(len(clip)))))


def degrade_random(rng, utt: Utt, bank: NoiseBank, snr_choices=None, snr_range=None,
                   drop_prob=0.0, bandlimit_prob=0.0) -> Waveform:
    """Random training degradation; keeps the clean framing so crops stay aligned."""
    y = utt.wav
    if bandlimit_prob and rng.random() < bandlimit_prob:
        y = bandlimit(y, lowpass_hz=float(rng.uniform(2000, 4000)))
    if snr_choices is not None:
        snr = float(snr_choices[int(rng.integers(len(snr_choices)))])
    else:
        snr = float(rng.uniform(*snr_range))
    y = mix_at_snr(y, _noise_for(rng, bank, len(y)), snr)
    if drop_prob and rng.random() < drop_prob:
        dur = float(rng.uniform(0.05, 0.15))
        start = float(rng.uniform(0.1, max(0.11, y.duration - dur - 0.1)))
        y = packet_drop(y, [(start, dur)])
    return y


# ---------------------------------------------------------------- NS


def train_ns(utts: list[Utt], bank: NoiseBank, cfg: ExperimentConfig, config: NsConfig | None = None,
             steps: int | None = None, progress=None) -> NsTrainState:
    tc = cfg.train
    config = config or NsConfig(lr=tc.ns_lr)
    state = init_train_state(config, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    steps = steps if steps is not None else epoch_steps(len(utts), tc.ns_epochs, tc)
    for _ in range(steps):
        noisy, clean = [], []
        for _ in range(tc.batch_size):
            u = utts[int(rng.integers(len(utts)))]
            m = mel_analyze(degrade_random(rng, u, bank, snr_range=tc.ns_snr_range)).values
            s = _crop_start(rng, len(u.mel), tc.crop_frames)
            noisy.append(_crop(m, s, tc.crop_frames))
            clean.append(_crop(u.mel, s, tc.crop_frames))
        state, loss = ns_train_step(state, (np.stack(noisy), np.stack(clean)))
        if progress:
            progress("ns", state.step, steps, loss)
    state.model.eval()
    return state


# ---------------------------------------------------------------- speaker encoder


def train_speaker_encoder(utts: list[Utt], cfg: ExperimentConfig, steps: int | None = None, progress=None) -> SpeakerEncoder:
    speakers = sorted({u.speaker_id for u in utts})
    label = {s: i for i, s in enumerate(speakers)}
    torch.manual_seed(cfg.seed + 2)
    enc = SpeakerEncoder(n_speakers=len(speakers))
    opt = torch.optim.Adam(enc.parameters(), lr=1e-3)
    rng = np.random.default_rng([cfg.seed, 2])
    steps = steps if steps is not None else cfg.train.spk_steps
    batch = 2 * cfg.train.batch_size
    enc.train()
    for step in range(steps):
        crop = int(rng.integers(64, 129))
        xs, ys = [], []
        for _ in range(batch):
            u = utts[int(rng.integers(len(utts)))]
            xs.append(_crop(u.mel, _crop_start(rng, len(u.mel), crop), crop))
            ys.append(label[u.speaker_id])
        emb = enc(torch.as_tensor(np.stack(xs), dtype=torch.float32))
        loss = F.cross_entropy(enc.logits(emb), torch.as_tensor(ys))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if progress:
            progress("speaker", step + 1, steps, loss.item())
    return enc.eval()


def utterance_embeddings(encoder: SpeakerEncoder, utts: list[Utt]) -> dict[str, np.ndarray]:
    with torch.no_grad():
        return {u.utt_id: encoder(torch.as_tensor(u.mel, dtype=torch.float32)[None])[0].numpy() for u in utts}


def _same_speaker_pool(utts):
    pool = {}
    for u in utts:
        pool.setdefault(u.speaker_id, []).append(u.utt_id)
    return pool


def _other_embedding(rng, u: Utt, pool, emb):
    """Embedding of a different utterance by the same speaker (content-unaligned reference)."""
    ids = [i for i in pool[u.speaker_id] if i != u.utt_id] or [u.utt_id]
    return emb[ids[int(rng.integers(len(ids)))]]


# ---------------------------------------------------------------- VC stage 1


def _content_features(model: VcModel, utts):
    with torch.no_grad():
        return torch.cat([model.content.encoder(torch.as_tensor(u.mel, dtype=torch.float32)[None])[0] for u in utts])


def train_vc(utts: list[Utt], speaker: SpeakerEncoder, cfg: ExperimentConfig, steps: int | None = None,
             progress=None) -> VcModel:
    """Clean-pair training of content path and score decoder; the speaker encoder stays fixed."""
    tc = cfg.train
    model = build_vc(ContentConfig(codebook_size=cfg.codebook_size), seed=cfg.seed + 3)
    model.speaker = copy.deepcopy(speaker).eval()
    for p in model.speaker.parameters():
        p.requires_grad_(False)
    emb = utterance_embeddings(model.speaker, utts)
    pool = _same_speaker_pool(utts)
    params = list(model.content.parameters()) + list(model.score.parameters())
    opt = torch.optim.Adam(params, lr=tc.vc_lr)
    rng = np.random.default_rng([cfg.seed, 3])
    gen = torch.Generator().manual_seed(cfg.seed + 3)
    steps = steps if steps is not None else epoch_steps(len(utts), tc.epochs, tc)
    warmup = int(round(tc.vq_warmup_fraction * steps))
    commitment = model.content.config.commitment
    model.content.train()
    model.score.train()
    model.content.use_vq = warmup == 0
    if warmup == 0:
        model.content.vq.init_from_features(_content_features(model, utts), generator=gen)
    for step in range(steps):
        if step == warmup and warmup > 0:
            # offline clustering of the warmed-up encoder features, then switch quantization on
            model.content.vq.init_from_features(_content_features(model, utts), generator=gen)
            model.content.use_vq = True
        m0, spk = [], []
        for _ in range(tc.batch_size):
            u = utts[int(rng.integers(len(utts)))]
            m0.append(_crop(u.mel, _crop_start(rng, len(u.mel), tc.crop_frames), tc.crop_frames))
            spk.append(_other_embedding(rng, u, pool, emb))
        m0 = torch.as_tensor(np.stack(m0), dtype=torch.float32)
        spk = torch.as_tensor(np.stack(spk), dtype=torch.float32)
        mhat, commit, _ = model.content(m0, update_codebook=True, generator=gen)
        l_d = diffusion_loss(model.score, m0, mhat.detach(), spk, gen, model.schedule)
        l_enc = encoder_loss(mhat, m0)
        loss = total_loss("clean_stage", l_d, l_enc) + commitment * commit
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        model.step += 1
        if progress:
            progress("vc", step + 1, steps, l_d.item(), l_enc.item())
    model.content.use_vq = True
    model.stage = "clean"
    return model.eval()


# ---------------------------------------------------------------- adaptation


@dataclass
class AdaptItem:
    utt: Utt
    noisy: np.ndarray
    enhanced: np.ndarray


def build_adapt_pool(utts, ns_model, bank, cfg: ExperimentConfig, variants=3) -> list[AdaptItem]:
    tc = cfg.train
    rng = np.random.default_rng([cfg.seed, 4])
    items = []
    for u in utts:
        for _ in range(variants):
            y = degrade_random(rng, u, bank, snr_choices=cfg.adapt_snr_grid,
                               drop_prob=tc.adapt_drop_prob, bandlimit_prob=tc.adapt_bandlimit_prob)
            noisy = mel_analyze(y)
            enhanced = ns_forward(ns_model, noisy).values if ns_model is not None else noisy.values
            items.append(AdaptItem(u, noisy.values, enhanced))
    return items


def adapt_vc(model: VcModel, pool: list[AdaptItem], cfg: ExperimentConfig, steps: int | None = None,
             progress=None) -> VcModel:
    """Fine-tune encoder, VQ and projector on noisy / NS-enhanced inputs; score model and speaker encoder frozen."""
    tc = cfg.train
    model = copy.deepcopy(model)
    for p in list(model.score.parameters()) + list(model.speaker.parameters()):
        p.requires_grad_(False)
    model.score.eval()
    model.speaker.eval()
    utts = list({it.utt.utt_id: it.utt for it in pool}.values())
    emb = utterance_embeddings(model.speaker, utts)
    spk_pool = _same_speaker_pool(utts)
    params = list(model.content.parameters())
    opt = torch.optim.Adam(params, lr=tc.vc_lr)
    rng = np.random.default_rng([cfg.seed, 5])
    gen = torch.Generator().manual_seed(cfg.seed + 5)
    n_utts = len(utts)
    steps = steps if steps is not None else epoch_steps(n_utts, tc.adapt_epochs, tc)
    n_noisy = int(round(tc.adapt_noisy_fraction * tc.batch_size))
    commitment = model.content.config.commitment
    model.content.train()
    for step in range(steps):
        m0, inp, spk = [], [], []
        for b in range(tc.batch_size):
            it = pool[int(rng.integers(len(pool)))]
            s = _crop_start(rng, len(it.utt.mel), tc.crop_frames)
            m0.append(_crop(it.utt.mel, s, tc.crop_frames))
            inp.append(_crop(it.noisy if b < n_noisy else it.enhanced, s, tc.crop_frames))
            spk.append(_other_embedding(rng, it.utt, spk_pool, emb))
        m0 = torch.as_tensor(np.stack(m0), dtype=torch.float32)
        inp = torch.as_tensor(np.stack(inp), dtype=torch.float32)
        spk = torch.as_tensor(np.stack(spk), dtype=torch.float32)
        mhat, commit_c, _ = model.content(m0, update_codebook=True, generator=gen)
        mhat_vc, commit_n, _ = model.content(inp, update_codebook=False)
        with torch.no_grad():
            l_d = diffusion_loss(model.score, m0, mhat, spk, gen, model.schedule)
        l_enc = encoder_loss(mhat, m0)
        l_nr = noise_robust_loss(mhat_vc, m0)
        loss = total_loss("adapt_stage", l_d, l_enc, l_nr) + commitment * (commit_c + commit_n)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        model.step += 1
        if progress:
            progress("adapt", step + 1, steps, l_enc.item(), l_nr.item())
    for p in list(model.score.parameters()) + list(model.speaker.parameters()):
        p.requires_grad_(True)
    model.stage = "adapt"
    return model.eval()


def log_progress(every=50):
    """Progress callback that logs every ``every`` steps with elapsed time."""
    t0 = time.time()

    def cb(phase, step, total, *losses):
        if step % every == 0 or step == total:
            vals = " ".join(f"{x:.4g}" for x in losses)
            log.info("%s %d/%d loss %s (%.0fs)", phase, step, total, vals, time.time() - t0)

    return cb

