"""Restoration stage bundle: content path + speaker encoder + score decoder, and the restore() entry point."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import checkpoint
from .checkpoint import ModelError
from .content import ContentConfig, ContentPath, content_encode, project_content
from .diffusion import DiffusionSchedule, ScoreConfig, ScoreNet, reverse_sample
from .signal import LOG_FLOOR, MelSpectrogram, Waveform, log_mel_ceiling, mel_invert
from .speaker import SpeakerEmbedding, SpeakerEncoder, speaker_encode

STAGES = ("clean", "adapt")


@dataclass
class VcModel:
    content: ContentPath
    speaker: SpeakerEncoder
    score: ScoreNet
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    stage: str = "clean"
    step: int = 0
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def eval(self):
        for m in (self.content, self.speaker, self.score):
            m.eval()
        return self

    def config_dict(self) -> dict:
        sc = asdict(self.score.config)
        sc["channels"] = list(sc["channels"])
        return {
            "content": asdict(self.content.config),
            "speaker": {"dim": self.speaker.dim, "n_speakers": self.speaker.n_speakers},
            "score": sc,
            "schedule": asdict(self.schedule),
        }


def build_vc(content_config=None, score_config=None, n_speakers=0, seed=0) -> VcModel:
    torch.manual_seed(seed)
    schedule = DiffusionSchedule()
    return VcModel(
        content=ContentPath(content_config),
        speaker=SpeakerEncoder(n_speakers=n_speakers),
        score=ScoreNet(score_config, schedule),
        schedule=schedule,
        seed=seed,
    )


def save_vc(path, model: VcModel):
    if model.stage not in STAGES:
        raise ModelError(f"unknown training stage {model.stage!r}")
    return checkpoint.save(
        path,
        kind="vc",
        stage=model.stage,
        config=model.config_dict(),
        modules={
            "content": model.content.state_dict(),
            "speaker": model.speaker.state_dict(),
            "score": model.score.state_dict(),
        },
        step=model.step,
        seed=model.seed,
        metadata=model.metadata,
    )


def load_vc(path, stage=None, codebook_size=None) -> VcModel:
    ck = checkpoint.load(path, kind="vc", stage=stage)
    cfg = ck["config"]
    if codebook_size is not None and cfg["content"]["codebook_size"] != codebook_size:
        raise ModelError(
            f"{path}: codebook size {cfg['content']['codebook_size']} does not match configured {codebook_size}"
        )
    schedule = DiffusionSchedule(**cfg["schedule"])
    model = VcModel(
        content=ContentPath(ContentConfig(**cfg["content"])),
        speaker=SpeakerEncoder(dim=cfg["speaker"]["dim"], n_speakers=cfg["speaker"]["n_speakers"]),
        score=ScoreNet(ScoreConfig(**cfg["score"]), schedule),
        schedule=schedule,
        stage=ck["stage"],
        step=ck["step"],
        seed=ck["seed"],
        metadata=ck.get("metadata", {}),
    )
    model.content.load_state_dict(ck["modules"]["content"])
    model.speaker.load_state_dict(ck["modules"]["speaker"])
    model.score.load_state_dict(ck["modules"]["score"])
    return model.eval()


@dataclass
class RestoreOptions:
    steps: int = 30
    guidance_w: float = 1.0
    seed: int = 7
    use_vq: bool = True
    griffin_lim_iters: int = 32


def coarse_mel(model: VcModel, mel: MelSpectrogram, use_vq=True) -> MelSpectrogram:
    model.content.use_vq = use_vq
    try:
        codes = content_encode(model.content, mel)
        return project_content(model.content, codes, mel.frame_hop, mel.sample_rate)
    finally:
        model.content.use_vq = True


def restore_mel(model: VcModel, ns_mel: MelSpectrogram, ref, options: RestoreOptions | None = None) -> MelSpectrogram:
    options = options or RestoreOptions()
    spk = ref if isinstance(ref, SpeakerEmbedding) else speaker_encode(model.speaker, ref)
    mhat = coarse_mel(model, ns_mel, options.use_vq)
    out = reverse_sample(model.score, mhat, spk, options.steps, options.guidance_w, options.seed, model.schedule)
    # keep the sample inside what a full-scale waveform can produce
    values = np.clip(out.values, LOG_FLOOR, log_mel_ceiling(out.sample_rate, n_mels=out.n_mels))
    return MelSpectrogram(values, out.frame_hop, out.sample_rate)


def restore(ns_mel: MelSpectrogram, ref, model: VcModel | None, options: RestoreOptions | None = None, length=None) -> Waveform:
    """content_encode -> project_content -> reverse_sample(speaker_encode(ref)) -> mel_invert."""
    if model is None:
        raise ModelError("restore needs a VC checkpoint (none loaded)")
    options = options or RestoreOptions()
    mel = restore_mel(model, ns_mel, ref, options)
    if length is None:
        length = (ns_mel.n_frames - 1) * ns_mel.frame_hop
    return mel_invert(mel, options.griffin_lim_iters, length=length)


def speaker_embedding(model: VcModel, ref) -> np.ndarray:
    return speaker_encode(model.speaker, ref).vector
