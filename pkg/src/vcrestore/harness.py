"""Evaluation orchestration: degraded eval sets, per-mode pipelines, metric reports and aggregation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import ModelError
from .config import ExperimentConfig
from .content import noise_robust_loss
from .corpus import CorpusManifest
from .degrade import DegradationError, DegradationSpec, NoiseBank, apply_spec, item_seed, read_manifest, write_manifest
from .external import ExternalScorer
from .metrics import MetricReport, cer, gcc_phat_align, lsd, measured_snr, secs, stoi
from .signal import Waveform, mel_analyze, read_wav, write_wav

log = logging.getLogger(__name__)

MODES = ("noisy", "ns_only", "vc_e", "vc_ae")
METRIC_FIELDS = ("stoi", "secs", "cer", "lsd", "l_nr", "mos_estimate")


class DataError(ValueError):
    pass


def mode_label(mode: str, cfg: ExperimentConfig) -> str:
    tags = []
    if mode in ("vc_e", "vc_ae"):
        if cfg.ablations.no_vq:
            tags.append("no_vq")
        if cfg.ablations.skip_ns:
            tags.append("skip_ns")
    return "+".join([mode, *tags])


# ---------------------------------------------------------------- eval set


def _noise_bank(cfg: ExperimentConfig, noise_dir=None) -> NoiseBank:
    noise_dir = Path(noise_dir or cfg.paths.noise_dir or "")
    if not noise_dir.is_dir():
        raise DataError(f"noise directory not found: {noise_dir}")
    bank = NoiseBank.from_dir(noise_dir)
    wanted = cfg.noise_ids or bank.ids()
    missing = [n for n in wanted if n not in bank]
    if missing or not wanted:
        listed = [str(noise_dir / f"{n}.wav") for n in missing] or [f"{noise_dir}/*.wav"]
        raise DataError(f"missing noise files: {', '.join(listed)}")
    return NoiseBank({n: bank.get(n) for n in wanted})


def build_eval_set(manifest: CorpusManifest, cfg: ExperimentConfig, noise_dir=None, out_dir=None) -> Path:
    """One degraded WAV per (eval utterance, SNR); returns the eval manifest path."""
    eval_utts = manifest.split("eval")
    if not eval_utts:
        raise DataError("eval split is empty")
    bank = _noise_bank(cfg, noise_dir)
    ids = bank.ids()
    out_dir = Path(out_dir or cfg.paths.resolve("eval_dir"))
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)

    def make(job):
        entry, snr = job
        item_id = f"{entry.utt_id}__snr{snr:g}"
        seed = item_seed(cfg.seed, item_id)
        noise_id = ids[int(np.random.default_rng(seed).integers(len(ids)))]
        spec = DegradationSpec(noise_id=noise_id, snr_db=float(snr), seed=seed)
        clean = read_wav(manifest.path(entry))
        y = apply_spec(clean, spec, bank)
        rel = Path("wavs") / f"{item_id}.wav"
        write_wav(out_dir / rel, y)
        row = spec.to_dict()
        row.update(
            item_id=item_id,
            utt_id=entry.utt_id,
            speaker_id=entry.speaker_id,
            transcript=entry.transcript,
            clean_path=str(manifest.path(entry).resolve()),
            degraded_path=str(rel),
            # stored as read back from the 16-bit file
            measured_snr_db=round(measured_snr(clean, read_wav(out_dir / rel)), 4),
        )
        return row

    jobs = [(e, s) for e in eval_utts for s in cfg.snr_grid]
    with ThreadPoolExecutor(max(1, cfg.workers)) as pool:
        rows = list(pool.map(make, jobs))
    return write_manifest(out_dir / "manifest.jsonl", rows)


def load_eval_set(path) -> tuple[Path, list[dict]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"eval manifest not found: {path} (run `degrade` first)")
    return path.parent, read_manifest(path)


# ---------------------------------------------------------------- references


def choose_reference(manifest: CorpusManifest, speaker_id: str, exclude_utt: str | None = None):
    """Longest clean clip of the speaker outside the eval split (ties broken by utt_id)."""
    best = None
    for e in manifest.entries:
        if e.speaker_id != speaker_id or e.split == "eval" or e.utt_id == exclude_utt:
            continue
        n = len(read_wav(manifest.path(e)))
        key = (-n, e.utt_id)
        if best is None or key < best[0]:
            best = (key, e)
    if best is None:
        raise DataError(f"no clean reference clip for speaker {speaker_id!r} outside the eval split")
    return best[1]


# ---------------------------------------------------------------- pipeline


@dataclass
class Models:
    ns: object = None
    vc: object = None
    scorer_speaker: object = None
    loaded: list = field(default_factory=list)


def load_models(cfg: ExperimentConfig, mode: str) -> Models:
    from .ns import load_ns
    from .vc import load_vc

    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    m = Models()
    need_ns = mode == "ns_only" or (mode in ("vc_e", "vc_ae") and not cfg.ablations.skip_ns)
    if need_ns:
        m.ns = load_ns(cfg.paths.resolve("ns_ckpt")).model
        m.loaded.append("ns")
    if mode == "vc_e":
        m.vc = load_vc(cfg.paths.resolve("vc_ckpt"), stage="clean", codebook_size=cfg.codebook_size)
        m.loaded.append("vc")
    elif mode == "vc_ae":
        m.vc = load_vc(cfg.paths.resolve("vc_adapted_ckpt"), stage="adapt", codebook_size=cfg.codebook_size)
        m.loaded.append("vc")
    # speaker similarity is scored with the stage-1 speaker encoder, shared by every mode
    vc_path = cfg.paths.resolve("vc_ckpt")
    if m.vc is not None:
        m.scorer_speaker = m.vc.speaker
    elif vc_path.exists():
        m.scorer_speaker = load_vc(vc_path).speaker
    return m


def _embed(encoder, w: Waveform):
    from .speaker import embed_mel

    return embed_mel(encoder, mel_analyze(w))


def process_item(row, eval_root: Path, manifest: CorpusManifest, cfg: ExperimentConfig, mode: str, models: Models,
                 ref_cache: dict) -> tuple[MetricReport, Waveform]:
    from .ns import ns_forward
    from .signal import mel_invert
    from .vc import RestoreOptions, coarse_mel, restore

    clean = read_wav(row["clean_path"])
    noisy = read_wav(eval_root / row["degraded_path"])
    ref_entry = ref_cache.get(row["speaker_id"])
    if ref_entry is None:
        ref_entry = ref_cache[row["speaker_id"]] = choose_reference(manifest, row["speaker_id"])
    ref = read_wav(manifest.path(ref_entry))
    l_nr = None
    if mode == "noisy":
        est = noisy
    else:
        noisy_mel = mel_analyze(noisy)
        enh_mel = ns_forward(models.ns, noisy_mel) if models.ns is not None else noisy_mel
        if mode == "ns_only":
            est = mel_invert(enh_mel, cfg.griffin_lim_iters, length=len(noisy))
        else:
            use_vq = not cfg.ablations.no_vq
            opts = RestoreOptions(cfg.steps, cfg.guidance_w, item_seed(cfg.seed, row["item_id"]), use_vq,
                                  cfg.griffin_lim_iters)
            est = restore(enh_mel, ref, models.vc, opts, length=len(noisy))
            l_nr = float(noise_robust_loss(coarse_mel(models.vc, enh_mel, use_vq), mel_analyze(clean)))
    max_lag = min(cfg.max_lag, len(clean) - 1, len(est) - 1)
    if np.any(est.samples):
        lag, aligned = gcc_phat_align(clean, est, max_lag)
    else:
        lag, aligned = 0, Waveform(np.zeros(len(clean)), clean.sample_rate)
    report = MetricReport(
        utt_id=row["utt_id"],
        snr_condition_db=row.get("snr_db"),
        mode=mode_label(mode, cfg),
        stoi=stoi(clean, aligned),
        lsd=lsd(mel_analyze(clean), mel_analyze(aligned)),
        alignment_lag=lag,
        l_nr=l_nr,
        ref_utt_id=ref_entry.utt_id,
    )
    if models.scorer_speaker is not None and np.any(aligned.samples):
        report.secs = secs(_embed(models.scorer_speaker, aligned), _embed(models.scorer_speaker, ref))
    return report, est


def run_pipeline(cfg: ExperimentConfig, mode: str, manifest: CorpusManifest | None = None, eval_dir=None,
                 models: Models | None = None, external: ExternalScorer | None = None, outputs: dict | None = None):
    """Metric reports for every eval item under ``mode``, in eval-manifest order.

    If ``outputs`` is a dict it receives ``item_id -> (mode label, output waveform)``.
    """
    if manifest is None:
        if not cfg.paths.manifest:
            raise DataError("paths.manifest is not set")
        manifest = CorpusManifest.load(cfg.paths.manifest)
    eval_root, rows = load_eval_set(eval_dir or cfg.paths.resolve("eval_dir"))
    models = models or load_models(cfg, mode)
    if mode in ("vc_e", "vc_ae") and models.vc is None:
        raise ModelError(f"mode {mode} needs a VC checkpoint")
    ref_cache: dict = {}
    reports = []
    wav_paths = []
    for row in rows:
        rep, est = process_item(row, eval_root, manifest, cfg, mode, models, ref_cache)
        reports.append(rep)
        if outputs is not None:
            outputs[row["item_id"]] = (rep.mode, est)
        wav_paths.append(eval_root / row["degraded_path"])
    if external is not None and external.configured:
        attach_external(reports, rows, wav_paths, external)
    return reports


def attach_external(reports, rows, wav_paths, external: ExternalScorer):
    scores = external.score(wav_paths)
    for rep, row, sc in zip(reports, rows, scores):
        rep.mos_estimate = sc.get("mos_estimate")
        rep.transcript = sc.get("transcript")
        if rep.transcript is not None:
            rep.cer = cer(row["transcript"], rep.transcript)
    return reports


# ---------------------------------------------------------------- reports


def dumps_reports(reports) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reports)


def write_reports(path, reports) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_reports(reports))
    return path


def read_reports(path) -> list[MetricReport]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(MetricReport(**json.loads(line)))
    return out


def _mean(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else None


def aggregate(reports, snr_grid=None) -> list[dict]:
    """Unweighted per-utterance means per (mode, SNR), plus an ``Avg`` row per mode."""
    by_mode: dict[str, list] = {}
    for r in reports:
        by_mode.setdefault(r.mode, []).append(r)
    rows = []
    for mode, reps in by_mode.items():
        snrs = list(snr_grid) if snr_grid is not None else sorted({r.snr_condition_db for r in reps})
        for snr in snrs:
            sel = [r for r in reps if r.snr_condition_db == snr]
            if not sel:
                raise DataError(f"no reports for mode {mode} at {snr} dB")
            rows.append({"mode": mode, "snr": f"{snr:g}", "n": len(sel),
                         **{k: _mean(getattr(r, k) for r in sel) for k in METRIC_FIELDS}})
        rows.append({"mode": mode, "snr": "Avg", "n": len(reps),
                     **{k: _mean(getattr(r, k) for r in reps) for k in METRIC_FIELDS}})
    return rows


def _fmt(v):
    return "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))


def render_text(rows) -> str:
    cols = ["mode", "snr", "n", *METRIC_FIELDS]
    table = [cols] + [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(cols))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(line, widths)) for line in table) + "\n"


def render_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["mode", "snr", "n", *METRIC_FIELDS], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return buf.getvalue()
