"""Command-line entry point: ``vcrestore <verb> [--config FILE] [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .checkpoint import ModelError
from .degrade import DegradationError
from .metrics import MetricError
from .signal import SignalError

log = logging.getLogger("vcrestore")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed",
    "snr_grid": "snr_grid",
    "adapt_snr_grid": "adapt_snr_grid",
    "codebook_size": "codebook_size",
    "steps": "steps",
    "guidance": "guidance_w",
    "griffin_lim_iters": "griffin_lim_iters",
    "workers": "workers",
    "no_vq": "ablations.no_vq",
    "skip_ns": "ablations.skip_ns",
    "manifest": "paths.manifest",
    "noise_dir": "paths.noise_dir",
    "work_dir": "paths.work_dir",
    "ns": "paths.ns_ckpt",
    "vc": "paths.vc_ckpt",
    "vc_adapted": "paths.vc_adapted_ckpt",
    "eval_dir": "paths.eval_dir",
    "report_dir": "paths.report_dir",
    "epochs": "train.epochs",
    "ns_epochs": "train.ns_epochs",
    "adapt_epochs": "train.adapt_epochs",
    "batch_size": "train.batch_size",
    "mos_url": "external.mos_url",
    "asr_url": "external.asr_url",
}


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (dotted, JSON value), repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _paths(p, *names):
    for n in names:
        p.add_argument(f"--{n.replace('_', '-')}", dest=n)


def build_parser() -> Parser:
    p = Parser(prog="vcrestore", description="Noise suppression + voice-conversion restoration toolkit")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=Parser)

    s = sub.add_parser("toy-corpus", help="synthesize a small multi-speaker corpus and noise set")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=4)
    s.add_argument("--utts", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("degrade", help="build the degraded eval set over the SNR grid")
    _common(s)
    _paths(s, "manifest", "noise_dir", "eval_dir", "work_dir")
    s.add_argument("--snr-grid", type=float, nargs="+")
    s.add_argument("--out", dest="eval_dir")

    s = sub.add_parser("train-ns", help="train the noise-suppression model")
    _common(s)
    _paths(s, "manifest", "noise_dir", "work_dir")
    s.add_argument("--ns-epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--out", dest="ns")

    s = sub.add_parser("train-vc", help="train speaker encoder, content path and score decoder on clean speech")
    _common(s)
    _paths(s, "manifest", "work_dir")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--codebook-size", type=int)
    s.add_argument("--out", dest="vc")

    s = sub.add_parser("adapt-vc", help="adapt the content path to noisy and NS-enhanced inputs")
    _common(s)
    _paths(s, "manifest", "noise_dir", "work_dir", "ns", "vc")
    s.add_argument("--adapt-epochs", type=int)
    s.add_argument("--adapt-snr-grid", type=float, nargs="+")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--out", dest="vc_adapted")

    s = sub.add_parser("restore", help="enhance one file")
    _common(s)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", required=True)
    _paths(s, "ns", "vc", "work_dir")
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance", type=float)
    s.add_argument("--griffin-lim-iters", type=int)
    s.add_argument("--no-vq", action="store_true", default=None)
    s.add_argument("--skip-ns", action="store_true", default=None)

    s = sub.add_parser("evaluate", help="run pipeline modes over the eval set and write JSON-lines reports")
    _common(s)
    _paths(s, "manifest", "work_dir", "ns", "vc", "vc_adapted", "eval_dir", "report_dir", "mos_url", "asr_url")
    s.add_argument("--modes", nargs="+", default=["noisy", "ns_only", "vc_e", "vc_ae"])
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance", type=float)
    s.add_argument("--codebook-size", type=int)
    s.add_argument("--no-vq", action="store_true", default=None)
    s.add_argument("--skip-ns", action="store_true", default=None)
    s.add_argument("--save-wavs", action="store_true")
    s.add_argument("--out", help="report path (default <report_dir>/report.jsonl)")

    s = sub.add_parser("report", help="aggregate JSON-lines reports into text + CSV, optionally with figures")
    _common(s)
    _paths(s, "report_dir", "work_dir")
    s.add_argument("--in", dest="inp", nargs="+", help="report files (default <report_dir>/report.jsonl)")
    s.add_argument("--csv", help="CSV path (default <report_dir>/summary.csv)")
    s.add_argument("--figures", type=int, default=0, metavar="N",
                   help="render figures for the first N items with saved noisy/ns/restored wavs")

    s = sub.add_parser("figure", help="render stacked Mel panels for three waveforms")
    s.add_argument("--noisy", required=True)
    s.add_argument("--ns-out", required=True)
    s.add_argument("--restored", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> C.ExperimentConfig:
    cfg = C.load_config(getattr(args, "config", None))
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        C.override(cfg, key, value)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            C.override(cfg, key, value)
    cfg.__post_init__()
    return cfg


# ---------------------------------------------------------------- verbs


def _manifest(cfg):
    from .corpus import CorpusManifest

    if not cfg.paths.manifest:
        raise UsageError("--manifest (paths.manifest) is required")
    return CorpusManifest.load(cfg.paths.manifest)


def _bank(cfg):
    from .degrade import NoiseBank

    if not cfg.paths.noise_dir:
        raise UsageError("--noise-dir (paths.noise_dir) is required")
    return NoiseBank.from_dir(cfg.paths.noise_dir)


def cmd_toy_corpus(args):
    from .corpus import build_toy_corpus

    manifest, noise = build_toy_corpus(args.out, n_speakers=args.speakers, utts_per_speaker=args.utts, seed=args.seed)
    print(f"manifest\t{manifest}\nnoise_dir\t{noise}")


def cmd_degrade(args, cfg):
    from .harness import build_eval_set

    path = build_eval_set(_manifest(cfg), cfg, cfg.paths.noise_dir)
    print(f"eval_manifest\t{path}")


def cmd_train_ns(args, cfg):
    from .ns import save_ns
    from .training import load_utts, log_progress, train_ns

    state = train_ns(load_utts(_manifest(cfg)), _bank(cfg), cfg, progress=log_progress())
    path = save_ns(cfg.paths.resolve("ns_ckpt"), state, metadata={"config": cfg.to_dict()})
    print(f"ns_checkpoint\t{path}\tsteps={state.step}\tfinal_loss={state.history[-1]:.4f}")


def cmd_train_vc(args, cfg):
    from .training import load_utts, log_progress, train_speaker_encoder, train_vc
    from .vc import save_vc

    utts = load_utts(_manifest(cfg))
    cb = log_progress()
    model = train_vc(utts, train_speaker_encoder(utts, cfg, progress=cb), cfg, progress=cb)
    path = save_vc(cfg.paths.resolve("vc_ckpt"), model)
    print(f"vc_checkpoint\t{path}\tstage={model.stage}\tsteps={model.step}")


def cmd_adapt_vc(args, cfg):
    from .ns import load_ns
    from .training import adapt_vc, build_adapt_pool, load_utts, log_progress
    from .vc import load_vc, save_vc

    utts = load_utts(_manifest(cfg), ("train", "adapt"))
    ns = load_ns(cfg.paths.resolve("ns_ckpt")).model
    vc = load_vc(cfg.paths.resolve("vc_ckpt"), stage="clean", codebook_size=cfg.codebook_size)
    pool = build_adapt_pool(utts, ns, _bank(cfg), cfg)
    model = adapt_vc(vc, pool, cfg, progress=log_progress())
    path = save_vc(cfg.paths.resolve("vc_adapted_ckpt"), model)
    print(f"vc_checkpoint\t{path}\tstage={model.stage}\tsteps={model.step}")


def cmd_restore(args, cfg):
    from .ns import load_ns, ns_forward
    from .signal import mel_analyze, read_wav, write_wav
    from .vc import RestoreOptions, load_vc, restore

    noisy = read_wav(args.inp)
    ref = read_wav(args.ref)
    mel = mel_analyze(noisy)
    if not cfg.ablations.skip_ns:
        mel = ns_forward(load_ns(cfg.paths.resolve("ns_ckpt")).model, mel)
    vc = load_vc(cfg.paths.resolve("vc_ckpt"))
    opts = RestoreOptions(cfg.steps, cfg.guidance_w, cfg.seed, not cfg.ablations.no_vq, cfg.griffin_lim_iters)
    out = restore(mel, ref, vc, opts, length=len(noisy))
    write_wav(args.out, out)
    print(f"restored\t{args.out}\tstage={vc.stage}")


def cmd_evaluate(args, cfg):
    from .external import ExternalScorer
    from .harness import aggregate, render_text, run_pipeline, write_reports
    from .signal import write_wav

    manifest = _manifest(cfg)
    external = ExternalScorer.from_config(cfg.external)
    reports = []
    wav_dir = cfg.paths.resolve("report_dir") / "wavs" if args.save_wavs else None
    for mode in args.modes:
        outputs = {} if wav_dir else None
        reports += run_pipeline(cfg, mode, manifest, external=external, outputs=outputs)
        if wav_dir:
            for item_id, (label, w) in outputs.items():
                write_wav(wav_dir / label / f"{item_id}.wav", w)
    out = Path(args.out) if args.out else cfg.paths.resolve("report_dir") / "report.jsonl"
    write_reports(out, reports)
    sys.stdout.write(render_text(aggregate(reports, cfg.snr_grid)))
    print(f"report\t{out}")
    if external.configured:
        print(f"external_warnings\t{external.warnings}")


def cmd_report(args, cfg):
    from .harness import aggregate, read_reports, render_csv, render_text

    report_dir = cfg.paths.resolve("report_dir")
    inputs = args.inp or [report_dir / "report.jsonl"]
    reports = []
    for p in inputs:
        if not Path(p).exists():
            raise FileNotFoundError(f"report not found: {p}")
        reports += read_reports(p)
    rows = aggregate(reports)
    sys.stdout.write(render_text(rows))
    csv_path = Path(args.csv) if args.csv else report_dir / "summary.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(render_csv(rows))
    print(f"csv\t{csv_path}")
    if args.figures:
        for fig in _report_figures(report_dir / "wavs", args.figures, report_dir / "figures"):
            print(f"figure\t{fig}")


def _report_figures(wav_dir: Path, limit: int, out_dir: Path):
    from .plotting import emit_figure
    from .signal import read_wav

    labels = {p.name: p for p in wav_dir.glob("*")} if wav_dir.is_dir() else {}
    restored = next((labels[k] for k in sorted(labels, reverse=True) if k.startswith("vc_")), None)
    if "noisy" not in labels or "ns_only" not in labels or restored is None:
        raise FileNotFoundError(f"figures need saved noisy, ns_only and vc_* wavs under {wav_dir} (evaluate --save-wavs)")
    out = []
    for item in sorted(p.name for p in restored.glob("*.wav"))[:limit]:
        paths = [labels["noisy"] / item, labels["ns_only"] / item, restored / item]
        if all(p.exists() for p in paths):
            out.append(emit_figure(*(read_wav(p) for p in paths), out_dir / f"{Path(item).stem}.png"))
    return out


def cmd_figure(args):
    from .plotting import emit_figure
    from .signal import read_wav

    path = emit_figure(read_wav(args.noisy), read_wav(args.ns_out), read_wav(args.restored), args.out)
    print(f"figure\t{path}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        import torch

        torch.set_num_threads(1)
        if args.verb == "toy-corpus":
            cmd_toy_corpus(args)
        elif args.verb == "figure":
            cmd_figure(args)
        else:
            cfg = resolve_config(args)
            {
                "degrade": cmd_degrade,
                "train-ns": cmd_train_ns,
                "train-vc": cmd_train_vc,
                "adapt-vc": cmd_adapt_vc,
                "restore": cmd_restore,
                "evaluate": cmd_evaluate,
                "report": cmd_report,
            }[args.verb](args, cfg)
    except (UsageError, C.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, FloatingPointError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DegradationError, SignalError, MetricError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
