"""Shared fixtures.

The trained toy system (NS, speaker encoder, VC stage 1, adaptation) is built
once per session. Set VCRESTORE_TEST_CACHE=<dir> to keep it between runs.
"""

from __future__ import annotations

import copy
import os
import re
import shutil
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from vcrestore.config import ExperimentConfig
from vcrestore.corpus import CorpusManifest, build_toy_corpus
from vcrestore.degrade import NoiseBank

torch.set_num_threads(1)

# criterion id ("1", "9a", ...) -> (passed, summary line)
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def _criterion_order(key):
    m = re.match(r"(\d+)(.*)", key)
    return int(m.group(1)), m.group(2)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=_criterion_order):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key:>3} {line}")


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    manifest_path, noise_dir = build_toy_corpus(root, n_speakers=4, utts_per_speaker=20, seed=0)
    return SimpleNamespace(
        root=root,
        manifest_path=manifest_path,
        noise_dir=noise_dir,
        manifest=CorpusManifest.load(manifest_path),
        bank=NoiseBank.from_dir(noise_dir),
    )


def _config(corpus, work_dir) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.paths.manifest = str(corpus.manifest_path)
    cfg.paths.noise_dir = str(corpus.noise_dir)
    cfg.paths.work_dir = str(work_dir)
    return cfg


@pytest.fixture(scope="session")
def trained(toy_corpus, tmp_path_factory):
    """Full two-stage protocol with default settings on the toy corpus."""
    from vcrestore import training as T
    from vcrestore.ns import load_ns, save_ns
    from vcrestore.vc import load_vc, save_vc

    cache = os.environ.get("VCRESTORE_TEST_CACHE")
    work = Path(cache) if cache else tmp_path_factory.mktemp("work")
    work.mkdir(parents=True, exist_ok=True)
    cfg = _config(toy_corpus, work)
    ns_path, vc_path, vca_path = (cfg.paths.resolve(k) for k in ("ns_ckpt", "vc_ckpt", "vc_adapted_ckpt"))
    t0 = time.time()
    if not (ns_path.exists() and vc_path.exists() and vca_path.exists()):
        train = T.load_utts(toy_corpus.manifest, ("train",))
        ns = T.train_ns(train, toy_corpus.bank, cfg)
        save_ns(ns_path, ns)
        vc = T.train_vc(train, T.train_speaker_encoder(train, cfg), cfg)
        save_vc(vc_path, vc)
        pool = T.build_adapt_pool(T.load_utts(toy_corpus.manifest, ("train", "adapt")), ns.model, toy_corpus.bank, cfg)
        save_vc(vca_path, T.adapt_vc(vc, pool, cfg))
    return SimpleNamespace(
        cfg=cfg,
        work=work,
        ns=load_ns(ns_path).model,
        vc_e=load_vc(vc_path, stage="clean"),
        vc_ae=load_vc(vca_path, stage="adapt"),
        train_seconds=time.time() - t0,
    )


@pytest.fixture(scope="session")
def toy_eval(trained, toy_corpus):
    """Eval set at 5 and 10 dB, with reports for every mode."""
    from vcrestore.harness import build_eval_set, run_pipeline

    cfg = copy.deepcopy(trained.cfg)
    cfg.snr_grid = [5, 10]
    eval_dir = trained.work / "eval_5_10"
    if eval_dir.exists():
        shutil.rmtree(eval_dir)
    build_eval_set(toy_corpus.manifest, cfg, out_dir=eval_dir)
    reports = {}
    outputs = {}
    for mode in ("noisy", "ns_only", "vc_e", "vc_ae"):
        outputs[mode] = {}
        reports[mode] = run_pipeline(cfg, mode, toy_corpus.manifest, eval_dir=eval_dir, outputs=outputs[mode])
    return SimpleNamespace(cfg=cfg, eval_dir=eval_dir, reports=reports, outputs=outputs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
