"""Stacked log-Mel panels for a degraded input and its enhanced outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .signal import mel_analyze  # noqa: E402

PANEL_TITLES = ("Input mixture", "NS output", "Restored output")


def render_figure(noisy, ns_out, restored, titles=PANEL_TITLES):
    """Figure with one log-Mel panel per waveform, sharing time and frequency axes."""
    waves = (noisy, ns_out, restored)
    if len({w.sample_rate for w in waves}) != 1:
        raise ValueError("waveforms must share a sample rate")
    mels = [mel_analyze(w) for w in waves]
    n_frames = max(m.n_frames for m in mels)
    hop_s = mels[0].frame_hop / mels[0].sample_rate
    vmin = min(float(m.values.min()) for m in mels)
    vmax = max(float(m.values.max()) for m in mels)
    with plt.style.context("default"):
        fig, axes = plt.subplots(3, 1, sharex=True, sharey=True, figsize=(8, 7))
        for ax, mel, title in zip(axes, mels, titles):
            img = ax.imshow(mel.values.T, origin="lower", aspect="auto", interpolation="nearest",
                            extent=(0, mel.n_frames * hop_s, 0, mel.n_mels), vmin=vmin, vmax=vmax, cmap="magma")
            ax.set_title(title)
            ax.set_ylabel("Mel band")
        axes[0].set_xlim(0, n_frames * hop_s)
        axes[-1].set_xlabel("Time (s)")
        fig.colorbar(img, ax=list(axes), label="log power")
    return fig


def emit_figure(noisy, ns_out, restored, path, titles=PANEL_TITLES, dpi=100) -> Path:
    """Write the three-panel figure as a PNG; identical inputs give identical bytes."""
    path = Path(path)
    fig = render_figure(noisy, ns_out, restored, titles)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="png", dpi=dpi, metadata={"Software": None})
    except OSError as exc:
        raise OSError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path
