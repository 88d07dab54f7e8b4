"""Figure rendering for training curves and length-binned quality reports.

Every report-producing path can drop a PNG next to its delimited output:
the training history becomes a two-panel perplexity/BLEU-per-epoch figure,
and a length-bin report becomes a two-panel BLEU and negative-WER curve
over source-length bins.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import LengthBinReport


def render_training_curves(history: list[dict], path: str | Path) -> None:
    """history: dicts with epoch, val_ppl, val_bleu (history.jsonl rows)."""
    epochs = [h["epoch"] for h in history]
    ppl = [h["val_ppl"] for h in history]
    bleu = [h["val_bleu"] for h in history]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    ax1.plot(epochs, ppl, marker="o", color="tab:red")
    ax1.set_ylabel("validation perplexity")
    ax1.grid(True, alpha=0.3)
    ax2.plot(epochs, bleu, marker="o", color="tab:blue")
    ax2.set_ylabel("validation BLEU")
    ax2.set_xlabel("epoch")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_length_bins(report: LengthBinReport, path: str | Path) -> None:
    labels = [
        f"{b.min_len}" if b.min_len == b.max_len else f"{b.min_len}-{b.max_len}"
        for b in report.bins
    ]
    x = range(len(report.bins))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(x, [b.bleu for b in report.bins], marker="o", color="tab:blue")
    ax1.set_ylabel("BLEU")
    ax1.grid(True, alpha=0.3)
    ax2.plot(x, [b.neg_wer for b in report.bins], marker="s", color="tab:green")
    ax2.set_ylabel("-WER")
    ax2.set_xlabel("source length bin")
    ax2.set_xticks(list(x), labels, rotation=45)
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
