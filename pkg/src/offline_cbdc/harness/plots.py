"""Figures for the bench report, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchRow  # noqa: E402


def _series(rows: list[BenchRow], variant: str, mode: str, column: str) -> tuple[list[int], list[int]]:
    pts = sorted((r.n, getattr(r, column)) for r in rows if r.variant == variant and r.mode == mode)
    return [n for n, _ in pts], [v for _, v in pts]


_STYLES = ("-", "--", ":", "-.")


def plot_sync_growth(rows: list[BenchRow], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for style, variant in zip(_STYLES, sorted({r.variant for r in rows})):
        for mode in sorted({r.mode for r in rows}):
            xs, ys = _series(rows, variant, mode, "sync_payload")
            ax.plot(xs, ys, linestyle=style, marker="o", label=f"{variant} / {mode}")
    ax.set_xlabel("log entries since last sync (n)")
    ax.set_ylabel("sync payload bytes")
    ax.set_title("Synchronization payload")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_operation_counts(rows: list[BenchRow], path: Path) -> Path:
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 4))
    for style, variant in zip(_STYLES, sorted({r.variant for r in rows})):
        for mode in sorted({r.mode for r in rows}):
            xs, ys = _series(rows, variant, mode, "payment_msgs")
            left.plot(xs, ys, linestyle=style, marker="o", label=f"{variant} / {mode}")
            xs, ys = _series(rows, variant, mode, "payment_bytes")
            right.plot(xs, ys, linestyle=style, marker="s", label=f"{variant} / {mode}")
    left.set_xlabel("n")
    left.set_ylabel("messages per payment")
    right.set_xlabel("n")
    right.set_ylabel("bytes per payment")
    left.set_ylim(bottom=0)
    right.set_ylim(bottom=0)
    right.legend(fontsize=7)
    fig.suptitle("Payment cost against log size")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_handshake_ops(ops: dict[str, tuple[int, int]], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    names = list(ops)
    init = [ops[n][0] for n in names]
    resp = [ops[n][1] for n in names]
    ax.bar(names, init, label="initiator")
    ax.bar(names, resp, bottom=init, label="responder")
    ax.set_ylabel("asymmetric operations per handshake")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_all(rows: list[BenchRow], ops: dict[str, tuple[int, int]], out_dir: str | Path,
               fmt: str = "png") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        plot_sync_growth(rows, out / f"sync_payload.{fmt}"),
        plot_operation_counts(rows, out / f"payment_cost.{fmt}"),
        plot_handshake_ops(ops, out / f"handshake_ops.{fmt}"),
    ]
