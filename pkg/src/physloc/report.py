"""Run comparison: metrics-log parsing, delta tables, and loss figures.

A run is a metrics log plus, when present, the resolved config written
next to it. Comparisons are anchored to the first run given; the config
check flags runs that differ from the anchor in anything other than the
loss-weight fields and the seed, since those are the axes an ablation
legitimately varies.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError, ValidationError

METRIC_KEYS = (
    "epoch", "lr", "loss_total", "loss_itc",
    "loss_color", "loss_struc", "loss_tex",
)
# flat config keys an ablation may vary without tainting a comparison
_VARIABLE_KEYS = {"lambda", "w_color", "w_struc", "w_tex", "seed",
                  "checkpoint_every"}


def read_metrics_log(path) -> list[dict]:
    """Parse one newline-delimited metrics log, validating the schema."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read metrics log {path}: {e}") from e
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path} line {lineno}: invalid record: {e}") from e
        missing = [k for k in METRIC_KEYS if k not in rec]
        if missing:
            raise ParseError(
                f"{path} line {lineno}: record lacks {missing[0]!r}"
            )
        records.append(rec)
    if not records:
        raise ParseError(f"{path} holds no metric records")
    return records


@dataclass
class RunLog:
    """One training run's trajectory plus its resolved config if saved."""

    name: str
    records: list[dict]
    config: dict | None


def load_run(path, name: str | None = None) -> RunLog:
    """Read a metrics log; a sibling config.json supplies the config."""
    path = Path(path)
    records = read_metrics_log(path)
    cfg_path = path.parent / "config.json"
    config = None
    if cfg_path.exists():
        try:
            config = json.loads(cfg_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"{cfg_path}: invalid config: {e}") from e
    return RunLog(name=name or path.parent.name, records=records, config=config)


def _config_clash(anchor: dict | None, other: dict | None) -> bool:
    if anchor is None or other is None:
        return False
    keys = (set(anchor) | set(other)) - _VARIABLE_KEYS
    return any(anchor.get(k) != other.get(k) for k in keys)


def compare_runs(runs: list[RunLog]) -> list[dict]:
    """Final-epoch losses per run with deltas against the first run."""
    if not runs:
        raise ValidationError("no runs to compare")
    base = runs[0].records[-1]
    rows = []
    for run in runs:
        last = run.records[-1]
        cfg = run.config or {}
        rows.append(
            {
                "run": run.name,
                "epochs": last["epoch"],
                "lambda": cfg.get("lambda"),
                "w_color": cfg.get("w_color"),
                "w_struc": cfg.get("w_struc"),
                "w_tex": cfg.get("w_tex"),
                "seed": cfg.get("seed"),
                "loss_total": last["loss_total"],
                "loss_itc": last["loss_itc"],
                "loss_color": last["loss_color"],
                "loss_struc": last["loss_struc"],
                "loss_tex": last["loss_tex"],
                "delta_total": last["loss_total"] - base["loss_total"],
                "config_mismatch": _config_clash(runs[0].config, run.config),
            }
        )
    return rows


def write_comparison_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValidationError("empty comparison")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def render_figures(runs: list[RunLog], out_dir) -> list[Path]:
    """Loss-total and per-component curves as PNG files.

    The Agg backend is forced and PNG date metadata suppressed so reruns
    produce identical bytes.
    """
    if not runs:
        raise ValidationError("no runs to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for run in runs:
        epochs = [r["epoch"] for r in run.records]
        ax.plot(epochs, [r["loss_total"] for r in run.records], label=run.name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    total_path = out_dir / "loss_total.png"
    fig.savefig(total_path, metadata={"Date": None})
    plt.close(fig)
    written.append(total_path)

    comps = ("loss_itc", "loss_color", "loss_struc", "loss_tex")
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for ax, comp in zip(axes.flat, comps):
        for run in runs:
            epochs = [r["epoch"] for r in run.records]
            ax.plot(epochs, [r[comp] for r in run.records], label=run.name)
        ax.set_title(comp)
    axes.flat[0].legend(fontsize="small")
    fig.tight_layout()
    comp_path = out_dir / "loss_components.png"
    fig.savefig(comp_path, metadata={"Date": None})
    plt.close(fig)
    written.append(comp_path)
    return written
