"""Tabular exports of search histories for plotting."""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .search import SearchError, read_history, select_best

EXPORTS = ("policy_bars.csv", "episodes.csv", "frontier.csv", "table1.csv")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _final_report(history_path: Path) -> dict | None:
    # a search run directory keeps the fine-tuned report next to the history
    final = history_path.parent / "final_report.json"
    if final.exists():
        return json.loads(final.read_text())
    return None


def export_reports(history_paths: list[str | Path], out_dir: str | Path) -> list[Path]:
    """Write per-layer policy bars, per-episode curves, the frontier and a Table-1 style summary."""
    if not history_paths:
        raise SearchError("no history files given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bars, curves, frontier, table = [], [], [], []
    versions = set()
    for p in map(Path, history_paths):
        header, episodes = read_history(p)
        versions.add(header["version"])
        if len(versions) > 1:
            raise SearchError("history files of different format versions cannot be mixed")
        cfg = header["config"]
        name = p.stem if p.parent == out else f"{p.parent.name}/{p.stem}"
        stage = header.get("stage", "single")
        for e in episodes:
            r = e.report
            curves.append([name, e.episode, int(e.warmup), e.sigma, e.reward, r.accuracy, r.relative_latency,
                           r.macs, r.bops])
        if not episodes:
            continue
        best = select_best(episodes, cfg["target"])
        for lid, cmp_ in best.policy.layers.items():
            bars.append([name, lid, cmp_.kept, cmp_.mode, cmp_.b_a, cmp_.b_w])
        r = best.report
        frontier.append([name, cfg["agent"], stage, cfg["target"], r.relative_latency, r.accuracy, best.episode])
        # the run's fine-tuned report belongs to its last stage only
        final = _final_report(p) if stage in ("single", "stage2") else None
        acc_final = None if final is None else final["accuracy"]
        table.append([
            cfg["agent"] if stage == "single" else f"{cfg['agent']} ({stage})",
            cfg["target"], round(r.latency_ms, 6), round(r.reference_latency_ms, 6), round(r.relative_latency, 6),
            r.accuracy, acc_final, r.macs, r.bops,
        ])
    files = [out / name for name in EXPORTS]
    _write_csv(files[0], ["history", "layer", "kept", "mode", "b_a", "b_w"], bars)
    _write_csv(files[1], ["history", "episode", "warmup", "sigma", "reward", "accuracy", "relative_latency",
                          "macs", "bops"], curves)
    _write_csv(files[2], ["history", "agent", "stage", "target", "relative_latency", "accuracy", "episode"],
               frontier)
    _write_csv(files[3], ["agent", "target", "latency_ms", "reference_latency_ms", "relative_latency",
                          "val_accuracy", "test_accuracy_finetuned", "macs", "bops"], table)
    return files
