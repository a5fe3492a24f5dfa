"""Result files: nested JSON, per-method comparison tables and paucity figures."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import MetricsReport, paired_ttest

logger = logging.getLogger(__name__)

SIGNIFICANCE_LEVEL = 0.01


def format_result_cell(map_value: float, delta_pct: Optional[float],
                       significant: bool) -> str:
    """`0.422 (+9.1%*)` style: three decimals, signed one-decimal percent,
    a star only when the difference is significant at p < 0.01."""
    if delta_pct is None:
        return f"{map_value:.3f}"
    star = "*" if significant else ""
    return f"{map_value:.3f} ({delta_pct:+.1f}%{star})"


def _collect_ap_vectors(reports: list[MetricsReport]) -> tuple[list[float], list[tuple]]:
    """Per-class APs concatenated over seeds, with (seed, class) keys."""
    values, keys = [], []
    for r in sorted(reports, key=lambda r: (r.seed if r.seed is not None else 0)):
        for cls in sorted(r.per_class_ap):
            values.append(r.per_class_ap[cls])
            keys.append((r.seed, cls))
    return values, keys


def comparison_table(reports: list[MetricsReport], baseline: str,
                     dataset: str = "synthetic") -> tuple[str, dict]:
    """One row per method: mean mAP with percent delta versus the baseline
    and a significance star from a paired test on per-(seed, class) APs."""
    methods = sorted({r.method for r in reports})
    by_method = {m: [r for r in reports if r.method == m] for m in methods}
    base_reports = by_method.get(baseline, [])
    base_vals, base_keys = _collect_ap_vectors(base_reports) if base_reports else ([], [])
    if not base_reports:
        logger.warning("baseline %r absent: delta columns omitted", baseline)

    lines = [f"method\t{dataset}"]
    pvalues: dict[str, float] = {}
    for method in methods:
        mean_map = float(np.mean([r.map for r in by_method[method]]))
        if method == baseline or not base_reports:
            lines.append(f"{method}\t{format_result_cell(mean_map, None, False)}")
            continue
        vals, keys = _collect_ap_vectors(by_method[method])
        if keys == base_keys and vals:
            p = paired_ttest(vals, base_vals)
        else:
            p = float("nan")
            logger.warning("method %r not class/seed aligned with baseline; "
                           "no significance test", method)
        pvalues[method] = p
        base_map = float(np.mean([r.map for r in base_reports]))
        delta = 100.0 * (mean_map - base_map) / base_map
        lines.append(f"{method}\t"
                     f"{format_result_cell(mean_map, delta, p < SIGNIFICANCE_LEVEL)}")
    return "\n".join(lines) + "\n", pvalues


def _paucity_figure(reports: list[MetricsReport], path_base: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .sweep import summarize_sweep
    summary = summarize_sweep([r for r in reports if r.label_ratio is not None])
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for method, rows in sorted(summary.items()):
        ratios = sorted(rows)
        means = [rows[r]["mean_map"] for r in ratios]
        los = [rows[r]["mean_lo"] for r in ratios]
        his = [rows[r]["mean_hi"] for r in ratios]
        ax.plot(ratios, means, marker="o", label=method)
        ax.fill_between(ratios, los, his, alpha=0.2)
    ax.set_xlabel("label ratio")
    ax.set_ylabel("mAP")
    ax.legend()
    fig.tight_layout()
    for suffix in (".png", ".svg"):
        fig.savefig(path_base.with_suffix(suffix))
    plt.close(fig)


def render_report(reports: Sequence[MetricsReport], out_dir: str | Path,
                  baseline: str = "image_only", experiment: str = "experiment",
                  dataset: str = "synthetic") -> dict:
    """Write results.json, tables/*.tsv and (for sweeps) figures/*.png|svg."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to render")
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)

    flat_reports = [r for r in reports if r.label_ratio is None]
    sweep_reports = [r for r in reports if r.label_ratio is not None]

    pvalues: dict[str, float] = {}
    if flat_reports:
        table, pvalues = comparison_table(flat_reports, baseline, dataset)
        (out / "tables" / "main_results.tsv").write_text(table, encoding="utf-8")
    if sweep_reports:
        table, _ = comparison_table(sweep_reports, baseline, dataset)
        (out / "tables" / "sweep_results.tsv").write_text(table, encoding="utf-8")
        (out / "figures").mkdir(exist_ok=True)
        _paucity_figure(sweep_reports, out / "figures" / "map_vs_label_ratio")

    doc = {
        "experiment": experiment,
        "dataset": dataset,
        "baseline": baseline,
        "pvalues_vs_baseline": pvalues,
        "results": [r.to_dict() for r in reports],
    }
    (out / "results.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return doc
