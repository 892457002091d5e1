"""Metrics, per-stratum reports, seed aggregation, and attention export.

roc_auc uses the rank (Mann-Whitney U) formulation with midranks, so it
is exact under ties: the value is P(score_pos > score_neg) plus half the
tie probability. average_precision is the interpolation-free step sum
over the descending-score sweep with ties broken by stable input order.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .config import VARIANT_TABLE_ORDER
from .netpbm import write_pgm, write_ppm


def accuracy(predictions, labels) -> float:
    """Fraction of exact matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError("accuracy of empty input is undefined")
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    return float(np.mean(predictions == labels))


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average of 1-based ranks
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative) + half ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = _midranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """Step-sum AP over the descending-score sweep (no interpolation)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = (labels[order] == 1).astype(np.float64)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(np.sum(precision * hits) / n_pos)


# -- per-run reports -------------------------------------------------------------


def _stratum_metrics(scores: np.ndarray, labels: np.ndarray) -> dict:
    out = {"n": int(labels.size),
           "accuracy": accuracy((scores >= 0.5).astype(int), labels)}
    if 0 < labels.sum() < labels.size:
        out["auc"] = roc_auc(scores, labels)
        out["ap"] = average_precision(scores, labels)
    return out


def evaluate_records(yes_scores, records: list[dict]) -> dict:
    """Metrics overall, per object class, and on the context-ambiguous stratum.

    `yes_scores` are probabilities of the answer "yes", aligned with
    `records`; labels come from the records themselves.
    """
    yes_scores = np.asarray(yes_scores, dtype=np.float64)
    labels = np.array([1 if r["answer"] == "yes" else 0 for r in records])
    if yes_scores.shape != labels.shape:
        raise ValueError(f"scores {yes_scores.shape} vs records {labels.shape}")
    report = {"n": int(labels.size), "overall": _stratum_metrics(yes_scores, labels),
              "per_object": {}, "strata": {}}
    objects = sorted({r["object"] for r in records})
    for obj in objects:
        sel = np.array([r["object"] == obj for r in records])
        report["per_object"][obj] = _stratum_metrics(yes_scores[sel], labels[sel])
    ambiguous = np.array([bool(r.get("ambiguous")) for r in records])
    if ambiguous.any():
        report["strata"]["context_ambiguous"] = _stratum_metrics(
            yes_scores[ambiguous], labels[ambiguous])
    return report


def write_report_json(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


def _fmt(value) -> str:
    return f"{value:.3f}" if isinstance(value, float) else str(value)


def report_markdown(report: dict) -> str:
    lines = ["# Evaluation report", ""]
    if "variant" in report:
        lines.append(f"variant: `{report['variant']}`, split: `{report.get('split', '?')}`, "
                     f"n = {report['n']}")
        lines.append("")
    metrics = [m for m in ("auc", "ap", "accuracy") if m in report["overall"]]
    header = "| stratum | n | " + " | ".join(metrics) + " |"
    lines += [header, "|" + "---|" * (len(metrics) + 2)]

    def row(name, cell):
        values = " | ".join(_fmt(cell[m]) if m in cell else "-" for m in metrics)
        lines.append(f"| {name} | {cell['n']} | {values} |")

    row("overall", report["overall"])
    for obj in sorted(report.get("per_object", {})):
        row(f"object: {obj}", report["per_object"][obj])
    for stratum in sorted(report.get("strata", {})):
        row(stratum, report["strata"][stratum])
    return "\n".join(lines) + "\n"


def report_csv(path, report: dict) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("stratum", "metric", "value", "n"))
        groups = [("overall", report["overall"])]
        groups += [(f"object:{k}", v) for k, v in sorted(report.get("per_object", {}).items())]
        groups += sorted(report.get("strata", {}).items())
        for name, cell in groups:
            for metric in ("auc", "ap", "accuracy"):
                if metric in cell:
                    writer.writerow((name, metric, f"{cell[metric]:.6f}", cell["n"]))


# -- seed aggregation -------------------------------------------------------------


def mean_std(values) -> dict:
    """Population mean/std plus the 3-decimal 'mean ± std' rendering."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    # population std (ddof 0); exactly 0 for identical values
    std = 0.0 if np.all(arr == arr[0]) else float(arr.std())
    return {"mean": mean, "std": std, "formatted": f"{mean:.3f} ± {std:.3f}",
            "values": [float(v) for v in arr]}


def _leaf_paths(report: dict, prefix=()) -> list[tuple]:
    paths = []
    for key, value in report.items():
        if isinstance(value, dict):
            paths.extend(_leaf_paths(value, prefix + (key,)))
        elif isinstance(value, (int, float)) and key != "n":
            paths.append(prefix + (key,))
    return paths


def aggregate_seeds(reports: list[dict]) -> dict:
    """Combine identically-shaped per-seed reports into mean ± std cells."""
    if not reports:
        raise ValueError("no reports to aggregate")
    paths = sorted(_leaf_paths(reports[0]))
    for other in reports[1:]:
        if sorted(_leaf_paths(other)) != paths:
            raise ValueError("reports have mismatched strata; cannot aggregate")
    out: dict = {"n_seeds": len(reports)}
    for path in paths:
        values = []
        for rep in reports:
            node = rep
            for key in path:
                node = node[key]
            values.append(node)
        cursor = out
        for key in path[:-1]:
            cursor = cursor.setdefault(key, {})
        cursor[path[-1]] = mean_std(values)
    return out


# -- comparison tables -------------------------------------------------------------


def build_comparison(per_variant_reports: dict[str, list[dict]]) -> dict:
    """Aggregate per-seed reports for each variant into one comparison doc."""
    comparison = {"variants": {}}
    for variant in VARIANT_TABLE_ORDER:
        if variant in per_variant_reports:
            comparison["variants"][variant] = aggregate_seeds(per_variant_reports[variant])
    extra = [v for v in per_variant_reports if v not in VARIANT_TABLE_ORDER]
    for variant in extra:
        comparison["variants"][variant] = aggregate_seeds(per_variant_reports[variant])
    return comparison


def _cell(agg: dict, *path) -> str:
    node = agg
    for key in path:
        if key not in node:
            return "-"
        node = node[key]
    return node["formatted"]


def comparison_markdown(comparison: dict) -> str:
    lines = ["# Variant comparison", "",
             "| Method | AUC | AP | Accuracy |", "|---|---|---|---|"]
    for variant, agg in comparison["variants"].items():
        lines.append(f"| {variant} | {_cell(agg, 'overall', 'auc')} | "
                     f"{_cell(agg, 'overall', 'ap')} | {_cell(agg, 'overall', 'accuracy')} |")
    objects = sorted({obj for agg in comparison["variants"].values()
                      for obj in agg.get("per_object", {})})
    if objects:
        lines += ["", "## Per-object AUC", "",
                  "| Method | " + " | ".join(objects) + " |",
                  "|" + "---|" * (len(objects) + 1)]
        for variant, agg in comparison["variants"].items():
            cells = [_cell(agg, "per_object", obj, "auc") for obj in objects]
            lines.append(f"| {variant} | " + " | ".join(cells) + " |")
    strata = sorted({s for agg in comparison["variants"].values()
                     for s in agg.get("strata", {})})
    if strata:
        lines += ["", "## Stratum AUC", "",
                  "| Method | " + " | ".join(strata) + " |",
                  "|" + "---|" * (len(strata) + 1)]
        for variant, agg in comparison["variants"].items():
            cells = [_cell(agg, "strata", s, "auc") for s in strata]
            lines.append(f"| {variant} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def comparison_csv(path, comparison: dict) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("variant", "stratum", "metric", "mean", "std"))
        for variant, agg in comparison["variants"].items():
            for metric in ("auc", "ap", "accuracy"):
                if metric in agg.get("overall", {}):
                    cell = agg["overall"][metric]
                    writer.writerow((variant, "overall", metric,
                                     f"{cell['mean']:.6f}", f"{cell['std']:.6f}"))
            for obj, metrics in sorted(agg.get("per_object", {}).items()):
                for metric, cell in sorted(metrics.items()):
                    writer.writerow((variant, f"object:{obj}", metric,
                                     f"{cell['mean']:.6f}", f"{cell['std']:.6f}"))
            for stratum, metrics in sorted(agg.get("strata", {}).items()):
                for metric, cell in sorted(metrics.items()):
                    writer.writerow((variant, stratum, metric,
                                     f"{cell['mean']:.6f}", f"{cell['std']:.6f}"))


# -- attention export ---------------------------------------------------------------


def export_attention(weights: np.ndarray, image: np.ndarray, mask: np.ndarray,
                     out_prefix) -> list[Path]:
    """Write one heatmap PGM and one overlay PPM per glimpse.

    weights: (G, h, w) attention map; image: (3, S, S) floats in [0, 1];
    mask: (S, S) binary region. The PGM is the nearest-upsampled map
    min-max normalized to [0, 255] (a constant map renders as 0); the
    overlay blends the image 50/50 with a red heat layer and outlines the
    region boundary.
    """
    from .model import region_boundary

    weights = np.asarray(weights, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    g, h, w = weights.shape
    size = image.shape[1]
    if size % h or image.shape[2] % w:
        raise ValueError(f"image {image.shape} not an integer upsample of map {weights.shape}")
    boundary = region_boundary(mask)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(g):
        up = np.repeat(np.repeat(weights[k], size // h, axis=0),
                       image.shape[2] // w, axis=1)
        lo, hi = up.min(), up.max()
        norm = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
        pgm_path = out_prefix.parent / f"{out_prefix.name}_g{k}.pgm"
        write_pgm(pgm_path, norm)
        overlay = 0.5 * image.copy()
        overlay[0] += 0.5 * norm
        overlay[:, boundary] = np.array([0.1, 1.0, 0.1])[:, None]
        ppm_path = out_prefix.parent / f"{out_prefix.name}_g{k}_overlay.ppm"
        write_ppm(ppm_path, np.clip(overlay, 0.0, 1.0))
        paths.extend([pgm_path, ppm_path])
    return paths
