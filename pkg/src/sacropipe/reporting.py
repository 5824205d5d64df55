"""File outputs: report JSON, ROC/confusion/prediction CSVs and ROC SVG."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_roc_csv(path, roc: dict) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(roc["thresholds"], roc["fpr"], roc["tpr"]):
            w.writerow(["inf" if t is None else repr(float(t)), repr(float(f)), repr(float(p))])
    return Path(path)


def write_confusion_csv(path, cm: dict) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["", "predicted_negative", "predicted_positive"])
        w.writerow(["actual_negative", cm["tn"], cm["fp"]])
        w.writerow(["actual_positive", cm["fn"], cm["tp"]])
    return Path(path)


def write_predictions_csv(path, records) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "probability", "cutoff", "predicted", "confident"])
        for r in records:
            w.writerow([r.sample_id, repr(r.probability), repr(r.cutoff), r.predicted, int(r.confident)])
    return Path(path)


def roc_svg(curves: dict[str, dict], size: int = 320) -> str:
    """Minimal standalone SVG of one or more ROC curves (``name -> {fpr, tpr, auc}``)."""
    pad = 40
    span = size - 2 * pad
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#000"/>',
             f'<line x1="{pad}" y1="{pad + span}" x2="{pad + span}" y2="{pad}" stroke="#999" '
             'stroke-dasharray="4 4"/>',
             f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">'
             'False positive rate</text>',
             f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 12 {size / 2})">True positive rate</text>']
    for i, (name, c) in enumerate(sorted(curves.items())):
        pts = " ".join(f"{pad + f * span:.2f},{pad + (1 - t) * span:.2f}"
                       for f, t in zip(c["fpr"], c["tpr"]))
        color = colors[i % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        label = f"{name} (AUC {c['auc']:.3f})" if c.get("auc") is not None else name
        parts.append(f'<text x="{pad + span - 4}" y="{pad + span - 8 - 16 * i}" text-anchor="end" '
                     f'font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
