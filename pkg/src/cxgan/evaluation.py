"""Dataset-level scoring of attribution maps and counterfactual instances."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .core import AttributionMap, Image, Label, LabeledSample, MetricError, RangeTag, to_model_range
from .explain import DEFAULT_THRESHOLD, binarize, counterfactual, maps_for
from .metrics import dice, iou, masked_ssim, ncc, non_resemblance
from .nets import ModelBundle

LITERAL_THRESHOLD = 1.0

METRIC_COLUMNS = (
    "iou", "dice", "iou_literal", "dice_literal", "ncc",
    "nonres_lesion", "nonres_normal", "nonres_total",
    "nonres_lesion_literal", "nonres_normal_literal", "nonres_total_literal",
    "ssim_masked",
)


@dataclass
class MetricsReport:
    rows: list[dict[str, Any]]
    provenance: dict[str, Any] = field(default_factory=dict)
    skipped: list[dict[str, str]] = field(default_factory=list)

    @property
    def aggregates(self) -> dict[str, dict[str, float]]:
        """Mean / std / count per metric over rows where the metric is defined."""
        out = {}
        for c in METRIC_COLUMNS:
            vals = np.array([r[c] for r in self.rows if r.get(c) is not None], dtype=np.float64)
            out[c] = {
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "std": float(vals.std()) if vals.size else float("nan"),
                "n": int(vals.size),
            }
        return out

    def mean(self, metric: str) -> float:
        return self.aggregates[metric]["mean"]

    @property
    def lesion_to_normal_ratio(self) -> float:
        """Mean |change| inside the lesion divided by mean |change| outside it."""
        a = self.aggregates
        normal = a["nonres_normal"]["mean"]
        return a["nonres_lesion"]["mean"] / normal if normal > 0 else float("inf")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "status", *METRIC_COLUMNS])
        for r in self.rows:
            w.writerow([r["sample_id"], "ok", *["" if r.get(c) is None else repr(float(r[c]))
                                                  for c in METRIC_COLUMNS]])
        for s in self.skipped:
            w.writerow([s["sample_id"], f"skipped: {s['reason']}", *[""] * len(METRIC_COLUMNS)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary_table(self, method: str = "CX-GAN") -> str:
        a = self.aggregates
        t = self.provenance.get("threshold_fraction", DEFAULT_THRESHOLD)

        def pct(k):
            return f"{100 * a[k]['mean']:.1f}"

        lines = [
            f"threshold_fraction={t}  literal_threshold={LITERAL_THRESHOLD}  "
            f"n={len(self.rows)}  skipped={len(self.skipped)}",
            "",
            f"| {'Method':<24} | IoU Score | Dice Score | NCC Mean | NCC Std | IoU (t=1) | Dice (t=1) |",
            f"|{'-' * 26}|-----------|------------|----------|---------|-----------|------------|",
            f"| {method:<24} | {pct('iou'):>9} | {pct('dice'):>10} | {a['ncc']['mean']:>8.3f} "
            f"| {a['ncc']['std']:>7.4f} | {pct('iou_literal'):>9} | {pct('dice_literal'):>10} |",
            "",
            f"| {'Non-resemblance':<24} | Lesion region | Normal region | Total |",
            f"|{'-' * 26}|---------------|---------------|-------|",
            f"| {'absolute (default)':<24} | {a['nonres_lesion']['mean']:>13.3f} "
            f"| {a['nonres_normal']['mean']:>13.3f} | {a['nonres_total']['mean']:>5.3f} |",
            f"| {'literal':<24} | {a['nonres_lesion_literal']['mean']:>13.3f} "
            f"| {a['nonres_normal_literal']['mean']:>13.3f} | {a['nonres_total_literal']['mean']:>5.3f} |",
            "",
            f"| SSIM (masked) | {a['ssim_masked']['mean']:.4f} |",
        ]
        return "\n".join(lines) + "\n"


def _or_none(fn, *args):
    try:
        v = fn(*args)
    except MetricError:
        return None
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def score_sample(x_pos: Image, m: AttributionMap, gt, threshold_fraction: float = DEFAULT_THRESHOLD,
                 effect_sign: float = -1.0) -> dict[str, Any]:
    """All per-sample metrics for one positive image and its map.

    ``gt`` is the ground-truth effect map (or mask); its nonzero support is the
    lesion. The map is compared against the effect as ``effect_sign * M``:
    since x+ = x- - M, the disease effect is -M.
    """
    gt_arr = np.asarray(gt.data if hasattr(gt, "data") else gt, dtype=np.float64)
    gt_mask = gt_arr != 0
    cf, _ = counterfactual(x_pos, m)
    x01 = (x_pos.data + 1.0) / 2.0
    cf01 = (cf.data + 1.0) / 2.0
    row: dict[str, Any] = {}
    pred = binarize(m, threshold_fraction)
    pred_lit = binarize(m, LITERAL_THRESHOLD)
    row["iou"], row["dice"] = iou(pred, gt_mask), dice(pred, gt_mask)
    row["iou_literal"], row["dice_literal"] = iou(pred_lit, gt_mask), dice(pred_lit, gt_mask)
    row["ncc"] = _or_none(ncc, effect_sign * np.asarray(m.data), gt_arr)
    nr = _or_none(non_resemblance, x01, cf01, gt_mask, "absolute")
    nl = _or_none(non_resemblance, x01, cf01, gt_mask, "literal")
    for key, vals in (("", nr), ("_literal", nl)):
        for i, region in enumerate(("lesion", "normal", "total")):
            row[f"nonres_{region}{key}"] = None if vals is None else vals[i]
    row["ssim_masked"] = _or_none(masked_ssim, x01, cf01, gt_mask)
    return row


def evaluate_maps(samples: Sequence[LabeledSample], maps: Sequence[AttributionMap],
                  threshold_fraction: float = DEFAULT_THRESHOLD, effect_sign: float = -1.0,
                  provenance: Optional[dict] = None) -> MetricsReport:
    rows = []
    for s, m in zip(samples, maps):
        x = _as_model11(s.image)
        row = score_sample(x, m, s.ground_truth, threshold_fraction, effect_sign)
        rows.append({"sample_id": s.sample_id, **row})
    prov = {"threshold_fraction": threshold_fraction, "effect_sign": effect_sign}
    prov.update(provenance or {})
    return MetricsReport(rows, prov)


def _as_model11(img: Image) -> Image:
    return img if img.range_tag is RangeTag.MODEL11 else to_model_range(img)


def evaluate_dataset(bundle: ModelBundle, test: Sequence[LabeledSample],
                     threshold_fraction: float = DEFAULT_THRESHOLD, checkpoint_hash: Optional[str] = None,
                     effect_sign: float = -1.0) -> MetricsReport:
    """Score every positive test sample; positives without ground truth are listed as skipped."""
    scored, skipped = [], []
    for s in test:
        if s.label is not Label.POSITIVE:
            continue
        if s.ground_truth is None:
            skipped.append({"sample_id": s.sample_id, "reason": "missing ground truth"})
        elif not np.any(np.asarray(s.ground_truth.data) != 0):
            skipped.append({"sample_id": s.sample_id, "reason": "empty ground truth"})
        else:
            scored.append(s)
    maps = maps_for(bundle, [_as_model11(s.image) for s in scored]) if scored else []
    report = evaluate_maps(scored, maps, threshold_fraction, effect_sign, {
        "scheme": bundle.scheme.value,
        "checkpoint_hash": checkpoint_hash,
        "epoch": bundle.epoch,
    })
    report.skipped = skipped
    return report


def comparison_table(reports: dict[str, MetricsReport]) -> str:
    """Side-by-side rows for several methods in the IoU / Dice / NCC layout."""
    head = (f"| {'Method':<28} | IoU Score | Dice Score | NCC Mean | NCC Std | "
            f"Lesion | Normal | Total | SSIM (masked) |")
    lines = [head, "|" + "|".join("-" * (len(c)) for c in head.split("|")[1:-1]) + "|"]
    for name, r in reports.items():
        a = r.aggregates
        lines.append(
            f"| {name:<28} | {100 * a['iou']['mean']:>9.1f} | {100 * a['dice']['mean']:>10.1f} "
            f"| {a['ncc']['mean']:>8.3f} | {a['ncc']['std']:>7.4f} | {a['nonres_lesion']['mean']:>6.3f} "
            f"| {a['nonres_normal']['mean']:>6.3f} | {a['nonres_total']['mean']:>5.3f} "
            f"| {a['ssim_masked']['mean']:>13.4f} |"
        )
    return "\n".join(lines) + "\n"
