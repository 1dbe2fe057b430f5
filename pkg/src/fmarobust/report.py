"""Metric grids and report rendering.

The grid holds top-1 accuracies for every evaluation condition (clean, the
seven single corruptions, Combined+/-) across models, plus the derived
average-improvement row. CSV and JSON emissions carry identical values
(percentages rounded to 2 decimals). Training curves render to a
dependency-free SVG line chart; augmented sample images go out as PNGs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .augment import (AugKind, AugmentationSet, AugmentationSpec, KIND_LABELS,
                      compose, single_set)
from .calibrate import eval_accuracy
from .data import LabeledDataset
from .errors import ContractError, FormatError
from .rng import RandomStream

# evaluation conditions in reporting order
CONDITION_ORDER = [
    "clean",
    AugKind.BRIGHTNESS_PLUS.value, AugKind.BRIGHTNESS_MINUS.value,
    AugKind.GAUSSIAN_BLUR.value, AugKind.GAUSSIAN_NOISE.value,
    AugKind.ADDITIVE_SAP.value,
    AugKind.SATURATION_PLUS.value, AugKind.SATURATION_MINUS.value,
    "combined_plus", "combined_minus",
]

CONDITION_LABELS = {
    "clean": "Clean", "combined_plus": "Combined+",
    "combined_minus": "Combined-",
    **{k.value: v for k, v in KIND_LABELS.items()},
}


def _pct(x: float) -> float:
    return round(100.0 * x, 2)


@dataclass
class MetricGrid:
    """Accuracy cells plus the average-improvement row.

    `average_improvement` is the mean over the augmentation conditions
    (Clean excluded) of (model - baseline); `average_improvement_with_clean`
    additionally folds in the Clean row for comparison with reports that
    average all conditions.
    """

    conditions: list[str]
    models: list[str]                  # "baseline" first
    accuracy: dict = field(default_factory=dict)   # model -> cond -> float

    def cell(self, model: str, condition: str) -> float:
        return self.accuracy[model][condition]

    def improvements(self, model: str) -> dict[str, float]:
        return {c: self.accuracy[model][c] - self.accuracy["baseline"][c]
                for c in self.conditions}

    def average_improvement(self, model: str) -> float:
        deltas = [v for c, v in self.improvements(model).items() if c != "clean"]
        return float(np.mean(deltas))

    def average_improvement_with_clean(self, model: str) -> float:
        return float(np.mean(list(self.improvements(model).values())))

    def to_table(self) -> dict:
        """Percentages at 2 decimals; the payload both CSV and JSON carry."""
        rows = [{"condition": CONDITION_LABELS[c],
                 **{m: _pct(self.accuracy[m][c]) for m in self.models}}
                for c in self.conditions]
        avg = {"condition": "Average improvement",
               **{m: ("" if m == "baseline"
                      else _pct(self.average_improvement(m)))
                  for m in self.models}}
        avg_all = {"condition": "Average improvement (incl clean)",
                   **{m: ("" if m == "baseline"
                          else _pct(self.average_improvement_with_clean(m)))
                      for m in self.models}}
        return {"columns": ["condition"] + self.models,
                "rows": rows + [avg, avg_all]}

    def to_csv(self) -> str:
        table = self.to_table()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=table["columns"])
        writer.writeheader()
        for row in table["rows"]:
            writer.writerow(row)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_table(), indent=2)


def evaluate_grid(models: dict[str, M.ModelSnapshot], valset: LabeledDataset,
                  specs: dict[AugKind, AugmentationSpec],
                  plus_set: AugmentationSet, minus_set: AugmentationSet,
                  rng: RandomStream, batch_size: int = 256) -> MetricGrid:
    """Evaluate every model under every condition with shared eval streams."""
    if "baseline" not in models:
        raise ContractError("evaluate_grid needs a 'baseline' model")
    order = ["baseline"] + [m for m in models if m != "baseline"]
    grid = MetricGrid(conditions=list(CONDITION_ORDER), models=order)
    for name in order:
        model = models[name]
        accs = {}
        for cond in CONDITION_ORDER:
            if cond == "clean":
                aug = None
            elif cond == "combined_plus":
                aug = plus_set
            elif cond == "combined_minus":
                aug = minus_set
            else:
                aug = single_set(specs[AugKind(cond)])
            accs[cond] = eval_accuracy(model, valset, aug,
                                       rng.derive("grid", cond),
                                       batch_size=batch_size)
        grid.accuracy[name] = accs
    return grid


# ---------------------------------------------------------------------------
# training curves (CSV + SVG)


def curves_from_manifest(manifest_epochs: list[dict]) -> dict[str, list[float]]:
    """Per-epoch accuracy series: clean plus one per corruption kind."""
    series: dict[str, list[float]] = {"clean": []}
    for row in manifest_epochs:
        series["clean"].append(row["val_clean_acc"])
        for kind, acc in row.get("aug_acc", {}).items():
            series.setdefault(kind, []).append(acc)
    return series


def curves_to_csv(series: dict[str, list[float]]) -> str:
    names = list(series)
    epochs = len(series[names[0]])
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["epoch"] + names)
    for e in range(epochs):
        writer.writerow([e] + [f"{series[n][e]:.6f}" for n in names])
    return buf.getvalue()


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def render_line_chart(series: dict[str, list[float]], title: str,
                      width: int = 720, height: int = 440) -> str:
    """Minimal deterministic SVG line chart; y axis is accuracy in [0,1]."""
    if not series:
        raise ContractError("render_line_chart: no series")
    left, right, top, bottom = 56, 160, 36, 44
    pw, ph = width - left - right, height - top - bottom
    n = max(len(v) for v in series.values())
    xmax = max(n - 1, 1)

    def sx(e):
        return left + pw * e / xmax

    def sy(a):
        return top + ph * (1.0 - a)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="20" font-family="sans-serif" font-size="14">'
        f'{title}</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(tick)
        parts.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" '
                     f'y2="{y:.1f}" stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{tick:.2f}</text>')
    step = max(1, xmax // 10)
    for e in range(0, n, step):
        x = sx(e)
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 16}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{e}</text>')
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" '
                 f'stroke="black" stroke-width="1"/>')
    parts.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" '
                 f'y2="{top + ph}" stroke="black" stroke-width="1"/>')

    for i, (name, values) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{sx(e):.2f},{sy(a):.2f}"
                          for e, a in enumerate(values))
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{points}"/>')
        ly = top + 16 * i
        lx = left + pw + 12
        parts.append(f'<line x1="{lx}" y1="{ly + 6}" x2="{lx + 18}" '
                     f'y2="{ly + 6}" stroke="{color}" stroke-width="2"/>')
        label = CONDITION_LABELS.get(name, name)
        parts.append(f'<text x="{lx + 24}" y="{ly + 10}" '
                     f'font-family="sans-serif" font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# image round trips (PNG via Pillow)


def image_to_png(img: np.ndarray, path) -> None:
    from PIL import Image as PILImage
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def png_to_image(path) -> np.ndarray:
    from PIL import Image as PILImage
    with PILImage.open(path) as handle:
        rgb = handle.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def write_sample_images(sample: np.ndarray,
                        specs: dict[str, AugmentationSpec],
                        out_dir, seed: int = 0,
                        sets: dict[str, AugmentationSet] | None = None) -> list:
    """The qualitative panel: the clean sample plus one PNG per spec/set."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    written = []
    rng = RandomStream(seed)

    def emit(name, img):
        path = os.path.join(out_dir, f"{name}.png")
        image_to_png(img, path)
        written.append(path)

    emit("clean", sample)
    for name, spec in sorted(specs.items()):
        img = compose(sample, single_set(spec), rng.derive("sample", name))
        emit(name.replace("/", "_"), img)
    for name, aug_set in sorted((sets or {}).items()):
        img = compose(sample, aug_set, rng.derive("sample", name))
        emit(name.replace("/", "_"), img)
    return written
