"""Image-quality metrics and evaluation reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# metric name -> True when larger is better
METRICS = {
    "psnr": True,
    "ssim": True,
    "l2": False,
    "masked_psnr": True,
    "masked_ssim": True,
    "masked_l2": False,
}


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def _gray(x):
    return x.mean(axis=-1) if x.ndim == 3 else x


def ssim_map(a, b, window: int = SSIM_WINDOW) -> np.ndarray:
    """Local SSIM over every fully contained ``window x window`` patch."""
    a, b = _same_shape(a, b)
    a, b = _gray(a), _gray(b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    pa = sliding_window_view(a, (window, window))
    pb = sliding_window_view(b, (window, window))
    mu_a = pa.mean(axis=(-1, -2))
    mu_b = pb.mean(axis=(-1, -2))
    var_a = pa.var(axis=(-1, -2))
    var_b = pb.var(axis=(-1, -2))
    cov = (pa * pb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    return float(np.mean(ssim_map(a, b, window)))


def masked_l2(a, b, mask) -> float:
    """Mean squared error over mask-true pixels (all channels); 0 for an empty mask."""
    a, b = _same_shape(a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:mask.ndim]:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape}")
    if not mask.any():
        return 0.0
    return float(np.mean((a[mask] - b[mask]) ** 2))


def _bbox(mask, pad: int, shape):
    ys, xs = np.nonzero(mask)
    y0, y1 = max(ys.min() - pad, 0), min(ys.max() + pad + 1, shape[0])
    x0, x1 = max(xs.min() - pad, 0), min(xs.max() + pad + 1, shape[1])
    return slice(y0, y1), slice(x0, x1)


def masked_psnr(a, b, mask, cap: float = PSNR_CAP) -> float:
    l2 = masked_l2(a, b, mask)
    if l2 == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / l2))


def masked_ssim(a, b, mask, window: int = SSIM_WINDOW) -> float:
    """SSIM over windows centred on the mask's bounding box (padded to the window)."""
    a, b = _same_shape(a, b)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 1.0
    ys, xs = _bbox(mask, 0, a.shape)
    h = max(ys.stop - ys.start, window)
    w = max(xs.stop - xs.start, window)
    y0 = min(max(ys.start - (h - (ys.stop - ys.start)) // 2, 0), a.shape[0] - h)
    x0 = min(max(xs.start - (w - (xs.stop - xs.start)) // 2, 0), a.shape[1] - w)
    return ssim(a[y0:y0 + h, x0:x0 + w], b[y0:y0 + h, x0:x0 + w], window)


@dataclass
class ViewMetrics:
    psnr: float
    ssim: float
    l2: float
    masked_psnr: float
    masked_ssim: float
    masked_l2: float


def view_metrics(pred, gt, mask=None) -> ViewMetrics:
    pred, gt = _same_shape(pred, gt)
    mask = np.zeros(gt.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return ViewMetrics(psnr(pred, gt), ssim(pred, gt), float(np.mean((pred - gt) ** 2)),
                       masked_psnr(pred, gt, mask), masked_ssim(pred, gt, mask), masked_l2(pred, gt, mask))


@dataclass
class MetricReport:
    views: list[ViewMetrics]
    config_hash: str = ""
    label: str = ""
    mean: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not self.mean:
            self.mean = {k: float(np.mean([getattr(v, k) for v in self.views])) if self.views else 0.0
                         for k in METRICS}

    @property
    def view_count(self) -> int:
        return len(self.views)

    def to_dict(self) -> dict:
        return {"label": self.label, "config_hash": self.config_hash, "view_count": self.view_count,
                "mean": self.mean, "views": [vars(v) for v in self.views]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        names = list(METRICS)
        rows = [["view"] + names]
        for i, v in enumerate(self.views):
            rows.append([str(i)] + [f"{getattr(v, k):.6f}" for k in names])
        rows.append(["mean"] + [f"{self.mean[k]:.6f}" for k in names])
        return format_table(rows)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        try:
            views = [ViewMetrics(**{k: float(v[k]) for k in METRICS}) for v in d["views"]]
            mean = {k: float(d["mean"][k]) for k in METRICS}
            if int(d["view_count"]) != len(views):
                raise ValueError("view_count does not match the number of views")
            return cls(views, str(d.get("config_hash", "")), str(d.get("label", "")), mean)
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed metric report: missing or invalid {e}") from None

    @classmethod
    def load(cls, path) -> "MetricReport":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ValueError(f"malformed metric report {path}: {e}") from None
        if not isinstance(d, dict):
            raise ValueError(f"malformed metric report {path}: not an object")
        return cls.from_dict(d)


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows) + "\n"


def evaluate(preds, gts, masks=None, config_hash: str = "", label: str = "") -> MetricReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} renders for {len(gts)} test views")
    masks = [None] * len(gts) if masks is None else masks
    return MetricReport([view_metrics(p, g, m) for p, g, m in zip(preds, gts, masks)], config_hash, label)


def compare(a: MetricReport, b: MetricReport, tol: float = 0.0) -> dict:
    """Per-metric winner ("A", "B" or "tie") on the mean values."""
    out = {}
    for k, higher in METRICS.items():
        x, y = a.mean[k], b.mean[k]
        if abs(x - y) <= tol:
            out[k] = "tie"
        elif (x > y) == higher:
            out[k] = "A"
        else:
            out[k] = "B"
    return out


def compare_table(a: MetricReport, b: MetricReport, tol: float = 0.0) -> str:
    winners = compare(a, b, tol)
    rows = [["metric", a.label or "A", b.label or "B", "winner"]]
    for k in METRICS:
        rows.append([k, f"{a.mean[k]:.6f}", f"{b.mean[k]:.6f}", winners[k]])
    return format_table(rows)
