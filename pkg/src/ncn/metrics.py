"""Quality and coding-efficiency metrics.

PSNR and MS-SSIM for pixel fidelity, frequency-weighted average
precision for detection quality, and Bjontegaard deltas (rate savings
at equal quality / quality gain at equal rate) between RD curves using
shape-preserving piecewise-cubic interpolation over log10(rate).
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

import torch

from .msssim import ms_ssim as _ms_ssim_t

PSNR_CAP = 100.0
QUALITY_KINDS = ("psnr", "msssim", "wap")


def _to_bchw(img, dtype=torch.float32):
    if isinstance(img, torch.Tensor):
        t = img.detach()
    else:
        arr = np.asarray(img, dtype=np.float64)
        if arr.ndim == 3 and arr.shape[-1] in (1, 3):
            arr = np.moveaxis(arr, -1, 0)
        t = torch.from_numpy(np.ascontiguousarray(arr))
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise ValueError(f"expected an image, got shape {tuple(img.shape)}")
    return t.to(dtype)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100."""
    ta, tb = _to_bchw(a, torch.float64), _to_bchw(b, torch.float64)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch {tuple(ta.shape)} vs {tuple(tb.shape)}")
    mse = float(torch.mean((ta - tb) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ms_ssim(a, b):
    """Multi-scale SSIM in [0,1]; accepts HWC arrays or BCHW tensors."""
    ta, tb = _to_bchw(a), _to_bchw(b)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch {tuple(ta.shape)} vs {tuple(tb.shape)}")
    with torch.no_grad():
        return float(_ms_ssim_t(ta, tb))


# ---------------------------------------------------------------------------
# detection metrics


def box_iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(ix2 - ix1, 0.0), max(iy2 - iy1, 0.0)
    inter = iw * ih
    if inter <= 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def average_precision(preds, gts, class_id, iou_threshold=0.5):
    """AP for one class: greedy score-ordered one-to-one matching.

    preds: per image, list of (class_id, score, box). gts: per image,
    list of (class_id, box). Detections are processed in descending
    score order; each may claim the not-yet-matched ground truth with
    the highest IoU >= threshold in its image. AP integrates the
    precision envelope over recall.
    """
    n_gt = sum(1 for objs in gts for c, _ in objs if c == class_id)
    if n_gt == 0:
        raise ValueError(f"class {class_id} has no ground-truth instances")
    dets = [
        (score, img_idx, box)
        for img_idx, det_list in enumerate(preds)
        for (c, score, box) in det_list
        if c == class_id
    ]
    dets.sort(key=lambda d: -d[0])
    matched = [set() for _ in gts]
    tp = np.zeros(len(dets))
    for di, (_, img_idx, box) in enumerate(dets):
        best_iou, best_gi = 0.0, -1
        for gi, (c, gbox) in enumerate(gts[img_idx]):
            if c != class_id or gi in matched[img_idx]:
                continue
            iou = box_iou(box, gbox)
            if iou >= iou_threshold and iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi >= 0:
            matched[img_idx].add(best_gi)
            tp[di] = 1.0
    if len(dets) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(dets) + 1)
    # precision envelope, then area under it across recall increments
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def weighted_ap(preds, gts, class_ids=None, iou_thresholds=(0.5,)):
    """AP per class weighted by ground-truth instance frequency.

    Classes absent from the ground truth get zero weight; if no class
    has any instance the metric is undefined and raises.
    """
    counts = {}
    for objs in gts:
        for c, _ in objs:
            counts[c] = counts.get(c, 0) + 1
    if class_ids is None:
        class_ids = sorted(counts)
    active = [c for c in class_ids if counts.get(c, 0) > 0]
    if not active:
        raise ValueError("weighted AP undefined: no ground-truth instances in any class")
    total = 0.0
    weight = 0.0
    for c in active:
        ap_c = float(
            np.mean([average_precision(preds, gts, c, t) for t in iou_thresholds])
        )
        total += counts[c] * ap_c
        weight += counts[c]
    return total / weight


# ---------------------------------------------------------------------------
# RD curves and Bjontegaard deltas


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    quality_kind: str

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if not math.isfinite(self.quality):
            raise ValueError("quality must be finite")
        if self.quality_kind not in QUALITY_KINDS:
            raise ValueError(f"unknown quality kind {self.quality_kind!r}")


@dataclass(frozen=True)
class RDCurve:
    label: str
    points: tuple = field(default_factory=tuple)

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: p.bpp))
        if not pts:
            raise ValueError("empty RD curve")
        kinds = {p.quality_kind for p in pts}
        if len(kinds) != 1:
            raise ValueError(f"mixed quality kinds in one curve: {kinds}")
        bpps = [p.bpp for p in pts]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ValueError("bpp values must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def quality_kind(self):
        return self.points[0].quality_kind

    @property
    def bpp(self):
        return np.array([p.bpp for p in self.points])

    @property
    def quality(self):
        return np.array([p.quality for p in self.points])


def write_rd_csv(path_or_buf, curves, comment=None):
    """CSV rows: label, quality_kind, bpp, quality."""
    close = False
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        f = open(path_or_buf, "w", newline="")
        close = True
    else:
        f = path_or_buf
    try:
        if comment:
            f.write(f"# {comment}\n")
        writer = csv.writer(f)
        writer.writerow(["label", "quality_kind", "bpp", "quality"])
        for curve in curves:
            for p in curve.points:
                writer.writerow([curve.label, p.quality_kind, repr(p.bpp), repr(p.quality)])
    finally:
        if close:
            f.close()


def read_rd_csv(path_or_buf):
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, "r", newline="") as f:
            text = f.read()
    else:
        text = path_or_buf.read()
    rows = [
        r
        for r in csv.reader(io.StringIO(text))
        if r and not r[0].startswith("#") and r[0] != "label"
    ]
    by_label = {}
    for label, kind, bpp, quality in rows:
        by_label.setdefault(label, []).append(RDPoint(float(bpp), float(quality), kind))
    return [RDCurve(label, tuple(pts)) for label, pts in by_label.items()]


def _bd_prepare(test, anchor, min_points=4):
    for curve in (test, anchor):
        if len(curve.points) < min_points:
            raise ValueError(f"curve {curve.label!r} needs >= {min_points} points for BD")
    if test.quality_kind != anchor.quality_kind:
        raise ValueError("BD requires matching quality kinds")


def _integrate(x, y, lo, hi):
    interp = PchipInterpolator(x, y)
    anti = interp.antiderivative()
    return float(anti(hi) - anti(lo))


def bd_rate(test, anchor):
    """Average rate change of test vs anchor at equal quality, percent."""
    _bd_prepare(test, anchor)
    qt, qa = test.quality, anchor.quality
    for curve, q in ((test, qt), (anchor, qa)):
        if np.any(np.diff(q) <= 0):
            raise ValueError(
                f"curve {curve.label!r}: quality must increase strictly with rate for BD-rate"
            )
    lo = max(qt.min(), qa.min())
    hi = min(qt.max(), qa.max())
    if hi <= lo:
        raise ValueError("curves do not overlap in quality; BD-rate undefined")
    area_t = _integrate(qt, np.log10(test.bpp), lo, hi)
    area_a = _integrate(qa, np.log10(anchor.bpp), lo, hi)
    avg_diff = (area_t - area_a) / (hi - lo)
    return (10.0**avg_diff - 1.0) * 100.0


def bd_quality(test, anchor):
    """Average quality difference of test vs anchor at equal rate."""
    _bd_prepare(test, anchor)
    rt = np.log10(test.bpp)
    ra = np.log10(anchor.bpp)
    lo = max(rt.min(), ra.min())
    hi = min(rt.max(), ra.max())
    if hi <= lo:
        raise ValueError("curves do not overlap in rate; BD-quality undefined")
    area_t = _integrate(rt, test.quality, lo, hi)
    area_a = _integrate(ra, anchor.quality, lo, hi)
    return (area_t - area_a) / (hi - lo)
