"""Non-differentiable evaluation suite.

Dense ground truth is scored with MSE / LMSE / DSSIM (benchmark-standard
definitions: per-image scale-invariant MSE, window-20/stride-10 LMSE,
DSSIM = (1-SSIM)/2); sparse judgements with WHDR; video with the temporal
consistency metric and its per-pixel map.  Everything here is plain numpy
on (H,W) or (H,W,C) arrays: pure functions, embarrassingly parallel over
frames.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .imageio import Image, bilinear_sample, write_image

__all__ = [
    "MetricError", "MetricReport", "mse", "lmse", "dssim", "ssim_value",
    "whdr", "tcm", "tcm_map", "render_ticm", "write_report",
]


class MetricError(ValueError):
    """The metric is undefined for these inputs."""


@dataclass
class MetricReport:
    """Per-image rows plus aggregates; avg is always (albedo + shading) / 2."""

    rows: list = field(default_factory=list)  # (path, metric, albedo, shading)

    def add(self, path, metric, albedo, shading):
        self.rows.append((str(path), metric, float(albedo), float(shading)))

    def aggregate(self, metric):
        vals = [(a, s) for _, m, a, s in self.rows if m == metric]
        if not vals:
            raise MetricError(f"no rows for metric {metric!r}")
        albedo = float(np.mean([a for a, _ in vals]))
        shading = float(np.mean([s for _, s in vals]))
        return albedo, shading, (albedo + shading) / 2.0


def write_report(report, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["path", "metric", "albedo", "shading", "avg"])
        for row_path, metric, albedo, shading in report.rows:
            out.writerow([row_path, metric, f"{albedo:.8f}", f"{shading:.8f}",
                          f"{(albedo + shading) / 2.0:.8f}"])
        for metric in sorted({m for _, m, _, _ in report.rows}):
            albedo, shading, avg = report.aggregate(metric)
            out.writerow(["aggregate", metric, f"{albedo:.8f}", f"{shading:.8f}",
                          f"{avg:.8f}"])


def _si_scale(pred, gt):
    denom = float((pred * pred).sum())
    if denom <= 1e-12:
        warnings.warn("scale-invariant MSE: all-zero prediction, using alpha=0")
        return 0.0
    return float((pred * gt).sum()) / denom


def mse(pred, gt, scale_invariant=False):
    """Mean squared error; optionally with the error-minimizing scalar on pred."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"mse: shapes {pred.shape} and {gt.shape} differ")
    if scale_invariant:
        pred = _si_scale(pred, gt) * pred
    return float(((pred - gt) ** 2).mean())


def lmse(pred, gt, window=20, stride=10):
    """Mean over sliding windows of scale-invariant MSE normalized by mean(gt^2).

    Windows where the ground truth has zero variance are skipped.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"lmse: shapes {pred.shape} and {gt.shape} differ")
    h, w = pred.shape[:2]
    if h < window or w < window:
        raise MetricError(f"lmse: image {h}x{w} smaller than window {window}")
    scores = []
    for i in range(0, h - window + 1, stride):
        for j in range(0, w - window + 1, stride):
            pw = pred[i:i + window, j:j + window]
            gw = gt[i:i + window, j:j + window]
            norm = float((gw * gw).mean())
            if gw.var() <= 1e-12:
                continue
            alpha = _si_scale(pw, gw)
            scores.append(float(((alpha * pw - gw) ** 2).mean()) / norm)
    if not scores:
        raise MetricError("lmse: every window had zero-variance ground truth")
    return float(np.mean(scores))


def ssim_value(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Plain-numpy mean SSIM (Gaussian windows, valid convolution, range 1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    h, w, c = x.shape
    k = min(window, h, w)
    half = (k - 1) / 2.0
    ax = np.arange(k) - half
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()

    def blur(img):
        # separable would be unequal to the 2-D kernel only by rounding; keep direct
        out = np.empty((h - k + 1, w - k + 1, c))
        for ch in range(c):
            acc = np.zeros((h - k + 1, w - k + 1))
            for di in range(k):
                for dj in range(k):
                    acc += g[di, dj] * img[di:di + h - k + 1, dj:dj + w - k + 1, ch]
            out[:, :, ch] = acc
        return out

    c1, c2 = k1 ** 2, k2 ** 2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cov = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float((num / den).mean())


def dssim(pred, gt, halved=True):
    """Structural dissimilarity (1 - SSIM) / 2; set halved=False for 1 - SSIM."""
    s = ssim_value(pred, gt)
    return (1.0 - s) / 2.0 if halved else 1.0 - s


def whdr(albedo, judgements, delta=0.10):
    """Weighted human disagreement rate of an albedo against sparse judgements.

    The predicted relation is +1 / -1 when the intensity ratio at the two
    points exceeds 1+delta either way, else 0.  Invariant to global positive
    scaling of the albedo.
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    if albedo.ndim == 2:
        albedo = albedo[:, :, None]
    h, w, _ = albedo.shape
    error_sum = 0.0
    weight_sum = 0.0
    for i, j, r, wgt in judgements.pairs:
        xi, yi = judgements.points[i]
        xj, yj = judgements.points[j]
        li = max(float(albedo[min(int(yi * h), h - 1), min(int(xi * w), w - 1)].mean()), 1e-6)
        lj = max(float(albedo[min(int(yj * h), h - 1), min(int(xj * w), w - 1)].mean()), 1e-6)
        if li / lj > 1.0 + delta:
            pred_r = 1
        elif lj / li > 1.0 + delta:
            pred_r = -1
        else:
            pred_r = 0
        if pred_r != r:
            error_sum += wgt
        weight_sum += wgt
    if weight_sum == 0.0:
        raise MetricError("whdr: total judgement weight is zero")
    return error_sum / weight_sum


def _warp_np(frame, flow, extra_valid=None):
    out, ok = bilinear_sample(frame, flow.u, flow.v)
    ok = ok & flow.valid
    if extra_valid is not None:
        ok = ok & extra_valid
    return out, ok


def tcm(o_t, o_prev, v_t, v_prev, flow, mask=None):
    """Temporal consistency of an output video relative to its input video.

    exp(-|ratio - 1|) of the output vs input warping errors, where the
    warping error is the sum of squared differences between frame t and the
    flow-warped adjacent frame over valid pixels.  1 means the output is
    exactly as temporally stable as the input.
    """
    o_t = np.asarray(o_t, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    wo, ok = _warp_np(np.asarray(o_prev, np.float64), flow, mask)
    wv, _ = _warp_np(np.asarray(v_prev, np.float64), flow, mask)
    sel = ok if o_t.ndim == 2 else ok[:, :, None]
    num = float((((o_t - wo) * sel) ** 2).sum())
    den = float((((v_t - wv) * sel) ** 2).sum())
    if den <= 1e-12:
        raise MetricError("tcm: input video is static over valid pixels")
    return float(np.exp(-abs(num / den - 1.0)))


def tcm_map(o_t, o_prev, v_t, v_prev, flow, mask=None, eps=1e-12):
    """Per-pixel temporal consistency scores; returns (map, valid).

    Pixels whose input warping error falls below eps are masked out and set
    to the neutral value 1.
    """
    o_t = np.asarray(o_t, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    wo, ok = _warp_np(np.asarray(o_prev, np.float64), flow, mask)
    wv, _ = _warp_np(np.asarray(v_prev, np.float64), flow, mask)
    if o_t.ndim == 3:
        num = ((o_t - wo) ** 2).sum(axis=2)
        den = ((v_t - wv) ** 2).sum(axis=2)
    else:
        num = (o_t - wo) ** 2
        den = (v_t - wv) ** 2
    valid = ok & (den > eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(valid, num / np.maximum(den, eps), 1.0)
    scores = np.exp(-np.abs(ratio - 1.0))
    scores[~valid] = 1.0
    return scores, valid


_JET_STOPS = np.array([
    [0.0, 0.0, 0.5], [0.0, 0.0, 1.0], [0.0, 0.5, 1.0], [0.0, 1.0, 1.0],
    [0.5, 1.0, 0.5], [1.0, 1.0, 0.0], [1.0, 0.5, 0.0], [1.0, 0.0, 0.0],
    [0.5, 0.0, 0.0],
])


def _jet(values):
    pos = np.clip(values, 0.0, 1.0) * (len(_JET_STOPS) - 1)
    k = np.minimum(pos.astype(int), len(_JET_STOPS) - 2)
    frac = (pos - k)[..., None]
    return _JET_STOPS[k] * (1 - frac) + _JET_STOPS[k + 1] * frac


def render_ticm(score_map, path, blur_size=65):
    """Render a TCM map as the inverted-Jet inconsistency heatmap PNG.

    The map is first smoothed by a Gaussian of kernel size ``blur_size``
    (sigma = size/6); the colormap is inverted so warm means inconsistent.
    """
    sigma = blur_size / 6.0
    truncate = ((blur_size - 1) / 2.0) / sigma
    smooth = gaussian_filter(np.asarray(score_map, np.float64), sigma=sigma,
                             truncate=truncate, mode="nearest")
    rgb = _jet(1.0 - np.clip(smooth, 0.0, 1.0))
    write_image(Image(rgb), path, "png8")
    return smooth
