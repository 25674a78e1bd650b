"""Training objectives, each a differentiable scalar on the tensor engine.

The two feature-space terms do the heavy lifting: the divergence loss pushes
the albedo and shading encoders to produce dissimilar features at every
level, while the consistency loss pulls features of predicted images toward
features of reference images extracted by the same encoders.  The remaining
terms are pixel-space supervision (L1 + SSIM reconstruction, gradient
matching, sparse ordinal comparisons, smoothness priors) and the optical-flow
temporal term for video.

All elementwise reductions are means over elements so the default weights
are resolution-independent.  Logs are clamped at 1e-6 throughout.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, ShapeError, clamp_min, conv2d, bilinear_warp,
)

__all__ = [
    "LossWeights", "rescale", "feature_distance", "fdd", "fdc",
    "ssim", "reconstruction_loss", "gradient_loss", "total_loss_dense",
    "ordinal_error", "ordinal_loss", "albedo_smoothness",
    "shading_smoothness", "bistochastic", "total_loss_sparse",
    "warp", "temporal_loss", "ORDINAL_MARGIN", "LOG_EPS",
]

LOG_EPS = 1e-6
ORDINAL_MARGIN = math.log(1.10)  # aligned with the WHDR equality threshold

_H_CENTER = 1.2 * math.exp(1.2)
_H_SCALE = 1.2 ** 2


@dataclass
class LossWeights:
    """Every weight of the dense, sparse, and video objectives.

    gamma switches to the sparse profile (deep levels only) via ``for_mode``.
    """

    lambda_l1: float = 30.0
    lambda_ssim: float = 0.5
    lambdas: tuple = (1.0, 1.5, 0.1, 1.0)   # rec, grad, fdd, fdc
    omega: tuple = (0.01, 0.1, 0.5, 0.7, 1.0)
    alpha_fdd: float = 0.3
    beta_fdd: float = 0.1
    gamma: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    alpha_fdc: float = 0.1
    beta_fdc: float = 0.9
    lambda_ord: float = 1.0
    lambda_asmooth: float = 4.0
    lambda_ssmooth: float = 4.0
    lambda_temporal_a: float = 1.0
    lambda_temporal_s: float = 1.0
    smooth_sigmas: tuple = (0.1, 0.1, 0.025)  # position, intensity, chromaticity
    smooth_levels: int = 3

    SPARSE_GAMMA = (0.0, 0.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.omega = tuple(float(x) for x in self.omega)
        self.gamma = tuple(float(x) for x in self.gamma)
        self.smooth_sigmas = tuple(float(x) for x in self.smooth_sigmas)
        for name in ("lambda_l1", "lambda_ssim", "alpha_fdd", "beta_fdd",
                     "alpha_fdc", "beta_fdc", "lambda_ord", "lambda_asmooth",
                     "lambda_ssmooth", "lambda_temporal_a", "lambda_temporal_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if any(x < 0 for x in self.lambdas + self.omega + self.gamma):
            raise ValueError("loss weight vectors must be non-negative")

    @classmethod
    def for_mode(cls, mode, **overrides):
        if mode == "sparse" and "gamma" not in overrides:
            overrides["gamma"] = cls.SPARSE_GAMMA
        return cls(**overrides)


def rescale(d):
    """Distance rescaling h(d) = 1 - sigmoid((d - 1.2 e^1.2) / 1.2^2).

    Strictly decreasing from ~0.94 at d=0 toward 0, with midpoint 0.5 at
    d = 1.2 e^1.2.  Accepts a float or a scalar tensor.
    """
    if isinstance(d, Tensor):
        z = (d - _H_CENTER) * (1.0 / _H_SCALE)
        return 1.0 - 1.0 / (1.0 + (-z).exp())
    return 1.0 - 1.0 / (1.0 + math.exp(-(d - _H_CENTER) / _H_SCALE))


def feature_distance(f_a, f_s, alpha, beta):
    """Distance between two (c,m,n) feature maps.

    Mean over locations of the squared channel-vector cosine, plus the
    rescaled mean L1 difference; zero-norm locations are epsilon-guarded.
    """
    if f_a.shape != f_s.shape:
        raise ShapeError(f"feature_distance: shapes {f_a.shape} and "
                         f"{f_s.shape} do not conform")
    dot = (f_a * f_s).sum(axis=0)
    norms2 = f_a.square().sum(axis=0) * f_s.square().sum(axis=0)
    cos2 = dot.square() / clamp_min(norms2, 1e-16)  # norm product clamped at 1e-8
    d_cos = cos2.mean()
    d_l1 = rescale((f_a - f_s).abs().mean())
    return alpha * d_cos + beta * d_l1


def fdd(taps_a, taps_s, omega, alpha, beta):
    """Feature distribution divergence: level-weighted cross-stream distance."""
    if not (len(taps_a) == len(taps_s) == len(omega)):
        raise ShapeError(f"fdd: got {len(taps_a)}/{len(taps_s)} taps "
                         f"for {len(omega)} weights")
    total = Tensor(0.0)
    for w, fa, fs in zip(omega, taps_a, taps_s):
        if w != 0.0:
            total = total + w * feature_distance(fa, fs, alpha, beta)
    return total


def fdc(taps_pred_a, taps_real_a, taps_pred_s, taps_real_s, gamma, alpha, beta):
    """Feature distribution consistency: similarity of predicted-image and
    reference-image features under the shared encoders."""
    lengths = {len(taps_pred_a), len(taps_real_a), len(taps_pred_s),
               len(taps_real_s), len(gamma)}
    if len(lengths) != 1:
        raise ShapeError(f"fdc: tap/weight lengths differ: {sorted(lengths)}")
    total = Tensor(0.0)
    for g, pa, ra, ps, rs in zip(gamma, taps_pred_a, taps_real_a,
                                 taps_pred_s, taps_real_s):
        if g != 0.0:
            sim_a = 1.0 - feature_distance(pa, ra, alpha, beta)
            sim_s = 1.0 - feature_distance(ps, rs, alpha, beta)
            total = total + g * (sim_a + sim_s)
    return total


def _gaussian_kernel(size, sigma):
    half = (size - 1) / 2.0
    ax = np.arange(size) - half
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over Gaussian windows; differentiable, dynamic range 1.

    Valid-window convention (no padding).  If the image is smaller than the
    window, the window shrinks to the image.
    """
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes {x.shape} and {y.shape} do not conform")
    c, h, w = x.shape
    k = min(window, h, w)
    kern = _gaussian_kernel(k, sigma)
    weight = np.zeros((c, c, k, k))
    for ch in range(c):
        weight[ch, ch] = kern
    weight = Tensor(weight)

    mu_x = conv2d(x, weight)
    mu_y = conv2d(y, weight)
    var_x = conv2d(x * x, weight) - mu_x.square()
    var_y = conv2d(y * y, weight) - mu_y.square()
    cov = conv2d(x * y, weight) - mu_x * mu_y
    c1 = k1 ** 2
    c2 = k2 ** 2
    num = (2.0 * (mu_x * mu_y) + c1) * (2.0 * cov + c2)
    den = (mu_x.square() + mu_y.square() + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def reconstruction_loss(a, s, image, a_ref, s_ref, lambda_l1=30.0, lambda_ssim=0.5):
    """L1 + structural-dissimilarity supervision plus the cycle term A*S ~ I.

    Pass ``a_ref=None`` in sparse mode to drop the albedo ground-truth terms.
    """
    recon = a * s
    l1 = (s - s_ref).abs().mean() + (recon - image).abs().mean()
    dssim_sum = (1.0 - ssim(s, s_ref)) + (1.0 - ssim(recon, image))
    if a_ref is not None:
        l1 = l1 + (a - a_ref).abs().mean()
        dssim_sum = dssim_sum + (1.0 - ssim(a, a_ref))
    return lambda_l1 * l1 + lambda_ssim * dssim_sum


def _spatial_gradients(t):
    # forward differences with a replicate-padded border (edge diffs are 0)
    from .tensor import pad_replicate
    tp = pad_replicate(t, 1)
    gx = tp[:, 1:-1, 2:] - tp[:, 1:-1, 1:-1]
    gy = tp[:, 2:, 1:-1] - tp[:, 1:-1, 1:-1]
    return gx, gy


def gradient_loss(a, a_ref, s, s_ref):
    """Squared mismatch of forward-difference image gradients in x and y.

    Invariant to global constant offsets.  ``a_ref=None`` drops the albedo
    terms (sparse mode).
    """
    total = Tensor(0.0)
    for pred, ref in ((a, a_ref), (s, s_ref)):
        if ref is None:
            continue
        pgx, pgy = _spatial_gradients(pred)
        rgx, rgy = _spatial_gradients(ref)
        total = total + (pgx - rgx).square().mean() + (pgy - rgy).square().mean()
    return total


def total_loss_dense(l_rec, l_grad, l_fdd, l_fdc, lambdas=(1.0, 1.5, 0.1, 1.0)):
    """Weighted sum of the four dense-supervision terms."""
    l1, l2, l3, l4 = lambdas
    return l1 * l_rec + l2 * l_grad + l3 * l_fdd + l4 * l_fdc


def total_loss_sparse(l_rec_reduced, l_grad_reduced, l_fdd, l_fdc,
                      l_ord, l_asmooth, l_ssmooth, weights):
    """Sparse-mode objective: reduced dense total plus ordinal and smoothness terms.

    The reduced dense terms must already omit everything that needs dense
    albedo ground truth (build them with ``a_ref=None``).
    """
    base = total_loss_dense(l_rec_reduced, l_grad_reduced, l_fdd, l_fdc,
                            weights.lambdas)
    return (base + weights.lambda_ord * l_ord
            + weights.lambda_asmooth * l_asmooth
            + weights.lambda_ssmooth * l_ssmooth)


# -- sparse supervision ----------------------------------------------------


def _point_to_pixel(point, h, w):
    x, y = point
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise IndexError(f"judgement point {point} outside [0,1]^2")
    return min(int(y * h), h - 1), min(int(x * w), w - 1)


def _log_intensity_at(a, point):
    c, h, w = a.shape
    row, col = _point_to_pixel(point, h, w)
    val = a[:, row, col].mean()
    return clamp_min(val, LOG_EPS).log()


def ordinal_error(a, point_i, point_j, r, weight, margin=ORDINAL_MARGIN):
    """Error of one annotated pair on the predicted albedo.

    r=+1 expects point i brighter by the log margin, r=-1 the reverse, and
    r=0 penalizes any log difference.
    """
    li = _log_intensity_at(a, point_i)
    lj = _log_intensity_at(a, point_j)
    if r == 0:
        return weight * (li - lj).square()
    if r == 1:
        return weight * (margin - li + lj).relu().square()
    if r == -1:
        return weight * (margin - lj + li).relu().square()
    raise ValueError(f"ordinal relation must be -1, 0, or +1, got {r}")


def ordinal_loss(a, judgements, margin=ORDINAL_MARGIN):
    """Sum of ordinal errors over all annotated pairs."""
    total = Tensor(0.0)
    for i, j, r, w in judgements.pairs:
        total = total + ordinal_error(a, judgements.points[i],
                                      judgements.points[j], r, w, margin)
    return total


# -- smoothness priors -------------------------------------------------------

_POOL_KERNELS = {}


def _avgpool2x2(t):
    c, h, w = t.shape
    if h % 2 or w % 2:  # odd trailing row/col is cropped
        t = t[:, : h - h % 2, : w - w % 2]
        c, h, w = t.shape
    if c not in _POOL_KERNELS:
        k = np.zeros((c, c, 2, 2))
        for ch in range(c):
            k[ch, ch] = 0.25
        _POOL_KERNELS[c] = Tensor(k)
    return conv2d(t, _POOL_KERNELS[c], stride=2)


def _avgpool_np(arr):
    h, w = arr.shape[:2]
    arr = arr[: h - h % 2, : w - w % 2]
    return 0.25 * (arr[0::2, 0::2] + arr[0::2, 1::2] + arr[1::2, 0::2] + arr[1::2, 1::2])


def _guide_features(guide_hw3):
    """Per-pixel [x, y, intensity, chroma1, chroma2] stack from an sRGB guide."""
    h, w, _ = guide_hw3.shape
    ys, xs = np.mgrid[0:h, 0:w]
    intensity = guide_hw3.mean(axis=2)
    total = np.maximum(guide_hw3.sum(axis=2), LOG_EPS)
    return np.stack([
        xs / max(w - 1, 1), ys / max(h - 1, 1),
        intensity, guide_hw3[:, :, 0] / total, guide_hw3[:, :, 1] / total,
    ], axis=2)


_OFFSETS8 = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def _shifted(arr, dy, dx):
    h, w = arr.shape[:2]
    return (arr[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)],
            arr[max(0, -dy):h + min(0, -dy), max(0, -dx):w + min(0, -dx)])


def albedo_smoothness(a, guide, levels=3, sigmas=(0.1, 0.1, 0.025)):
    """Multi-scale L1 smoothness on log albedo, gated by guide-image similarity.

    The pair weight is a Gaussian over [position, intensity, chromaticity]
    feature differences of the guide (diagonal bandwidths ``sigmas``), so the
    albedo is pushed toward piecewise constancy within similar regions.
    """
    guide = np.asarray(guide, dtype=np.float64)
    if guide.ndim != 3 or guide.shape[2] != 3:
        raise ShapeError(f"albedo_smoothness: guide must be (H,W,3), got {guide.shape}")
    if guide.shape[:2] != a.shape[1:]:
        raise ShapeError(f"albedo_smoothness: guide {guide.shape[:2]} does not "
                         f"match albedo {a.shape[1:]}")
    sp, si, sc = sigmas
    inv_var = np.array([1 / sp ** 2, 1 / sp ** 2, 1 / si ** 2,
                        1 / sc ** 2, 1 / sc ** 2])

    intensity = a.mean(axis=0)  # (H,W)
    total = Tensor(0.0)
    for level in range(1, levels + 1):
        h, w = intensity.shape
        if h < 2 or w < 2:
            break
        log_a = clamp_min(intensity, LOG_EPS).log()
        feats = _guide_features(guide)
        n_l = h * w
        level_total = Tensor(0.0)
        for dy, dx in _OFFSETS8:
            fa, fb = _shifted(feats, dy, dx)
            if fa.size == 0:
                continue
            weight = np.exp(-0.5 * ((fa - fb) ** 2 @ inv_var))
            la = log_a[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)]
            lb = log_a[max(0, -dy):h + min(0, -dy), max(0, -dx):w + min(0, -dx)]
            level_total = level_total + (Tensor(weight) * (la - lb).abs()).sum()
        total = total + level_total * (1.0 / (n_l * level))
        if level < levels:
            intensity = _avgpool2x2(intensity.reshape((1,) + intensity.shape))[0]
            guide = _avgpool_np(guide)
    return total


def bistochastic(w, iters=20):
    """Alternate row and column normalization (Sinkhorn) of a positive matrix.

    20 double passes bring row and column sums within 1e-3 of 1 for the
    narrow position kernels used here; 10 falls just short.
    """
    w = np.array(w, dtype=np.float64)
    for _ in range(iters):
        w /= w.sum(axis=1, keepdims=True)
        w /= w.sum(axis=0, keepdims=True)
    return w


def shading_smoothness(s, sigma_p=0.1, sinkhorn_iters=20, max_side=32):
    """Densely-connected squared log-shading smoothness with bi-stochastic weights.

    The shading is average-pooled until both sides are <= ``max_side`` so the
    dense pair term stays tractable; the position kernel uses normalized
    coordinates.
    """
    intensity = s.mean(axis=0)
    while intensity.shape[0] > max_side or intensity.shape[1] > max_side:
        intensity = _avgpool2x2(intensity.reshape((1,) + intensity.shape))[0]
    h, w = intensity.shape
    n = h * w
    ys, xs = np.mgrid[0:h, 0:w]
    px = (xs / max(w - 1, 1)).ravel()
    py = (ys / max(h - 1, 1)).ravel()
    d2 = (px[:, None] - px[None, :]) ** 2 + (py[:, None] - py[None, :]) ** 2
    w_hat = bistochastic(np.exp(-0.5 * d2 / sigma_p ** 2), sinkhorn_iters)

    x = clamp_min(intensity, LOG_EPS).log().reshape((n, 1))
    row = Tensor(w_hat.sum(axis=1)[:, None])
    col = Tensor(w_hat.sum(axis=0)[:, None])
    cross = (x * (Tensor(w_hat) @ x)).sum()
    quad = (x.square() * row).sum() + (x.square() * col).sum() - 2.0 * cross
    return quad * (1.0 / (2.0 * n))


# -- temporal ---------------------------------------------------------------


def warp(frame, flow):
    """Backward-warp a (C,H,W) tensor through a FlowField.

    Output pixel i samples the frame at i + (u,v)(i); the returned mask is
    False where the sample left the frame or the flow itself was invalid.
    """
    warped, in_bounds = bilinear_warp(frame, flow.u, flow.v)
    return warped, in_bounds & flow.valid


def temporal_loss(a_t, a_next, s_t, s_next, flow, omega_u,
                  lambda_a=1.0, lambda_s=1.0):
    """Mean absolute difference between each frame and its flow-warped successor.

    Restricted to pixels that are unoccluded (``omega_u``), have valid flow,
    and warp inside the frame; normalized by the number of such pixels.
    """
    warped_a, ok = warp(a_next, flow)
    warped_s, _ = warp(s_next, flow)
    valid = ok & omega_u
    count = int(valid.sum())
    if count == 0:
        warnings.warn("temporal_loss: no valid pixels; defining loss as 0")
        return Tensor(0.0)
    mask = Tensor(valid.astype(np.float64))
    term_a = ((warped_a - a_t).abs().mean(axis=0) * mask).sum() * (1.0 / count)
    term_s = ((warped_s - s_t).abs().mean(axis=0) * mask).sum() * (1.0 / count)
    return lambda_a * term_a + lambda_s * term_s
