"""Dataset refinement: rebuild (I*, A*, S*) triplets that obey I = A*S.

The multiplicative model is enforced in the normalized-luminance space
(L*/100).  Per frame: reconstruct albedo/shading luminance ratios, mask the
pixels where either ratio leaves (0,1), shift the albedo luminance
distribution onto the statistics of the valid reconstruction, rebuild the
shading as I_L / albedo, repair the invalid shading pixels by locally linear
embedding over valid neighbors (guided by the input image), and re-render
color by attaching the original chroma back to the shifted luminance.

The temporal variant pools statistics and LLE candidates across flow-linked
adjacent frames, which damps per-frame jitter caused by large occluders.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .imageio import Image, bilinear_sample, lab_to_rgb, luminance, rgb_to_lab

__all__ = [
    "RefineError", "RefinedTriplet", "validity_mask", "shift_distribution",
    "lle_reconstruct", "attach_chroma", "refine_frame", "refine_sequence",
    "DIV_EPS",
]

DIV_EPS = 1e-6
SHADING_EPS = 1e-6  # repaired shading is clamped to (0,1) by this margin


class RefineError(ValueError):
    pass


@dataclass
class RefinedTriplet:
    """Refined frame: srgb image and albedo, single-channel shading factors."""

    image: Image
    albedo: Image
    shading: Image
    mask: np.ndarray
    stats: dict = field(default_factory=dict)


def _safe_div(num, den):
    return num / np.maximum(den, DIV_EPS)


def validity_mask(a_hat, s_hat):
    """Pixels where both reconstructed ratios lie strictly inside (0,1)."""
    return (a_hat > 0) & (a_hat < 1) & (s_hat > 0) & (s_hat < 1)


def shift_distribution(a_l, a_hat, mask):
    """Affinely map the albedo luminance onto the valid reconstruction stats.

    Moments of a_l are taken over all pixels, target moments over the masked
    reconstruction.  Returns the clamped result plus a stats dict that keeps
    the pre-clamp array for moment checks.
    """
    if int(mask.sum()) < 2:
        raise RefineError("shift_distribution: fewer than 2 valid pixels")
    mu, sigma = float(a_l.mean()), float(a_l.std())
    mu_hat = float(a_hat[mask].mean())
    sigma_hat = float(a_hat[mask].std())
    if sigma == 0.0:
        warnings.warn("shift_distribution: constant albedo, using the target mean")
        shifted = np.full_like(a_l, mu_hat)
    else:
        shifted = sigma_hat * (a_l - mu) / sigma + mu_hat
    stats = {"mu": mu, "sigma": sigma, "mu_hat": mu_hat, "sigma_hat": sigma_hat,
             "pre_clamp": shifted}
    return np.clip(shifted, DIV_EPS, 1.0), stats


def _grid_features(h, w, guide):
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs / max(w - 1, 1), ys / max(h - 1, 1), guide], axis=2)


def _lle_weights(diffs, reg):
    gram = diffs @ diffs.T
    gram = gram + (reg * np.trace(gram) + 1e-12) * np.eye(len(diffs))
    w = np.linalg.solve(gram, np.ones(len(diffs)))
    return w / w.sum()


def lle_reconstruct(s_tilde, invalid, guide, k=10, reg=1e-3, extra=None):
    """Rebuild invalid shading pixels as affine combinations of valid neighbors.

    Neighbors are found in (normalized position, guide intensity) feature
    space; the affine weights minimize the feature reconstruction error with
    a trace-relative ridge on the Gram matrix.  ``extra`` optionally appends
    (features, values) candidate rows, e.g. flow-warped pixels from adjacent
    frames; exact duplicate candidates are collapsed.
    """
    h, w = s_tilde.shape
    if not invalid.any():
        return s_tilde.copy()
    feats = _grid_features(h, w, guide)
    valid = ~invalid
    cand_feats = feats[valid]
    cand_vals = s_tilde[valid]
    if extra is not None and len(extra[0]):
        cand_feats = np.vstack([cand_feats, extra[0]])
        cand_vals = np.concatenate([cand_vals, extra[1]])
    # canonical sorted-unique candidate order: collapses duplicates from
    # adjacent frames and keeps neighbor selection independent of pooling
    rows = np.unique(np.hstack([cand_feats, cand_vals[:, None]]), axis=0)
    cand_feats, cand_vals = rows[:, :3], rows[:, 3]
    if len(cand_vals) < k:
        raise RefineError(
            f"lle_reconstruct: only {len(cand_vals)} valid pixels for k={k}; "
            "inspect the validity mask")
    tree = cKDTree(cand_feats)
    queries = feats[invalid]
    _, idx = tree.query(queries, k=k)
    out = s_tilde.copy()
    repaired = np.empty(len(queries))
    for row, (q, nbrs) in enumerate(zip(queries, idx)):
        wgt = _lle_weights(cand_feats[nbrs] - q, reg)
        repaired[row] = wgt @ cand_vals[nbrs]
    out[invalid] = np.clip(repaired, SHADING_EPS, 1.0 - SHADING_EPS)
    return out


def attach_chroma(l_norm, chroma_source, max_iter=42):
    """Render normalized luminance as sRGB with another image's a,b chroma.

    Out-of-gamut pixels get their chroma scaled toward gray (bisection) so
    the luminance channel survives the round trip exactly; the gray axis is
    always in gamut.
    """
    lab_src = rgb_to_lab(chroma_source) if chroma_source.space == "srgb" else chroma_source
    lab = lab_src.data.copy()
    lab[:, :, 0] = 100.0 * np.clip(l_norm, 0.0, 1.0)
    rgb = lab_to_rgb(Image(lab, "lab"), clip=False).data
    bad = ((rgb < 0) | (rgb > 1)).any(axis=2)
    if bad.any():
        ab = lab[:, :, 1:][bad]
        l_chan = lab[:, :, 0][bad]
        lo = np.zeros(len(ab))
        hi = np.ones(len(ab))
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            trial = np.concatenate([l_chan[:, None], ab * mid[:, None]], axis=1)
            test = lab_to_rgb(Image(trial[:, None, :], "lab"), clip=False).data[:, 0, :]
            ok = ((test >= 0) & (test <= 1)).all(axis=1)
            lo = np.where(ok, mid, lo)
            hi = np.where(ok, hi, mid)
        fixed = np.concatenate([l_chan[:, None], ab * lo[:, None]], axis=1)
        rgb[bad] = lab_to_rgb(Image(fixed[:, None, :], "lab"), clip=False).data[:, 0, :]
    return Image(np.clip(rgb, 0.0, 1.0), "srgb")


def _frame_intermediates(image, albedo, shading):
    i_l = luminance(image)
    a_l = luminance(albedo)
    s_l = luminance(shading)
    a_hat = _safe_div(i_l, s_l)
    s_hat = _safe_div(i_l, a_l)
    return {"i_l": i_l, "a_l": a_l, "s_l": s_l, "a_hat": a_hat, "s_hat": s_hat,
            "mask": validity_mask(a_hat, s_hat)}


def _finish_frame(image, albedo, inter, mu_hat, sigma_hat, k, reg, extra=None):
    i_l, a_l = inter["i_l"], inter["a_l"]
    mask = inter["mask"]
    mu, sigma = float(a_l.mean()), float(a_l.std())
    if sigma == 0.0:
        warnings.warn("refine: constant albedo luminance, using the target mean")
        a_tilde = np.full_like(a_l, mu_hat)
    else:
        a_tilde = sigma_hat * (a_l - mu) / sigma + mu_hat
    a_tilde = np.clip(a_tilde, DIV_EPS, 1.0)
    s_tilde = _safe_div(i_l, a_tilde)
    invalid = (~mask) | (s_tilde <= 0) | (s_tilde >= 1)
    s_star = lle_reconstruct(s_tilde, invalid, i_l, k=k, reg=reg, extra=extra)
    a_star = attach_chroma(a_tilde, albedo)
    i_star = attach_chroma(a_tilde * s_star, image)
    mse_before = float(((i_l - a_l * inter["s_l"]) ** 2).mean())
    mse_after = float(((i_l - a_tilde * s_star) ** 2).mean())
    stats = {"mu": mu, "sigma": sigma, "mu_hat": mu_hat, "sigma_hat": sigma_hat,
             "invalid_count": int(invalid.sum()),
             "resynthesis_mse_before": mse_before,
             "resynthesis_mse_after": mse_after}
    return RefinedTriplet(i_star, a_star, Image(s_star[:, :, None], "linear"),
                          mask, stats)


def refine_frame(image, albedo, shading, k=10, reg=1e-3):
    """Refine one (I, A, S) triplet; see the module docstring for the steps."""
    inter = _frame_intermediates(image, albedo, shading)
    mask = inter["mask"]
    if int(mask.sum()) < 2:
        raise RefineError("refine_frame: fewer than 2 valid pixels")
    mu_hat = float(inter["a_hat"][mask].mean())
    sigma_hat = float(inter["a_hat"][mask].std())
    return _finish_frame(image, albedo, inter, mu_hat, sigma_hat, k, reg)


def _candidate_shading(inter, mu_hat, sigma_hat):
    """Shading donors a frame offers under given shift statistics."""
    a_l = inter["a_l"]
    mu, sigma = float(a_l.mean()), float(a_l.std())
    if sigma == 0.0:
        a_tilde = np.full_like(a_l, mu_hat)
    else:
        a_tilde = sigma_hat * (a_l - mu) / sigma + mu_hat
    s_tilde = _safe_div(inter["i_l"], np.clip(a_tilde, DIV_EPS, 1.0))
    ok = inter["mask"] & (s_tilde > 0) & (s_tilde < 1)
    return s_tilde, ok


def _pool_next_stats(inter_next, flow, occ_valid):
    """Valid reconstruction values of the next frame sampled onto this grid."""
    a_vals, ok_a = bilinear_sample(inter_next["a_hat"], flow.u, flow.v)
    m_frac, _ = bilinear_sample(inter_next["mask"].astype(np.float64), flow.u, flow.v)
    usable = ok_a & flow.valid & occ_valid & (m_frac >= 1.0 - 1e-12)
    return a_vals[usable]


def _pool_prev_stats(inter_prev, flow, occ_valid):
    """Valid reconstruction values of the previous frame splatted forward."""
    h, w = inter_prev["i_l"].shape
    ys, xs = np.mgrid[0:h, 0:w]
    dest_x = xs + flow.u
    dest_y = ys + flow.v
    in_bounds = (dest_x >= 0) & (dest_x <= w - 1) & (dest_y >= 0) & (dest_y <= h - 1)
    usable = inter_prev["mask"] & flow.valid & occ_valid & in_bounds
    return inter_prev["a_hat"][usable]


def _cands_next(inter_next, stats_next, flow, occ_valid):
    s_tilde, s_okmask = _candidate_shading(inter_next, *stats_next)
    s_frac, ok_s = bilinear_sample(s_okmask.astype(np.float64), flow.u, flow.v)
    s_vals, _ = bilinear_sample(s_tilde, flow.u, flow.v)
    g_vals, _ = bilinear_sample(inter_next["i_l"], flow.u, flow.v)
    cand_ok = ok_s & flow.valid & occ_valid & (s_frac >= 1.0 - 1e-12)
    h, w = flow.u.shape
    ys, xs = np.mgrid[0:h, 0:w]
    feats = np.stack([xs[cand_ok] / max(w - 1, 1), ys[cand_ok] / max(h - 1, 1),
                      g_vals[cand_ok]], axis=1)
    return feats, s_vals[cand_ok]


def _cands_prev(inter_prev, stats_prev, flow, occ_valid):
    s_tilde, s_okmask = _candidate_shading(inter_prev, *stats_prev)
    h, w = flow.u.shape
    ys, xs = np.mgrid[0:h, 0:w]
    dest_x = xs + flow.u
    dest_y = ys + flow.v
    in_bounds = (dest_x >= 0) & (dest_x <= w - 1) & (dest_y >= 0) & (dest_y <= h - 1)
    cand_ok = s_okmask & flow.valid & occ_valid & in_bounds
    feats = np.stack([dest_x[cand_ok] / max(w - 1, 1), dest_y[cand_ok] / max(h - 1, 1),
                      inter_prev["i_l"][cand_ok]], axis=1)
    return feats, s_tilde[cand_ok]


def refine_sequence(frames, flows=None, occlusions=None, temporal=True,
                    k=10, reg=1e-3):
    """Refine a frame sequence; with ``temporal`` the per-frame statistics and
    LLE candidate pools are expanded with flow-linked pixels from the
    adjacent frames.

    Two passes: the statistics pass pools valid reconstruction values across
    flow neighbors per frame; the repair pass then gathers shading donors
    from adjacent frames *under their pooled statistics*, so repairs stay
    consistent across frames.  ``flows[t]`` maps frame t to t+1;
    ``occlusions[t]`` is True where that flow is usable.  Missing entries
    (None) degrade the affected frames to single-frame behavior.
    """
    n = len(frames)
    if n == 0:
        raise RefineError("refine_sequence: empty sequence")
    if not temporal or n == 1:
        return [refine_frame(*f, k=k, reg=reg) for f in frames]
    inters = [_frame_intermediates(*f) for f in frames]
    flows = flows if flows is not None else [None] * (n - 1)
    occlusions = occlusions if occlusions is not None else [None] * (n - 1)

    def occ_mask(t):
        if occlusions[t] is not None:
            return occlusions[t]
        return np.ones(inters[0]["mask"].shape, bool)

    # pass 1: pooled statistics per frame
    stats = []
    for t, inter in enumerate(inters):
        mask = inter["mask"]
        if int(mask.sum()) < 2:
            raise RefineError(f"refine_sequence: frame {t} has fewer than 2 valid pixels")
        pooled = [inter["a_hat"][mask]]
        if t + 1 < n and flows[t] is not None:
            pooled.append(_pool_next_stats(inters[t + 1], flows[t], occ_mask(t)))
        if t - 1 >= 0 and flows[t - 1] is not None:
            pooled.append(_pool_prev_stats(inters[t - 1], flows[t - 1], occ_mask(t - 1)))
        pool = np.concatenate(pooled)
        stats.append((float(pool.mean()), float(pool.std())))

    # pass 2: repair with donors rendered under the pooled statistics
    results = []
    for t, (frame, inter) in enumerate(zip(frames, inters)):
        extra_feats, extra_vals = [], []
        if t + 1 < n and flows[t] is not None:
            feats, vals = _cands_next(inters[t + 1], stats[t + 1], flows[t], occ_mask(t))
            extra_feats.append(feats)
            extra_vals.append(vals)
        if t - 1 >= 0 and flows[t - 1] is not None:
            feats, vals = _cands_prev(inters[t - 1], stats[t - 1], flows[t - 1],
                                      occ_mask(t - 1))
            extra_feats.append(feats)
            extra_vals.append(vals)
        extra = None
        if extra_feats:
            extra = (np.vstack(extra_feats), np.concatenate(extra_vals))
        results.append(_finish_frame(frame[0], frame[1], inter,
                                     stats[t][0], stats[t][1], k, reg, extra=extra))
    return results
