"""Desk-scale trainer for the dense, sparse, and video objectives.

Datasets are lists of plain-numpy samples; every source of randomness runs
off one seeded generator so a fixed seed reproduces the loss trajectory and
checkpoint bit-for-bit.  Sparse mode keeps an image pool per stream whose
detached past predictions stand in for the missing reference images in the
consistency loss; video mode trains on consecutive frame pairs with the
optical-flow temporal term on top of the dense losses.

Ships the synthetic dataset generators used by the acceptance suite:
piecewise-constant Voronoi albedo times a smooth gray shading, optionally
translated by a known integer flow for video.
"""

import json
import warnings
from dataclasses import dataclass, asdict

import cv2
import numpy as np

from . import losses, net
from .imageio import FlowField, JudgementSet
from .losses import LossWeights
from .tensor import Tensor, backward

__all__ = [
    "TrainConfig", "ImagePool", "TrainError", "augment", "synthesize_shading",
    "adam_step", "Adam", "train_epoch", "run_training",
    "synth_dense", "synth_video", "synth_sparse", "video_pairs",
]


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "dense"
    depth: int = 5
    channels: tuple = (8, 16, 32, 32, 32)
    fuse_channels: int = 32
    weights: LossWeights = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 4
    seed: int = 42
    crop_size: int = 288
    scale_range: tuple = (0.8, 1.3)
    pool_capacity: int = 64
    use_augment: bool = True

    def __post_init__(self):
        if self.mode not in ("dense", "sparse", "video"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "video":
            self.use_augment = False  # random crops would break flow alignment
        if self.weights is None:
            self.weights = LossWeights.for_mode(self.mode)
        self.channels = tuple(int(c) for c in self.channels)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if len(self.channels) != self.depth:
            raise ValueError(f"need {self.depth} channel counts, got {len(self.channels)}")
        div = 2 ** (self.depth - 1)
        if self.crop_size % div:
            raise ValueError(f"crop size {self.crop_size} not divisible by {div}")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad scale range {self.scale_range}")
        if len(self.weights.omega) != self.depth or len(self.weights.gamma) != self.depth:
            raise ValueError("omega/gamma length must equal encoder depth")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        if "weights" in raw and raw["weights"] is not None:
            raw["weights"] = LossWeights(**raw["weights"])
        return cls(**raw)

    def to_json(self, path):
        raw = asdict(self)
        with open(path, "w") as fh:
            json.dump(raw, fh, indent=1)

    def build_model(self):
        return net.TwoStreamModel(depth=self.depth, channels=self.channels,
                                  fuse_channels=self.fuse_channels, seed=self.seed)


class ImagePool:
    """Bounded buffer of detached predictions with uniform-random replacement."""

    def __init__(self, capacity, rng):
        if capacity < 1:
            raise ValueError("pool capacity must be >= 1")
        self.capacity = capacity
        self._rng = rng
        self._items = []

    def __len__(self):
        return len(self._items)

    def push(self, image):
        image = np.array(image, dtype=np.float64, copy=True)
        if len(self._items) < self.capacity:
            self._items.append(image)
        else:
            self._items[int(self._rng.integers(self.capacity))] = image

    def sample(self):
        if not self._items:
            raise TrainError("image pool is empty; push a prediction first (warm-up)")
        return self._items[int(self._rng.integers(len(self._items)))]


def _resize(img, size_hw):
    out = cv2.resize(img, (size_hw[1], size_hw[0]), interpolation=cv2.INTER_LINEAR)
    return out[:, :, None] if out.ndim == 2 else out


def augment(image, albedo, shading, rng, crop_size=288, scale_range=(0.8, 1.3)):
    """Shared random resize, crop, and horizontal flip for an aligned triplet."""
    layers = [np.asarray(x, dtype=np.float64) for x in (image, albedo, shading)]
    h, w = layers[0].shape[:2]
    scale = float(rng.uniform(*scale_range))
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if nh < crop_size or nw < crop_size:
        warnings.warn("augment: resized image smaller than crop, rescaling up")
        fix = crop_size / min(nh, nw)
        nh, nw = max(crop_size, round(nh * fix)), max(crop_size, round(nw * fix))
    layers = [_resize(x, (nh, nw)) for x in layers]
    y0 = int(rng.integers(0, nh - crop_size + 1))
    x0 = int(rng.integers(0, nw - crop_size + 1))
    layers = [x[y0:y0 + crop_size, x0:x0 + crop_size] for x in layers]
    if rng.random() < 0.5:
        layers = [x[:, ::-1].copy() for x in layers]
    return tuple(layers)


def synthesize_shading(image, albedo):
    """Shading target from the formation model: channel mean of I / A in [0,1].

    Both inputs are (C,H,W); the result is replicated back to C channels so
    it can stand in for dense shading supervision.
    """
    image = np.asarray(image, dtype=np.float64)
    ratio = image / np.maximum(albedo, 1e-6)
    s = np.clip(ratio.mean(axis=0), 0.0, 1.0)
    return np.repeat(s[None], image.shape[0], axis=0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected first/second-moment update, in place on the params.

    Tensors with non-finite gradients are skipped (and counted in the
    return value) rather than poisoning the parameters.
    """
    if not state:
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    skipped = 0
    for k, (param, grad) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(grad)):
            skipped += 1
            continue
        m = state["m"][k] = beta1 * state["m"][k] + (1 - beta1) * grad
        v = state["v"][k] = beta2 * state["v"][k] + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    if skipped:
        warnings.warn(f"adam_step: skipped {skipped} tensors with non-finite gradients")
    return skipped


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}

    def step(self):
        grads = [p.grad for p in self.params]
        return adam_step(self.params, grads, self.state, self.lr,
                         self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def _chw(img_hwc):
    return np.ascontiguousarray(np.transpose(img_hwc, (2, 0, 1)))


def _encode_image(arr_chw, stream):
    return net.encode(Tensor(arr_chw), stream)


def _dense_terms(sample, model, w, rng, cfg):
    image, albedo, shading = sample["image"], sample["albedo"], sample["shading"]
    if cfg.use_augment:
        image, albedo, shading = augment(image, albedo, shading, rng,
                                         cfg.crop_size, cfg.scale_range)
    img_t = Tensor(_chw(image))
    a_ref = Tensor(_chw(albedo))
    s_ref = Tensor(_chw(shading))
    a, s, taps_a, taps_s = net.decompose(img_t, model)
    l_rec = losses.reconstruction_loss(a, s, img_t, a_ref, s_ref,
                                       w.lambda_l1, w.lambda_ssim)
    l_grad = losses.gradient_loss(a, a_ref, s, s_ref)
    l_fdd = losses.fdd(taps_a, taps_s, w.omega, w.alpha_fdd, w.beta_fdd)
    l_fdc = losses.fdc(net.encode(a, model.albedo), net.encode(a_ref, model.albedo),
                       net.encode(s, model.shading), net.encode(s_ref, model.shading),
                       w.gamma, w.alpha_fdc, w.beta_fdc)
    total = losses.total_loss_dense(l_rec, l_grad, l_fdd, l_fdc, w.lambdas)
    return total, {"rec": l_rec.item(), "grad": l_grad.item(),
                   "fdd": l_fdd.item(), "fdc": l_fdc.item()}, (a, s)


def _sparse_terms(sample, model, w, rng, cfg, pools):
    image = sample["image"]
    judgements = sample.get("judgements")
    if judgements is None:
        raise TrainError("sparse mode requires a judgement set per sample")
    img_t = Tensor(_chw(image))
    a, s, taps_a, taps_s = net.decompose(img_t, model)
    s_syn = synthesize_shading(img_t.data, a.detach().data)
    s_ref = Tensor(s_syn)
    l_rec = losses.reconstruction_loss(a, s, img_t, None, s_ref,
                                       w.lambda_l1, w.lambda_ssim)
    l_grad = losses.gradient_loss(a, None, s, s_ref)
    l_fdd = losses.fdd(taps_a, taps_s, w.omega, w.alpha_fdd, w.beta_fdd)
    pool_a, pool_s = pools
    pool_a.push(a.detach().data)
    pool_s.push(s.detach().data)
    ref_a = Tensor(pool_a.sample())
    ref_s = Tensor(pool_s.sample())
    l_fdc = losses.fdc(net.encode(a, model.albedo), net.encode(ref_a, model.albedo),
                       net.encode(s, model.shading), net.encode(ref_s, model.shading),
                       w.gamma, w.alpha_fdc, w.beta_fdc)
    l_ord = losses.ordinal_loss(a, judgements)
    l_asmooth = losses.albedo_smoothness(a, image, w.smooth_levels, w.smooth_sigmas)
    l_ssmooth = losses.shading_smoothness(s)
    total = losses.total_loss_sparse(l_rec, l_grad, l_fdd, l_fdc,
                                     l_ord, l_asmooth, l_ssmooth, w)
    return total, {"rec": l_rec.item(), "grad": l_grad.item(), "fdd": l_fdd.item(),
                   "fdc": l_fdc.item(), "ord": l_ord.item(),
                   "asmooth": l_asmooth.item(), "ssmooth": l_ssmooth.item()}, (a, s)


def _video_terms(sample, model, w, rng, cfg):
    (f0, f1), flow, occ = sample["frames"], sample["flow"], sample["occlusion"]
    total0, terms0, pred0 = _dense_terms(f0, model, w, rng, cfg)
    total1, terms1, pred1 = _dense_terms(f1, model, w, rng, cfg)
    l_temp = losses.temporal_loss(pred0[0], pred1[0], pred0[1], pred1[1],
                                  flow, occ, w.lambda_temporal_a, w.lambda_temporal_s)
    total = 0.5 * (total0 + total1) + l_temp
    terms = {k: 0.5 * (terms0[k] + terms1[k]) for k in terms0}
    terms["temporal"] = l_temp.item()
    return total, terms, pred0


def train_epoch(model, dataset, config, optimizer, rng, pools=None):
    """One pass over the dataset; returns the mean of each loss term.

    Batches accumulate gradients sample by sample (scaled by 1/batch); a
    non-finite total loss skips the whole batch and is counted.
    """
    if not dataset:
        raise TrainError("empty dataset")
    w = config.weights
    order = rng.permutation(len(dataset))
    sums, counts, skipped = {}, 0, 0
    for start in range(0, len(order), config.batch_size):
        batch = order[start:start + config.batch_size]
        model.zero_grad()
        batch_terms = []
        bad = False
        for idx in batch:
            sample = dataset[int(idx)]
            if config.mode == "dense":
                total, terms, _ = _dense_terms(sample, model, w, rng, config)
            elif config.mode == "sparse":
                total, terms, _ = _sparse_terms(sample, model, w, rng, config, pools)
            else:
                total, terms, _ = _video_terms(sample, model, w, rng, config)
            if not np.isfinite(total.item()):
                bad = True
                break
            backward(total * (1.0 / len(batch)))
            terms["total"] = total.item()
            batch_terms.append(terms)
        if bad:
            skipped += 1
            continue
        optimizer.step()
        for terms in batch_terms:
            counts += 1
            for key, val in terms.items():
                sums[key] = sums.get(key, 0.0) + val
    if counts == 0:
        raise TrainError("every batch was skipped (non-finite losses)")
    stats = {key: val / counts for key, val in sums.items()}
    stats["skipped_batches"] = skipped
    return stats


def run_training(config, dataset, log_path=None, checkpoint_path=None):
    """Full training run; returns (model, per-epoch history)."""
    model = config.build_model()
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.parameters(), config.learning_rate,
                     config.beta1, config.beta2, config.eps)
    pools = None
    if config.mode == "sparse":
        pools = (ImagePool(config.pool_capacity, rng),
                 ImagePool(config.pool_capacity, rng))
    history = []
    for epoch in range(config.epochs):
        stats = train_epoch(model, dataset, config, optimizer, rng, pools)
        stats["epoch"] = epoch
        history.append(stats)
    if log_path is not None:
        keys = sorted({k for row in history for k in row})
        with open(log_path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for row in history:
                fh.write(",".join(f"{row.get(k, 0):.12g}" for k in keys) + "\n")
    if checkpoint_path is not None:
        net.save_checkpoint(model, checkpoint_path)
    return model, history


# -- synthetic data ----------------------------------------------------------


def _voronoi_albedo(h, w, rng, cells=(4, 8)):
    n = int(rng.integers(cells[0], cells[1] + 1))
    sites = rng.uniform(0, 1, (n, 2)) * [h, w]
    colors = rng.uniform(0.15, 0.9, (n, 3))
    ys, xs = np.mgrid[0:h, 0:w]
    d = (ys[:, :, None] - sites[:, 0]) ** 2 + (xs[:, :, None] - sites[:, 1]) ** 2
    return colors[d.argmin(axis=2)]


def _smooth_shading(h, w, rng, lo=0.2, hi=1.0, terms=3):
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w))
    for _ in range(terms):
        fy, fx = rng.uniform(0.3, 1.5, 2)
        py, px = rng.uniform(0, 2 * np.pi, 2)
        out += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * fy * ys / h + py) \
            * np.cos(2 * np.pi * fx * xs / w + px)
    out -= out.min()
    if out.max() > 0:
        out /= out.max()
    return lo + (hi - lo) * out


def synth_dense(n_samples, size=32, seed=42):
    """Voronoi albedo x smooth gray shading; image is their pixel product."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        albedo = _voronoi_albedo(size, size, rng)
        shading = _smooth_shading(size, size, rng)
        image = albedo * shading[:, :, None]
        samples.append({"image": image, "albedo": albedo,
                        "shading": np.repeat(shading[:, :, None], 3, axis=2)})
    return samples


def synth_video(n_frames, size=32, seed=42, shift=(1, 2), specular=0.0,
                occluder=False, flicker=0.0):
    """Scene translated by a known integer flow per frame.

    Returns (frames, flows, occlusions): frames are (image, albedo, shading)
    HWC float arrays with the stored shading optionally specular-contaminated;
    flows backward-warp frame t+1 onto frame t; occlusion masks are False
    where that correspondence is broken (frame border, moving occluder).
    ``flicker`` adds a global per-frame shading gain so the rendered video
    has nonzero warping error (needed for a well-defined TCM).
    """
    rng = np.random.default_rng(seed)
    dy, dx = shift
    pad_y, pad_x = abs(dy) * n_frames, abs(dx) * n_frames
    canvas_a = _voronoi_albedo(size + 2 * pad_y, size + 2 * pad_x, rng)
    canvas_s = _smooth_shading(size + 2 * pad_y, size + 2 * pad_x, rng, hi=0.95)
    frames = []
    disks = []
    for t in range(n_frames):
        oy, ox = pad_y + t * dy, pad_x + t * dx
        albedo = canvas_a[oy:oy + size, ox:ox + size].copy()
        shading = canvas_s[oy:oy + size, ox:ox + size].copy()
        if flicker > 0:
            # alternating global gain: every transition carries a 2*flicker
            # relative lighting change, so warping errors never degenerate
            shading = np.clip(shading * (1.0 + flicker * (1 if t % 2 else -1)),
                              0.01, 0.999)
        disk = np.zeros((size, size), bool)
        if occluder and n_frames // 3 <= t < 2 * n_frames // 3:
            ys, xs = np.mgrid[0:size, 0:size]
            cx = size * (t - n_frames // 3 + 1) / (n_frames // 3 + 1)
            disk = (ys - size / 2) ** 2 + (xs - cx) ** 2 < (size / 4) ** 2
            albedo[disk] = 0.02
        disks.append(disk)
        image = albedo * shading[:, :, None]
        stored = shading.copy()
        if specular > 0:
            ys, xs = np.mgrid[0:size, 0:size]
            cy, cx = rng.uniform(size * 0.25, size * 0.75, 2)
            blob = np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (size * 0.6)))
            stored = np.clip(stored + specular * blob, 0.01, 0.999)
        frames.append((image, albedo, stored[:, :, None]))
    flows, occlusions = [], []
    ys, xs = np.mgrid[0:size, 0:size]
    for t in range(n_frames - 1):
        u = np.full((size, size), float(-dx))
        v = np.full((size, size), float(-dy))
        flows.append(FlowField(u, v, np.ones((size, size), bool)))
        inside = (ys - dy >= 0) & (ys - dy < size) & (xs - dx >= 0) & (xs - dx < size)
        # the sampled position in frame t+1 must not hit that frame's occluder
        yy = np.clip(ys - dy, 0, size - 1)
        xx = np.clip(xs - dx, 0, size - 1)
        occ = inside & ~disks[t] & ~disks[t + 1][yy, xx]
        occlusions.append(occ)
    return frames, flows, occlusions


def video_pairs(frames, flows, occlusions):
    """Consecutive-pair training samples from a (frames, flows, occlusions) set."""
    def as_sample(frame):
        image, albedo, shading = frame
        if shading.shape[2] == 1:
            shading = np.repeat(shading, 3, axis=2)
        return {"image": image, "albedo": albedo, "shading": shading}

    return [{"frames": (as_sample(frames[t]), as_sample(frames[t + 1])),
             "flow": flows[t], "occlusion": occlusions[t]}
            for t in range(len(frames) - 1)]


def synth_sparse(n_samples, size=32, seed=42, n_points=12, n_pairs=24):
    """Sparse-mode samples: image plus judgements derived from the true albedo."""
    rng = np.random.default_rng(seed)
    samples = []
    for item in synth_dense(n_samples, size, seed=seed + 1):
        albedo = item["albedo"]
        points = [(float(rng.uniform()), float(rng.uniform())) for _ in range(n_points)]
        pairs = []
        for _ in range(n_pairs):
            i, j = int(rng.integers(n_points)), int(rng.integers(n_points))
            def intensity(p):
                row = min(int(p[1] * size), size - 1)
                col = min(int(p[0] * size), size - 1)
                return max(albedo[row, col].mean(), 1e-6)
            ratio = intensity(points[i]) / intensity(points[j])
            r = 1 if ratio > 1.1 else (-1 if ratio < 1 / 1.1 else 0)
            pairs.append((i, j, r, float(rng.uniform(0.5, 1.5))))
        samples.append({"image": item["image"], "albedo": albedo,
                        "judgements": JudgementSet(points, pairs)})
    return samples
