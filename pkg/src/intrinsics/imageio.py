"""Codecs and color conversions for all dataset assets.

PNG (8/16-bit) and PFM carry the images, Middlebury .flo carries optical
flow, and a small JSON schema carries sparse reflectance judgements.  All
round trips are lossless at the container's precision.  Images are float64
(H,W,C) arrays in [0,1] for srgb/linear; Lab images hold L in [0,100] and
a,b in [-128,127].  Everything here is a pure function, safe to call
concurrently on distinct files.
"""

import json
import struct
from dataclasses import dataclass, field

import cv2
import numpy as np

__all__ = [
    "Image", "FlowField", "JudgementSet", "CodecError",
    "read_image", "write_image", "read_flo", "write_flo", "load_occlusion",
    "rgb_to_lab", "lab_to_rgb", "luminance", "bilinear_sample",
    "load_judgements", "save_judgements",
]

FLO_MAGIC = 202021.25
FLO_SENTINEL = 1e9  # Middlebury encodes unknown flow with magnitude > 1e9


class CodecError(ValueError):
    """Corrupt or unsupported file content."""


@dataclass
class Image:
    """A (H,W,C) float64 raster with C in {1,3} and a color-space tag."""

    data: np.ndarray
    space: str = "srgb"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise CodecError(f"image must be (H,W,1|3), got {self.data.shape}")
        if self.space not in ("srgb", "linear", "lab"):
            raise CodecError(f"unknown color space {self.space!r}")
        if not np.all(np.isfinite(self.data)):
            raise CodecError("image contains non-finite values")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class FlowField:
    """Per-pixel displacement (u,v) in pixels plus a validity mask."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if not (self.u.shape == self.v.shape == self.valid.shape):
            raise CodecError("flow components and mask must share one shape")

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]


@dataclass
class JudgementSet:
    """Sparse pairwise reflectance comparisons for one image.

    points: (x, y) in [0,1]^2.  pairs: (i, j, r, weight) with r = +1 when
    point i is the brighter one, -1 when darker, 0 for "about equal".
    """

    points: list = field(default_factory=list)
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


_DARKER_TO_R = {"1": -1, "2": 1, "E": 0}
_R_TO_DARKER = {-1: "1", 1: "2", 0: "E"}


def load_judgements(path):
    with open(path) as fh:
        raw = json.load(fh)
    points = [(float(p["x"]), float(p["y"])) for p in raw["points"]]
    pairs = []
    for c in raw["pairs"]:
        darker = c["darker"]
        if darker not in _DARKER_TO_R:
            raise CodecError(f"invalid darker token {darker!r}")
        w = float(c["weight"])
        if w < 0:
            raise CodecError("judgement weights must be >= 0")
        pairs.append((int(c["i"]), int(c["j"]), _DARKER_TO_R[darker], w))
    for x, y in points:
        if not (0 <= x <= 1 and 0 <= y <= 1):
            raise CodecError("judgement points must lie in [0,1]^2")
    return JudgementSet(points, pairs)


def save_judgements(js, path):
    raw = {
        "points": [{"x": x, "y": y} for x, y in js.points],
        "pairs": [{"i": i, "j": j, "darker": _R_TO_DARKER[r], "weight": w}
                  for i, j, r, w in js.pairs],
    }
    with open(path, "w") as fh:
        json.dump(raw, fh, indent=1)


# -- PNG / PFM -----------------------------------------------------------


def read_image(path, fmt=None):
    """Read png8/png16/pfm into an Image; integers map to [0,1] by 1/(2^bits - 1)."""
    path = str(path)
    if fmt is None:
        fmt = "pfm" if path.lower().endswith(".pfm") else "png"
    if fmt == "pfm":
        return _read_pfm(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise CodecError(f"cannot read PNG {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        if raw.shape[2] != 3:
            raise CodecError(f"unsupported channel count {raw.shape[2]} in {path}")
        raw = raw[:, :, ::-1]  # BGR -> RGB
    if raw.dtype == np.uint8:
        data = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        data = raw.astype(np.float64) / 65535.0
    else:
        raise CodecError(f"unsupported PNG bit depth {raw.dtype} in {path}")
    return Image(data, "srgb")


def write_image(img, path, fmt=None):
    """Write an Image; srgb/linear values are clamped to [0,1] first."""
    path = str(path)
    if fmt is None:
        fmt = "pfm" if path.lower().endswith(".pfm") else "png8"
    data = img.data
    if fmt == "pfm":
        _write_pfm(data, path)
        return
    if img.space == "lab":
        raise CodecError("write Lab images via lab_to_rgb first")
    data = np.clip(data, 0.0, 1.0)
    if fmt == "png8":
        quant = np.rint(data * 255.0).astype(np.uint8)
    elif fmt == "png16":
        quant = np.rint(data * 65535.0).astype(np.uint16)
    else:
        raise CodecError(f"unknown image format {fmt!r}")
    if quant.shape[2] == 1:
        quant = quant[:, :, 0]
    else:
        quant = quant[:, :, ::-1]  # RGB -> BGR
    if not cv2.imwrite(path, quant):
        raise CodecError(f"cannot write {path}")


def _read_pfm(path):
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise CodecError(f"not a PFM file: {path}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        endian = "<" if scale < 0 else ">"
        payload = fh.read(4 * w * h * channels)
        if len(payload) != 4 * w * h * channels:
            raise CodecError(f"truncated PFM payload in {path}")
    data = np.frombuffer(payload, dtype=endian + "f4").reshape(h, w, channels)
    return Image(np.flipud(data).astype(np.float64), "srgb")  # PFM rows are bottom-up


def _write_pfm(data, path):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    header = b"PF\n" if data.shape[2] == 3 else b"Pf\n"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")  # negative scale: little-endian payload
        fh.write(np.flipud(data).astype("<f4").tobytes())


# -- Middlebury .flo -----------------------------------------------------


def read_flo(path):
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12:
            raise CodecError(f"truncated .flo header in {path}")
        magic, w, h = struct.unpack("<fii", head)
        if magic != np.float32(FLO_MAGIC):
            raise CodecError(f"bad .flo magic {magic} in {path}")
        payload = fh.read(8 * w * h)
        if len(payload) != 8 * w * h:
            raise CodecError(f"truncated .flo payload in {path}")
    uv = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    u, v = uv[:, :, 0], uv[:, :, 1]
    valid = (np.abs(u) < FLO_SENTINEL) & (np.abs(v) < FLO_SENTINEL)
    return FlowField(u, v, valid)


def write_flo(flow, path):
    h, w = flow.u.shape
    uv = np.stack([flow.u, flow.v], axis=2).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(uv.tobytes())


def load_occlusion(path, flow=None):
    """Sintel occlusion PNG: nonzero marks occluded, so valid = (pixel == 0)."""
    img = read_image(path)
    mask = img.data[:, :, 0] == 0.0
    if flow is not None and mask.shape != flow.u.shape:
        raise CodecError(f"occlusion mask {mask.shape} does not match "
                         f"flow {flow.u.shape}")
    return mask


# -- sRGB <-> CIE L*a*b* (D65) --------------------------------------------

_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_D65 = _RGB_TO_XYZ.sum(axis=1)  # row sums, so sRGB white maps exactly to L=100, a=b=0
_LAB_DELTA = 6.0 / 29.0


def _srgb_to_linear(c):
    # sign-preserving extension keeps the pair bijective for out-of-gamut values
    a = np.abs(np.asarray(c, dtype=np.float64))
    return np.sign(c) * np.where(a > 0.04045, ((a + 0.055) / 1.055) ** 2.4, a / 12.92)


def _linear_to_srgb(c):
    a = np.abs(np.asarray(c, dtype=np.float64))
    return np.sign(c) * np.where(a > 0.0031308, 1.055 * a ** (1.0 / 2.4) - 0.055, 12.92 * a)


def _lab_f(t):
    return np.where(t > _LAB_DELTA ** 3, np.cbrt(t), t / (3 * _LAB_DELTA ** 2) + 4.0 / 29.0)


def _lab_f_inv(ft):
    return np.where(ft > _LAB_DELTA, ft ** 3, 3 * _LAB_DELTA ** 2 * (ft - 4.0 / 29.0))


def rgb_to_lab(img):
    """sRGB Image -> CIE L*a*b* under D65."""
    if img.channels != 3:
        raise CodecError(f"rgb_to_lab needs 3 channels, got {img.channels}")
    if img.space != "srgb":
        raise CodecError(f"rgb_to_lab expects an srgb image, got {img.space}")
    xyz = _srgb_to_linear(img.data) @ _RGB_TO_XYZ.T / _D65
    f = _lab_f(xyz)
    lab = np.empty_like(img.data)
    lab[:, :, 0] = 116.0 * f[:, :, 1] - 16.0
    lab[:, :, 1] = 500.0 * (f[:, :, 0] - f[:, :, 1])
    lab[:, :, 2] = 200.0 * (f[:, :, 1] - f[:, :, 2])
    return Image(lab, "lab")


def lab_to_rgb(img, clip=True):
    """CIE L*a*b* Image -> sRGB; out-of-gamut values are clipped to [0,1]."""
    if img.space != "lab":
        raise CodecError(f"lab_to_rgb expects a lab image, got {img.space}")
    lab = img.data
    fy = (lab[:, :, 0] + 16.0) / 116.0
    fx = fy + lab[:, :, 1] / 500.0
    fz = fy - lab[:, :, 2] / 200.0
    xyz = _lab_f_inv(np.stack([fx, fy, fz], axis=2)) * _D65
    rgb = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
    if clip:
        rgb = np.clip(rgb, 0.0, 1.0)
    return Image(rgb, "srgb")


def luminance(img):
    """Normalized L channel (L*/100) as an (H,W) array.

    Single-channel images are treated as raw luminance factors and returned
    as-is; 3-channel srgb images go through the Lab transform.
    """
    if img.channels == 1:
        return img.data[:, :, 0].copy()
    if img.space == "lab":
        return img.data[:, :, 0] / 100.0
    return rgb_to_lab(img).data[:, :, 0] / 100.0


def bilinear_sample(data, u, v):
    """Sample (H,W) or (H,W,C) data at (x+u, y+v); returns (values, in_bounds)."""
    squeeze = data.ndim == 2
    if squeeze:
        data = data[:, :, None]
    h, w, _ = data.shape
    gy, gx = np.mgrid[0:h, 0:w]
    ys, xs = gy + v, gx + u
    ok = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    ysc = np.clip(ys, 0, h - 1)
    xsc = np.clip(xs, 0, w - 1)
    y0 = np.floor(ysc).astype(np.int64)
    x0 = np.floor(xsc).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ysc - y0)[:, :, None]
    wx = (xsc - x0)[:, :, None]
    out = ((1 - wy) * (1 - wx) * data[y0, x0] + (1 - wy) * wx * data[y0, x1]
           + wy * (1 - wx) * data[y1, x0] + wy * wx * data[y1, x1])
    out = out * ok[:, :, None]
    return (out[:, :, 0] if squeeze else out), ok
