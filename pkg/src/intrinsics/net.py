"""Two-stream encoder-decoder for intrinsic decomposition.

Each stream owns a multi-level conv/relu/maxpool encoder whose per-level
outputs (the feature taps) feed the divergence/consistency losses, a
fuse-up aggregation chain (upsample, concatenate, convolve), and a decoder
of three residual dilated blocks ending in a sigmoid.  The two streams share
the architecture but never share parameters.

The encoder here is a small from-scratch analogue with configurable
channels; the feature-space losses only care about the taps, not the
backbone.
"""

import struct

import numpy as np

from .tensor import (
    Tensor, ShapeError, conv2d, maxpool2x2, upsample2x, concat_channels,
    sigmoid,
)

__all__ = [
    "StreamParams", "TwoStreamModel", "encode", "aggregate", "decode",
    "decompose", "save_checkpoint", "load_checkpoint", "dump_features",
    "CheckpointError",
]

CHECKPOINT_MAGIC = b"IFCK"
CHECKPOINT_VERSION = 1
_DILATIONS = (1, 2, 4)


class CheckpointError(ValueError):
    pass


def _kaiming(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _conv_param(rng, out_c, in_c, k=3):
    w = Tensor(_kaiming(rng, (out_c, in_c, k, k)), requires_grad=True)
    b = Tensor(np.zeros(out_c), requires_grad=True)
    return w, b


class StreamParams:
    """All trainable tensors of one stream (encoder, aggregation, decoder)."""

    def __init__(self, rng, depth, channels, fuse_channels, in_channels=3,
                 out_channels=3):
        if len(channels) != depth:
            raise ShapeError(f"need {depth} channel counts, got {len(channels)}")
        self.depth = depth
        self.channels = tuple(channels)
        self.fuse_channels = fuse_channels
        self.enc = []
        prev = in_channels
        for c in channels:
            self.enc.append(_conv_param(rng, c, prev))
            prev = c
        self.agg = []
        if depth == 1:
            self.agg.append(_conv_param(rng, fuse_channels, channels[0]))
        else:
            deeper = channels[-1]
            for level in range(depth - 2, -1, -1):
                self.agg.append(_conv_param(rng, fuse_channels, deeper + channels[level]))
                deeper = fuse_channels
        self.dec = [(
            _conv_param(rng, fuse_channels, fuse_channels),
            _conv_param(rng, fuse_channels, fuse_channels),
        ) for _ in _DILATIONS]
        self.out = _conv_param(rng, out_channels, fuse_channels)

    def named(self, prefix):
        items = []
        for i, (w, b) in enumerate(self.enc, start=1):
            items += [(f"{prefix}.enc{i}.w", w), (f"{prefix}.enc{i}.b", b)]
        for i, (w, b) in enumerate(self.agg, start=1):
            items += [(f"{prefix}.agg{i}.w", w), (f"{prefix}.agg{i}.b", b)]
        for i, ((w1, b1), (w2, b2)) in enumerate(self.dec, start=1):
            items += [(f"{prefix}.dec{i}.w1", w1), (f"{prefix}.dec{i}.b1", b1),
                      (f"{prefix}.dec{i}.w2", w2), (f"{prefix}.dec{i}.b2", b2)]
        items += [(f"{prefix}.out.w", self.out[0]), (f"{prefix}.out.b", self.out[1])]
        return items


class TwoStreamModel:
    """Albedo and shading streams with identical architecture, separate weights."""

    def __init__(self, depth=5, channels=(8, 16, 32, 32, 32), fuse_channels=32,
                 in_channels=3, seed=42):
        rng = np.random.default_rng(seed)
        self.depth = depth
        self.channels = tuple(channels)
        self.fuse_channels = fuse_channels
        self.in_channels = in_channels
        self.albedo = StreamParams(rng, depth, channels, fuse_channels, in_channels)
        self.shading = StreamParams(rng, depth, channels, fuse_channels, in_channels)

    def named_parameters(self):
        return self.albedo.named("albedo") + self.shading.named("shading")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def parameter_count(self):
        return sum(t.data.size for t in self.parameters())


def encode(image, stream):
    """Run one stream's encoder; returns the per-level feature taps.

    Tap i lives at 1/2^(i-1) of the input resolution, so H and W must be
    divisible by 2^(depth-1).
    """
    _, h, w = image.shape
    div = 2 ** (stream.depth - 1)
    if h % div or w % div:
        raise ShapeError(f"encode: {h}x{w} input not divisible by {div} "
                         f"(required for {stream.depth} levels)")
    taps = []
    x = image
    for i, (wgt, b) in enumerate(stream.enc):
        if i > 0:
            x = maxpool2x2(x)
        x = conv2d(x, wgt, b, pad=1).relu()
        taps.append(x)
    return taps


def aggregate(taps, stream):
    """Fuse the taps to full resolution: upsample deeper, concat, conv+relu."""
    if len(taps) != stream.depth:
        raise ShapeError(f"aggregate: expected {stream.depth} taps, got {len(taps)}")
    if stream.depth == 1:
        w, b = stream.agg[0]
        return conv2d(taps[0], w, b, pad=1).relu()
    fused = taps[-1]
    for (w, b), tap in zip(stream.agg, reversed(taps[:-1])):
        fused = conv2d(concat_channels(upsample2x(fused), tap), w, b, pad=1).relu()
    return fused


def decode(fused, stream):
    """Three residual dilated blocks then a sigmoid projection to [0,1]."""
    x = fused
    for ((w1, b1), (w2, b2)), d in zip(stream.dec, _DILATIONS):
        y = conv2d(x, w1, b1, pad=d, dilation=d).relu()
        y = conv2d(y, w2, b2, pad=d, dilation=d)
        x = x + y
    w, b = stream.out
    return sigmoid(conv2d(x, w, b, pad=1))


def decompose(image, model):
    """Run both streams on an image; returns (A, S, taps_a, taps_s)."""
    taps_a = encode(image, model.albedo)
    taps_s = encode(image, model.shading)
    a = decode(aggregate(taps_a, model.albedo), model.albedo)
    s = decode(aggregate(taps_s, model.shading), model.shading)
    return a, s, taps_a, taps_s


# -- checkpoint format ----------------------------------------------------


def save_checkpoint(model, path):
    """Bit-exact parameter dump: IFCK magic, version, then name/shape/payload records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, tensor in model.named_parameters():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            shape = tensor.data.shape
            fh.write(struct.pack("<I", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
            fh.write(tensor.data.astype("<f8").tobytes())


def read_state(path):
    """Read a checkpoint into an ordered {name: array} dict."""
    state = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise CheckpointError(f"{path}: truncated payload for {name}")
            state[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return state


def load_checkpoint(path):
    """Rebuild a TwoStreamModel from a checkpoint, inferring its architecture."""
    state = read_state(path)
    enc_names = sorted(n for n in state if n.startswith("albedo.enc") and n.endswith(".w"))
    if not enc_names:
        raise CheckpointError(f"{path}: no encoder parameters found")
    depth = len(enc_names)
    channels = [state[f"albedo.enc{i}.w"].shape[0] for i in range(1, depth + 1)]
    in_channels = state["albedo.enc1.w"].shape[1]
    fuse_channels = state["albedo.agg1.w"].shape[0]
    model = TwoStreamModel(depth=depth, channels=channels,
                           fuse_channels=fuse_channels, in_channels=in_channels)
    for name, tensor in model.named_parameters():
        if name not in state:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if state[name].shape != tensor.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: "
                                  f"{state[name].shape} vs {tensor.data.shape}")
        tensor.data[...] = state[name]
    return model


def dump_features(model, image, path):
    """Write every tap of both streams to CSV, one row per spatial location.

    Columns: stream, level, y, x, then that level's channel values (row
    lengths vary with the level's channel count).
    """
    rows = 0
    with open(path, "w") as fh:
        fh.write("stream,level,y,x,values...\n")
        for stream_name, stream in (("albedo", model.albedo), ("shading", model.shading)):
            for level, tap in enumerate(encode(image, stream), start=1):
                data = tap.data
                _, h, w = data.shape
                for y in range(h):
                    for x in range(w):
                        vals = ",".join(f"{v:.9g}" for v in data[:, y, x])
                        fh.write(f"{stream_name},{level},{y},{x},{vals}\n")
                        rows += 1
    return rows
