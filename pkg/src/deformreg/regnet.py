"""Scaled-down FlowNetSimple-style encoder-decoder that predicts a
deformation field at every pyramid scale.

Topology: a contracting stack of convolutions (the first at full
resolution, the rest stride 2), an expanding stack of transposed
convolutions with skip connections, a 2-channel flow head at each scale,
and the upsampled previous-scale flow (magnitudes doubled) concatenated
into the next decoder stage. Flow heads are zero-initialized so an
untrained model predicts the identity warp at every scale.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ShapeError
from .ndgrad import Tensor
from .ndgrad.conv import conv2d, conv2d_transpose
from .ndgrad.ops import chw_to_hwc, concat_channels, leaky_relu, scalar_mul, slice_, upsample2x

MODEL_MAGIC = b"DRG1"
MODEL_VERSION = 1
CHANNEL_CAP = 128

# Fixed gain between the flow-head convolution output and the flow in
# pixels. The FlowNet family trains against ground truth scaled by 1/20;
# keeping that convention here lets pixel-scale flows emerge from small
# head weights, which matters when training from scratch at small lr.
FLOW_GAIN = 20.0


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters. ``levels`` is both the encoder depth
    and the number of output scales."""

    levels: int = 4
    base_channels: int = 16
    input_hw: tuple = (64, 64)
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.levels < 2:
            raise ShapeError(f"ArchConfig: levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ShapeError(f"ArchConfig: base_channels must be >= 1, got {self.base_channels}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ShapeError(f"ArchConfig: leaky_slope must be in [0,1), got {self.leaky_slope}")
        h, w = self.input_hw
        div = 1 << (self.levels - 1)
        if h % div or w % div:
            raise ShapeError(
                f"ArchConfig: input {h}x{w} must divide by 2^{self.levels - 1}={div}"
            )

    def channels(self, level):
        """Feature width at encoder level (1-based)."""
        return min(self.base_channels * (1 << (level - 1)), CHANNEL_CAP)

    def concat_channels_at(self, level):
        """Width of the decoder concat at a level: deconv + skip + flow."""
        return 2 * self.channels(level) + 2


class RegModel:
    """Architecture plus named parameter tensors."""

    def __init__(self, arch, params):
        self.arch = arch
        self.params = dict(params)
        expected = param_shapes(arch)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"RegModel: parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            got = tuple(self.params[name].shape)
            if got != shape:
                raise ShapeError(f"RegModel: parameter {name} has shape {got}, expected {shape}")

    def parameter_count(self):
        return sum(int(np.prod(t.shape)) for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None


def param_shapes(arch):
    """Name -> shape map of every learnable tensor, in forward order."""
    shapes = {}
    levels = arch.levels
    shapes["enc1.w"] = (arch.channels(1), 2, 3, 3)
    shapes["enc1.b"] = (arch.channels(1),)
    for i in range(2, levels + 1):
        shapes[f"enc{i}.w"] = (arch.channels(i), arch.channels(i - 1), 4, 4)
        shapes[f"enc{i}.b"] = (arch.channels(i),)
    shapes[f"flow{levels}.w"] = (2, arch.channels(levels), 3, 3)
    shapes[f"flow{levels}.b"] = (2,)
    in_ch = arch.channels(levels)
    for j in range(levels - 1, 0, -1):
        shapes[f"dec{j}.w"] = (in_ch, arch.channels(j), 4, 4)
        shapes[f"dec{j}.b"] = (arch.channels(j),)
        cat = arch.concat_channels_at(j)
        shapes[f"flow{j}.w"] = (2, cat, 3, 3)
        shapes[f"flow{j}.b"] = (2,)
        in_ch = cat
    return shapes


def init_model(arch, seed=0):
    """Fan-in-scaled random conv weights, zero biases, zero flow heads.

    Zero flow heads make the untrained prediction the identity warp, the
    natural starting point for unsupervised training. Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.startswith("flow") or name.endswith(".b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            data = (rng.standard_normal(shape) * std).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return RegModel(arch, params)


def forward_batch(model, inputs):
    """Run the network on [N,2,H,W] inputs; flows returned finest first.

    Each flow s has shape [N,2,H/2^s',W/2^s'] in pixel units at its own
    resolution.
    """
    arch = model.arch
    p = model.params
    if inputs.ndim != 4 or inputs.shape[1] != 2:
        raise ShapeError(f"forward_batch: inputs must be [N,2,H,W], got {tuple(inputs.shape)}")
    h, w = inputs.shape[2], inputs.shape[3]
    div = 1 << (arch.levels - 1)
    if h % div or w % div:
        raise ShapeError(f"forward_batch: input {h}x{w} must divide by {div}")
    slope = arch.leaky_slope

    feats = leaky_relu(conv2d(inputs, p["enc1.w"], p["enc1.b"], stride=1, padding=1), slope)
    skips = [feats]
    for i in range(2, arch.levels + 1):
        feats = leaky_relu(conv2d(feats, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=1), slope)
        skips.append(feats)

    flows = []
    flow = scalar_mul(
        conv2d(feats, p[f"flow{arch.levels}.w"], p[f"flow{arch.levels}.b"], stride=1, padding=1),
        FLOW_GAIN,
    )
    flows.append(flow)
    for j in range(arch.levels - 1, 0, -1):
        up = leaky_relu(conv2d_transpose(feats, p[f"dec{j}.w"], p[f"dec{j}.b"], stride=2, padding=1), slope)
        upflow = scalar_mul(upsample2x(flow), 2.0)
        feats = concat_channels(concat_channels(up, skips[j - 1]), upflow)
        flow = scalar_mul(
            conv2d(feats, p[f"flow{j}.w"], p[f"flow{j}.b"], stride=1, padding=1), FLOW_GAIN
        )
        flows.append(flow)
    flows.reverse()
    return flows


def forward(model, fixed, moving):
    """Forward one (fixed, moving) image pair; returns [H,W,2] field tensors,
    finest first."""
    from .warp import Image2D

    fx = fixed.pixels if isinstance(fixed, Image2D) else np.asarray(fixed)
    mv = moving.pixels if isinstance(moving, Image2D) else np.asarray(moving)
    if fx.shape != mv.shape:
        raise ShapeError(f"forward: image shapes differ: {fx.shape} vs {mv.shape}")
    batch = Tensor(np.stack([fx, mv])[None].astype(np.float32))
    flows = forward_batch(model, batch)
    return [chw_to_hwc(slice_(f, (0,))) for f in flows]


# ---------------------------------------------------------------------------
# serialization: magic, version, arch, then named float32 blocks
# ---------------------------------------------------------------------------


def _write_block(buf, name, arr):
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def read(self, n, what):
        if self.offset + n > len(self.data):
            raise DataFormatError(
                f"model file truncated at byte {self.offset}: expected {n} bytes for {what}"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def serialize(model, extra_blocks=None):
    """Pack a model (and optional extra named arrays) into bytes."""
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    arch = model.arch
    buf.write(struct.pack("<IIIIIf", MODEL_VERSION, arch.levels, arch.base_channels,
                          arch.input_hw[0], arch.input_hw[1], arch.leaky_slope))
    blocks = [(name, t.data) for name, t in model.params.items()]
    if extra_blocks:
        blocks += list(extra_blocks.items())
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        _write_block(buf, name, np.asarray(arr))
    return buf.getvalue()


def deserialize(data):
    """Unpack bytes into (RegModel, extra blocks dict).

    Rejects bad magic, unknown versions and truncation, reporting the byte
    offset of the failure.
    """
    r = _Reader(data)
    magic = r.read(4, "magic")
    if magic != MODEL_MAGIC:
        raise DataFormatError(f"bad magic {magic!r} at byte 0: expected {MODEL_MAGIC!r}")
    version, levels, base, h, w, slope = r.unpack("<IIIIIf", "header")
    if version != MODEL_VERSION:
        raise DataFormatError(f"unsupported model version {version} at byte 4")
    arch = ArchConfig(levels=levels, base_channels=base, input_hw=(h, w),
                      leaky_slope=round(float(slope), 6))
    (block_count,) = r.unpack("<I", "block count")
    blocks = {}
    for _ in range(block_count):
        (name_len,) = r.unpack("<H", "block name length")
        name = r.read(name_len, "block name").decode("utf-8")
        (rank,) = r.unpack("<B", "block rank")
        dims = tuple(r.unpack(f"<{rank}I", "block dims")) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = r.read(4 * count, f"block {name} payload")
        blocks[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.offset != len(data):
        raise DataFormatError(f"trailing {len(data) - r.offset} bytes at byte {r.offset}")
    expected = param_shapes(arch)
    params = {}
    for name in expected:
        if name not in blocks:
            raise DataFormatError(f"model file missing parameter block {name}")
        params[name] = Tensor(blocks.pop(name), requires_grad=True)
    return RegModel(arch, params), blocks
