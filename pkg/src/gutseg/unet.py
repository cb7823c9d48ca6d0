"""U-Net builder: contracting encoder, expanding decoder with skip
connections, one input channel, three output channels (one mask logit
plane per organ class).

Convolutions are 3x3 with padding 1 so the output spatial size equals
the input size; every resolution level applies two conv-norm-activation
layers (or the style's equivalent), the encoder halves resolution with
2x2 max pooling, and the decoder doubles it with stride-2 transposed
convolutions followed by a skip concatenation.

Encoder block styles stand in for classification-network backbones at
desk scale:

* ``plain``             : conv-bn-relu twice
* ``residual``          : two conv-bn layers plus a projection shortcut
* ``inverted_residual`` : 1x1 expand -> 3x3 depthwise -> 1x1 linear project
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .autodiff.ops import (RunningStats, batchnorm2d, concat_channels, conv2d,
                           conv_transpose2d, depthwise_conv2d, maxpool2d, relu)
from .errors import ConfigError, ShapeError, WeightsFormatError
from .seeding import rng_for

BLOCK_STYLES = ("plain", "residual", "inverted_residual")

_EXPAND = 2  # width multiplier of the inverted-residual bottleneck

_MAGIC = b"GSGW"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    """Topology description; the parameter set is a pure function of it."""

    depth: int = 5
    base_channels: int = 64
    in_channels: int = 1
    out_channels: int = 3
    block_style: str = "plain"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels != 1:
            raise ConfigError(f"in_channels is fixed to 1, got {self.in_channels}")
        if self.out_channels != 3:
            raise ConfigError(f"out_channels is fixed to 3 (one per organ class), "
                              f"got {self.out_channels}")
        if self.block_style not in BLOCK_STYLES:
            raise ConfigError(
                f"unknown block_style {self.block_style!r}; choose from {BLOCK_STYLES}")

    @property
    def divisor(self) -> int:
        """Input spatial sizes must be divisible by this."""
        return 2 ** (self.depth - 1)


class Model:
    """A built U-Net: named parameter tensors plus batchnorm stats.

    Immutable during forward passes; training mutates parameters only
    between forward/backward cycles on one thread. Read-only inference
    may share a model across threads.
    """

    def __init__(self, config: UNetConfig, params: dict[str, Tensor],
                 bn_stats: dict[str, RunningStats]):
        self.config = config
        self.params = params
        self.bn_stats = bn_stats

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def forward(self, batch: Tensor, training: bool = False) -> Tensor:
        return forward(self, batch, training=training)


def _he_conv(rng, cout: int, cin: int, kh: int, kw: int) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * kh * kw))
    return rng.normal(0.0, std, size=(cout, cin, kh, kw)).astype(np.float32)


class _Init:
    """Collects parameters/BN state in deterministic creation order."""

    def __init__(self, seed: int):
        self.rng = rng_for(seed, "unet-init")
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, RunningStats] = {}

    def conv(self, name: str, cout: int, cin: int, k: int) -> None:
        self.params[f"{name}.w"] = Tensor(_he_conv(self.rng, cout, cin, k, k),
                                          requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32),
                                          requires_grad=True)

    def conv_transpose(self, name: str, cin: int, cout: int) -> None:
        std = np.sqrt(2.0 / (cin * 4))
        w = self.rng.normal(0.0, std, size=(cin, cout, 2, 2)).astype(np.float32)
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)

    def depthwise(self, name: str, channels: int) -> None:
        std = np.sqrt(2.0 / 9.0)
        w = self.rng.normal(0.0, std, size=(channels, 1, 3, 3)).astype(np.float32)
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(channels, dtype=np.float32),
                                          requires_grad=True)

    def batchnorm(self, name: str, channels: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(channels, dtype=np.float32),
                                              requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(channels, dtype=np.float32),
                                             requires_grad=True)
        self.bn[name] = RunningStats.create(channels)


def _init_block(init: _Init, name: str, cin: int, cout: int, style: str) -> None:
    if style == "inverted_residual":
        mid = _EXPAND * cin
        init.conv(f"{name}.expand", mid, cin, 1)
        init.batchnorm(f"{name}.bne", mid)
        init.depthwise(f"{name}.dw", mid)
        init.batchnorm(f"{name}.bnd", mid)
        init.conv(f"{name}.project", cout, mid, 1)
        init.batchnorm(f"{name}.bnp", cout)
        return
    init.conv(f"{name}.conv1", cout, cin, 3)
    init.batchnorm(f"{name}.bn1", cout)
    init.conv(f"{name}.conv2", cout, cout, 3)
    init.batchnorm(f"{name}.bn2", cout)
    if style == "residual" and cin != cout:
        init.conv(f"{name}.proj", cout, cin, 1)
        init.batchnorm(f"{name}.bnp", cout)


def build_unet(config: UNetConfig) -> Model:
    """Create a model with He-normal weights from the config's seed.

    Two builds from equal configs are bit-identical."""
    init = _Init(config.seed)
    ch = [config.base_channels * (2 ** i) for i in range(config.depth)]
    prev = config.in_channels
    for i in range(config.depth - 1):
        _init_block(init, f"enc{i}", prev, ch[i], config.block_style)
        prev = ch[i]
    _init_block(init, "bot", prev, ch[-1], config.block_style)
    for i in reversed(range(config.depth - 1)):
        init.conv_transpose(f"up{i}", ch[i + 1], ch[i])
        _init_block(init, f"dec{i}", 2 * ch[i], ch[i], config.block_style)
    init.conv("head", config.out_channels, ch[0], 1)
    return Model(config, init.params, init.bn)


def _bn(model: Model, name: str, x: Tensor, training: bool) -> Tensor:
    return batchnorm2d(x, model.params[f"{name}.gamma"], model.params[f"{name}.beta"],
                       model.bn_stats[name], training)


def _forward_block(model: Model, name: str, x: Tensor, training: bool) -> Tensor:
    p = model.params
    style = model.config.block_style
    if style == "inverted_residual":
        h = relu(_bn(model, f"{name}.bne",
                     conv2d(x, p[f"{name}.expand.w"], p[f"{name}.expand.b"]), training))
        h = relu(_bn(model, f"{name}.bnd",
                     depthwise_conv2d(h, p[f"{name}.dw.w"], p[f"{name}.dw.b"]), training))
        h = _bn(model, f"{name}.bnp",
                conv2d(h, p[f"{name}.project.w"], p[f"{name}.project.b"]), training)
        if x.shape[1] == h.shape[1]:
            h = h + x
        return h
    h = relu(_bn(model, f"{name}.bn1",
                 conv2d(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], padding=1), training))
    h = _bn(model, f"{name}.bn2",
            conv2d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], padding=1), training)
    if style == "plain":
        return relu(h)
    if x.shape[1] == h.shape[1]:
        shortcut = x
    else:
        shortcut = _bn(model, f"{name}.bnp",
                       conv2d(x, p[f"{name}.proj.w"], p[f"{name}.proj.b"]), training)
    return relu(h + shortcut)


def forward(model: Model, batch: Tensor, training: bool = False) -> Tensor:
    """(B, 1, H, W) -> (B, 3, H, W) raw logits (no activation)."""
    cfg = model.config
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"forward: need (B, {cfg.in_channels}, H, W), got {batch.shape}")
    h_, w_ = batch.shape[2], batch.shape[3]
    if h_ % cfg.divisor or w_ % cfg.divisor:
        raise ShapeError(
            f"forward: spatial size {h_}x{w_} must be divisible by {cfg.divisor} "
            f"for depth {cfg.depth}")
    skips = []
    h = batch
    for i in range(cfg.depth - 1):
        h = _forward_block(model, f"enc{i}", h, training)
        skips.append(h)
        h = maxpool2d(h)
    h = _forward_block(model, "bot", h, training)
    for i in reversed(range(cfg.depth - 1)):
        h = conv_transpose2d(h, model.params[f"up{i}.w"], stride=2)
        h = concat_channels(h, skips[i])
        h = _forward_block(model, f"dec{i}", h, training)
    return conv2d(h, model.params["head.w"], model.params["head.b"])


def count_parameters(model: Model) -> int:
    return sum(t.size for _, t in model.parameters())


# ---------------------------------------------------------------------------
# weight file format: magic, version, config JSON, then named float32
# blobs (parameters, then batchnorm running stats), all little-endian.

_KIND_PARAM, _KIND_BN_MEAN, _KIND_BN_VAR = 0, 1, 2


def _write_entry(fh, kind: int, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<BH", kind, len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_entry(fh):
    head = fh.read(3)
    if len(head) != 3:
        raise WeightsFormatError("truncated weight file (entry header)")
    kind, name_len = struct.unpack("<BH", head)
    name = fh.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise WeightsFormatError(f"truncated weight file (data for {name!r})")
    return kind, name, np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_weights(model: Model, path) -> None:
    """Write a versioned binary container; load_weights round-trips to
    bit-identical parameters."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _FORMAT_VERSION))
    cfg = json.dumps(asdict(model.config)).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    entries = [(_KIND_PARAM, name, t.data) for name, t in model.parameters()]
    for name, stats in model.bn_stats.items():
        entries.append((_KIND_BN_MEAN, name, stats.mean))
        entries.append((_KIND_BN_VAR, name, stats.var))
    buf.write(struct.pack("<I", len(entries)))
    for kind, name, arr in entries:
        _write_entry(buf, kind, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_weights(path) -> Model:
    """Rebuild a model from a weight file; rejects bad magic, unknown
    versions, and config/parameter mismatches."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise WeightsFormatError(f"{path}: not a gutseg weight file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _FORMAT_VERSION:
            raise WeightsFormatError(
                f"{path}: format version {version} unsupported (expected {_FORMAT_VERSION})")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        try:
            cfg_dict = json.loads(fh.read(cfg_len).decode("utf-8"))
            config = UNetConfig(**cfg_dict)
        except (ValueError, TypeError, ConfigError) as exc:
            raise WeightsFormatError(f"{path}: bad embedded config ({exc})") from exc
        model = build_unet(config)
        (n_entries,) = struct.unpack("<I", fh.read(4))
        seen = set()
        for _ in range(n_entries):
            kind, name, arr = _read_entry(fh)
            if kind == _KIND_PARAM:
                target = model.params.get(name)
                if target is None:
                    raise WeightsFormatError(f"{path}: unknown parameter {name!r}")
                if target.data.shape != arr.shape:
                    raise WeightsFormatError(
                        f"{path}: parameter {name!r} has shape {arr.shape}, "
                        f"config implies {target.data.shape}")
                target.data = np.ascontiguousarray(arr)
            elif kind in (_KIND_BN_MEAN, _KIND_BN_VAR):
                stats = model.bn_stats.get(name)
                if stats is None:
                    raise WeightsFormatError(f"{path}: unknown batchnorm state {name!r}")
                if kind == _KIND_BN_MEAN:
                    stats.mean[:] = arr
                else:
                    stats.var[:] = arr
            else:
                raise WeightsFormatError(f"{path}: unknown entry kind {kind}")
            seen.add((kind, name))
        expected = {(_KIND_PARAM, n) for n in model.params}
        for n in model.bn_stats:
            expected.add((_KIND_BN_MEAN, n))
            expected.add((_KIND_BN_VAR, n))
        if seen != expected:
            missing = sorted(n for _, n in expected - seen)
            raise WeightsFormatError(f"{path}: missing entries {missing[:5]}")
    return model
