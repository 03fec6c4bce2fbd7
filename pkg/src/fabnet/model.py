"""Convolutional backbone, attention insertion point, and dense head.

The network is a stack of 3x3 same-padded conv blocks (each optionally
followed by 2x2 max pooling), the channel-attention block after the
final feature map, a spatial mean, and a two-layer dense classifier.
Per-parameter trainable flags realize backbone freezing for transfer
learning.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .attention import FabParams, fab_forward, glorot_uniform, he_uniform
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Shape4, Tape, Tensor, dense, mean_spatial, relu, _emit

CHECKPOINT_MAGIC = b"FABN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvBlockSpec:
    """One backbone block: 3x3 conv, stride 1, same padding, ReLU."""

    out_channels: int
    pool: bool = True   # 2x2 max pool, stride 2, after the activation


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (32, 32)        # (height, width)
    in_channels: int = 3
    blocks: tuple = (ConvBlockSpec(16), ConvBlockSpec(32), ConvBlockSpec(64))
    use_fab: bool = True
    fab_ratio: int = 8
    head_hidden: int = 64
    num_classes: int = 5
    freeze_backbone: bool = False


def feature_map_size(cfg: ModelConfig) -> tuple:
    """Spatial size after all blocks; raises ConfigError on underflow."""
    h, w = cfg.input_size
    for i, blk in enumerate(cfg.blocks):
        if blk.pool:
            if h % 2 or w % 2:
                raise ConfigError(f"block {i}: cannot pool odd extent {h}x{w}")
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ConfigError(f"block {i}: feature map underflows to {h}x{w}")
    return h, w


def validate_config(cfg: ModelConfig) -> None:
    if cfg.num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if not cfg.blocks:
        raise ConfigError("at least one conv block is required")
    if any(b.out_channels < 1 for b in cfg.blocks):
        raise ConfigError("block channel counts must be >= 1")
    if cfg.use_fab:
        c = cfg.blocks[-1].out_channels
        if cfg.fab_ratio < 1 or c % cfg.fab_ratio != 0:
            raise ConfigError(f"fab_ratio {cfg.fab_ratio} must divide "
                              f"final channel count {c}")
    feature_map_size(cfg)


class Model:
    """Named parameter tensors plus the config that wires them together."""

    def __init__(self, config: ModelConfig, class_names, params: dict,
                 trainable: dict):
        self.config = config
        self.class_names = list(class_names)
        self.params = params          # name -> Tensor, insertion-ordered
        self.trainable = trainable    # name -> bool

    def fab_params(self) -> FabParams:
        return FabParams(
            w_reduce=self.params["fab.reduce.weight"],
            b_reduce=self.params["fab.reduce.bias"],
            w_expand=self.params["fab.expand.weight"],
            b_expand=self.params["fab.expand.bias"],
            ratio=self.config.fab_ratio,
        )

    def watch_trainable(self, tape: Tape) -> None:
        """Register every trainable parameter as a leaf of ``tape``."""
        for name, t in self.params.items():
            if self.trainable[name]:
                tape.watch(t)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Per-name streams keep paired configs (e.g. with/without the
    # attention block) bit-identical on their shared parameters.
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed,
                               spawn_key=(zlib.crc32(name.encode("utf-8")),)))


def build_model(cfg: ModelConfig, seed: int, class_names=None) -> Model:
    """Deterministically initialize a model for ``cfg``.

    Conv and hidden dense weights are He-uniform, the output layer is
    Glorot-uniform, and all biases start at zero.
    """
    validate_config(cfg)
    if class_names is None:
        class_names = [f"class{i:02d}" for i in range(cfg.num_classes)]
    if len(class_names) != cfg.num_classes:
        raise ConfigError(f"{len(class_names)} class names for "
                          f"{cfg.num_classes} classes")

    params: dict = {}
    trainable: dict = {}

    def add(name, data, is_trainable=True):
        params[name] = Tensor(data)
        trainable[name] = is_trainable

    backbone_trainable = not cfg.freeze_backbone
    c_in = cfg.in_channels
    for i, blk in enumerate(cfg.blocks):
        rng = _param_rng(seed, f"block{i}")
        fan_in = 3 * 3 * c_in
        add(f"block{i}.conv.weight",
            he_uniform(rng, fan_in, (3, 3, c_in, blk.out_channels)),
            backbone_trainable)
        add(f"block{i}.conv.bias", np.zeros((1, 1, 1, blk.out_channels)),
            backbone_trainable)
        c_in = blk.out_channels

    if cfg.use_fab:
        mid = c_in // cfg.fab_ratio
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed,
                                   spawn_key=(zlib.crc32(b"fab"),)))
        add("fab.reduce.weight", he_uniform(rng, c_in, (1, 1, mid, c_in)))
        add("fab.reduce.bias", np.zeros((1, 1, 1, mid)))
        add("fab.expand.weight", glorot_uniform(rng, mid, c_in, (1, 1, c_in, mid)))
        add("fab.expand.bias", np.zeros((1, 1, 1, c_in)))

    rng = _param_rng(seed, "head.hidden")
    add("head.hidden.weight", he_uniform(rng, c_in, (1, 1, cfg.head_hidden, c_in)))
    add("head.hidden.bias", np.zeros((1, 1, 1, cfg.head_hidden)))
    rng = _param_rng(seed, "head.out")
    add("head.out.weight",
        glorot_uniform(rng, cfg.head_hidden, cfg.num_classes,
                       (1, 1, cfg.num_classes, cfg.head_hidden)))
    add("head.out.bias", np.zeros((1, 1, 1, cfg.num_classes)))

    return Model(cfg, class_names, params, trainable)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Cross-correlation with zero same-padding, stride 1.

    ``kernels`` is (KH, KW, Cin, Cout) with odd KH/KW; output spatial
    size equals input size. Runs as an im2col matmul; the backward rule
    scatters through the same column layout.
    """
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel expects {kcin} channels, input has {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extent must be odd, got {kh}x{kw}")
    if bias.shape != (1, 1, 1, cout):
        raise ShapeError(f"conv2d: bias {tuple(bias.shape)} does not match "
                         f"{cout} output channels")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.concatenate(
        [padded[:, i:i + h, j:j + w, :] for i in range(kh) for j in range(kw)],
        axis=3)
    wmat = kernels.data.reshape(kh * kw * cin, cout)
    out = (cols.reshape(-1, kh * kw * cin) @ wmat
           + bias.data.reshape(cout)).reshape(n, h, w, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        grad_w = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(kernels.shape)
        grad_b = g.sum(axis=(0, 1, 2)).reshape(1, 1, 1, cout)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, i:i + h, j:j + w, :] += (
                    g @ kernels.data[i, j].T)
        return (grad_padded[:, ph:ph + h, pw:pw + w, :], grad_w, grad_b)

    return _emit("conv2d", (x, kernels, bias), out, back)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; requires even spatial extents.

    The backward rule routes each window's gradient to its first maximum
    in row-major window order.
    """
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: extents must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (x.data.reshape(n, h2, 2, w2, 2, c)
               .transpose(0, 1, 3, 2, 4, 5)
               .reshape(n, h2, w2, 4, c))
    winners = windows.argmax(axis=3)
    out = np.take_along_axis(windows, winners[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def back(g):
        scattered = np.zeros((n, h2, w2, 4, c))
        np.put_along_axis(scattered, winners[:, :, :, None, :],
                          g[:, :, :, None, :], axis=3)
        return (scattered.reshape(n, h2, w2, 2, 2, c)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(n, h, w, c),)

    return _emit("maxpool2x2", (x,), out, back)


def model_forward(m: Model, x: Tensor) -> Tensor:
    """Logits (N,1,1,num_classes) for a batch of (N,H,W,3) images."""
    n, h, w, c = x.shape
    if (h, w) != tuple(m.config.input_size) or c != m.config.in_channels:
        raise ShapeError(f"input {tuple(x.shape)} does not match configured "
                         f"size {m.config.input_size} x {m.config.in_channels}")
    t = x
    for i, blk in enumerate(m.config.blocks):
        t = relu(conv2d(t, m.params[f"block{i}.conv.weight"],
                        m.params[f"block{i}.conv.bias"]))
        if blk.pool:
            t = maxpool2x2(t)
    if m.config.use_fab:
        t = fab_forward(t, m.fab_params()).out
    t = mean_spatial(t)
    t = relu(dense(t, m.params["head.hidden.weight"],
                   m.params["head.hidden.bias"]))
    return dense(t, m.params["head.out.weight"], m.params["head.out.bias"])


def trainable_parameters(m: Model) -> list:
    """Ordered (name, tensor) pairs of the parameters the optimizer may touch."""
    return [(name, t) for name, t in m.params.items() if m.trainable[name]]


def _config_text(cfg: ModelConfig, class_names) -> str:
    blocks = ",".join(
        f"{b.out_channels}:pool" if b.pool else str(b.out_channels)
        for b in cfg.blocks)
    lines = [
        f"input_height={cfg.input_size[0]}",
        f"input_width={cfg.input_size[1]}",
        f"in_channels={cfg.in_channels}",
        f"blocks={blocks}",
        f"use_fab={'true' if cfg.use_fab else 'false'}",
        f"fab_ratio={cfg.fab_ratio}",
        f"head_hidden={cfg.head_hidden}",
        f"num_classes={cfg.num_classes}",
        f"freeze_backbone={'true' if cfg.freeze_backbone else 'false'}",
        "class_names=" + ",".join(class_names),
    ]
    return "\n".join(lines) + "\n"


def parse_blocks(text: str) -> tuple:
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            raise ConfigError("empty block entry")
        if ":" in part:
            chan, suffix = part.split(":", 1)
            if suffix != "pool":
                raise ConfigError(f"unknown block suffix {suffix!r}")
            pool = True
        else:
            chan, pool = part, False
        try:
            channels = int(chan)
        except ValueError as exc:
            raise ConfigError(f"bad block channel count {chan!r}") from exc
        specs.append(ConvBlockSpec(channels, pool))
    return tuple(specs)


def _config_from_text(text: str) -> tuple:
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"bad config line {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    try:
        cfg = ModelConfig(
            input_size=(int(fields["input_height"]), int(fields["input_width"])),
            in_channels=int(fields["in_channels"]),
            blocks=parse_blocks(fields["blocks"]),
            use_fab=fields["use_fab"] == "true",
            fab_ratio=int(fields["fab_ratio"]),
            head_hidden=int(fields["head_hidden"]),
            num_classes=int(fields["num_classes"]),
            freeze_backbone=fields["freeze_backbone"] == "true",
        )
        class_names = fields["class_names"].split(",")
    except (KeyError, ValueError, ConfigError) as exc:
        raise FormatError(f"invalid checkpoint config: {exc}") from exc
    return cfg, class_names


def save_checkpoint(m: Model, path) -> None:
    """Write the model as little-endian binary; round trips are bit-exact."""
    text = _config_text(m.config, m.class_names).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for name, t in m.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<4Q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n, what):
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}")
        piece = blob[offset:offset + n]
        offset += n
        return piece

    offset = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (text_len,) = struct.unpack("<I", take(4, "config length"))
    cfg, class_names = _config_from_text(
        take(text_len, "config").decode("utf-8"))

    loaded: dict = {}
    while offset < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        shape = Shape4(*struct.unpack("<4Q", take(32, "shape")))
        raw = take(shape.element_count * 8, f"values of {name}")
        loaded[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    # Rebuild through the constructor so shapes are validated against the
    # config, then overwrite every value from the table.
    skeleton = build_model(cfg, seed=0, class_names=class_names)
    if set(loaded) != set(skeleton.params):
        missing = set(skeleton.params) ^ set(loaded)
        raise FormatError(f"parameter table mismatch: {sorted(missing)}")
    for name, data in loaded.items():
        if data.shape != skeleton.params[name].data.shape:
            raise FormatError(f"shape table mismatch for {name}")
        skeleton.params[name] = Tensor(data)
    return skeleton
