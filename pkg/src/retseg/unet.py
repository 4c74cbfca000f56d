"""U-Net assembly for the two segmentation variants, plus checkpointing.

Both variants follow the same recipe: encoder stages of two 3x3 conv+ReLU
pairs with the pre-pool activation kept as a skip, a two-conv bridge, decoder
stages of 2x2 transposed conv, skip concatenation and two 3x3 conv+ReLU, and
a 1x1 sigmoid head.  The deepest skip pairs with the first decoder stage.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigInvalid,
    CorruptCheckpoint,
    IndivisibleSpatialDim,
    MissingCache,
    ShapeHeaderMismatch,
    ShapeMismatch,
    WriteFailure,
)
from .tensor_nn import (
    AdamState,
    Tensor4,
    concat_backward,
    concat_channels,
    conv2d,
    conv2d_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    upconv2,
    upconv2_backward,
)

CHECKPOINT_MAGIC = b"RSEG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    encoder_channels: tuple[int, ...]
    bridge_channels: tuple[int, int]
    decoder_channels: tuple[int, ...]
    in_channels: int = 1
    width_scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "bridge_channels", tuple(self.bridge_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if len(self.encoder_channels) != len(self.decoder_channels):
            raise ConfigInvalid("encoder and decoder stage counts must match")
        if not self.encoder_channels:
            raise ConfigInvalid("at least one encoder stage is required")
        if len(self.bridge_channels) != 2:
            raise ConfigInvalid("bridge_channels must list exactly two conv widths")
        if self.in_channels < 1 or self.width_scale < 1:
            raise ConfigInvalid("in_channels and width_scale must be >= 1")
        for ch in (*self.encoder_channels, *self.bridge_channels, *self.decoder_channels):
            if ch < 1:
                raise ConfigInvalid("channel counts must be positive")
            if ch % self.width_scale:
                raise ConfigInvalid(
                    f"width_scale {self.width_scale} must divide channel count {ch}"
                )

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    # channel lists after width scaling
    def enc(self) -> list[int]:
        return [c // self.width_scale for c in self.encoder_channels]

    def bridge(self) -> tuple[int, int]:
        return (
            self.bridge_channels[0] // self.width_scale,
            self.bridge_channels[1] // self.width_scale,
        )

    def dec(self) -> list[int]:
        return [c // self.width_scale for c in self.decoder_channels]

    def to_dict(self) -> dict:
        return {
            "encoder_channels": list(self.encoder_channels),
            "bridge_channels": list(self.bridge_channels),
            "decoder_channels": list(self.decoder_channels),
            "in_channels": self.in_channels,
            "width_scale": self.width_scale,
        }

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        return UNetConfig(
            tuple(d["encoder_channels"]),
            tuple(d["bridge_channels"]),
            tuple(d["decoder_channels"]),
            int(d.get("in_channels", 1)),
            int(d.get("width_scale", 1)),
        )


def reti_unet1(width_scale: int = 1, in_channels: int = 1) -> UNetConfig:
    """4 encoders / 4 decoders: {64,128,256,512}, bridge [512,1024], {512,256,128,64}."""
    return UNetConfig((64, 128, 256, 512), (512, 1024), (512, 256, 128, 64), in_channels, width_scale)


def reti_unet2(width_scale: int = 1, in_channels: int = 1) -> UNetConfig:
    """5 encoders / 5 decoders: {64,128,256,512,512}, bridge [512,1024], {512,512,256,128,64}."""
    return UNetConfig(
        (64, 128, 256, 512, 512), (512, 1024), (512, 512, 256, 128, 64), in_channels, width_scale
    )


MODEL_CONFIGS = {"reti-unet1": reti_unet1, "reti-unet2": reti_unet2}


def param_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape table for every trainable tensor; the single source of
    truth for initialization, checkpoint validation, and parameter counts."""
    enc, (b0, b1), dec = cfg.enc(), cfg.bridge(), cfg.dec()
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, out_c, in_c, k=3):
        shapes[f"{name}.w"] = (out_c, in_c, k, k)
        shapes[f"{name}.b"] = (out_c,)

    prev = cfg.in_channels
    for s, ch in enumerate(enc):
        conv(f"enc{s}.conv1", ch, prev)
        conv(f"enc{s}.conv2", ch, ch)
        prev = ch
    conv("bridge.conv1", b0, prev)
    conv("bridge.conv2", b1, b0)
    prev = b1
    for i, ch in enumerate(dec):
        shapes[f"dec{i}.up.w"] = (prev, ch, 2, 2)
        shapes[f"dec{i}.up.b"] = (ch,)
        skip = enc[cfg.depth - 1 - i]
        conv(f"dec{i}.conv1", ch, ch + skip)
        conv(f"dec{i}.conv2", ch, ch)
        prev = ch
    conv("head", 1, prev, k=1)
    return shapes


def parameter_count(cfg: UNetConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


@dataclass
class Model:
    config: UNetConfig
    params: dict[str, np.ndarray]
    seed: int


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    # conv weights are (out, in, k, k); transposed-conv weights are (in, out, 2, 2)
    if ".up." in name:
        return shape[0] * shape[2] * shape[3]
    return shape[1] * shape[2] * shape[3]


def build_unet(cfg: UNetConfig, seed: int) -> Model:
    """Instantiate parameters: He-uniform fan-in for weights, zero biases.

    Draws follow the shape-table order from one PCG64 stream, so equal seeds
    give bit-identical models.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = float(np.sqrt(6.0 / _fan_in(name, shape)))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Model(cfg, params, seed)


def cast_model(model: Model, dtype) -> Model:
    """Copy of the model at another precision (float64 shadow mode for checks)."""
    return Model(model.config, {k: v.astype(dtype) for k, v in model.params.items()}, model.seed)


def _check_input(cfg: UNetConfig, x: Tensor4):
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeMismatch(f"expected (n,{cfg.in_channels},h,w), got {x.shape}")
    step = 1 << cfg.depth
    if x.shape[2] % step or x.shape[3] % step or x.shape[2] == 0 or x.shape[3] == 0:
        raise IndivisibleSpatialDim(
            f"spatial dims {x.shape[2]}x{x.shape[3]} must be positive multiples of {step}"
        )


def unet_forward(model: Model, x: Tensor4, keep_cache: bool = False):
    """Forward pass; returns (probs, cache).  cache is None unless keep_cache."""
    cfg = model.config
    P = model.params
    _check_input(cfg, x)
    cache: dict | None = {} if keep_cache else None

    def conv_block(h, name):
        z = conv2d(h, P[name + ".w"], P[name + ".b"])
        if keep_cache:
            cache[name] = (h, z)
        return relu(z)

    skips = []
    h = x
    for s in range(cfg.depth):
        h = conv_block(h, f"enc{s}.conv1")
        h = conv_block(h, f"enc{s}.conv2")
        skips.append(h)
        h, idx = maxpool2(h)
        if keep_cache:
            cache[f"pool{s}"] = idx
    h = conv_block(h, "bridge.conv1")
    h = conv_block(h, "bridge.conv2")
    for i in range(cfg.depth):
        name = f"dec{i}"
        if keep_cache:
            cache[name + ".up"] = h
        h = upconv2(h, P[name + ".up.w"], P[name + ".up.b"])
        if keep_cache:
            cache[name + ".split"] = h.shape[1]
        h = concat_channels(h, skips[cfg.depth - 1 - i])
        h = conv_block(h, name + ".conv1")
        h = conv_block(h, name + ".conv2")
    if keep_cache:
        cache["head"] = h
    z = conv2d(h, P["head.w"], P["head.b"])
    probs = sigmoid(z)
    if keep_cache:
        cache["probs"] = probs
    return probs, cache


def unet_backward(model: Model, cache: dict, dprobs: Tensor4) -> dict:
    """Exact reverse pass; returns gradients for every parameter."""
    if not cache:
        raise MissingCache("unet_backward needs the cache from unet_forward(keep_cache=True)")
    cfg = model.config
    P = model.params
    grads: dict[str, np.ndarray] = {}

    def conv_block_back(dout, name):
        h_in, z = cache[name]
        dz = relu_backward(z, dout)
        dx, dw, db = conv2d_backward(h_in, P[name + ".w"], dz)
        grads[name + ".w"] = dw
        grads[name + ".b"] = db
        return dx

    dz = sigmoid_backward(cache["probs"], dprobs)
    dh, dw, db = conv2d_backward(cache["head"], P["head.w"], dz)
    grads["head.w"] = dw
    grads["head.b"] = db

    dskips: dict[int, np.ndarray] = {}
    for i in reversed(range(cfg.depth)):
        name = f"dec{i}"
        dh = conv_block_back(dh, name + ".conv2")
        dh = conv_block_back(dh, name + ".conv1")
        dh, dskip = concat_backward(dh, cache[name + ".split"])
        dskips[cfg.depth - 1 - i] = dskip
        dh, dw, db = upconv2_backward(cache[name + ".up"], P[name + ".up.w"], dh)
        grads[name + ".up.w"] = dw
        grads[name + ".up.b"] = db

    dh = conv_block_back(dh, "bridge.conv2")
    dh = conv_block_back(dh, "bridge.conv1")
    for s in reversed(range(cfg.depth)):
        dh = maxpool2_backward(dh, cache[f"pool{s}"])
        dh = dh + dskips[s]  # the skip branch rejoins at the pre-pool activation
        dh = conv_block_back(dh, f"enc{s}.conv2")
        dh = conv_block_back(dh, f"enc{s}.conv1")
    return grads


def save_checkpoint(model: Model, adam: AdamState | None, path) -> None:
    """Binary checkpoint: magic, u32 version, u32-length-prefixed JSON header,
    then raw little-endian float32 blobs in header order."""
    tensors: list[tuple[str, np.ndarray]] = list(model.params.items())
    if adam is not None:
        for k in model.params:
            tensors.append((f"adam.m.{k}", adam.m[k]))
            tensors.append((f"adam.v.{k}", adam.v[k]))
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "tensors": entries,
        "adam": None
        if adam is None
        else {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t},
    }
    hjson = json.dumps(header).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<I", len(hjson)))
            f.write(hjson)
            for raw in blobs:
                f.write(raw)
    except OSError as e:
        raise WriteFailure(f"{path}: {e}") from e


def load_checkpoint(path) -> tuple[Model, AdamState | None]:
    """Inverse of save_checkpoint; validates magic, version, lengths, shapes."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CorruptCheckpoint(f"{path}: {e}") from e
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if 12 + hlen > len(blob):
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        cfg = UNetConfig.from_dict(header["config"])
        entries = header["tensors"]
        seed = int(header["seed"])
    except (ValueError, KeyError, TypeError, ConfigInvalid) as e:
        raise CorruptCheckpoint(f"{path}: malformed header ({e})") from e

    data = blob[12 + hlen :]
    expected_size = sum(4 * int(np.prod(e["shape"])) for e in entries)
    if len(data) != expected_size:
        raise CorruptCheckpoint(
            f"{path}: blob section is {len(data)} bytes, header implies {expected_size}"
        )

    def read_tensor(entry) -> np.ndarray:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape))
        off = int(entry["offset"])
        if off < 0 or off + 4 * count > len(data):
            raise CorruptCheckpoint(f"{path}: tensor {entry['name']} out of bounds")
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        return flat.astype(np.float32).reshape(shape)

    expected_shapes = param_shapes(cfg)
    params: dict[str, np.ndarray] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry["name"]
        arr = read_tensor(entry)
        if name.startswith("adam.m."):
            adam_m[name[len("adam.m.") :]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v.") :]] = arr
        else:
            if name not in expected_shapes:
                raise ShapeHeaderMismatch(f"{path}: unexpected tensor {name}")
            if tuple(arr.shape) != expected_shapes[name]:
                raise ShapeHeaderMismatch(
                    f"{path}: {name} is {arr.shape}, config implies {expected_shapes[name]}"
                )
            params[name] = arr
    if set(params) != set(expected_shapes):
        raise ShapeHeaderMismatch(f"{path}: parameter set does not match the config")

    adam = None
    if header.get("adam") is not None:
        h = header["adam"]
        adam = AdamState(
            lr=float(h["lr"]),
            beta1=float(h["beta1"]),
            beta2=float(h["beta2"]),
            eps=float(h["eps"]),
            t=int(h["t"]),
            m=adam_m,
            v=adam_v,
        )
    return Model(cfg, params, seed), adam
