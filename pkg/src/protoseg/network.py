"""Encoder-decoder feature extractor and the multi-prototype head.

The backbone is a depth-2 micro U-Net (two conv+relu blocks per level,
2x2 pooling, nearest upsampling, skip concatenation). The head is a
bias-free per-pixel linear map onto C' = P*C prototype channels followed
by a channel softmax; a fixed binary mapping matrix folds prototype
probabilities back into class probabilities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import (Tensor, channel_linear, concat_channels, conv2d,
                       maxpool2x2, no_grad, relu, softmax_channels,
                       upsample_nearest2x2)

# conv layers in forward (and serialization) order: name -> (out_mult, in_mult)
# multipliers are in units of base_channels F; input_channels overrides enc1a's input
_LAYER_PLAN = (
    ("enc1a", 1, None),
    ("enc1b", 1, 1),
    ("enc2a", 2, 1),
    ("enc2b", 2, 2),
    ("bot_a", 4, 2),
    ("bot_b", 4, 4),
    ("dec2a", 2, 6),   # upsampled bottleneck (4F) + level-2 skip (2F)
    ("dec2b", 2, 2),
    ("dec1a", 1, 3),   # upsampled decoder (2F) + level-1 skip (F)
    ("dec1b", 1, 1),
)

CHECKPOINT_MAGIC = b"PSEG"
PARAMS_VERSION = 1


@dataclass
class NetConfig:
    """Architecture settings; feature_dim equals base_channels."""

    num_classes: int
    base_channels: int = 8
    prototypes_per_class: int = 3
    input_channels: int = 1
    depth: int = 2

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.prototypes_per_class < 1:
            raise ValueError(
                f"prototypes_per_class must be >= 1, got {self.prototypes_per_class}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.depth != 2:
            raise ValueError("depth is fixed at 2")

    @property
    def feature_dim(self) -> int:
        return self.base_channels

    @property
    def num_prototypes(self) -> int:
        """C' = P * C."""
        return self.prototypes_per_class * self.num_classes

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        shapes = []
        for name, out_mult, in_mult in _LAYER_PLAN:
            cin = self.input_channels if in_mult is None else in_mult * self.base_channels
            shapes.append((name, out_mult * self.base_channels, cin))
        return shapes


@dataclass
class NetworkParams:
    """All learnable arrays: conv kernels/biases plus the prototype matrix.

    Prototype vectors are the columns of ``head`` (feature_dim x C', no
    bias). Arrays live inside autodiff leaf tensors so one backward pass
    fills every gradient buffer.
    """

    kernels: dict[str, Tensor] = field(default_factory=dict)
    biases: dict[str, Tensor] = field(default_factory=dict)
    head: Tensor = None

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Fixed iteration order used by the optimizer and checkpoints."""
        for name, _, _ in _LAYER_PLAN:
            yield f"{name}.kernel", self.kernels[name]
            yield f"{name}.bias", self.biases[name]
        yield "head", self.head

    def copy(self, requires_grad: bool = True) -> "NetworkParams":
        out = NetworkParams()
        for name, _, _ in _LAYER_PLAN:
            out.kernels[name] = Tensor(self.kernels[name].data.copy(),
                                       requires_grad=requires_grad)
            out.biases[name] = Tensor(self.biases[name].data.copy(),
                                      requires_grad=requires_grad)
        out.head = Tensor(self.head.data.copy(), requires_grad=requires_grad)
        return out

    def astype(self, dtype) -> "NetworkParams":
        out = NetworkParams()
        for name, _, _ in _LAYER_PLAN:
            out.kernels[name] = Tensor(self.kernels[name].data.astype(dtype),
                                       requires_grad=True)
            out.biases[name] = Tensor(self.biases[name].data.astype(dtype),
                                      requires_grad=True)
        out.head = Tensor(self.head.data.astype(dtype), requires_grad=True)
        return out

    def zero_grads(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None


@dataclass
class MappingMatrix:
    """Fixed binary C'xC matrix assigning each prototype to one class."""

    matrix: np.ndarray  # [C', C] float32, one 1 per row, P per column

    @property
    def num_prototypes(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[1]


def build_mapping(num_classes: int, prototypes_per_class: int) -> MappingMatrix:
    """Contiguous blocks: prototypes j*P..(j+1)*P-1 belong to class j."""
    if num_classes < 1 or prototypes_per_class < 1:
        raise ValueError("build_mapping: num_classes and prototypes_per_class must be >= 1")
    c, p = num_classes, prototypes_per_class
    m = np.zeros((c * p, c), dtype=np.float32)
    for j in range(c):
        m[j * p:(j + 1) * p, j] = 1.0
    return MappingMatrix(m)


def init_params(config: NetConfig, seed: int) -> NetworkParams:
    """He-normal conv kernels, zero biases, N(0, 1/feature_dim) head."""
    rng = np.random.default_rng(seed)
    params = NetworkParams()
    for name, cout, cin in config.layer_shapes():
        std = np.sqrt(2.0 / (cin * 9))
        k = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(np.float32)
        params.kernels[name] = Tensor(k, requires_grad=True)
        params.biases[name] = Tensor(np.zeros(cout, dtype=np.float32),
                                     requires_grad=True)
    n = config.feature_dim
    w = rng.normal(0.0, np.sqrt(1.0 / n),
                   size=(n, config.num_prototypes)).astype(np.float32)
    params.head = Tensor(w, requires_grad=True)
    return params


def _block(x: Tensor, params: NetworkParams, a: str, b: str) -> Tensor:
    x = relu(conv2d(x, params.kernels[a], params.biases[a]))
    return relu(conv2d(x, params.kernels[b], params.biases[b]))


def forward_features(params: NetworkParams, images: Tensor) -> Tensor:
    """Feature map [B, feature_dim, H, W]; H and W must be divisible by 4."""
    if images.data.ndim != 4:
        raise ValueError("forward_features: expected [B,C,H,W] images")
    h, w = images.shape[2], images.shape[3]
    if h % 4 or w % 4:
        raise ValueError(f"forward_features: H and W must be divisible by 4, got {h}x{w}")
    e1 = _block(images, params, "enc1a", "enc1b")
    e2 = _block(maxpool2x2(e1), params, "enc2a", "enc2b")
    bott = _block(maxpool2x2(e2), params, "bot_a", "bot_b")
    d2 = _block(concat_channels(upsample_nearest2x2(bott), e2), params, "dec2a", "dec2b")
    return _block(concat_channels(upsample_nearest2x2(d2), e1), params, "dec1a", "dec1b")


def over_seg_probs(params: NetworkParams, features: Tensor) -> Tensor:
    """Per-pixel probabilities over the C' prototypes."""
    return softmax_channels(channel_linear(features, params.head))


def aggregate_classes(f_prime: Tensor, mapping: MappingMatrix) -> Tensor:
    """Class probability = sum of its prototypes' probabilities."""
    if f_prime.shape[1] != mapping.num_prototypes:
        raise ValueError(
            f"aggregate_classes: {f_prime.shape[1]} channels vs "
            f"{mapping.num_prototypes} mapping rows")
    m = Tensor(mapping.matrix.astype(f_prime.dtype))
    return channel_linear(f_prime, m)


def predict(params: NetworkParams, mapping: MappingMatrix, images: Tensor):
    """Forward pass without gradients.

    Returns (f_prime, f, hard_over_seg, hard_seg); hard maps are per-pixel
    argmax (lowest index on ties) over prototypes and classes.
    """
    with no_grad():
        feats = forward_features(params, images)
        f_prime = over_seg_probs(params, feats)
        f = aggregate_classes(f_prime, mapping)
    hard_over = f_prime.data.argmax(axis=1)
    hard = f.data.argmax(axis=1)
    return f_prime, f, hard_over, hard


# ---------------------------------------------------------------------------
# parameter file format: magic "PSEG", u32 version, then per-array records
# (u16 name length, name bytes, u32 rank, u32 dims..., float32 LE payload)

class ParamFormatError(ValueError):
    """Raised for malformed parameter/checkpoint files."""


def write_array_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParamFormatError(f"truncated file while reading {what}")
    return buf


def read_array_record(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "array name length"))
    name = _read_exact(fh, name_len, "array name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name!r}"))
    if rank > 8:
        raise ParamFormatError(f"implausible rank {rank} for array {name!r}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name!r}"))
    count = 1
    for d in dims:
        count *= d
    payload = _read_exact(fh, 4 * count, f"payload of {name!r}")
    return name, np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_params(path, params: NetworkParams) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", PARAMS_VERSION))
        for name, t in params.named_tensors():
            write_array_record(fh, name, t.data)


def load_params(path) -> NetworkParams:
    """Read a parameter file back into leaf tensors (bit-exact round trip)."""
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ParamFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "format version"))
        if version != PARAMS_VERSION:
            raise ParamFormatError(f"unsupported parameter file version {version}")
        while True:
            probe = fh.read(1)
            if not probe:
                break
            fh.seek(-1, 1)
            name, arr = read_array_record(fh)
            if name in arrays:
                raise ParamFormatError(f"duplicate array {name!r}")
            arrays[name] = arr
    return params_from_arrays(arrays)


def params_from_arrays(arrays: dict[str, np.ndarray]) -> NetworkParams:
    params = NetworkParams()
    for lname, _, _ in _LAYER_PLAN:
        for part in ("kernel", "bias"):
            key = f"{lname}.{part}"
            if key not in arrays:
                raise ParamFormatError(f"missing array {key!r}")
        params.kernels[lname] = Tensor(arrays[f"{lname}.kernel"], requires_grad=True)
        params.biases[lname] = Tensor(arrays[f"{lname}.bias"], requires_grad=True)
    if "head" not in arrays:
        raise ParamFormatError("missing array 'head'")
    params.head = Tensor(arrays["head"], requires_grad=True)
    expected = {name for name, _ in params.named_tensors()}
    extra = sorted(set(arrays) - expected)
    if extra:
        raise ParamFormatError(f"unexpected arrays {extra}")
    return params
