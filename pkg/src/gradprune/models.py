"""Desk-scale CNN architectures with addressable conv filters and prune masks."""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DimensionError, InputError, PersistenceError, StateError, VersionError


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2d:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


LayerSpec = Union[Conv2d, ReLU, MaxPool2d, Flatten, Dense]


@dataclass(frozen=True, order=True)
class FilterId:
    """Output channel ``filter`` of the ``layer``-th convolutional layer."""

    layer: int
    filter: int

    def __str__(self) -> str:
        return f"({self.layer},{self.filter})"


@dataclass(frozen=True)
class PruneMask:
    """Immutable set of pruned filters."""

    pruned: FrozenSet[FilterId] = frozenset()

    def __contains__(self, fid) -> bool:
        return fid in self.pruned

    def __iter__(self) -> Iterator[FilterId]:
        return iter(sorted(self.pruned))

    def __len__(self) -> int:
        return len(self.pruned)

    def add(self, fid: FilterId) -> "PruneMask":
        return PruneMask(self.pruned | {fid})

    def union(self, other: "PruneMask") -> "PruneMask":
        return PruneMask(self.pruned | other.pruned)

    def for_layer(self, layer: int) -> List[int]:
        return sorted(f.filter for f in self.pruned if f.layer == layer)


ARCHITECTURES = ("cnn-small", "cnn-medium")


def _out_hw(h: int, w: int, layer: LayerSpec) -> Tuple[int, int]:
    if isinstance(layer, Conv2d):
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    if isinstance(layer, MaxPool2d):
        return (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1
    return h, w


def architecture_layers(arch: str, num_classes: int, input_shape: Tuple[int, int, int]) -> List[LayerSpec]:
    """Layer list for ``arch`` given the (C, H, W) input shape."""
    c, h, w = input_shape
    if arch == "cnn-small":
        convs, head = [(8, True), (16, True)], []
    elif arch == "cnn-medium":
        convs, head = [(16, False), (16, True), (32, False), (32, True)], [64]
    else:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")

    layers: List[LayerSpec] = []
    channels = c
    for out_ch, pool in convs:
        conv = Conv2d(channels, out_ch)
        layers += [conv, ReLU()]
        h, w = _out_hw(h, w, conv)
        if pool:
            mp = MaxPool2d()
            layers.append(mp)
            h, w = _out_hw(h, w, mp)
        channels = out_ch
        if h < 1 or w < 1:
            raise ConfigError(f"input {input_shape} too small for {arch}")
    layers.append(Flatten())
    features = channels * h * w
    for width in head:
        layers += [Dense(features, width), ReLU()]
        features = width
    layers.append(Dense(features, num_classes))
    return layers


class Model:
    """Ordered layer list plus named float64 parameters and a prune mask.

    Parameters are stored as ``conv{l}.weight`` (O, I, kH, kW), ``conv{l}.bias``
    (O,), ``dense{k}.weight`` (in, out) and ``dense{k}.bias`` (out,), where
    ``l`` and ``k`` count conv and dense layers separately.
    """

    def __init__(self, arch: str, num_classes: int, input_shape, layers: List[LayerSpec],
                 params: Dict[str, np.ndarray], mask: Optional[PruneMask] = None, seed: Optional[int] = None):
        self.arch = arch
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)
        self.params = params
        self.mask = mask if mask is not None else PruneMask()
        self.seed = seed

    # -- structure -----------------------------------------------------------------

    def _param_layers(self) -> Iterator[Tuple[str, LayerSpec]]:
        n_conv = n_dense = 0
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                yield f"conv{n_conv}", layer
                n_conv += 1
            elif isinstance(layer, Dense):
                yield f"dense{n_dense}", layer
                n_dense += 1

    def param_names(self) -> List[str]:
        return [f"{prefix}.{kind}" for prefix, _ in self._param_layers() for kind in ("weight", "bias")]

    @property
    def conv_layers(self) -> List[Conv2d]:
        return [layer for layer in self.layers if isinstance(layer, Conv2d)]

    def filter_ids(self) -> List[FilterId]:
        return [FilterId(l, i) for l, conv in enumerate(self.conv_layers) for i in range(conv.out_channels)]

    def unpruned_filters(self) -> List[FilterId]:
        return [f for f in self.filter_ids() if f not in self.mask]

    def check_filter(self, fid: FilterId) -> None:
        convs = self.conv_layers
        if not (0 <= fid.layer < len(convs)) or not (0 <= fid.filter < convs[fid.layer].out_channels):
            raise InputError(f"filter {fid} is outside the model's conv bounds")

    def filter_params(self, fid: FilterId) -> Tuple[np.ndarray, float]:
        """(weight slice, bias value) of one filter, as views."""
        self.check_filter(fid)
        return self.params[f"conv{fid.layer}.weight"][fid.filter], self.params[f"conv{fid.layer}.bias"][fid.filter]

    def copy(self) -> "Model":
        return Model(self.arch, self.num_classes, self.input_shape, self.layers,
                     {k: v.copy() for k, v in self.params.items()}, self.mask, self.seed)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- computation ----------------------------------------------------------------

    def forward(self, batch, record: bool = False, taps: Optional[Dict[int, np.ndarray]] = None):
        """Logits for an NCHW batch.

        With ``record=True`` the parameters enter the graph as named leaf
        tensors and the return value is ``(logits, leaves)``; otherwise a
        plain logits array is returned.  ``taps`` (layer index -> None) is
        filled in place with that layer's output array.
        """
        x = batch.data if isinstance(batch, ag.Tensor) else np.asarray(batch, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"batch shape {x.shape} does not match model input (N, {self.input_shape})")
        leaves = {name: ag.Tensor(value, requires_grad=record, name=name) for name, value in self.params.items()}
        h = ag.Tensor(x)
        n_conv = n_dense = 0
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                p = f"conv{n_conv}"
                n_conv += 1
                h = ag.conv2d(h, leaves[p + ".weight"], leaves[p + ".bias"], layer.stride, layer.padding)
            elif isinstance(layer, Dense):
                p = f"dense{n_dense}"
                n_dense += 1
                h = ag.dense(h, leaves[p + ".weight"], leaves[p + ".bias"])
            elif isinstance(layer, ReLU):
                h = ag.relu(h)
            elif isinstance(layer, MaxPool2d):
                h = ag.max_pool2d(h, layer.window, layer.stride)
            elif isinstance(layer, Flatten):
                h = ag.flatten(h)
            if taps is not None and idx in taps:
                taps[idx] = h.data
        if record:
            return h, leaves
        return h.data

    def predict(self, images, batch_size: int = 512) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = [self.forward(images[i:i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def __repr__(self) -> str:
        return (f"Model(arch={self.arch!r}, num_classes={self.num_classes}, input_shape={self.input_shape}, "
                f"pruned={len(self.mask)})")


def build_model(arch: str, num_classes: int, input_shape, seed: int) -> Model:
    """Fresh model with He-normal weights drawn from ``seed`` and zero biases."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    layers = architecture_layers(arch, num_classes, tuple(input_shape))
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    n_conv = n_dense = 0
    for layer in layers:
        if isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel_size ** 2
            shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
            params[f"conv{n_conv}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            params[f"conv{n_conv}.bias"] = np.zeros(layer.out_channels)
            n_conv += 1
        elif isinstance(layer, Dense):
            shape = (layer.in_features, layer.out_features)
            params[f"dense{n_dense}.weight"] = rng.normal(0.0, np.sqrt(2.0 / layer.in_features), size=shape)
            params[f"dense{n_dense}.bias"] = np.zeros(layer.out_features)
            n_dense += 1
    return Model(arch, num_classes, input_shape, layers, params, PruneMask(), seed)


def forward(model: Model, batch) -> np.ndarray:
    return model.forward(batch)


def zero_filter(params: Dict[str, np.ndarray], fid: FilterId) -> None:
    params[f"conv{fid.layer}.weight"][fid.filter] = 0.0
    params[f"conv{fid.layer}.bias"][fid.filter] = 0.0


def prune_filter(model: Model, fid: FilterId) -> Model:
    """Copy of ``model`` with filter ``fid`` zeroed and added to the mask."""
    model.check_filter(fid)
    if fid in model.mask:
        raise StateError(f"filter {fid} is already pruned")
    pruned = model.copy()
    zero_filter(pruned.params, fid)
    pruned.mask = model.mask.add(fid)
    return pruned


def apply_mask(model: Model, mask: Optional[PruneMask] = None) -> Model:
    """Copy of ``model`` with every filter in ``mask`` (default: its own) zeroed."""
    mask = model.mask if mask is None else model.mask.union(mask)
    out = model.copy()
    for fid in mask:
        out.check_filter(fid)
        zero_filter(out.params, fid)
    out.mask = mask
    return out


def mask_gradients(model: Model, grads: Dict[str, np.ndarray]) -> None:
    """Zero, in place, the gradient entries that belong to pruned filters."""
    for fid in model.mask:
        grads[f"conv{fid.layer}.weight"][fid.filter] = 0.0
        grads[f"conv{fid.layer}.bias"][fid.filter] = 0.0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8s   magic b"GPRUNECK"
#   u32  format version
#   u32  len(arch) + utf-8 arch name
#   u8   has_seed, i64 seed
#   u32  num_classes
#   3*u32 input shape (C, H, W)
#   u32  parameter count P, then per parameter:
#        u32 len(name) + utf-8 name, u32 ndim, ndim*u32 dims
#   body: every parameter's float64 values (<f8), in declaration order
#   u32  mask size M, then M * (u32 layer, u32 filter), sorted
#   u32  CRC-32 of all preceding bytes

CHECKPOINT_MAGIC = b"GPRUNECK"
CHECKPOINT_VERSION = 1


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: Model) -> bytes:
    names = model.param_names()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    arch = model.arch.encode("utf-8")
    parts.append(struct.pack("<I", len(arch)) + arch)
    parts.append(struct.pack("<Bq", model.seed is not None, model.seed if model.seed is not None else 0))
    parts.append(struct.pack("<I3I", model.num_classes, *model.input_shape))
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name]
        enc = name.encode("utf-8")
        parts.append(struct.pack("<I", len(enc)) + enc + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    for name in names:
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    mask = sorted(model.mask)
    parts.append(struct.pack("<I", len(mask)))
    for fid in mask:
        parts.append(struct.pack("<II", fid.layer, fid.filter))
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: Model, path) -> None:
    try:
        _atomic_write(path, checkpoint_bytes(model))
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise PersistenceError("checkpoint is truncated")
        values = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return values

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.buf):
            raise PersistenceError("checkpoint is truncated")
        chunk = self.buf[self.pos:self.pos + size]
        self.pos += size
        return chunk


def model_from_bytes(buf: bytes) -> Model:
    if len(buf) < len(CHECKPOINT_MAGIC) + 4 or buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise VersionError("not a gradprune checkpoint (bad magic bytes)")
    r = _Reader(buf)
    r.raw(len(CHECKPOINT_MAGIC))
    (version,) = r.take("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}; expected {CHECKPOINT_VERSION}")
    if len(buf) < 4 or struct.unpack("<I", buf[-4:])[0] != zlib.crc32(buf[:-4]):
        raise PersistenceError("checkpoint checksum mismatch (corrupt or truncated file)")
    (n,) = r.take("<I")
    try:
        arch = r.raw(n).decode("utf-8")
        has_seed, seed = r.take("<Bq")
        num_classes, c, h, w = r.take("<I3I")
        (n_params,) = r.take("<I")
        shapes = []
        for _ in range(n_params):
            (ln,) = r.take("<I")
            name = r.raw(ln).decode("utf-8")
            (ndim,) = r.take("<I")
            shapes.append((name, r.take(f"<{ndim}I")))
        params = {}
        for name, shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(r.raw(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        (m,) = r.take("<I")
        mask = PruneMask(frozenset(FilterId(*r.take("<II")) for _ in range(m)))
        layers = architecture_layers(arch, num_classes, (c, h, w))
    except (UnicodeDecodeError, ConfigError, ValueError) as exc:
        raise PersistenceError(f"malformed checkpoint: {exc}") from exc
    model = Model(arch, num_classes, (c, h, w), layers, params, mask, seed if has_seed else None)
    if model.param_names() != list(params):
        raise PersistenceError("checkpoint parameters do not match the declared architecture")
    ref = build_model(arch, num_classes, (c, h, w), 0)
    for name in ref.param_names():
        if ref.params[name].shape != params[name].shape:
            raise PersistenceError(f"parameter {name} has shape {params[name].shape}, expected {ref.params[name].shape}")
    for fid in mask:
        try:
            model.check_filter(fid)
        except InputError as exc:
            raise PersistenceError(str(exc)) from exc
    return model


def load_checkpoint(path) -> Model:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    return model_from_bytes(buf)
