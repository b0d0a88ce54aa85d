"""Tapped feedforward classifier p(x) = g(f(x)) with readable internal layers."""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"CEPA"
CHECKPOINT_VERSION = 1


class Conv2d:
    def __init__(self, cin, cout, k=3, padding=1):
        self.cin, self.cout, self.k, self.padding = cin, cout, k, padding
        self.weight = Tensor(np.zeros((cout, cin, k, k), np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def init(self, rng):
        fan_in = self.cin * self.k * self.k
        self.weight.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.weight.shape)
        self.bias.data[...] = 0.0

    def out_shape(self, shape):
        c, h, w = shape
        p = 2 * self.padding - self.k + 1
        return (self.cout, h + p, w + p)

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, padding=self.padding)

    def describe(self):
        return f"conv{self.cin}-{self.cout}k{self.k}p{self.padding}"


class Dense:
    def __init__(self, nin, nout):
        self.nin, self.nout = nin, nout
        self.weight = Tensor(np.zeros((nin, nout), np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(nout, np.float32), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def init(self, rng):
        self.weight.data[...] = rng.normal(0.0, np.sqrt(2.0 / self.nin), self.weight.shape)
        self.bias.data[...] = 0.0

    def out_shape(self, shape):
        return (self.nout,)

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias

    def describe(self):
        return f"dense{self.nin}-{self.nout}"


class _Stateless:
    name = ""

    def params(self):
        return []

    def init(self, rng):
        pass

    def describe(self):
        return self.name


class ReLU(_Stateless):
    name = "relu"

    def out_shape(self, shape):
        return shape

    def __call__(self, x):
        return ad.relu(x)


class MaxPool2(_Stateless):
    name = "pool2"

    def out_shape(self, shape):
        c, h, w = shape
        return (c, h // 2, w // 2)

    def __call__(self, x):
        return ad.maxpool2d(x, 2)


class Flatten(_Stateless):
    name = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def __call__(self, x):
        return ad.flatten(x)


@dataclass(frozen=True)
class LayerTap:
    layer_index: int
    feature_shape: tuple

    @property
    def name(self):
        return f"L{self.layer_index}"


class TappedClassifier:
    """Sequential classifier whose intermediate outputs can be read at tap layers.

    ``forward_to(l, x)`` returns the output of layer ``l`` (the embedded
    features); ``forward_head(l, f)`` runs the remaining layers and applies a
    softmax, so ``forward_head(l, forward_to(l, x)) == forward_full(x)``.
    Inputs are batched: (N, C, H, W).
    """

    def __init__(self, layers, num_classes, input_shape, tappable_layers):
        self.layers = list(layers)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(input_shape)
        self.shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.shapes.append(shape)
        if self.shapes[-1] != (self.num_classes,):
            raise ValueError(f"final layer outputs {self.shapes[-1]}, expected ({num_classes},)")
        for i in tappable_layers:
            if not 0 <= i < len(self.layers) - 1:
                raise ValueError(f"tap index {i} out of range")
        self.tappable_layers = list(tappable_layers)

    @property
    def taps(self):
        return [self.tap(i) for i in self.tappable_layers]

    def tap(self, layer_index):
        if layer_index not in self.tappable_layers:
            raise ValueError(f"layer {layer_index} is not tappable; choose from {self.tappable_layers}")
        return LayerTap(layer_index, self.shapes[layer_index])

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    @contextlib.contextmanager
    def frozen(self):
        """Treat weights as constants (no weight gradients) inside the block."""
        params = self.params()
        prev = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, prev):
                p.requires_grad = flag

    def init(self, rng):
        for layer in self.layers:
            layer.init(rng)

    def architecture(self):
        c, h, w = self.input_shape
        body = ",".join(layer.describe() for layer in self.layers)
        taps = ",".join(map(str, self.tappable_layers))
        return f"in{c}x{h}x{w};{body};taps={taps}"

    def _check_input(self, x):
        x = ad.as_tensor(x)
        if x.data.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[1:] != self.input_shape:
            raise ad.ShapeError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        return x

    def _layer_index(self, tap):
        idx = tap.layer_index if isinstance(tap, LayerTap) else int(tap)
        if idx not in self.tappable_layers:
            raise ValueError(f"layer {idx} is not tappable; choose from {self.tappable_layers}")
        return idx

    def _run(self, x, start, stop):
        for layer in self.layers[start:stop]:
            x = layer(x)
        return x

    def forward_to(self, tap, x):
        idx = self._layer_index(tap)
        return self._run(self._check_input(x), 0, idx + 1)

    def head_logits(self, tap, features):
        idx = self._layer_index(tap)
        features = ad.as_tensor(features)
        if features.shape[1:] != self.shapes[idx]:
            raise ad.ShapeError(
                f"features shape {features.shape[1:]} does not match layer {idx} shape {self.shapes[idx]}")
        return self._run(features, idx + 1, len(self.layers))

    def forward_head(self, tap, features):
        return ad.softmax(self.head_logits(tap, features))

    def features_and_logits(self, tap, x):
        """One pass returning (f(x), logits) for the given tap."""
        idx = self._layer_index(tap)
        feats = self._run(self._check_input(x), 0, idx + 1)
        return feats, self._run(feats, idx + 1, len(self.layers))

    def logits(self, x):
        return self._run(self._check_input(x), 0, len(self.layers))

    def forward_full(self, x):
        return ad.softmax(self.logits(x))

    def predict(self, x, batch_size=256):
        """Winner-take-all class decisions; ties go to the lowest class index."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        if x.ndim == 3:
            x = x[None]
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.logits(x[i:i + batch_size]).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, np.int64)


def desk_cnn(num_classes=5, input_shape=(3, 16, 16), seed=None):
    """Conv16-ReLU-Pool-Conv32-ReLU-Pool-Flatten-Dense64-ReLU-Dense.

    Taps: both conv ReLUs, the flattened pooled map and the dense ReLU.
    """
    c, h, w = input_shape
    flat = 32 * (h // 4) * (w // 4)
    layers = [
        Conv2d(c, 16), ReLU(), MaxPool2(),
        Conv2d(16, 32), ReLU(), MaxPool2(),
        Flatten(),
        Dense(flat, 64), ReLU(),
        Dense(64, num_classes),
    ]
    model = TappedClassifier(layers, num_classes, input_shape, tappable_layers=[1, 4, 6, 8])
    if seed is not None:
        model.init(ad.seeded_rng(seed))
    return model


def save_checkpoint(model, path):
    """Little-endian: magic, u32 version, u32 len + arch bytes, then per param
    u32 rank, u32 dims, f32 data."""
    arch = model.architecture().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arch)))
        fh.write(arch)
        for p in model.params():
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(p.data.astype("<f4").tobytes())


def read_checkpoint(path):
    """Return (architecture string, list of float32 arrays)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a CEPA checkpoint")
    version, alen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    arch = buf[pos:pos + alen].decode("utf-8")
    pos += alen
    params = []
    while pos < len(buf):
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
        params.append(arr.astype(np.float32))
        pos += 4 * count
    return arch, params


def load_checkpoint(path, model):
    arch, params = read_checkpoint(path)
    if arch != model.architecture():
        raise ValueError(f"checkpoint architecture {arch!r} does not match model {model.architecture()!r}")
    targets = model.params()
    if len(params) != len(targets) or any(p.shape != t.shape for p, t in zip(params, targets)):
        raise ValueError("checkpoint parameter shapes do not match the model")
    for p, t in zip(params, targets):
        t.data[...] = p
    return model
