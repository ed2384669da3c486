"""Minimal float64 network core with exact backprop.

Layers are functional: ``forward`` returns (output, cache) and ``backward``
takes (grad, cache), so inference never mutates a layer and nets can be read
concurrently. Supported layers: 2-D convolution, dense, relu, sigmoid,
softmax, 2x2 max pooling, dropout, 2x2 nearest upsampling.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import ColorSpectrogram


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 0.05
    loss: str = "cross_entropy"  # or "mse"
    early_stop_patience: int = 10

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.early_stop_patience) < 1:
            raise ValueError("epochs, batch_size, and patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss not in ("cross_entropy", "mse"):
            raise ValueError("loss must be cross_entropy or mse")


class Conv2d:
    """k x k convolution; padding 'same' keeps spatial dims (stride 1 only)."""

    tag = b"CONV"

    def __init__(self, in_ch, out_ch, ksize=5, stride=1, padding="same", rng=None):
        if padding not in ("same", "valid"):
            raise ValueError("padding must be 'same' or 'valid'")
        if padding == "same" and stride != 1:
            raise ValueError("'same' padding requires stride 1")
        self.in_ch, self.out_ch, self.ksize, self.stride = in_ch, out_ch, ksize, stride
        self.padding = padding
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (in_ch * ksize * ksize))
        self.w = rng.normal(0.0, std, (out_ch, in_ch, ksize, ksize))
        self.b = np.zeros(out_ch)

    @property
    def params(self):
        return {"w": self.w, "b": self.b}

    def _pad(self):
        return (self.ksize - 1) // 2 if self.padding == "same" else 0

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"conv expects (B,{self.in_ch},H,W), got {x.shape}")
        k, s, p = self.ksize, self.stride, self._pad()
        if self.padding == "same" and k % 2 == 0:
            pads = ((0, 0), (0, 0), (p, k - 1 - p), (p, k - 1 - p))
        else:
            pads = ((0, 0), (0, 0), (p, p), (p, p))
        xp = np.pad(x, pads) if p or self.padding == "same" else x
        b_, c, hp, wp = xp.shape
        ho = (hp - k) // s + 1
        wo = (wp - k) // s + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b_, ho * wo, c * k * k)
        wmat = self.w.reshape(self.out_ch, -1)
        out = (cols @ wmat.T + self.b).transpose(0, 2, 1).reshape(b_, self.out_ch, ho, wo)
        return out, (cols, xp.shape, x.shape, (ho, wo))

    def backward(self, grad, cache):
        cols, xp_shape, x_shape, (ho, wo) = cache
        k, s = self.ksize, self.stride
        b_ = grad.shape[0]
        g2 = grad.reshape(b_, self.out_ch, ho * wo).transpose(0, 2, 1)
        dw = np.einsum("bno,bnc->oc", g2, cols).reshape(self.w.shape)
        db = g2.sum(axis=(0, 1))
        wmat = self.w.reshape(self.out_ch, -1)
        dcols = (g2 @ wmat).reshape(b_, ho, wo, self.in_ch, k, k)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + ho * s : s, j : j + wo * s : s] += dcols[:, :, :, :, i, j].transpose(
                    0, 3, 1, 2
                )
        ph = (xp_shape[2] - x_shape[2]) // 2 if xp_shape[2] != x_shape[2] else 0
        pw = (xp_shape[3] - x_shape[3]) // 2 if xp_shape[3] != x_shape[3] else 0
        dx = dxp[:, :, ph : ph + x_shape[2], pw : pw + x_shape[3]]
        return dx, {"w": dw, "b": db}

    def config(self):
        return [self.in_ch, self.out_ch, self.ksize, self.stride, 1 if self.padding == "same" else 0]


class Dense:
    tag = b"DENS"

    def __init__(self, n_in, n_out, rng=None):
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.w = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
        self.b = np.zeros(n_out)

    @property
    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, train=False, rng=None):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.n_in:
            raise ValueError(f"dense expects {self.n_in} features, got {flat.shape[1]}")
        return flat @ self.w + self.b, (flat, x.shape)

    def backward(self, grad, cache):
        flat, x_shape = cache
        dw = flat.T @ grad
        db = grad.sum(axis=0)
        dx = (grad @ self.w.T).reshape(x_shape)
        return dx, {"w": dw, "b": db}

    def config(self):
        return [self.n_in, self.n_out]


class Relu:
    tag = b"RELU"
    params: dict = {}

    def forward(self, x, train=False, rng=None):
        return np.maximum(x, 0.0), x > 0

    def backward(self, grad, cache):
        return grad * cache, None

    def config(self):
        return []


class Sigmoid:
    tag = b"SIGM"
    params: dict = {}

    def forward(self, x, train=False, rng=None):
        out = 1.0 / (1.0 + np.exp(-x))
        return out, out

    def backward(self, grad, cache):
        return grad * cache * (1.0 - cache), None

    def config(self):
        return []


class Softmax:
    tag = b"SMAX"
    params: dict = {}

    def forward(self, x, train=False, rng=None):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        return out, out

    def backward(self, grad, cache):
        s = cache
        return s * (grad - np.sum(grad * s, axis=-1, keepdims=True)), None

    def config(self):
        return []


class MaxPool2x2:
    tag = b"MPOL"
    params: dict = {}

    def forward(self, x, train=False, rng=None):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool needs even spatial dims, got {h}x{w}")
        ho, wo = h // 2, w // 2
        win = x.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, grad, cache):
        idx, (b, c, h, w) = cache
        ho, wo = h // 2, w // 2
        g = np.zeros((b, c, ho, wo, 4))
        np.put_along_axis(g, idx[..., None], grad[..., None], axis=-1)
        dx = g.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return dx, None

    def config(self):
        return []


class Dropout:
    """Masking dropout: train multiplies by the mask, eval scales by (1-rate)."""

    tag = b"DROP"
    params: dict = {}

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if train:
            rng = rng or np.random.default_rng(0)
            mask = rng.random(x.shape) >= self.rate
            return x * mask, ("train", mask)
        return x * (1.0 - self.rate), ("eval", None)

    def backward(self, grad, cache):
        mode, mask = cache
        if mode == "train":
            return grad * mask, None
        return grad * (1.0 - self.rate), None

    def config(self):
        return [self.rate]


class Upsample2x2:
    tag = b"UPSM"
    params: dict = {}

    def forward(self, x, train=False, rng=None):
        return x.repeat(2, axis=2).repeat(2, axis=3), x.shape

    def backward(self, grad, cache):
        b, c, h, w = cache
        return grad.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)), None

    def config(self):
        return []


_LAYER_TYPES = {cls.tag: cls for cls in (Conv2d, Dense, Relu, Sigmoid, Softmax, MaxPool2x2, Dropout, Upsample2x2)}


class NeuralNet:
    def __init__(self, layers, rng_seed: int = 0, input_shape: tuple | None = None):
        self.layers = list(layers)
        self.rng_seed = int(rng_seed)
        self.input_shape = input_shape
        self.train_losses: list[float] = []

    def copy_params(self):
        return [copy.deepcopy(layer.params) for layer in self.layers]

    def set_params(self, snapshot):
        for layer, saved in zip(self.layers, snapshot):
            for name, value in saved.items():
                layer.params[name][...] = value


def forward(net: NeuralNet, x: np.ndarray, train_mode: bool = False, rng=None):
    """Run the net; in train mode dropout masks come from `rng` (seeded from
    the net when omitted, so the call stays deterministic)."""
    out, _ = forward_with_caches(net, x, train_mode, rng)
    return out


def forward_with_caches(net: NeuralNet, x: np.ndarray, train_mode: bool = False, rng=None):
    if net.input_shape is not None and tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ValueError(f"input shape {x.shape[1:]} does not match net {net.input_shape}")
    if train_mode and rng is None:
        rng = np.random.default_rng(net.rng_seed)
    out = np.asarray(x, dtype=np.float64)
    caches = []
    for layer in net.layers:
        out, cache = layer.forward(out, train=train_mode, rng=rng)
        caches.append(cache)
    return out, caches


def backward_through(net: NeuralNet, caches, grad_out: np.ndarray, upto: int | None = None):
    """Backprop an output gradient to the input; returns (grad_in, per-layer grads)."""
    grads = [None] * len(net.layers)
    stop = len(net.layers) if upto is None else upto
    g = grad_out
    for i in range(stop - 1, -1, -1):
        g, layer_grads = net.layers[i].backward(g, caches[i])
        grads[i] = layer_grads
    return g, grads


def _loss_and_grad(out: np.ndarray, target, loss: str):
    if loss == "mse":
        target = np.asarray(target, dtype=np.float64)
        diff = out - target
        return float(np.mean(diff**2)), 2.0 * diff / out.size
    labels = np.asarray(target, dtype=int).ravel()
    b = out.shape[0]
    p = np.maximum(out[np.arange(b), labels], 1e-300)
    grad = np.zeros_like(out)
    grad[np.arange(b), labels] = -1.0 / (p * b)
    return float(-np.mean(np.log(p))), grad


def _is_single(net: NeuralNet, x: np.ndarray) -> bool:
    if net.input_shape is not None:
        return x.ndim == len(net.input_shape)
    head = net.layers[0] if net.layers else None
    return x.ndim == (3 if isinstance(head, Conv2d) else 1)


def gradient_input(net: NeuralNet, x: np.ndarray, target, loss: str = "cross_entropy",
                   train_mode: bool = False, rng=None) -> np.ndarray:
    """Exact d(loss)/d(input) via backprop."""
    x = np.asarray(x, dtype=np.float64)
    single = _is_single(net, x)
    batch = x[None] if single else x
    if single:
        target = [target] if loss == "cross_entropy" else np.asarray(target)[None]
    out, caches = forward_with_caches(net, batch, train_mode, rng)
    _, grad_out = _loss_and_grad(out, target, loss)
    gin, _ = backward_through(net, caches, grad_out)
    return gin[0] if single else gin


def evaluate_loss(net: NeuralNet, x, target, loss: str = "cross_entropy") -> float:
    out = forward(net, x, train_mode=False)
    value, _ = _loss_and_grad(out, target, loss)
    return value


def train(net: NeuralNet, data, cfg: TrainConfig, val_data=None) -> NeuralNet:
    """Mini-batch SGD; returns the net holding the best-validation parameters.

    `data` and `val_data` are (inputs, targets) pairs; without val_data the
    training loss drives early stopping. The loss per epoch lands in
    ``net.train_losses``. Deterministic given the net's rng_seed.
    """
    x, y = data
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(np.random.PCG64(net.rng_seed + 1))
    best_loss = np.inf
    best_params = net.copy_params()
    stale = 0
    net.train_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        epoch_loss = 0.0
        for start in range(0, x.shape[0], cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x[idx]
            yb = y[idx] if cfg.loss == "cross_entropy" else np.asarray(y)[idx]
            out, caches = forward_with_caches(net, xb, train_mode=True, rng=rng)
            value, grad_out = _loss_and_grad(out, yb, cfg.loss)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch)
            epoch_loss += value * len(idx)
            _, grads = backward_through(net, caches, grad_out)
            for layer, layer_grads in zip(net.layers, grads):
                if layer_grads:
                    for name, g in layer_grads.items():
                        layer.params[name] -= cfg.learning_rate * g
        net.train_losses.append(epoch_loss / x.shape[0])
        if val_data is not None:
            monitor = evaluate_loss(net, val_data[0], val_data[1], cfg.loss)
        else:
            monitor = net.train_losses[-1]
        if monitor < best_loss - 1e-12:
            best_loss = monitor
            best_params = net.copy_params()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    net.set_params(best_params)
    return net


# -- denoising autoencoder ----------------------------------------------------


def corrupt_masking(images: np.ndarray, rate: float, rng) -> np.ndarray:
    """Masking corruption: each entry independently zeroed with probability `rate`."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("corruption rate must lie in [0, 1)")
    if rate == 0.0:
        return images.copy()
    return images * (rng.random(images.shape) >= rate)


def build_cda(
    input_shape=(3, 64, 96),
    filters=(8, 16, 16),
    dropout_rate: float = 0.5,
    ksize: int = 5,
    seed: int = 0,
) -> NeuralNet:
    """Symmetric convolutional denoiser: 3 conv encoder with 2 maxpools,
    mirrored upsampling decoder with a sigmoid output."""
    ch, h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError("input dims must be divisible by 4 (two 2x2 pools)")
    f1, f2, f3 = filters
    rng = np.random.default_rng(seed)
    layers = [
        Conv2d(ch, f1, ksize, rng=rng), Relu(), MaxPool2x2(),
        Conv2d(f1, f2, ksize, rng=rng), Relu(), MaxPool2x2(),
        Conv2d(f2, f3, ksize, rng=rng), Relu(), Dropout(dropout_rate),
        Upsample2x2(), Conv2d(f3, f2, ksize, rng=rng), Relu(),
        Upsample2x2(), Conv2d(f2, f1, ksize, rng=rng), Relu(),
        Conv2d(f1, ch, ksize, rng=rng), Sigmoid(),
    ]
    return NeuralNet(layers, rng_seed=seed, input_shape=input_shape)


def build_surrogate_cnn(
    input_shape=(3, 64, 96),
    n_classes: int = 3,
    filters=(8, 16),
    hidden: int = 64,
    ksize: int = 5,
    seed: int = 0,
) -> NeuralNet:
    """Small conv classifier standing in for a large pretrained CNN target."""
    ch, h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError("input dims must be divisible by 4 (two 2x2 pools)")
    f1, f2 = filters
    rng = np.random.default_rng(seed)
    flat = f2 * (h // 4) * (w // 4)
    layers = [
        Conv2d(ch, f1, ksize, rng=rng), Relu(), MaxPool2x2(),
        Conv2d(f1, f2, ksize, rng=rng), Relu(), MaxPool2x2(),
        Dense(flat, hidden, rng=rng), Relu(),
        Dense(hidden, n_classes, rng=rng), Softmax(),
    ]
    return NeuralNet(layers, rng_seed=seed, input_shape=input_shape)


def train_denoiser(
    net: NeuralNet,
    clean: np.ndarray,
    cfg: TrainConfig,
    mask_rate: float = 0.2,
    extra_corrupted: np.ndarray | None = None,
) -> NeuralNet:
    """Fit the CDA: corrupted views in, clean images out (MSE).

    Besides masking noise, callers may pass additional corrupted views (the
    low-rank reconstructions) paired with the same clean targets.
    """
    rng = np.random.default_rng(net.rng_seed + 7)
    inputs = [corrupt_masking(clean, mask_rate, rng)]
    targets = [clean]
    if extra_corrupted is not None:
        inputs.append(extra_corrupted)
        targets.append(clean)
    x = np.concatenate(inputs, axis=0)
    y = np.concatenate(targets, axis=0)
    cfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate, "mse", cfg.early_stop_patience)
    return train(net, (x, y), cfg)


def cda_smooth(net: NeuralNet, img: ColorSpectrogram) -> ColorSpectrogram:
    """Denoise one color spectrogram through the trained CDA, clipped to [0,1]."""
    if net.input_shape is None:
        raise RuntimeError("denoiser net has no declared input shape")
    if tuple(img.channels.shape) != tuple(net.input_shape):
        raise RuntimeError(
            f"image shape {img.channels.shape} does not match denoiser input {net.input_shape}"
        )
    out = forward(net, img.channels[None], train_mode=False)[0]
    return ColorSpectrogram(np.clip(out, 0.0, 1.0), img.palette, scale_c=img.scale_c)


# -- NNC1 checkpoint ----------------------------------------------------------
# magic "NNC1", u32 layer count, u64 rng_seed, u32 input rank + dims; then per
# layer: 4-byte tag, u32 config count + f64 config values, u32 param count and
# per param u32 rank + u32 dims + row-major f64 payload. Little-endian.

_PARAM_ORDER = ("w", "b")


def save_net(net: NeuralNet, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"NNC1")
        fh.write(struct.pack("<IQ", len(net.layers), net.rng_seed))
        shape = net.input_shape or ()
        fh.write(struct.pack("<I", len(shape)))
        for d in shape:
            fh.write(struct.pack("<I", d))
        for layer in net.layers:
            fh.write(layer.tag)
            conf = layer.config()
            fh.write(struct.pack("<I", len(conf)))
            for v in conf:
                fh.write(struct.pack("<d", float(v)))
            names = [n for n in _PARAM_ORDER if n in layer.params]
            fh.write(struct.pack("<I", len(names)))
            for name in names:
                arr = layer.params[name]
                fh.write(struct.pack("<I", arr.ndim))
                for d in arr.shape:
                    fh.write(struct.pack("<I", d))
                fh.write(arr.astype("<f8").tobytes())


def load_net(path: str | Path) -> NeuralNet:
    with open(path, "rb") as fh:
        if fh.read(4) != b"NNC1":
            raise ValueError(f"{path}: not an NNC1 checkpoint")
        n_layers, seed = struct.unpack("<IQ", fh.read(12))
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank)) or None
        layers = []
        for _ in range(n_layers):
            tag = fh.read(4)
            (n_conf,) = struct.unpack("<I", fh.read(4))
            conf = [struct.unpack("<d", fh.read(8))[0] for _ in range(n_conf)]
            layer = _build_layer(tag, conf)
            (n_params,) = struct.unpack("<I", fh.read(4))
            for name in [n for n in _PARAM_ORDER if n in layer.params][:n_params]:
                (nd,) = struct.unpack("<I", fh.read(4))
                dims = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(nd))
                count = int(np.prod(dims))
                layer.params[name][...] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
            layers.append(layer)
    return NeuralNet(layers, rng_seed=seed, input_shape=shape)


def _build_layer(tag: bytes, conf):
    cls = _LAYER_TYPES.get(tag)
    if cls is None:
        raise ValueError(f"unknown layer tag {tag!r}")
    if cls is Conv2d:
        in_ch, out_ch, k, s, same = (int(v) for v in conf)
        return Conv2d(in_ch, out_ch, k, s, "same" if same else "valid")
    if cls is Dense:
        return Dense(int(conf[0]), int(conf[1]))
    if cls is Dropout:
        return Dropout(float(conf[0]))
    return cls()
