"""Desk-scale networks: a freezable feature encoder, a reconstruction
decoder mirroring it, a small U-Net-style segmentation model, and a compact
classifier.

All models are plain objects holding named parameter tensors; ``param_set``
returns the live tensors (so optimizer steps mutate the model) and
``load_param_set`` copies values in. Forward passes accept a single C,H,W
image or an N,C,H,W batch.
"""

from __future__ import annotations

from typing import Iterable, List, Optional, Tuple

import numpy as np

from .errors import DimensionError, InvalidInputError
from .optim import AdamW
from .params import ParamSet
from .tensor import Tensor, concat, conv2d, matmul, stack, upsample2x

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


class Conv2dLayer:
    def __init__(self, name: str, c_in: int, c_out: int, k: int, stride: int,
                 padding: int, rng: np.random.Generator, gain: float = 2.0):
        std = np.sqrt(gain / (c_in * k * k))
        self.name = name
        self.stride = stride
        self.padding = padding
        self.c_out = c_out
        self.w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.w, stride=self.stride, padding=self.padding)
        bias_shape = (1, self.c_out, 1, 1) if out.ndim == 4 else (self.c_out, 1, 1)
        return out + self.b.reshape(bias_shape)

    def named_tensors(self):
        yield f"{self.name}.w", self.w
        yield f"{self.name}.b", self.b


class LinearLayer:
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        std = np.sqrt(1.0 / d_in)
        self.name = name
        self.w = Tensor(rng.normal(0.0, std, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def named_tensors(self):
        yield f"{self.name}.w", self.w
        yield f"{self.name}.b", self.b


class InstanceNorm2d:
    """Per-sample, per-channel spatial normalization; no parameters, no
    tracked statistics, hence zero cross-sample coupling."""

    def __init__(self, name: str, channels: int):
        self.name = name

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        mu = x.mean(axis=(-2, -1), keepdims=True)
        var = ((x - mu) ** 2).mean(axis=(-2, -1), keepdims=True)
        return (x - mu) / ((var + NORM_EPS) ** 0.5)

    def named_tensors(self):
        return iter(())


class BatchNorm2d:
    """Batch normalization with affine parameters and tracked running stats.

    Running statistics are stored as non-gradient tensors so they travel
    with checkpoints; keeping them client-local is what distinguishes the
    FedBN-style strategy.
    """

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"batch norm expects N,C,H,W input, got {x.shape}")
        pshape = (1, self.channels, 1, 1)
        if train:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.running_mean.data[...] = ((1 - BN_MOMENTUM) * self.running_mean.data
                                           + BN_MOMENTUM * mu.data.reshape(-1))
            self.running_var.data[...] = ((1 - BN_MOMENTUM) * self.running_var.data
                                          + BN_MOMENTUM * unbiased)
        else:
            mu = self.running_mean.reshape(pshape)
            var = self.running_var.reshape(pshape)
        xn = (x - mu) / ((var + NORM_EPS) ** 0.5)
        return xn * self.gamma.reshape(pshape) + self.beta.reshape(pshape)

    def named_tensors(self):
        yield f"{self.name}.gamma", self.gamma
        yield f"{self.name}.beta", self.beta
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var


def _make_norm(kind: str, name: str, channels: int):
    if kind == "instance":
        return InstanceNorm2d(name, channels)
    if kind == "batch":
        return BatchNorm2d(name, channels)
    raise InvalidInputError(f"unknown norm kind {kind!r}")


class _Model:
    """Common parameter bookkeeping for all models."""

    layers: List = []

    def param_set(self) -> ParamSet:
        ps = ParamSet()
        for layer in self.layers:
            for name, t in layer.named_tensors():
                ps.add(name, t)
        return ps

    def load_param_set(self, ps: ParamSet, names: Optional[Iterable[str]] = None) -> None:
        self.param_set().assign_from(ps, names=names)

    def norm_param_names(self) -> set:
        out = set()
        for layer in self.layers:
            if isinstance(layer, (BatchNorm2d, InstanceNorm2d)):
                out.update(name for name, _ in layer.named_tensors())
        return out

    @staticmethod
    def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
        if x.ndim == 3:
            return x.reshape((1,) + x.shape), True
        if x.ndim == 4:
            return x, False
        raise DimensionError(f"expected C,H,W or N,C,H,W input, got shape {x.shape}")


class Encoder(_Model):
    """Two stride-2 convolutions with a ReLU between; output C x H/4 x W/4."""

    CHANNELS = 32

    def __init__(self, rng: np.random.Generator):
        self.conv1 = Conv2dLayer("enc1", 3, 16, 3, stride=2, padding=1, rng=rng)
        self.conv2 = Conv2dLayer("enc2", 16, self.CHANNELS, 3, stride=2, padding=1, rng=rng)
        self.layers = [self.conv1, self.conv2]
        self.frozen = False

    def freeze(self) -> None:
        for _, t in self.param_set().items():
            t.requires_grad = False
        self.frozen = True

    def forward(self, x: Tensor) -> Tensor:
        xb, squeeze = self._as_batch(x)
        h = self.conv1(xb).relu()
        out = self.conv2(h)
        return out.reshape(out.shape[1:]) if squeeze else out


class Decoder(_Model):
    """Mirror of the encoder: nearest-neighbour upsample + conv, 32 -> 16 -> 3."""

    def __init__(self, rng: np.random.Generator):
        self.conv1 = Conv2dLayer("dec1", Encoder.CHANNELS, 16, 3, stride=1, padding=1, rng=rng)
        self.conv2 = Conv2dLayer("dec2", 16, 3, 3, stride=1, padding=1, rng=rng, gain=1.0)
        self.layers = [self.conv1, self.conv2]

    def __call__(self, f: Tensor) -> Tensor:
        fb, squeeze = self._as_batch(f)
        h = self.conv1(upsample2x(fb)).relu()
        out = self.conv2(upsample2x(h))
        return out.reshape(out.shape[1:]) if squeeze else out


class SegModel(_Model):
    """Two-level U-Net-lite with skip connections and a sigmoid head."""

    def __init__(self, rng: np.random.Generator, norm_kind: str = "instance"):
        self.norm_kind = norm_kind
        self.conv_e1 = Conv2dLayer("seg_e1", 3, 16, 3, stride=2, padding=1, rng=rng)
        self.norm1 = _make_norm(norm_kind, "seg_norm1", 16)
        self.conv_e2 = Conv2dLayer("seg_e2", 16, 32, 3, stride=2, padding=1, rng=rng)
        self.norm2 = _make_norm(norm_kind, "seg_norm2", 32)
        self.conv_d1 = Conv2dLayer("seg_d1", 32 + 16, 16, 3, stride=1, padding=1, rng=rng)
        self.norm3 = _make_norm(norm_kind, "seg_norm3", 16)
        self.conv_d0 = Conv2dLayer("seg_d0", 16 + 3, 16, 3, stride=1, padding=1, rng=rng)
        self.norm4 = _make_norm(norm_kind, "seg_norm4", 16)
        self.head = Conv2dLayer("seg_head", 16, 1, 1, stride=1, padding=0, rng=rng, gain=1.0)
        self.layers = [self.conv_e1, self.norm1, self.conv_e2, self.norm2,
                       self.conv_d1, self.norm3, self.conv_d0, self.norm4, self.head]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        xb, squeeze = self._as_batch(x)
        _check_divisible(xb)
        e1 = self.norm1(self.conv_e1(xb), train).relu()
        e2 = self.norm2(self.conv_e2(e1), train).relu()
        d1 = self.norm3(self.conv_d1(concat([upsample2x(e2), e1], axis=1)), train).relu()
        d0 = self.norm4(self.conv_d0(concat([upsample2x(d1), xb], axis=1)), train).relu()
        out = self.head(d0).sigmoid()
        return out.reshape(out.shape[1:]) if squeeze else out

    def clone(self) -> "SegModel":
        other = SegModel(np.random.default_rng(0), norm_kind=self.norm_kind)
        other.load_param_set(self.param_set())
        return other


class ClfModel(_Model):
    """Three conv blocks, global average pool, linear head with 2 logits."""

    def __init__(self, rng: np.random.Generator):
        self.conv1 = Conv2dLayer("clf1", 3, 8, 3, stride=2, padding=1, rng=rng)
        self.conv2 = Conv2dLayer("clf2", 8, 16, 3, stride=2, padding=1, rng=rng)
        self.conv3 = Conv2dLayer("clf3", 16, 32, 3, stride=2, padding=1, rng=rng)
        self.fc = LinearLayer("clf_fc", 32, 2, rng=rng)
        self.layers = [self.conv1, self.conv2, self.conv3, self.fc]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        xb, squeeze = self._as_batch(x)
        _check_divisible(xb)
        h = self.conv1(xb).relu()
        h = self.conv2(h).relu()
        h = self.conv3(h).relu()
        pooled = h.mean(axis=(2, 3))
        logits = self.fc(pooled)
        return logits.reshape((2,)) if squeeze else logits

    def clone(self) -> "ClfModel":
        other = ClfModel(np.random.default_rng(0))
        other.load_param_set(self.param_set())
        return other


def _check_divisible(xb: Tensor) -> None:
    h, w = xb.shape[-2], xb.shape[-1]
    if h % 4 != 0 or w % 4 != 0:
        raise DimensionError(f"spatial size {h}x{w} must be divisible by 4")


# -- public operations -----------------------------------------------------


def encode(enc: Encoder, image: Tensor) -> Tensor:
    """Frozen-encoder feature extraction; spatial size must divide by 4."""
    if image.ndim not in (3, 4):
        raise DimensionError(f"expected C,H,W or N,C,H,W image, got {image.shape}")
    _check_divisible(image if image.ndim == 4 else image.reshape((1,) + image.shape))
    return enc.forward(image)


def reconstruction_loss(dec: Decoder, enc: Encoder, image: Tensor) -> Tensor:
    """Mean absolute reconstruction error of decode(encode(image))."""
    recon = dec(encode(enc, image))
    return (image - recon).abs().mean()


def seg_forward(model: SegModel, image: Tensor, train: bool = False) -> Tensor:
    return model.forward(image, train=train)


def clf_forward(model: ClfModel, image: Tensor, train: bool = False) -> Tensor:
    return model.forward(image, train=train)


def pretrain_encoder(data: List[Tensor], epochs: int, seed: int,
                     batch_size: int = 8, lr: float = 1e-3) -> Tuple[Encoder, Decoder]:
    """Train encoder+decoder jointly as an autoencoder, then freeze the encoder.

    Stands in for an externally pretrained backbone: the pool of images is
    style-neutral and shared, not client data.
    """
    if not data:
        raise InvalidInputError("pretraining data must be non-empty")
    shapes = {tuple(t.shape) for t in data}
    if len(shapes) != 1:
        raise InvalidInputError(f"pretraining images must share one shape, got {sorted(shapes)}")

    rng = np.random.default_rng(seed)
    enc = Encoder(rng)
    dec = Decoder(rng)
    if epochs <= 0:
        enc.freeze()
        return enc, dec

    joint = ParamSet(list(enc.param_set().items()) + list(dec.param_set().items()))
    opt = AdamW(joint, lr=lr, weight_decay=0.0)
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = stack([data[i] for i in order[start:start + batch_size]])
            opt.zero_grad()
            loss = reconstruction_loss(dec, enc, batch)
            from .tensor import backward

            backward(loss)
            opt.step()
    enc.freeze()
    return enc, dec


# -- losses ------------------------------------------------------------------


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).abs().mean()


def soft_dice_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """1 - soft Dice, averaged over the batch. ``pred`` holds probabilities."""
    pb, _ = _Model._as_batch(pred)
    tb, _ = _Model._as_batch(target)
    if pb.shape != tb.shape:
        raise DimensionError(f"pred/target shape mismatch: {pb.shape} vs {tb.shape}")
    axes = (1, 2, 3)
    inter = (pb * tb).sum(axis=axes)
    denom = pb.sum(axis=axes) + tb.sum(axis=axes)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return (1.0 - dice).mean()


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of N,2 logits against integer labels."""
    if logits.ndim != 2:
        raise DimensionError(f"expected N,K logits, got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=int)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    # subtract the (constant) row max for a stable log-sum-exp
    row_max = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - row_max
    lse = z.exp().sum(axis=1).log() + row_max.reshape((n,))
    picked = (logits * Tensor(onehot)).sum(axis=1)
    return (lse - picked).mean()


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
