"""Whitening-coloring harmonization, differentiable with respect to the template.

The pipeline maps an image's encoded features to a target style in two
linear steps: whitening multiplies the centered features by the inverse
square root of their own channel covariance (covariance -> identity), and
coloring multiplies by the square root of the template's channel
covariance and re-adds the template's channel mean. Decoding the colored
features yields the harmonized image.

Matrix square roots are computed by a fixed number of coupled
Newton-Schulz iterations on the trace-normalized matrix. The iteration is
a composition of matrix multiplies, so the gradient of anything downstream
with respect to the template flows through it exactly; there is no
eigendecomposition anywhere in the runtime path (an eigendecomposition is
used only as a test oracle).

Covariances are regularized as cov + eps*I before the root so that
rank-deficient feature maps (constant regions, correlated channels) stay
well-posed. The mean re-addition in the coloring step keeps brightness
information; without it harmonized images collapse toward zero mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, InvalidInputError
from .tensor import Tensor, matmul, stack

DEFAULT_EPSILON = 1e-5
NEWTON_SCHULZ_ITERATIONS = 20


@dataclass
class Template:
    """Learnable feature map whose channel statistics define the target style."""

    features: Tensor

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    def copy(self, requires_grad: Optional[bool] = None) -> "Template":
        rg = self.features.requires_grad if requires_grad is None else requires_grad
        return Template(Tensor(self.features.data.copy(), requires_grad=rg))


@dataclass
class CovarianceFactors:
    """Channel mean plus covariance and its (regularized) matrix roots."""

    mean: Tensor       # C x 1
    cov: Tensor        # C x C
    sqrt: Tensor       # (cov + eps I)^{1/2}
    inv_sqrt: Tensor   # (cov + eps I)^{-1/2}


def newton_schulz_roots(a: Tensor, iterations: int = NEWTON_SCHULZ_ITERATIONS) -> Tuple[Tensor, Tensor]:
    """Square root and inverse square root of an SPD matrix.

    Runs the coupled iteration
        Y_{k+1} = Y_k (3I - Z_k Y_k) / 2,   Z_{k+1} = (3I - Z_k Y_k) Z_k / 2
    on A / tr(A), for which the spectrum lies in (0, 1] and the iteration
    converges. Fixed iteration count keeps the call graph static.
    """
    c = a.shape[0]
    if a.ndim != 2 or a.shape[1] != c:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    eye = Tensor(np.eye(c))
    three_eye = Tensor(3.0 * np.eye(c))
    trace = (a * eye).sum()
    y = a / trace
    z = eye
    for _ in range(iterations):
        t = (three_eye - matmul(z, y)) * 0.5
        y = matmul(y, t)
        z = matmul(t, z)
    scale = trace ** 0.5
    return y * scale, z / scale


def channel_covariance(f: Tensor, epsilon: float = DEFAULT_EPSILON,
                       iterations: int = NEWTON_SCHULZ_ITERATIONS) -> CovarianceFactors:
    """Channel mean and regularized covariance factors of a C x Ht x Wt map."""
    if epsilon <= 0:
        raise InvalidInputError(f"epsilon must be positive, got {epsilon}")
    if not np.isfinite(f.data).all():
        raise InvalidInputError("feature map contains non-finite values")
    flat = _flatten_channels(f)
    c, n = flat.shape
    if n < 2:
        raise InvalidInputError(f"need at least 2 spatial samples per channel, got {n}")
    mean = flat.mean(axis=1, keepdims=True)
    centered = flat - mean
    cov = matmul(centered, centered.T) / float(n - 1)
    reg = cov + Tensor(epsilon * np.eye(c))
    sqrt, inv_sqrt = newton_schulz_roots(reg, iterations)
    return CovarianceFactors(mean=mean, cov=cov, sqrt=sqrt, inv_sqrt=inv_sqrt)


def whiten(f0: Tensor, epsilon: float = DEFAULT_EPSILON,
           iterations: int = NEWTON_SCHULZ_ITERATIONS) -> Tuple[Tensor, CovarianceFactors]:
    """Remove channel correlations: output covariance is ~identity."""
    factors = channel_covariance(f0, epsilon, iterations)
    flat = _flatten_channels(f0)
    white = matmul(factors.inv_sqrt, flat - factors.mean)
    return white.reshape(f0.shape), factors


def color(fw: Tensor, template: Template, epsilon: float = DEFAULT_EPSILON,
          iterations: int = NEWTON_SCHULZ_ITERATIONS) -> Tensor:
    """Impose the template's channel covariance and mean on whitened features."""
    factors = channel_covariance(template.features, epsilon, iterations)
    return color_with_factors(fw, factors)


def color_with_factors(fw: Tensor, factors: CovarianceFactors) -> Tensor:
    """Coloring step reusing precomputed template factors (one per batch)."""
    c = factors.sqrt.shape[0]
    if fw.shape[0] != c:
        raise DimensionError(
            f"channel mismatch: features have {fw.shape[0]} channels, template has {c}")
    flat = _flatten_channels(fw)
    colored = matmul(factors.sqrt, flat) + factors.mean
    return colored.reshape(fw.shape)


def harmonize(enc, dec, i0: Tensor, template: Template,
              epsilon: float = DEFAULT_EPSILON, train: bool = False,
              iterations: int = NEWTON_SCHULZ_ITERATIONS) -> Tensor:
    """Full harmonization of one image: decode(color(whiten(encode(i0)))).

    In evaluation mode the output is clamped to [0, 1]; during training it
    is left unclamped so gradients keep flowing.
    """
    from .models import encode  # local import; models depends on this module's types

    f0 = encode(enc, i0)
    white, _ = whiten(f0, epsilon, iterations)
    colored = color(white, template, epsilon, iterations)
    out = dec(colored)
    if not train:
        out = Tensor(np.clip(out.data, 0.0, 1.0))
    return out


def harmonize_batch(enc, dec, images, template: Template,
                    epsilon: float = DEFAULT_EPSILON, train: bool = False,
                    iterations: int = NEWTON_SCHULZ_ITERATIONS,
                    mode: str = "wct") -> Tensor:
    """Harmonize a list of images sharing one template; returns an N,3,H,W tensor.

    Template covariance factors are computed once per call. ``mode`` picks
    full whitening-coloring ("wct") or per-channel moment matching
    ("adain").
    """
    if mode == "wct":
        factors = channel_covariance(template.features, epsilon, iterations)
        harmonized = []
        for img in images:
            f0 = encode_features(enc, img)
            white, _ = whiten(f0, epsilon, iterations)
            harmonized.append(color_with_factors(white, factors))
    elif mode == "adain":
        harmonized = []
        for img in images:
            f0 = encode_features(enc, img)
            harmonized.append(adain_match(f0, template, epsilon))
    else:
        raise InvalidInputError(f"unknown harmonization mode {mode!r}")
    out = dec(stack(harmonized))
    if not train:
        out = Tensor(np.clip(out.data, 0.0, 1.0))
    return out


def adain_match(f0: Tensor, template: Template, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Diagonal alternative to WCT: match per-channel mean and std only."""
    if f0.shape[0] != template.channels:
        raise DimensionError(
            f"channel mismatch: features have {f0.shape[0]} channels, "
            f"template has {template.channels}")
    flat = _flatten_channels(f0)
    tflat = _flatten_channels(template.features)
    mu0 = flat.mean(axis=1, keepdims=True)
    mut = tflat.mean(axis=1, keepdims=True)
    var0 = ((flat - mu0) ** 2).mean(axis=1, keepdims=True)
    vart = ((tflat - mut) ** 2).mean(axis=1, keepdims=True)
    sd0 = (var0 + epsilon) ** 0.5
    sdt = (vart + epsilon) ** 0.5
    return (((flat - mu0) / sd0) * sdt + mut).reshape(f0.shape)


def encode_features(enc, img: Tensor) -> Tensor:
    from .models import encode

    return encode(enc, img)


def template_from_image(enc, img: Tensor, requires_grad: bool = False) -> Template:
    """Extract a style template as the encoded features of a reference image."""
    feats = encode_features(enc, img)
    return Template(Tensor(feats.data.copy(), requires_grad=requires_grad))


def _flatten_channels(f: Tensor) -> Tensor:
    if f.ndim == 3:
        c, h, w = f.shape
        return f.reshape((c, h * w))
    if f.ndim == 2:
        return f
    raise DimensionError(f"expected CxHtxWt or CxN features, got shape {f.shape}")
