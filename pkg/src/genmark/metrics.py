"""Perceptual distance and Frechet distance on a fixed, seeded feature extractor.

The extractor is a small frozen convolutional stack standing in for a
pretrained backbone. Tap layers feed the LPIPS-like distance; the globally
pooled last stage is the embedding used for Frechet statistics. Absolute values
are only comparable between reports carrying the same ``version`` tag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, InsufficientDataError, NumericalDegeneracyError

EXTRACTOR_VERSION = "toyfeat-v1"
# (in_channels, out_channels) per stage; stages after the first are preceded by 2x average pooling
DEFAULT_LAYERS = ((3, 16), (16, 32), (32, 64), (64, 64))
_NORM_EPS = 1e-10
_EIG_TOL = 1e-6


def to_nchw(images: np.ndarray | torch.Tensor) -> torch.Tensor:
    """(N, H, W, C) or (H, W, C) array -> float32 NCHW tensor."""
    if isinstance(images, torch.Tensor):
        t = images
    else:
        arr = np.ascontiguousarray(images, dtype=np.float32)
        t = torch.from_numpy(arr if arr.flags.writeable else arr.copy())
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


class FeatureExtractor(nn.Module):
    """Frozen seeded conv stack. Identical ``(version, seed)`` gives identical weights.

    Subclasses can wrap a pretrained backbone by overriding ``taps`` and ``embed``.
    """

    def __init__(self, resolution: int = 64, channels: int = 3, seed: int = 0,
                 layers: Sequence[tuple[int, int]] = DEFAULT_LAYERS,
                 version: str = EXTRACTOR_VERSION):
        super().__init__()
        if layers[0][0] != channels:
            layers = ((channels, layers[0][1]),) + tuple(layers[1:])
        self.resolution = resolution
        self.channels = channels
        self.seed = seed
        self.version = version
        self.layers = tuple(tuple(l) for l in layers)
        rng = np.random.default_rng([seed, 7919])
        self.convs = nn.ModuleList()
        for cin, cout in self.layers:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            std = np.sqrt(2.0 / (cin * 9))
            w = rng.normal(0.0, std, size=conv.weight.shape).astype(np.float32)
            b = rng.uniform(-0.1, 0.1, size=conv.bias.shape).astype(np.float32)
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(w))
                conv.bias.copy_(torch.from_numpy(b))
            self.convs.append(conv)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def descriptor(self) -> dict:
        return {"version": self.version, "seed": self.seed, "layers": [list(l) for l in self.layers],
                "resolution": self.resolution, "channels": self.channels}

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.channels or x.shape[2] != self.resolution \
                or x.shape[3] != self.resolution:
            raise DimensionError(
                f"extractor expects N x {self.channels} x {self.resolution} x {self.resolution},"
                f" got {tuple(x.shape)}"
            )

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = x * 2.0 - 1.0
        out = []
        for i, conv in enumerate(self.convs):
            if i:
                h = F.avg_pool2d(h, 2)
            h = F.relu(conv(h))
            out.append(h)
        return out

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.taps(x)[-1].mean(dim=(2, 3))

    def train(self, mode: bool = True):
        # frozen: always stays in inference mode
        return super().train(False)


def _unit_normalize(f: torch.Tensor) -> torch.Tensor:
    return f / (torch.sqrt((f * f).sum(dim=1, keepdim=True)) + _NORM_EPS)


def perceptual_distance_batch(x: torch.Tensor, y: torch.Tensor,
                              extractor: FeatureExtractor) -> torch.Tensor:
    """Per-sample LPIPS-like distance for NCHW batches (differentiable).

    For each tap layer, features are normalized to unit length along channels;
    the squared difference is summed over channels and averaged over space.
    Layer terms are summed.
    """
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    extractor.check_input(x)
    fx = extractor.taps(x)
    fy = extractor.taps(y)
    total = x.new_zeros(x.shape[0])
    for a, b in zip(fx, fy):
        d = (_unit_normalize(a) - _unit_normalize(b)) ** 2
        total = total + d.sum(dim=1).mean(dim=(1, 2))
    return total


def perceptual_distance(x: np.ndarray, y: np.ndarray, extractor: FeatureExtractor) -> float:
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    if np.array_equal(x, y):
        return 0.0
    with torch.no_grad():
        d = perceptual_distance_batch(to_nchw(x), to_nchw(y), extractor)
    # symmetrize ordering-dependent float rounding
    with torch.no_grad():
        d2 = perceptual_distance_batch(to_nchw(y), to_nchw(x), extractor)
    return float(max(0.0, 0.5 * (float(d[0]) + float(d2[0]))))


def perceptual_distances(xs: np.ndarray, ys: np.ndarray, extractor: FeatureExtractor,
                         batch_size: int = 64) -> np.ndarray:
    """Batched ``perceptual_distance`` over two (N, H, W, C) stacks."""
    xs = np.asarray(xs, dtype=np.float32)
    ys = np.asarray(ys, dtype=np.float32)
    if xs.shape != ys.shape:
        raise DimensionError(f"shape mismatch {xs.shape} vs {ys.shape}")
    out = []
    with torch.no_grad():
        for i in range(0, len(xs), batch_size):
            a, b = to_nchw(xs[i:i + batch_size]), to_nchw(ys[i:i + batch_size])
            out.append(perceptual_distance_batch(a, b, extractor).numpy())
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise DimensionError(f"covariance shape {self.covariance.shape} != ({d}, {d})")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def embed_images(images: np.ndarray, extractor: FeatureExtractor, batch_size: int = 128) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    feats = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = to_nchw(images[i:i + batch_size])
            extractor.check_input(x)
            feats.append(extractor.embed(x).double().numpy())
    return np.concatenate(feats)


def embed_features(images: Sequence[np.ndarray] | np.ndarray,
                   extractor: FeatureExtractor) -> FeatureStats:
    """Mean and unbiased covariance of the extractor embeddings."""
    if len(images) < 2:
        raise InsufficientDataError("need at least 2 images for feature statistics")
    feats = embed_images(np.stack(list(images)) if not isinstance(images, np.ndarray) else images,
                         extractor)
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (len(feats) - 1)
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(mean, cov, len(feats))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min() < -_EIG_TOL:
        raise NumericalDegeneracyError(f"matrix has eigenvalue {vals.min():.3g} < -{_EIG_TOL}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which shares its spectrum
    with ``S_a S_b``.
    """
    if a.dim != b.dim:
        raise DimensionError(f"feature dimension mismatch {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.covariance)
    prod = root_a @ b.covariance @ root_a
    vals = np.linalg.eigvalsh(0.5 * (prod + prod.T))
    if vals.min() < -_EIG_TOL:
        raise NumericalDegeneracyError(f"product has eigenvalue {vals.min():.3g} < -{_EIG_TOL}")
    tr_root = np.sqrt(np.clip(vals, 0.0, None)).sum()
    fid = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_root
    return float(max(fid, 0.0))
