"""Watermark generator, detector, the additive watermark operator and both losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError
from .metrics import FeatureExtractor, perceptual_distance, to_nchw

GENERATOR_VERSION = "wmgen-v1"
DETECTOR_VERSION = "wmdet-v1"
BCE_EPS = 1e-7


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.values)


def sample_latent(seed: int, k: int = 128) -> LatentCode:
    """``k`` standard-normal draws, deterministic in ``seed``."""
    if k < 1:
        raise ConfigurationError("latent size must be >= 1")
    values = np.random.default_rng([int(seed), 104729]).standard_normal(k).astype(np.float32)
    values.setflags(write=False)
    return LatentCode(values, int(seed))


@dataclass(frozen=True)
class WatermarkPattern:
    values: np.ndarray
    generator_version: str
    latent_seed: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.values.astype(np.float64) ** 2)))


@dataclass(frozen=True)
class GeneratorConfig:
    k: int = 128
    resolution: int = 64
    channels: int = 3
    base_width: int = 128
    out_scale: float = 0.5


@dataclass(frozen=True)
class DetectorConfig:
    resolution: int = 64
    channels: int = 3
    widths: tuple[int, ...] = (16, 32, 32, 64)


class GeneratorModel(nn.Module):
    """Vanilla-GAN style transposed-conv generator producing signed patterns.

    ``z -> linear -> 4x4 map -> [convT 4x4 stride 2]* -> tanh * out_scale``.
    """

    version = GENERATOR_VERSION

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        n_up = int(round(math.log2(config.resolution / 4)))
        if 4 * 2 ** n_up != config.resolution:
            raise ConfigurationError(f"generator resolution must be 4 * 2^n, got {config.resolution}")
        self.config = config
        w = config.base_width
        self.fc = nn.Linear(config.k, w * 16)
        ups = []
        cin = w
        for i in range(n_up):
            last = i == n_up - 1
            cout = config.channels if last else max(16, cin // 2)
            ups.append(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1))
            if not last:
                ups.append(nn.ReLU())
            cin = cout
        self.ups = nn.Sequential(*ups)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.fc(z)).view(z.shape[0], self.config.base_width, 4, 4)
        return torch.tanh(self.ups(h)) * self.config.out_scale


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                      nn.GroupNorm(min(8, cout), cout))

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + (x if self.skip is None else self.skip(x)))


class DetectorModel(nn.Module):
    """Small residual binary classifier; ``forward`` returns P(watermarked)."""

    version = DETECTOR_VERSION

    def __init__(self, config: DetectorConfig = DetectorConfig(), fine_tuned_for: str | None = None):
        super().__init__()
        self.config = config
        self.fine_tuned_for = fine_tuned_for
        w0 = config.widths[0]
        self.stem = nn.Sequential(nn.Conv2d(config.channels, w0, 3, padding=1, bias=False),
                                  nn.GroupNorm(min(8, w0), w0), nn.ReLU())
        blocks = []
        for cin, cout in zip(config.widths[:-1], config.widths[1:]):
            blocks.append(_ResBlock(cin, cout, stride=2))
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(config.widths[-1], 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.stem(x * 2.0 - 1.0))
        return self.head(h.mean(dim=(2, 3))).squeeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def check_input(self, x: torch.Tensor) -> None:
        c = self.config
        if x.ndim != 4 or tuple(x.shape[1:]) != (c.channels, c.resolution, c.resolution):
            raise DimensionError(
                f"detector expects N x {c.channels} x {c.resolution} x {c.resolution}, got {tuple(x.shape)}"
            )


def generate_watermark(g: GeneratorModel, z: LatentCode) -> WatermarkPattern:
    if len(z) != g.config.k:
        raise DimensionError(f"latent length {len(z)} != generator k {g.config.k}")
    was_training = g.training
    g.eval()
    with torch.no_grad():
        w = g(torch.from_numpy(np.array(z.values, dtype=np.float32))[None])
    g.train(was_training)
    values = w[0].permute(1, 2, 0).numpy().astype(np.float32)
    values.setflags(write=False)
    return WatermarkPattern(values, g.version, z.seed)


def apply_watermark(x: np.ndarray, w: WatermarkPattern | np.ndarray) -> np.ndarray:
    """``clamp(x + w, 0, 1)``; the images may be a single HWC image or an NHWC stack."""
    values = w.values if isinstance(w, WatermarkPattern) else np.asarray(w, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-values.ndim:] != values.shape:
        raise DimensionError(f"image shape {x.shape} incompatible with watermark {values.shape}")
    return np.clip(x + values, 0.0, 1.0).astype(np.float32)


def generator_loss(x: np.ndarray, x_w: np.ndarray, p: float, extractor: FeatureExtractor) -> float:
    """Hinge on the perceptual budget: ``max(d(x, x_w) - p, 0)``."""
    if p < 0:
        raise ConfigurationError("invisibility level p must be >= 0")
    return hinge(perceptual_distance(x, x_w, extractor), p)


def hinge(distance: float, p: float) -> float:
    return max(float(distance) - float(p), 0.0)


def detector_loss(y: float, y_hat: float) -> float:
    """Binary cross-entropy with ``y_hat`` clipped to ``[1e-7, 1 - 1e-7]``."""
    y_hat = min(max(float(y_hat), BCE_EPS), 1.0 - BCE_EPS)
    return -(1.0 - y) * math.log(1.0 - y_hat) - y * math.log(y_hat)


def bce(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean clipped BCE over a batch (tensor version of ``detector_loss``)."""
    y_hat = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return (-(1.0 - y) * torch.log(1.0 - y_hat) - y * torch.log(y_hat)).mean()


def detect_batch(d: DetectorModel, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """P(watermarked) for an (N, H, W, C) stack, in inference mode."""
    images = np.asarray(images, dtype=np.float32)
    was_training = d.training
    d.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = to_nchw(images[i:i + batch_size])
            d.check_input(x)
            out.append(d(x).numpy())
    d.train(was_training)
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def detect(d: DetectorModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise DimensionError(f"expected one H x W x C image, got {x.shape}")
    return float(detect_batch(d, x[None])[0])


def classify_probability(y_hat, threshold: float = 0.5):
    """1 (watermarked) iff ``y_hat > threshold``; ties go to non-watermarked."""
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError("threshold must lie in (0, 1)")
    return (np.asarray(y_hat) > threshold).astype(int)


def classify(d: DetectorModel, x: np.ndarray, threshold: float = 0.5) -> int:
    return int(classify_probability(detect(d, x), threshold))


def model_config_dict(model: nn.Module) -> dict:
    return asdict(model.config)
