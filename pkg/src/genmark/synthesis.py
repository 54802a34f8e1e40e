"""Subject-driven synthesis stage.

Two desk-scale proxy families stand in for real personalization methods:

* ``DiffusionProxy`` -- a tiny DDPM trained on one subject's images, sampled
  by ancestral reverse denoising over a respaced timestep subsequence.
* ``AutoencoderProxy`` -- a conv autoencoder whose outputs are decoded from
  jittered, interpolated latents of the training images.

Both apply the same prompt-keyed content transform (zoom and crop, small
rotation, circular shift, per-channel gain and offset, and a faint texture
overlay) so that different prompt ids produce systematically different
content. ``ingest_external_synthesis`` wraps images produced elsewhere.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, IngestionError, ValidationError
from .imagery import DatasetManifest, read_manifest_images, read_png, save_png, to_uint8
from .metrics import to_nchw, to_nhwc

RUN_FORMAT_VERSION = 1


class ModelKind(str, Enum):
    CLEAN = "clean"
    WATERMARKED = "watermarked"


# ------------------------------------------------------------ diffusion math


@dataclass(frozen=True)
class NoiseSchedule:
    betas: tuple[float, ...]

    def __post_init__(self):
        if len(self.betas) < 1:
            raise ConfigurationError("schedule needs T >= 1")
        if any(not 0.0 < b < 1.0 for b in self.betas):
            raise ConfigurationError("every beta must lie strictly in (0, 1)")

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(tuple(np.linspace(beta_start, beta_end, T, dtype=np.float64).tolist()))

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return np.cumprod(1.0 - np.asarray(self.betas, dtype=np.float64))


def forward_diffuse(x_prev, beta_t: float, noise):
    """One forward noising step ``sqrt(1 - b) * x + sqrt(b) * noise`` (unclamped)."""
    if not 0.0 <= beta_t <= 1.0:
        raise ConfigurationError(f"beta_t={beta_t} outside [0, 1]")
    if np.shape(x_prev) != np.shape(noise):
        raise DimensionError(f"shape mismatch {np.shape(x_prev)} vs {np.shape(noise)}")
    return math.sqrt(1.0 - beta_t) * x_prev + math.sqrt(beta_t) * noise


def denoise_loss(eps, eps_hat) -> float:
    """Mean squared difference between true and estimated noise."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps.shape != eps_hat.shape:
        raise DimensionError(f"shape mismatch {eps.shape} vs {eps_hat.shape}")
    return float(np.mean((eps - eps_hat) ** 2))


# ------------------------------------------------------------ prompt transform


@dataclass(frozen=True)
class PromptTransform:
    zoom: float
    center: tuple[float, float]
    angle: float
    shift: tuple[int, int]
    gain: tuple[float, float, float]
    offset: tuple[float, float, float]
    # prompt-specific content overlay: (amplitude, ((cycles, angle, phase), ...))
    texture: tuple = (0.0, ())

    @classmethod
    def for_prompt(cls, prompt_id: int) -> "PromptTransform":
        rng = np.random.default_rng([int(prompt_id), 4242])
        return cls(
            zoom=float(rng.uniform(1.0, 1.4)),
            center=(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))),
            angle=float(rng.uniform(-15.0, 15.0)),
            shift=(int(rng.integers(-8, 9)), int(rng.integers(-8, 9))),
            gain=tuple(float(v) for v in rng.uniform(0.85, 1.15, 3)),
            offset=tuple(float(v) for v in rng.uniform(-0.06, 0.06, 3)),
            texture=(float(rng.uniform(0.02, 0.05)),
                     tuple((float(rng.uniform(2, 12)), float(rng.uniform(0, np.pi)),
                            float(rng.uniform(0, 2 * np.pi))) for _ in range(3))),
        )

    def overlay(self, h: int, w: int) -> torch.Tensor:
        amp, waves = self.texture
        yy, xx = torch.meshgrid(torch.arange(h, dtype=torch.float64) / h,
                                torch.arange(w, dtype=torch.float64) / w, indexing="ij")
        wave = torch.zeros(h, w, dtype=torch.float64)
        for cycles, angle, phase in waves:
            wave += torch.sin(2 * np.pi * cycles * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        if waves:
            wave *= amp / np.sqrt(len(waves))
        return wave.float()

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        """Apply to an NCHW batch in [0, 1]."""
        n, c, h, w = x.shape
        if self.zoom != 1.0 or self.angle != 0.0:
            scale = 1.0 / self.zoom
            rad = np.deg2rad(self.angle)
            cy, cx = (c_ * (1.0 - scale) for c_ in self.center)
            theta = torch.tensor([[scale * np.cos(rad), -scale * np.sin(rad), cx],
                                  [scale * np.sin(rad), scale * np.cos(rad), cy]],
                                 dtype=x.dtype).expand(n, 2, 3)
            grid = F.affine_grid(theta, (n, c, h, w), align_corners=False)
            x = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
        x = torch.roll(x, shifts=self.shift, dims=(2, 3))
        if c == 3:
            gain = torch.tensor(self.gain, dtype=x.dtype).view(1, 3, 1, 1)
            off = torch.tensor(self.offset, dtype=x.dtype).view(1, 3, 1, 1)
        else:
            gain = torch.tensor(float(np.mean(self.gain)), dtype=x.dtype)
            off = torch.tensor(float(np.mean(self.offset)), dtype=x.dtype)
        return (x * gain + off + self.overlay(h, w)).clamp(0.0, 1.0)


def _stream_seed(*parts) -> int:
    digest = hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def _data_digest(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images, dtype=np.float32).tobytes()).hexdigest()


# ------------------------------------------------------------ synthesizer API


@runtime_checkable
class SubjectSynthesizer(Protocol):
    synthesizer_id: str
    family: str
    resolution: int

    def synthesize(self, prompt_id: int, n: int, seed: int) -> np.ndarray:
        """``n`` images (N, H, W, C) for ``prompt_id``, deterministic in ``seed``."""
        ...


@dataclass
class ProxyConfig:
    steps: int = 6500
    batch_size: int = 16
    lr: float = 2e-3
    width: int = 32
    n_templates: int = 16
    patch: int = 0
    sample_steps: int = 50
    ae_latent_jitter: float = 0.3
    ae_mix: float = 0.5


class PatchTemplateDenoiser(nn.Module):
    """Noise predictor built on per-location banks of learned patch templates.

    The image is split into a grid of non-overlapping ``patch x patch``
    cells. For each cell the clean estimate is the posterior mean over that
    cell's ``K`` templates given ``x_t``: softmax of
    ``-|x_t - sqrt(a_t) T_k|^2 / (2 (1 - a_t))``. The implied noise
    ``(x_t - sqrt(a_t) x0) / sqrt(1 - a_t)`` is the prediction. Sampling
    therefore composes new images from patches of different training images.
    """

    def __init__(self, alphas_cumprod: np.ndarray, init: torch.Tensor, patch: int):
        super().__init__()
        n, c, h, w = init.shape
        if h % patch or w % patch:
            raise ConfigurationError(f"patch size {patch} must divide resolution {h}")
        self.patch = patch
        self.shape = (c, h, w)
        self.register_buffer("acp", torch.tensor(alphas_cumprod, dtype=torch.float32))
        # (cells, K, C * patch * patch)
        self.templates = nn.Parameter(self._to_patches(init).transpose(0, 1).contiguous())

    def _to_patches(self, x: torch.Tensor) -> torch.Tensor:
        return F.unfold(x, self.patch, stride=self.patch).transpose(1, 2)

    def _from_patches(self, p: torch.Tensor) -> torch.Tensor:
        _, h, w = self.shape
        return F.fold(p.transpose(1, 2), (h, w), self.patch, stride=self.patch)

    def clean_estimate(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        a = self.acp[t].view(-1, 1, 1)
        px = self._to_patches(x)                                   # (N, G, D)
        tm = self.templates                                        # (G, K, D)
        cross = torch.einsum("ngd,gkd->ngk", px, tm)
        d2 = (px * px).sum(-1, keepdim=True) - 2 * a.sqrt() * cross + a * (tm * tm).sum(-1)[None]
        wts = torch.softmax(-d2 / (2 * (1 - a)), dim=-1)
        return self._from_patches(torch.einsum("ngk,gkd->ngd", wts, tm))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        a = self.acp[t].view(-1, 1, 1, 1)
        x0 = self.clean_estimate(x, t)
        return (x - a.sqrt() * x0) / (1 - a).sqrt()


class DiffusionProxy:
    """Toy DDPM synthesizer; see ``train_proxy``."""

    family = "ddpm"

    def __init__(self, model: nn.Module, schedule: NoiseSchedule, resolution: int,
                 channels: int, config: ProxyConfig, train_seed: int, data_digest: str):
        self.model = model.eval()
        self.schedule = schedule
        self.resolution = resolution
        self.channels = channels
        self.config = config
        self.synthesizer_id = f"ddpm-{_stream_seed(data_digest, train_seed, asdict(config), schedule.T):016x}"

    def _timesteps(self) -> np.ndarray:
        s = max(1, min(self.config.sample_steps, self.schedule.T))
        return np.unique(np.round(np.linspace(0, self.schedule.T - 1, s)).astype(int))

    def sample_raw(self, seeds: Sequence[int]) -> torch.Tensor:
        """Reverse denoising from seeded noise; NCHW in [0, 1], before the prompt transform.

        Every image draws its noise from its own generator, so an image
        depends only on its seed and not on the batch it was sampled in.
        """
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
        shape = (self.channels, self.resolution, self.resolution)
        n = len(gens)

        def noise():
            return torch.stack([torch.randn(shape, generator=g) for g in gens])

        ts = self._timesteps()
        acp = self.schedule.alphas_cumprod[ts]
        x = noise()
        with torch.no_grad():
            for i in range(len(ts) - 1, -1, -1):
                a_t = float(acp[i])
                a_prev = float(acp[i - 1]) if i > 0 else 1.0
                t = torch.full((n,), int(ts[i]), dtype=torch.long)
                eps = self.model(x, t)
                x0 = ((x - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)).clamp(-1, 1)
                if i == 0:
                    x = x0
                    break
                beta = 1.0 - a_t / a_prev
                c0 = math.sqrt(a_prev) * beta / (1 - a_t)
                ct = math.sqrt(1 - beta) * (1 - a_prev) / (1 - a_t)
                var = beta * (1 - a_prev) / (1 - a_t)
                x = c0 * x0 + ct * x + math.sqrt(var) * noise()
        return ((x + 1) / 2).clamp(0, 1)

    def synthesize(self, prompt_id: int, n: int, seed: int) -> np.ndarray:
        """``n`` images; image ``j`` equals ``synthesize(prompt_id, 1, seed + j)[0]``."""
        return _batched(self, "ddpm", prompt_id, n, seed)


def _batched(synth, tag: str, prompt_id: int, n: int, seed: int, chunk: int = 64) -> np.ndarray:
    if n < 0:
        raise ConfigurationError("n must be >= 0")
    transform = PromptTransform.for_prompt(prompt_id)
    out = [np.zeros((0, synth.resolution, synth.resolution, synth.channels), np.float32)]
    for lo in range(0, n, chunk):
        seeds = [_stream_seed(tag, prompt_id, seed + j) for j in range(lo, min(n, lo + chunk))]
        out.append(to_nhwc(transform.apply(synth.sample_raw(seeds))))
    return np.concatenate(out)


def _check_training_images(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) < 1:
        raise ConfigurationError("synthesizer training needs at least one image")
    return images


def train_proxy(images: Sequence[np.ndarray] | np.ndarray, steps: int | None = None, seed: int = 0,
                schedule: NoiseSchedule | None = None,
                config: ProxyConfig | None = None) -> DiffusionProxy:
    """Train a toy DDPM on one subject's images with the noise-prediction loss."""
    images = _check_training_images(images)
    config = config or ProxyConfig()
    if steps is not None:
        config = ProxyConfig(**{**asdict(config), "steps": steps})
    schedule = schedule or NoiseSchedule.linear()
    n, res, _, ch = images.shape
    torch.manual_seed(_stream_seed("ddpm-init", seed))
    data = to_nchw(images) * 2 - 1
    # templates start at a seeded subset of the training images (k-means style)
    pick = np.random.default_rng([seed, 31]).permutation(max(n, config.n_templates))[:config.n_templates] % n
    patch = config.patch or max(1, res // 4)
    model = PatchTemplateDenoiser(schedule.alphas_cumprod, data[torch.from_numpy(pick)], patch)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sqrt_acp = torch.tensor(np.sqrt(schedule.alphas_cumprod), dtype=torch.float32)
    sqrt_om = torch.tensor(np.sqrt(1 - schedule.alphas_cumprod), dtype=torch.float32)
    gen = torch.Generator().manual_seed(_stream_seed("ddpm-train", seed))
    model.train()
    for _ in range(config.steps):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        t = torch.randint(0, schedule.T, (config.batch_size,), generator=gen)
        eps = torch.randn((config.batch_size, ch, res, res), generator=gen)
        x0 = data[idx]
        x_t = sqrt_acp[t].view(-1, 1, 1, 1) * x0 + sqrt_om[t].view(-1, 1, 1, 1) * eps
        loss = F.mse_loss(model(x_t, t), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return DiffusionProxy(model, schedule, res, ch, config, seed, _data_digest(images))


class _ConvAutoencoder(nn.Module):
    """Convolutional autoencoder over a 2x pixel-unshuffled image."""

    def __init__(self, channels: int = 3, width: int = 32, latent: int = 8):
        super().__init__()
        c4 = channels * 4
        self.enc = nn.Sequential(
            nn.PixelUnshuffle(2),
            nn.Conv2d(c4, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent, width, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, c4, 3, padding=1),
            nn.PixelShuffle(2),
        )

    def forward(self, x):
        return self.dec(self.enc(x))


class AutoencoderProxy:
    """Alternate synthesizer family: decode jittered mixtures of training latents."""

    family = "autoencoder"

    def __init__(self, model: _ConvAutoencoder, images: np.ndarray, config: ProxyConfig,
                 train_seed: int, data_digest: str):
        self.model = model.eval()
        self.resolution = images.shape[1]
        self.channels = images.shape[-1]
        self.config = config
        with torch.no_grad():
            self.codes = self.model.enc(to_nchw(images) * 2 - 1)
        self._code_std = float(self.codes.std())
        self.synthesizer_id = f"ae-{_stream_seed(data_digest, train_seed, asdict(config)):016x}"

    def sample_raw(self, seeds: Sequence[int]) -> torch.Tensor:
        k = len(self.codes)
        zs = []
        for s in seeds:
            gen = torch.Generator().manual_seed(int(s))
            i, j = torch.randint(0, k, (2,), generator=gen).tolist()
            lam = float(torch.rand(1, generator=gen)) * self.config.ae_mix
            z = (1 - lam) * self.codes[i] + lam * self.codes[j]
            zs.append(z + self.config.ae_latent_jitter * self._code_std
                      * torch.randn(z.shape, generator=gen))
        with torch.no_grad():
            return ((self.model.dec(torch.stack(zs)) + 1) / 2).clamp(0, 1)

    def synthesize(self, prompt_id: int, n: int, seed: int) -> np.ndarray:
        """``n`` images; image ``j`` depends only on ``(prompt_id, seed + j)`` (up to float rounding)."""
        return _batched(self, "ae", prompt_id, n, seed)


def train_autoencoder_proxy(images, steps: int | None = None, seed: int = 0,
                            config: ProxyConfig | None = None) -> AutoencoderProxy:
    images = _check_training_images(images)
    config = config or ProxyConfig()
    if steps is not None:
        config = ProxyConfig(**{**asdict(config), "steps": steps})
    n, res, _, ch = images.shape
    torch.manual_seed(_stream_seed("ae-init", seed))
    model = _ConvAutoencoder(ch, config.width)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    data = to_nchw(images) * 2 - 1
    gen = torch.Generator().manual_seed(_stream_seed("ae-train", seed))
    model.train()
    for _ in range(config.steps):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        x = data[idx]
        noisy = x + 0.05 * torch.randn(x.shape, generator=gen)
        loss = F.mse_loss(model(noisy), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return AutoencoderProxy(model, images, config, seed, _data_digest(images))


FAMILIES = {"ddpm": train_proxy, "autoencoder": train_autoencoder_proxy}


def train_synthesizer(family: str, images, steps: int | None = None, seed: int = 0,
                      config: ProxyConfig | None = None) -> SubjectSynthesizer:
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown synthesizer family {family!r}; choose from {sorted(FAMILIES)}")
    return FAMILIES[family](images, steps=steps, seed=seed, config=config)


# ------------------------------------------------------------ synthesis runs


@dataclass(frozen=True)
class ImageProvenance:
    synthesizer_id: str
    model_kind: str
    prompt_id: int
    seed: int


@dataclass
class SynthesisRun:
    images: np.ndarray
    provenance: list[ImageProvenance]
    checksum: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if len(self.images) != len(self.provenance):
            raise ValidationError("every image needs a provenance record")
        for p in self.provenance:
            ModelKind(p.model_kind)
        if not self.checksum:
            self.checksum = self.compute_checksum()

    def __len__(self) -> int:
        return len(self.images)

    @property
    def model_kind(self) -> ModelKind:
        kinds = {p.model_kind for p in self.provenance}
        if len(kinds) != 1:
            raise ValidationError(f"mixed model kinds in run: {sorted(kinds)}")
        return ModelKind(kinds.pop())

    @property
    def seeds(self) -> set[tuple[str, int, int]]:
        return {(p.synthesizer_id, p.prompt_id, p.seed) for p in self.provenance}

    def provenance_json(self) -> list[dict]:
        return [asdict(p) for p in self.provenance]

    def compute_checksum(self) -> str:
        h = hashlib.sha256(json.dumps(self.provenance_json(), sort_keys=True).encode())
        h.update(to_uint8(self.images).tobytes())
        return h.hexdigest()

    def with_images(self, images: np.ndarray) -> "SynthesisRun":
        """Same provenance, transformed pixels (e.g. after a countermeasure)."""
        return SynthesisRun(images, list(self.provenance))

    @classmethod
    def concat(cls, runs: Sequence["SynthesisRun"]) -> "SynthesisRun":
        return cls(np.concatenate([r.images for r in runs]),
                   [p for r in runs for p in r.provenance])

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (img, prov) in enumerate(zip(self.images, self.provenance)):
            name = f"{i:05d}.png"
            save_png(img, directory / name)
            entries.append({"file": name, **asdict(prov),
                            "checksum": hashlib.sha256((directory / name).read_bytes()).hexdigest()})
        doc = {"version": RUN_FORMAT_VERSION, "checksum": self.checksum, "entries": entries}
        (directory / "provenance.json").write_text(json.dumps(doc, indent=2))
        return directory

    @classmethod
    def load(cls, directory: Path, resolution: int | None = None) -> "SynthesisRun":
        directory = Path(directory)
        path = directory / "provenance.json"
        if not path.is_file():
            raise IngestionError(f"no provenance.json in {directory}", "provenance.json")
        doc = json.loads(path.read_text())
        if doc.get("version") != RUN_FORMAT_VERSION:
            raise IngestionError(f"unsupported synthesis run version {doc.get('version')}")
        images, prov = [], []
        for e in doc["entries"]:
            f = directory / e["file"]
            if not f.is_file():
                raise IngestionError(f"missing file: {e['file']}", e["file"])
            if hashlib.sha256(f.read_bytes()).hexdigest() != e["checksum"]:
                raise IngestionError(f"checksum mismatch: {e['file']}", e["file"])
            images.append(read_png(f, resolution))
            prov.append(ImageProvenance(e["synthesizer_id"], e["model_kind"],
                                        int(e["prompt_id"]), int(e["seed"])))
        return cls(np.stack(images), prov)


def synthesize_run(synth: SubjectSynthesizer, model_kind: ModelKind | str,
                   prompt_ids: Sequence[int], per_prompt: int, seed_base: int) -> SynthesisRun:
    """``per_prompt`` images for each prompt, image ``j`` of a prompt seeded ``seed_base + j``."""
    model_kind = ModelKind(model_kind)
    if per_prompt < 1 or not len(prompt_ids):
        raise ConfigurationError("need at least one prompt and one image per prompt")
    images, prov = [], []
    for pid in prompt_ids:
        images.append(synth.synthesize(int(pid), per_prompt, seed_base))
        prov += [ImageProvenance(synth.synthesizer_id, model_kind.value, int(pid), seed_base + j)
                 for j in range(per_prompt)]
    return SynthesisRun(np.concatenate(images), prov)


_PROVENANCE_KEYS = ("synthesizer_id", "model_kind", "prompt_id", "seed")


def ingest_external_synthesis(directory: Path, manifest: DatasetManifest, provenance: dict,
                              resolution: int = 64) -> SynthesisRun:
    """Wrap externally synthesized images listed in ``manifest`` as a SynthesisRun.

    ``provenance`` needs ``synthesizer_id``, ``model_kind``, ``prompt_id`` and
    ``seed``; the last two may be scalars or mappings keyed by relative path.
    """
    missing = [k for k in _PROVENANCE_KEYS if provenance.get(k) is None]
    if missing:
        raise ValidationError(f"incomplete provenance, missing {missing}")
    try:
        kind = ModelKind(provenance["model_kind"])
    except ValueError as exc:
        raise ValidationError(f"invalid model_kind {provenance['model_kind']!r}") from exc
    images = read_manifest_images(directory, manifest.entries, resolution)

    def per_entry(key, rel):
        v = provenance[key]
        if isinstance(v, dict):
            if rel not in v:
                raise ValidationError(f"no {key} for {rel}")
            return int(v[rel])
        return int(v)

    prov = [ImageProvenance(str(provenance["synthesizer_id"]), kind.value,
                            per_entry("prompt_id", e.relative_path), per_entry("seed", e.relative_path))
            for e in manifest.entries]
    return SynthesisRun(np.stack(images), prov)
