"""Phase 1: joint, cooperative training of the watermark generator and detector."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import ConfigurationError, TrainingAborted
from .metrics import FeatureExtractor, perceptual_distance_batch, perceptual_distances, to_nchw
from .watermark import (DetectorConfig, DetectorModel, GeneratorConfig, GeneratorModel,
                        apply_watermark, bce, classify_probability, detect_batch)

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    p: float = 0.05
    alpha: float = 1.0
    batch_size: int = 32
    steps: int = 1200
    lr_generator: float = 1e-3
    lr_detector: float = 1e-3
    seed: int = 0
    resolution: int = 64
    latent_dim: int = 128
    val_fraction: float = 0.1
    val_every: int = 200
    checkpoint_every: int = 0
    extractor_seed: int = 0

    def validate(self) -> None:
        if self.p < 0 or self.alpha < 0:
            raise ConfigurationError("p and alpha must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in [0, 1)")


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("step", "loss_g", "loss_d", "loss_total", "val_accuracy", "val_within_budget")

    def add(self, **rec) -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append(rec)

    def losses(self) -> list[tuple[float, float, float]]:
        return [(r["loss_g"], r["loss_d"], r["loss_total"]) for r in self.records]

    def last_validation(self) -> dict | None:
        for r in reversed(self.records):
            if r.get("val_accuracy") is not None:
                return r
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float)
                                 else r[k]) for k in self.COLUMNS})
        return buf.getvalue()


def total_loss(l_g: float, l_d: float, alpha: float) -> float:
    return alpha * l_g + l_d


def split_corpus(corpus: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 17]).permutation(len(corpus))
    n_val = int(round(len(corpus) * val_fraction))
    return corpus[np.sort(perm[n_val:])], corpus[np.sort(perm[:n_val])]


def validate_phase1(g: GeneratorModel, d: DetectorModel, images: np.ndarray, p: float,
                    extractor: FeatureExtractor, seed: int, margin: float = 0.01) -> dict:
    """Clean-vs-watermarked accuracy and budget satisfaction on held-out images.

    Each image gets its own freshly sampled latent.
    """
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(len(images), g.config.k, generator=gen)
    was = g.training
    g.eval()
    with torch.no_grad():
        w = g(z).permute(0, 2, 3, 1).numpy()
    g.train(was)
    wm = apply_watermark(images, w)
    y_clean = classify_probability(detect_batch(d, images))
    y_wm = classify_probability(detect_batch(d, wm))
    dist = perceptual_distances(images, wm, extractor)
    return {
        "accuracy": float((np.sum(y_clean == 0) + np.sum(y_wm == 1)) / (2 * len(images))),
        "within_budget": float(np.mean(dist <= p + margin)),
        "mean_distance": float(dist.mean()),
    }


def pretrain(corpus: np.ndarray, cfg: PretrainConfig = PretrainConfig(),
             extractor: FeatureExtractor | None = None,
             on_checkpoint: Callable[[int, GeneratorModel, DetectorModel], None] | None = None,
             ) -> tuple[GeneratorModel, DetectorModel, TrainingLog]:
    """Train G and D together against ``alpha * L_G + L_D``.

    Each step draws a batch of clean images and one fresh latent per image.
    The detector sees the clean half (label 0) and the watermarked half
    (label 1); its loss back-propagates into the generator through ``x_w``.
    One optimizer step updates both models.
    """
    cfg.validate()
    corpus = np.asarray(corpus, dtype=np.float32)
    if corpus.ndim != 4 or corpus.shape[1] != cfg.resolution:
        raise ConfigurationError(f"corpus must be N x {cfg.resolution} x {cfg.resolution} x C")
    train, val = split_corpus(corpus, cfg.val_fraction, cfg.seed)
    if len(train) < cfg.batch_size:
        raise ConfigurationError(f"corpus too small ({len(train)}) for batch size {cfg.batch_size}")
    channels = corpus.shape[-1]
    extractor = extractor or FeatureExtractor(cfg.resolution, channels, seed=cfg.extractor_seed)

    torch.manual_seed(cfg.seed)
    g = GeneratorModel(GeneratorConfig(k=cfg.latent_dim, resolution=cfg.resolution, channels=channels))
    d = DetectorModel(DetectorConfig(resolution=cfg.resolution, channels=channels))
    opt = torch.optim.Adam([
        {"params": g.parameters(), "lr": cfg.lr_generator},
        {"params": d.parameters(), "lr": cfg.lr_detector},
    ])
    rng = np.random.default_rng([cfg.seed, 1])
    zgen = torch.Generator().manual_seed(cfg.seed + 1)
    labels = torch.cat([torch.zeros(cfg.batch_size), torch.ones(cfg.batch_size)])

    tlog = TrainingLog(metadata={
        "optimizer": "Adam", "lr_generator": cfg.lr_generator, "lr_detector": cfg.lr_detector,
        "config": asdict(cfg), "extractor": extractor.descriptor,
        "generator_version": g.version, "detector_version": d.version,
        "n_train": len(train), "n_val": len(val),
    })
    t0 = time.time()
    g.train()
    d.train()
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(train), size=cfg.batch_size, replace=False)
        x = to_nchw(train[idx])
        z = torch.randn(cfg.batch_size, cfg.latent_dim, generator=zgen)
        x_w = (x + g(z)).clamp(0.0, 1.0)
        dist = perceptual_distance_batch(x, x_w, extractor)
        l_g = torch.relu(dist - cfg.p).mean()
        l_d = bce(d(torch.cat([x, x_w])), labels)
        loss = cfg.alpha * l_g + l_d
        lg, ld = l_g.item(), l_d.item()
        lt = total_loss(lg, ld, cfg.alpha)
        if not all(math.isfinite(v) for v in (lg, ld, lt)):
            tlog.add(step=step, loss_g=lg, loss_d=ld, loss_total=lt)
            raise TrainingAborted(f"non-finite loss at step {step}: L_G={lg} L_D={ld}", tlog)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        rec = {"step": step, "loss_g": lg, "loss_d": ld, "loss_total": lt,
               "val_accuracy": None, "val_within_budget": None}
        if len(val) and (step % cfg.val_every == 0 or step == cfg.steps):
            v = validate_phase1(g, d, val, cfg.p, extractor, seed=cfg.seed + 2)
            rec["val_accuracy"] = v["accuracy"]
            rec["val_within_budget"] = v["within_budget"]
            log.info("step %d L_G=%.4f L_D=%.4f val_acc=%.3f within=%.3f mean_d=%.4f",
                     step, lg, ld, v["accuracy"], v["within_budget"], v["mean_distance"])
        tlog.add(**rec)
        if on_checkpoint and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(step, g, d)
    g.eval()
    d.eval()
    tlog.metadata["wall_clock_seconds"] = time.time() - t0
    return g, d, tlog
