"""Phase 2: per-subject detector fine-tuning on synthesized clean and watermarked sets.

The detector is warm-started from the pretrained weights and trained with
BCE on outputs of a clean-trained synthesizer (label 0) versus a
watermark-trained one (label 1). The generator is never touched.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, TrainingAborted, ValidationError
from .imagery import PromptSet
from .metrics import to_nchw
from .synthesis import ModelKind, SubjectSynthesizer, SynthesisRun, synthesize_run
from .watermark import DetectorModel, bce, classify_probability, detect_batch

log = logging.getLogger(__name__)

# Synthesis seeds below this bound are reserved for fine-tuning sets; test
# sets draw from above it (see evaluation.TEST_SEED_BASE).
FINETUNE_SEED_LIMIT = 1_000_000


@dataclass
class FinetuneConfig:
    images_per_prompt: int = 40
    prompts_used: tuple[int, ...] | None = None   # None: the known prompts
    epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    subject_id: str = ""
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.images_per_prompt < 1:
            raise ConfigurationError("images_per_prompt must be >= 1")
        if self.prompts_used is not None and not len(self.prompts_used):
            raise ConfigurationError("prompts_used must be nonempty")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs, batch_size and lr must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in [0, 1)")

    def seed_bases(self) -> tuple[int, int]:
        """First synthesis seed of S and of S_w; the two ranges never overlap."""
        n = self.images_per_prompt
        clean = (self.seed * 2 * n) % FINETUNE_SEED_LIMIT
        if clean + 2 * n > FINETUNE_SEED_LIMIT:
            clean = 0
        return clean, clean + n


def resolve_prompts(prompts: PromptSet, cfg: FinetuneConfig) -> list[int]:
    if cfg.prompts_used is not None:
        return [int(p) for p in cfg.prompts_used]
    ids = prompts.ids[:prompts.known_count] if prompts.known_count else prompts.ids
    if not ids:
        raise ConfigurationError("no prompts to fine-tune on")
    return ids


def build_finetune_set(m: SubjectSynthesizer, m_w: SubjectSynthesizer, prompts: PromptSet,
                       cfg: FinetuneConfig = FinetuneConfig()) -> tuple[SynthesisRun, SynthesisRun]:
    """Synthesize S from the clean model and S_w from the watermarked one."""
    cfg.validate()
    if (m.resolution, m.channels) != (m_w.resolution, m_w.channels):
        raise ConfigurationError(
            f"synthesizers disagree on image size: {m.resolution}x{m.channels}"
            f" vs {m_w.resolution}x{m_w.channels}"
        )
    if 2 * cfg.images_per_prompt > FINETUNE_SEED_LIMIT:
        raise ConfigurationError("images_per_prompt exceeds the fine-tune seed range")
    ids = resolve_prompts(prompts, cfg)
    base_clean, base_wm = cfg.seed_bases()
    s = synthesize_run(m, ModelKind.CLEAN, ids, cfg.images_per_prompt, base_clean)
    s_w = synthesize_run(m_w, ModelKind.WATERMARKED, ids, cfg.images_per_prompt, base_wm)
    return s, s_w


def check_balance(n_clean: int, n_wm: int, tolerance: float = 0.01) -> None:
    if min(n_clean, n_wm) == 0:
        raise ValidationError("both classes need at least one image")
    if abs(n_clean - n_wm) / max(n_clean, n_wm) > tolerance:
        raise ValidationError(f"class imbalance: {n_clean} clean vs {n_wm} watermarked")


def _split(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    k = int(round(n * fraction))
    return np.sort(perm[k:]), np.sort(perm[:k])


def finetune_detector(d: DetectorModel, s: SynthesisRun, s_w: SynthesisRun,
                      cfg: FinetuneConfig = FinetuneConfig(),
                      history: list | None = None) -> DetectorModel:
    """Return a fine-tuned copy of ``d`` tagged with ``cfg.subject_id``.

    A stratified ``val_fraction`` of S and S_w is held out; the weights from
    the epoch with the lowest validation loss are kept. Per-epoch records are
    appended to ``history`` when given.
    """
    cfg.validate()
    if s.model_kind is not ModelKind.CLEAN or s_w.model_kind is not ModelKind.WATERMARKED:
        raise ValidationError("expected S from the clean model and S_w from the watermarked model")
    check_balance(len(s), len(s_w))

    rng = np.random.default_rng([cfg.seed, 2])
    tr0, va0 = _split(len(s), cfg.val_fraction, rng)
    tr1, va1 = _split(len(s_w), cfg.val_fraction, rng)
    x_train = np.concatenate([s.images[tr0], s_w.images[tr1]])
    y_train = np.concatenate([np.zeros(len(tr0)), np.ones(len(tr1))])
    x_val = np.concatenate([s.images[va0], s_w.images[va1]])
    y_val = np.concatenate([np.zeros(len(va0)), np.ones(len(va1))]).astype(int)

    torch.manual_seed(cfg.seed)
    model = copy.deepcopy(d)
    model.fine_tuned_for = cfg.subject_id or None
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    xt = to_nchw(x_train)
    yt = torch.from_numpy(y_train.astype(np.float32))
    gen = torch.Generator().manual_seed(cfg.seed)

    best_loss, best_state = math.inf, None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(len(xt), generator=gen)
        total, count = 0.0, 0
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss = bce(model(xt[idx]), yt[idx])
            if not torch.isfinite(loss):
                raise TrainingAborted(f"non-finite fine-tuning loss in epoch {epoch}", history)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        rec = {"epoch": epoch, "train_loss": total / count}
        if len(x_val):
            probs = detect_batch(model, x_val)
            rec["val_loss"] = float(bce(torch.from_numpy(probs), torch.from_numpy(y_val.astype(np.float64))))
            rec["val_accuracy"] = float(np.mean(classify_probability(probs) == y_val))
            if rec["val_loss"] < best_loss:
                best_loss = rec["val_loss"]
                best_state = copy.deepcopy(model.state_dict())
        log.info("finetune %s", rec)
        if history is not None:
            history.append(rec)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model
