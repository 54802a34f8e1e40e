"""Evaluation: threat scenarios, partial watermarking, uniqueness, quality and countermeasures.

Every accuracy is computed on an exactly balanced clean/watermarked set.
Test images are synthesized with seeds at or above ``TEST_SEED_BASE``; the
fine-tuning sets stay below it, and ``SeedAudit`` checks the two never meet.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, InsufficientDataError, ValidationError
from .finetune import FINETUNE_SEED_LIMIT, FinetuneConfig, build_finetune_set, finetune_detector
from .imagery import PromptSet, to_uint8
from .metrics import EXTRACTOR_VERSION, FeatureExtractor, embed_features, frechet_distance
from .synthesis import (ModelKind, ProxyConfig, SubjectSynthesizer, SynthesisRun, _data_digest,
                        synthesize_run, train_synthesizer)
from .watermark import DetectorModel, WatermarkPattern, apply_watermark, classify_probability, detect_batch

TEST_SEED_BASE = FINETUNE_SEED_LIMIT
_CELL_STRIDE = 100_000


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    id: int
    model_known: bool
    prompts_known: bool

    def __post_init__(self):
        if SCENARIO_FLAGS.get(self.id) != (self.model_known, self.prompts_known):
            raise ConfigurationError(f"scenario {self.id} must be {SCENARIO_FLAGS.get(self.id)}")

    @classmethod
    def of(cls, scenario_id: int) -> "ScenarioSpec":
        if scenario_id not in SCENARIO_FLAGS:
            raise ConfigurationError(f"unknown scenario {scenario_id}; expected 1-4")
        return cls(scenario_id, *SCENARIO_FLAGS[scenario_id])


SCENARIO_FLAGS = {1: (True, True), 2: (True, False), 3: (False, True), 4: (False, False)}


@dataclass
class ScenarioAssets:
    """Trained synthesizer pairs per family plus the prompt split.

    ``synthesizers`` maps a family name to ``(clean, watermarked)``. The
    family the detector was fine-tuned against is ``known_family``; any
    other family serves the unknown-model scenarios.
    """

    synthesizers: dict[str, tuple[SubjectSynthesizer, SubjectSynthesizer]]
    known_family: str
    known_prompts: Sequence[int]
    heldout_prompts: Sequence[int] = ()
    per_prompt_known: int = 10
    per_prompt_heldout: int = 50
    alternate_family: str | None = None

    def family_for(self, spec: ScenarioSpec) -> str:
        if spec.model_known:
            family = self.known_family
        else:
            others = [f for f in self.synthesizers if f != self.known_family]
            family = self.alternate_family or (others[0] if others else None)
            if family == self.known_family:
                family = None
        if family is None or family not in self.synthesizers:
            raise ConfigurationError(f"scenario {spec.id} needs a synthesizer family that is not available")
        return family

    def prompts_for(self, spec: ScenarioSpec) -> tuple[list[int], int]:
        if spec.prompts_known:
            prompts, n = list(self.known_prompts), self.per_prompt_known
        else:
            prompts, n = list(self.heldout_prompts), self.per_prompt_heldout
        if not prompts:
            raise ConfigurationError(f"scenario {spec.id} needs {'known' if spec.prompts_known else 'held-out'} prompts")
        return prompts, n


def eval_seed_bases(cell: int, per_prompt: int) -> tuple[int, int]:
    """Seed bases (clean, watermarked) of test cell ``cell``; always above the fine-tune range."""
    if per_prompt > _CELL_STRIDE // 2:
        raise ConfigurationError(f"at most {_CELL_STRIDE // 2} test images per prompt")
    base = TEST_SEED_BASE + _CELL_STRIDE * int(cell)
    return base, base + _CELL_STRIDE // 2


def scenario_test_set(spec: ScenarioSpec, assets: ScenarioAssets) -> tuple[SynthesisRun, SynthesisRun]:
    family = assets.family_for(spec)
    prompts, n = assets.prompts_for(spec)
    clean, wm = assets.synthesizers[family]
    b0, b1 = eval_seed_bases(spec.id, n)
    return (synthesize_run(clean, ModelKind.CLEAN, prompts, n, b0),
            synthesize_run(wm, ModelKind.WATERMARKED, prompts, n, b1))


def balanced_accuracy(detector, clean: np.ndarray, watermarked: np.ndarray, threshold: float = 0.5) -> float:
    """Mean of the per-class accuracies; requires equal class sizes."""
    if len(clean) != len(watermarked) or not len(clean):
        raise ValidationError(f"unbalanced test set: {len(clean)} clean vs {len(watermarked)} watermarked")
    tnr = np.mean(classify_probability(detect_batch(detector, clean), threshold) == 0)
    tpr = np.mean(classify_probability(detect_batch(detector, watermarked), threshold) == 1)
    return float(0.5 * (tnr + tpr))


def eval_scenario(detector: DetectorModel, spec: ScenarioSpec, assets: ScenarioAssets) -> float:
    clean, wm = scenario_test_set(spec, assets)
    return balanced_accuracy(detector, clean.images, wm.images)


# ----------------------------------------------------------- seed bookkeeping


@dataclass
class SeedAudit:
    """Tracks which synthesized images each detector was trained and tested on."""

    finetune: dict[str, set] = field(default_factory=dict)
    test: dict[str, set] = field(default_factory=dict)

    @staticmethod
    def _ids(runs: Sequence[SynthesisRun]) -> set:
        return {(p.synthesizer_id, p.prompt_id, p.seed) for r in runs for p in r.provenance}

    def record_finetune(self, tag: str, *runs: SynthesisRun) -> None:
        self.finetune.setdefault(tag, set()).update(self._ids(runs))

    def record_test(self, tag: str, *runs: SynthesisRun) -> None:
        self.test.setdefault(tag, set()).update(self._ids(runs))

    def overlaps(self) -> dict[str, int]:
        return {tag: len(ids & self.finetune.get(tag, set())) for tag, ids in self.test.items()}

    def check(self) -> None:
        bad = {k: v for k, v in self.overlaps().items() if v}
        if bad:
            raise ValidationError(f"test images overlap fine-tuning images: {bad}")

    def summary(self) -> dict:
        return {tag: {"finetune_images": len(self.finetune.get(tag, ())),
                      "test_images": len(ids), "overlap": n}
                for (tag, ids), n in zip(self.test.items(), self.overlaps().values())}


# ------------------------------------------------------------ countermeasures


class RemovalKind(str, Enum):
    GAUSSIAN = "gaussian"
    JPEG = "jpeg"


def forgery_attack(images: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add Gaussian noise of std ``sigma`` as a forged watermark, then clamp."""
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    images = np.asarray(images, dtype=np.float32)
    if sigma == 0:
        return images.copy()
    noise = np.random.default_rng([int(seed), 6007]).normal(0.0, sigma, images.shape)
    return np.clip(images + noise, 0.0, 1.0).astype(np.float32)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG (4:2:0, non-progressive) encode and decode of one HWC image."""
    arr = to_uint8(image)
    pil = Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr)
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality), subsampling=2, progressive=False, optimize=False)
    buf.seek(0)
    out = np.asarray(Image.open(buf), dtype=np.float32) / 255.0
    return out.reshape(image.shape)


def removal_attack(images: np.ndarray, kind: RemovalKind | str, param: float, seed: int = 0) -> np.ndarray:
    """Gaussian noise (``param`` = std) or JPEG compression (``param`` = quality 1-100)."""
    kind = RemovalKind(kind)
    images = np.asarray(images, dtype=np.float32)
    if kind is RemovalKind.GAUSSIAN:
        if param < 0:
            raise ConfigurationError("gaussian std must be >= 0")
        if param == 0:
            return images.copy()
        noise = np.random.default_rng([int(seed), 7703]).normal(0.0, param, images.shape)
        return np.clip(images + noise, 0.0, 1.0).astype(np.float32)
    if isinstance(param, bool) or int(param) != param or not 1 <= param <= 100:
        raise ConfigurationError(f"JPEG quality must be an integer in [1, 100], got {param!r}")
    if images.ndim == 3:
        return jpeg_roundtrip(images, int(param))
    return np.stack([jpeg_roundtrip(x, int(param)) for x in images]).astype(np.float32)


def eval_forgery(detector: DetectorModel, clean_images: np.ndarray, sigmas: Sequence[float],
                 seed: int) -> list[tuple[float, float]]:
    """Fraction of forged clean images still classified non-watermarked, per sigma."""
    out = []
    for sigma in sigmas:
        forged = forgery_attack(clean_images, sigma, seed)
        out.append((float(sigma), float(np.mean(classify_probability(detect_batch(detector, forged)) == 0))))
    return out


# ------------------------------------------------------- subject-level assets


class TrainCache:
    """Memoizes synthesizer training on (family, data, seed, steps, config)."""

    def __init__(self):
        self._store: dict = {}
        self.hits = 0

    def train(self, family: str, images: np.ndarray, steps: int | None, seed: int,
              config: ProxyConfig | None) -> SubjectSynthesizer:
        key = (family, _data_digest(np.asarray(images, dtype=np.float32)), seed, steps,
               json.dumps(asdict(config), sort_keys=True) if config else None)
        if key in self._store:
            self.hits += 1
        else:
            self._store[key] = train_synthesizer(family, images, steps=steps, seed=seed, config=config)
        return self._store[key]


@dataclass
class SubjectAssets:
    """Everything needed to retrain a subject's synthesizers and re-run Phase 2."""

    images: np.ndarray
    pattern: WatermarkPattern
    detector: DetectorModel
    known_prompts: Sequence[int]
    family: str = "ddpm"
    proxy_steps: int | None = None
    proxy_config: ProxyConfig | None = None
    train_seed: int = 0
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    per_prompt_test: int = 10
    cache: TrainCache = field(default_factory=TrainCache)
    audit: SeedAudit | None = None

    def train(self, images: np.ndarray) -> SubjectSynthesizer:
        return self.cache.train(self.family, images, self.proxy_steps, self.train_seed, self.proxy_config)

    def finetune_on(self, m: SubjectSynthesizer, m_w: SubjectSynthesizer, tag: str) -> DetectorModel:
        prompts = PromptSet(tuple((int(p), "") for p in self.known_prompts), len(self.known_prompts))
        s, s_w = build_finetune_set(m, m_w, prompts, self.finetune)
        if self.audit is not None:
            self.audit.record_finetune(tag, s, s_w)
        return finetune_detector(self.detector, s, s_w, self.finetune)

    def s1_accuracy(self, detector: DetectorModel, m: SubjectSynthesizer, m_w: SubjectSynthesizer,
                    tag: str, transform: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
        assets = ScenarioAssets({self.family: (m, m_w)}, self.family, self.known_prompts,
                                per_prompt_known=self.per_prompt_test)
        clean, wm = scenario_test_set(ScenarioSpec.of(1), assets)
        if self.audit is not None:
            self.audit.record_test(tag, clean, wm)
        a, b = clean.images, wm.images
        if transform is not None:
            a, b = transform(a), transform(b)
        return balanced_accuracy(detector, a, b)


def mix_watermarked(images: np.ndarray, pattern: WatermarkPattern, fraction: float,
                    seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Watermark a seeded ``round(fraction * n)`` subset; returns (images, mask)."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"fraction must lie in [0, 1], got {fraction}")
    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    k = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    mask[np.random.default_rng([int(seed), 5]).permutation(n)[:k]] = True
    out = images.copy()
    if k:
        out[mask] = apply_watermark(images[mask], pattern)
    return out, mask


def eval_partial_watermarking(fractions: Sequence[float], assets: SubjectAssets,
                              seeds: Sequence[int]) -> list[tuple[float, float]]:
    """Scenario-1 accuracy when only a fraction of the subject's images is watermarked.

    For each fraction and seed the watermarked-side synthesizer is retrained
    on the mix and Phase 2 is rerun; accuracies are averaged over seeds.
    """
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ConfigurationError(f"fraction must lie in [0, 1], got {f}")
    if not len(seeds):
        raise ConfigurationError("need at least one seed")
    m = assets.train(assets.images)
    out = []
    for f in fractions:
        accs = []
        for seed in seeds:
            mixed, _ = mix_watermarked(assets.images, assets.pattern, f, seed)
            m_w = assets.train(mixed)
            tag = f"partial-{f:g}-{seed}"
            d = assets.finetune_on(m, m_w, tag)
            accs.append(assets.s1_accuracy(d, m, m_w, tag))
        out.append((float(f), float(np.mean(accs))))
    return out


def eval_removal(detector: DetectorModel, assets: SubjectAssets, kind: RemovalKind | str,
                 param: float, side: str, seed: int = 0, tag: str = "main") -> float:
    """Scenario-1 accuracy after a removal transform.

    ``side="output"`` transforms the synthesized test images of both classes.
    ``side="input"`` transforms the subject's clean and watermarked images
    before both synthesizers are trained; the detector is unchanged.
    """
    if side not in ("input", "output"):
        raise ConfigurationError("side must be 'input' or 'output'")
    attack = lambda x: removal_attack(x, kind, param, seed)  # noqa: E731
    clean = assets.images
    wm = apply_watermark(clean, assets.pattern)
    if side == "output":
        return assets.s1_accuracy(detector, assets.train(clean), assets.train(wm), tag, attack)
    return assets.s1_accuracy(detector, assets.train(attack(clean)), assets.train(attack(wm)), tag)


# --------------------------------------------------------- uniqueness / quality


def eval_uniqueness(detector: DetectorModel, own: SynthesisRun, others: Sequence[SynthesisRun],
                    n_per_side: int = 250) -> float:
    """Own watermarked images should score watermarked, other subjects' should not."""
    if n_per_side < 1:
        raise ConfigurationError("n_per_side must be >= 1")
    pool = [r for r in others if len(r)]
    n_other = sum(len(r) for r in pool)
    if len(own) < n_per_side or n_other < n_per_side:
        raise InsufficientDataError(
            f"need {n_per_side} images per side, have {len(own)} own and {n_other} others"
        )
    # draw evenly from each other subject
    take, i = [], 0
    cursors = [0] * len(pool)
    while len(take) < n_per_side:
        r = i % len(pool)
        if cursors[r] < len(pool[r]):
            take.append(pool[r].images[cursors[r]])
            cursors[r] += 1
        i += 1
    return balanced_accuracy(detector, np.stack(take), own.images[:n_per_side])


@dataclass(frozen=True)
class QualityResult:
    fid_clean: float
    fid_wm: float
    relative_change: float
    extractor_version: str


def relative_change(before: float, after: float) -> float:
    if before == 0:
        return 0.0 if after == 0 else float("inf")
    return abs(after - before) / before


def eval_quality(inputs_clean: np.ndarray, inputs_wm: np.ndarray, outputs_clean: np.ndarray,
                 outputs_wm: np.ndarray, extractor: FeatureExtractor) -> QualityResult:
    """FID(inputs, outputs) for clean-input and watermarked-input synthesis."""
    f = lambda a, b: frechet_distance(embed_features(a, extractor), embed_features(b, extractor))  # noqa: E731
    fid_clean = f(inputs_clean, outputs_clean)
    fid_wm = f(inputs_wm, outputs_wm)
    return QualityResult(fid_clean, fid_wm, relative_change(fid_clean, fid_wm), extractor.descriptor["version"])


# ---------------------------------------------------------------- reporting


def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=0)), "per_seed": [float(x) for x in v]}


@dataclass
class EvalReport:
    scenarios: dict = field(default_factory=dict)
    no_finetune: dict = field(default_factory=dict)
    uniqueness: dict = field(default_factory=dict)
    quality: dict = field(default_factory=dict)
    partial: dict = field(default_factory=dict)
    countermeasures: dict = field(default_factory=dict)
    set_sizes: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict)
    seed_audit: dict = field(default_factory=dict)
    fine_tuned_for: list = field(default_factory=list)
    extractor_version: str = EXTRACTOR_VERSION
    seeds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def accuracies(self) -> list[float]:
        vals = []

        def walk(node):
            if isinstance(node, dict):
                for k, v in node.items():
                    if k in ("mean", "accuracy") and isinstance(v, float):
                        vals.append(v)
                    elif k == "per_seed":
                        vals.extend(v)
                    else:
                        walk(v)
            elif isinstance(node, list):
                for v in node:
                    walk(v)
        walk({"s": self.scenarios, "n": self.no_finetune, "u": self.uniqueness,
              "p": self.partial, "c": self.countermeasures})
        return vals

    def validate(self) -> None:
        for a in self.accuracies():
            if not 0.0 <= a <= 1.0:
                raise ValidationError(f"accuracy {a} outside [0, 1]")
        bad = {k: v["overlap"] for k, v in self.seed_audit.items() if v.get("overlap")}
        if bad:
            raise ValidationError(f"test images overlap fine-tuning images: {bad}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def tables(self) -> dict[str, str]:
        tables = {}
        rows = [["scenario", "model_known", "prompts_known", "mean", "std", "n_per_class"]]
        for sid in sorted(self.scenarios, key=int):
            c = self.scenarios[sid]
            mk, pk = SCENARIO_FLAGS[int(sid)]
            rows.append([sid, mk, pk, c["mean"], c["std"], self.set_sizes.get(f"scenario{sid}", "")])
        tables["scenarios.csv"] = rows
        if self.uniqueness:
            tables["uniqueness.csv"] = [["mean", "std", "n_per_side"],
                                        [self.uniqueness.get("mean"), self.uniqueness.get("std"),
                                         self.uniqueness.get("n_per_side")]]
        tables["partial.csv"] = [["fraction", "mean", "std"]] + [
            [f, c["mean"], c["std"]] for f, c in sorted(self.partial.items(), key=lambda kv: -float(kv[0]))]
        rows = [["attack", "side", "param", "mean", "std"]]
        for name, cell in sorted(self.countermeasures.items()):
            if "mean" in cell:
                rows.append([name, cell.get("side", ""), cell.get("param", ""), cell["mean"], cell["std"]])
        tables["countermeasures.csv"] = rows
        if self.quality:
            tables["quality.csv"] = [["fid_clean", "fid_wm", "relative_change", "extractor_version"],
                                     [self.quality.get("fid_clean", {}).get("mean"),
                                      self.quality.get("fid_wm", {}).get("mean"),
                                      self.quality.get("relative_change", {}).get("mean"),
                                      self.extractor_version]]
        out = {}
        for name, rows in tables.items():
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerows(rows)
            out[name] = buf.getvalue()
        return out

    def save(self, directory: Path, plots: bool = True) -> Path:
        self.validate()
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.to_json())
        for name, text in self.tables().items():
            (directory / name).write_text(text)
        if plots:
            self.plot(directory)
        return directory

    def plot(self, directory: Path) -> list[Path]:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        paths = []
        if self.scenarios:
            fig, ax = plt.subplots(figsize=(4, 3))
            ids = sorted(self.scenarios, key=int)
            ax.bar([f"S{i}" for i in ids], [self.scenarios[i]["mean"] for i in ids],
                   yerr=[self.scenarios[i]["std"] for i in ids], color="tab:blue")
            ax.set_ylim(0, 1)
            ax.set_ylabel("accuracy")
            fig.tight_layout()
            paths.append(directory / "scenarios.png")
            fig.savefig(paths[-1], dpi=100)
            plt.close(fig)
        if self.partial:
            fig, ax = plt.subplots(figsize=(4, 3))
            fr = sorted(self.partial, key=float)
            ax.errorbar([float(f) for f in fr], [self.partial[f]["mean"] for f in fr],
                        yerr=[self.partial[f]["std"] for f in fr], marker="o")
            ax.set_xlabel("watermarked fraction")
            ax.set_ylabel("accuracy")
            ax.set_ylim(0, 1)
            fig.tight_layout()
            paths.append(directory / "partial.png")
            fig.savefig(paths[-1], dpi=100)
            plt.close(fig)
        sweep = self.countermeasures.get("forgery_sweep")
        if sweep:
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.plot([s for s, _ in sweep], [a for _, a in sweep], marker="o")
            ax.set_xscale("log")
            ax.set_xlabel(self.countermeasures.get("forgery_sweep_units", "forgery sigma"))
            ax.set_ylabel("non-watermarked rate")
            ax.set_ylim(0, 1)
            fig.tight_layout()
            paths.append(directory / "forgery.png")
            fig.savefig(paths[-1], dpi=100)
            plt.close(fig)
        return paths
