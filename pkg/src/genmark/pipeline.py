"""The desk-scale experiment grid run end to end on synthetic subjects.

One call of ``run_toy_grid`` covers, per seed: the four threat scenarios,
the no-fine-tuning ablation, uniqueness against a second subject, FID
quality impact, partial watermarking and both countermeasures.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluation import (EvalReport, ScenarioAssets, ScenarioSpec, SeedAudit, SubjectAssets,
                         TrainCache, balanced_accuracy, eval_forgery, eval_partial_watermarking,
                         eval_quality, eval_removal, eval_uniqueness, removal_attack, scenario_test_set,
                         summarize, eval_seed_bases)
from .finetune import FinetuneConfig
from .imagery import Task, default_prompts, generate_synthetic_subjects, split_prompts
from .metrics import FeatureExtractor
from .synthesis import ModelKind, ProxyConfig, synthesize_run
from .watermark import DetectorModel, GeneratorModel, apply_watermark, generate_watermark, sample_latent

log = logging.getLogger(__name__)

UNIQUENESS_CELL = 9


@dataclass
class ToyGridConfig:
    task: str = Task.HUMAN_FACE.value
    resolution: int = 64
    n_images: int = 30
    known_count: int = 25
    family: str = "ddpm"
    alternate_family: str = "autoencoder"
    proxy_steps: int = 1500
    alternate_steps: int = 1000
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    images_per_prompt: int = 40
    finetune_epochs: int = 5
    finetune_lr: float = 1e-4
    per_prompt_known: int = 10
    per_prompt_heldout: int = 50
    fractions: tuple[float, ...] = (1.0, 0.5, 0.25, 0.0)
    removal: tuple[tuple[str, float], ...] = (("gaussian", 0.0005), ("jpeg", 20))
    forgery_multiples: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    uniqueness_n: int = 250
    scenarios: tuple[int, ...] = (1, 2, 3, 4)


@dataclass
class SeedResult:
    seed: int
    scenarios: dict
    no_finetune: float
    uniqueness: float | None
    quality: dict
    partial: dict
    forgery: float
    forgery_sweep: list
    removal: dict
    runs: dict
    set_sizes: dict
    audit: dict
    pattern_rms: float
    fine_tuned_for: str
    seconds: float


def _subject(cfg: ToyGridConfig, seed: int, tag: str):
    return generate_synthetic_subjects(cfg.task, 1, cfg.n_images, cfg.resolution, seed=seed, prefix=tag)[0]


def run_seed(g: GeneratorModel, d: DetectorModel, cfg: ToyGridConfig, seed: int,
             extractor: FeatureExtractor | None = None) -> SeedResult:
    t0 = time.time()
    extractor = extractor or FeatureExtractor(cfg.resolution, 3)
    subj = _subject(cfg, 2 * seed + 101, "A")
    other = _subject(cfg, 2 * seed + 102, "B")
    w = generate_watermark(g, sample_latent(10 * seed + 1, g.config.k))
    w_other = generate_watermark(g, sample_latent(10 * seed + 2, g.config.k))
    x, x_w = subj.images, apply_watermark(subj.images, w)
    known, held = split_prompts(default_prompts(cfg.task), cfg.known_count, seed)

    cache, audit = TrainCache(), SeedAudit()
    ft = FinetuneConfig(images_per_prompt=cfg.images_per_prompt, epochs=cfg.finetune_epochs,
                        lr=cfg.finetune_lr, seed=seed, subject_id=subj.subject_id)
    sa = SubjectAssets(x, w, d, known.ids, cfg.family, cfg.proxy_steps, cfg.proxy, seed, ft,
                       cfg.per_prompt_known, cache, audit)
    m, m_w = sa.train(x), sa.train(x_w)
    alt = (cache.train(cfg.alternate_family, x, cfg.alternate_steps, seed, cfg.proxy),
           cache.train(cfg.alternate_family, x_w, cfg.alternate_steps, seed, cfg.proxy))
    log.info("seed %d: synthesizers trained (%.0fs)", seed, time.time() - t0)
    d_ft = sa.finetune_on(m, m_w, "main")
    log.info("seed %d: detector fine-tuned (%.0fs)", seed, time.time() - t0)

    assets = ScenarioAssets({cfg.family: (m, m_w), cfg.alternate_family: alt}, cfg.family,
                            known.ids, held.ids, cfg.per_prompt_known, cfg.per_prompt_heldout,
                            cfg.alternate_family)
    scen, tests, runs, sizes = {}, {}, {}, {}
    for sid in cfg.scenarios:
        clean, wm = scenario_test_set(ScenarioSpec.of(sid), assets)
        audit.record_test("main", clean, wm)
        tests[sid] = (clean, wm)
        scen[sid] = balanced_accuracy(d_ft, clean.images, wm.images)
        runs[f"scenario{sid}"] = [clean.checksum, wm.checksum]
        sizes[f"scenario{sid}"] = len(clean)
    if 1 not in tests:
        raise ValueError("the toy grid needs scenario 1")
    s1_clean, s1_wm = tests[1]
    no_ft = balanced_accuracy(d, s1_clean.images, s1_wm.images)

    # uniqueness: own watermarked outputs vs another subject's watermarked outputs
    m_other = cache.train(cfg.family, apply_watermark(other.images, w_other), cfg.proxy_steps, seed, cfg.proxy)
    others = synthesize_run(m_other, ModelKind.WATERMARKED, known.ids, cfg.per_prompt_known,
                            eval_seed_bases(UNIQUENESS_CELL, cfg.per_prompt_known)[1])
    n_u = min(cfg.uniqueness_n, len(s1_wm), len(others))
    uniq = eval_uniqueness(d_ft, s1_wm, [others], n_u)
    runs["uniqueness_others"] = [others.checksum]
    sizes["uniqueness"] = n_u

    outs_clean = np.concatenate([r[0].images for k, r in tests.items() if k in (1, 2)])
    outs_wm = np.concatenate([r[1].images for k, r in tests.items() if k in (1, 2)])
    q = eval_quality(x, x_w, outs_clean, outs_wm, extractor)

    partial = {}
    for f in cfg.fractions:
        # fraction 1.0 is the standard watermarked model and detector
        partial[f] = scen[1] if f == 1.0 else eval_partial_watermarking([f], sa, [seed])[0][1]
    log.info("seed %d: partial watermarking done (%.0fs)", seed, time.time() - t0)

    sigmas = [mult * w.rms for mult in cfg.forgery_multiples]
    sweep = eval_forgery(d_ft, s1_clean.images, sigmas, seed)
    forgery = eval_forgery(d_ft, s1_clean.images, [w.rms], seed)[0][1]

    removal = {}
    for kind, param in cfg.removal:
        attack = lambda a: removal_attack(a, kind, param, seed)  # noqa: E731
        removal[f"{kind}:output"] = balanced_accuracy(d_ft, attack(s1_clean.images), attack(s1_wm.images))
        removal[f"{kind}:input"] = eval_removal(d_ft, sa, kind, param, "input", seed)
    log.info("seed %d: done (%.0fs)", seed, time.time() - t0)

    audit.check()
    return SeedResult(
        seed=seed, scenarios=scen, no_finetune=no_ft, uniqueness=uniq, quality=asdict(q),
        partial=partial, forgery=forgery, forgery_sweep=sweep, removal=removal, runs=runs,
        set_sizes=sizes, audit=audit.summary(), pattern_rms=w.rms,
        fine_tuned_for=d_ft.fine_tuned_for or "", seconds=time.time() - t0,
    )


def aggregate(results: list[SeedResult], cfg: ToyGridConfig, extra_config: dict | None = None) -> EvalReport:
    rep = EvalReport(seeds=[r.seed for r in results],
                     config={"toy_grid": asdict(cfg), **(extra_config or {})})
    first = results[0]
    rep.extractor_version = first.quality["extractor_version"]
    for sid in first.scenarios:
        rep.scenarios[str(sid)] = summarize([r.scenarios[sid] for r in results])
    rep.no_finetune = {"1": summarize([r.no_finetune for r in results])}
    rep.uniqueness = {**summarize([r.uniqueness for r in results]), "n_per_side": first.set_sizes["uniqueness"]}
    rep.quality = {k: summarize([r.quality[k] for r in results])
                   for k in ("fid_clean", "fid_wm", "relative_change")}
    rep.partial = {str(f): summarize([r.partial[f] for r in results]) for f in first.partial}
    cm = {"forgery": {**summarize([r.forgery for r in results]), "side": "output",
                      "param": "sigma=pattern rms"}}
    for key in first.removal:
        kind, side = key.split(":")
        param = dict(cfg.removal)[kind]
        cm[f"removal_{kind}_{side}"] = {**summarize([r.removal[key] for r in results]),
                                       "side": side, "param": param}
    sweep = np.mean([[a for _, a in r.forgery_sweep] for r in results], axis=0)
    cm["forgery_sweep"] = [[float(m), float(a)] for m, a in zip(cfg.forgery_multiples, sweep)]
    cm["forgery_sweep_units"] = "multiples of the pattern rms"
    rep.countermeasures = cm
    rep.set_sizes = first.set_sizes
    rep.runs = {str(r.seed): r.runs for r in results}
    rep.seed_audit = {f"{r.seed}/{tag}": v for r in results for tag, v in r.audit.items()}
    rep.fine_tuned_for = [r.fine_tuned_for for r in results]
    rep.config["pattern_rms"] = [r.pattern_rms for r in results]
    rep.config["seconds_per_seed"] = [r.seconds for r in results]
    rep.validate()
    return rep


def run_toy_grid(g: GeneratorModel, d: DetectorModel, cfg: ToyGridConfig = ToyGridConfig(),
                 seeds: tuple[int, ...] = (0, 1, 2), extractor: FeatureExtractor | None = None,
                 extra_config: dict | None = None) -> EvalReport:
    results = [run_seed(g, d, cfg, s, extractor) for s in seeds]
    return aggregate(results, cfg, extra_config)
