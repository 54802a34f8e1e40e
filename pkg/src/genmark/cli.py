"""Command-line interface.

Subcommands: ``subjects``, ``pretrain``, ``watermark``, ``synth``, ``finetune``,
``evaluate``, ``countermeasure`` and ``report``. Exit codes: 0 success,
1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_model, read_metadata, save_model
from .config import ExperimentConfig, load_config, parse_assignments
from .errors import ConfigurationError, GenmarkError, ValidationError
from .evaluation import (EvalReport, ScenarioAssets, ScenarioSpec, SeedAudit, SubjectAssets, TrainCache,
                         balanced_accuracy, eval_forgery, eval_partial_watermarking, eval_removal,
                         scenario_test_set, summarize)
from .finetune import finetune_detector
from .imagery import (DatasetManifest, SubjectDataset, Source, Task, default_prompts,
                      generate_synthetic_subjects, load_image_folder, scan_folder, split_prompts,
                      synthetic_corpus, write_image_folder)
from .metrics import FeatureExtractor, perceptual_distances
from .pretrain import pretrain
from .registry import Registry, RegistryError
from .synthesis import (ModelKind, SynthesisRun, ingest_external_synthesis, synthesize_run,
                        train_synthesizer)
from .watermark import apply_watermark, generate_watermark, sample_latent

log = logging.getLogger("genmark")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(GenmarkError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers


def _int_list(text: str) -> list[int]:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(p) for p in str(text).split(",") if p.strip()]


def _ensure_writable(directory: Path) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=directory, prefix=".probe"):
            pass
    except OSError as exc:
        raise OSError(f"output directory {directory} is not writable: {exc}") from exc
    return directory


def _derived_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little") & 0x7FFFFFFF


def _save_atomic(model, path: Path, extra: dict | None = None) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    save_model(model, tmp, extra)
    return tmp


def _pretrained(cfg: ExperimentConfig, reg: Registry, flag: str | None, kind: str):
    if flag:
        return load_model(Path(flag), expect=kind)
    art = reg.artifact("pretrain")
    if not art or not Path(art[kind]).is_file():
        raise RegistryError(f"missing pretrained {kind} checkpoint: run `genmark pretrain` first"
                            f" or pass --{kind} (registry {reg.root})")
    return load_model(Path(art[kind]), expect=kind)


def _load_subject_images(directory: Path, resolution: int) -> np.ndarray:
    return load_image_folder(directory, resolution=resolution)[0].images


def _subject_assets(cfg: ExperimentConfig, reg: Registry, sid: str):
    entry = reg.require(sid)
    for key in ("clean_dir", "watermarked_dir"):
        if not entry.get(key) or not Path(entry[key]).is_dir():
            raise RegistryError(f"subject {sid}: missing {key.replace('_dir', '')} images; run `genmark watermark`")
    return (entry, _load_subject_images(Path(entry["clean_dir"]), cfg.resolution),
            _load_subject_images(Path(entry["watermarked_dir"]), cfg.resolution))


def _prompt_ids(spec: str, entry: dict) -> list[int]:
    split = entry["prompt_split"]
    if spec == "known":
        return list(split["known"])
    if spec == "heldout":
        return list(split["heldout"])
    if spec == "all":
        return sorted(split["known"] + split["heldout"])
    return _int_list(spec)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# ----------------------------------------------------------------- commands


def cmd_subjects(args, cfg: ExperimentConfig) -> int:
    out = _ensure_writable(Path(args.out))
    datasets = generate_synthetic_subjects(cfg.task, args.n_subjects, args.n_images, cfg.resolution,
                                           seed=cfg.seed, prefix=args.prefix)
    write_image_folder(out, datasets)
    _print({"out": str(out), "subjects": [d.subject_id for d in datasets], "images_per_subject": args.n_images})
    return EXIT_OK


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    reg = Registry(cfg.registry)
    out = _ensure_writable(Path(args.out) if args.out else reg.root / "pretrain")
    pcfg = cfg.pretrain_config()
    pcfg.validate()
    if args.data:
        corpus = np.concatenate([d.images for d in load_image_folder(Path(args.data), resolution=cfg.resolution)])
    else:
        corpus = synthetic_corpus(cfg.corpus_size, cfg.resolution, seed=pcfg.seed)

    def on_checkpoint(step, g, d):
        ck = out / "checkpoints" / f"step_{step:06d}"
        save_model(g, ck / "generator.safetensors", {"step": step})
        save_model(d, ck / "detector.safetensors", {"step": step})

    g, d, tlog = pretrain(corpus, pcfg, on_checkpoint=on_checkpoint if pcfg.checkpoint_every else None)
    extra = {"pretrain": asdict(pcfg), "corpus_size": len(corpus)}
    tmps = [_save_atomic(g, out / "generator.safetensors", extra),
            _save_atomic(d, out / "detector.safetensors", extra)]
    for tmp in tmps:
        os.replace(tmp, tmp.with_name(tmp.name[:-4]))
    (out / "training_log.csv").write_text(tlog.to_csv())
    (out / "training_meta.json").write_text(json.dumps(tlog.metadata, indent=2, sort_keys=True, default=str))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    paths = {"generator": str((out / "generator.safetensors").resolve()),
             "detector": str((out / "detector.safetensors").resolve())}
    reg.set_artifact("pretrain", {**paths, "log": str((out / "training_log.csv").resolve())})
    last = tlog.last_validation() or {}
    _print({**paths, "steps": pcfg.steps, "final_loss": tlog.records[-1]["loss_total"],
            "val_accuracy": last.get("val_accuracy"), "val_within_budget": last.get("val_within_budget")})
    return EXIT_OK


def cmd_watermark(args, cfg: ExperimentConfig) -> int:
    reg = Registry(cfg.registry)
    g, _ = _pretrained(cfg, reg, args.generator, "generator")
    src = Path(args.data)
    manifest = None
    if not (src / "manifest.json").is_file():
        if not src.is_dir():
            raise RegistryError(f"missing subject directory {src}")
        manifest = scan_folder(src, args.subject_id, cfg.task)
    groups = {d.subject_id: d for d in load_image_folder(src, manifest, cfg.resolution)}
    if args.subject_id not in groups:
        raise ValidationError(f"subject {args.subject_id!r} not found in {src}; have {sorted(groups)}")
    subject = groups[args.subject_id]

    entry = reg.get(args.subject_id) or {}
    if entry.get("latent_seed") is not None and not args.force:
        latent_seed = int(entry["latent_seed"])
    elif args.latent_seed is not None:
        latent_seed = args.latent_seed
    else:
        latent_seed = _derived_seed(args.subject_id)
    per_image = bool(args.per_image_latents or entry.get("per_image_latents", False))
    if per_image:
        patterns = [generate_watermark(g, sample_latent(latent_seed + i, g.config.k)).values
                    for i in range(len(subject.images))]
        x_w = apply_watermark(subject.images, np.stack(patterns))
    else:
        x_w = apply_watermark(subject.images, generate_watermark(g, sample_latent(latent_seed, g.config.k)))

    sdir = reg.subject_dir(args.subject_id)
    clean_dir, wm_dir = sdir / "clean", sdir / "watermarked"
    _ensure_writable(sdir)
    write_image_folder(clean_dir, [subject])
    write_image_folder(wm_dir, [SubjectDataset(subject.subject_id, subject.task, x_w, Source.FOLDER)])

    ext = FeatureExtractor(cfg.resolution, subject.images.shape[-1])
    dist = perceptual_distances(subject.images, x_w, ext)
    p = cfg.pretrain["p"]
    known, held = split_prompts(default_prompts(subject.task), cfg.evaluation["known_count"], cfg.seed)
    gen_meta = read_metadata(Path(args.generator or reg.artifact("pretrain")["generator"]))
    reg.update(args.subject_id, latent_seed=latent_seed, per_image_latents=per_image,
               generator_version=gen_meta["model_version"],
               generator_checkpoint=str(Path(args.generator or reg.artifact("pretrain")["generator"]).resolve()),
               task=subject.task.value, clean_dir=str(clean_dir.resolve()), watermarked_dir=str(wm_dir.resolve()),
               prompt_split={"known": known.ids, "heldout": held.ids}, seed=cfg.seed)
    _print({"subject_id": args.subject_id, "images": len(x_w), "latent_seed": latent_seed,
            "watermarked_dir": str(wm_dir), "mean_perceptual_distance": float(dist.mean()),
            "within_budget": float(np.mean(dist <= p + 0.01)), "p": p})
    return EXIT_OK


def _run_name(family: str, kind: str, prompts: list[int], per_prompt: int, seed_base: int,
              steps: int, external: str | None) -> str:
    key = json.dumps([family, kind, prompts, per_prompt, seed_base, steps, external])
    return f"{family}-{kind}-{hashlib.sha256(key.encode()).hexdigest()[:12]}"


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    reg = Registry(cfg.registry)
    sid = args.subject_id
    entry = reg.require(sid)
    kind = ModelKind(args.kind)
    family = args.family or cfg.family
    prompts = _prompt_ids(args.prompts, entry)
    fcfg = cfg.finetune_config(sid)
    per_prompt = args.per_prompt or fcfg.images_per_prompt
    seed_base = args.seed_base if args.seed_base is not None else fcfg.seed_bases()[kind is ModelKind.WATERMARKED]
    steps = cfg.synth_steps
    name = _run_name(family if not args.external else "external", kind.value, prompts, per_prompt,
                     seed_base, steps, args.external)
    run_dir = reg.subject_dir(sid) / "runs" / name
    runs = dict(entry.get("runs", {}))
    if name in runs and (run_dir / "provenance.json").is_file() and not args.force:
        _print({"run": name, "dir": str(run_dir), "reused": True})
        return EXIT_OK

    if args.external:
        ext = Path(args.external)
        manifest = (DatasetManifest.load(ext / "manifest.json") if (ext / "manifest.json").is_file()
                    else scan_folder(ext, sid, entry.get("task", cfg.task)))
        prov = {"synthesizer_id": args.external_id or f"external-{ext.name}", "model_kind": kind.value,
                "prompt_id": args.external_prompt, "seed": args.external_seed}
        # per-file prompt/seed may come from a JSON side file
        side = ext / "provenance.json"
        if side.is_file():
            prov.update({k: v for k, v in json.loads(side.read_text()).items() if k in prov})
        run = ingest_external_synthesis(ext, manifest, prov, cfg.resolution)
        record = {"synthesizer": prov["synthesizer_id"], "external": str(ext.resolve())}
    else:
        src = entry["clean_dir" if kind is ModelKind.CLEAN else "watermarked_dir"]
        images = _load_subject_images(Path(src), cfg.resolution)
        synth = train_synthesizer(family, images, steps=steps, seed=int(entry.get("seed", cfg.seed)),
                                  config=cfg.proxy_config())
        run = synthesize_run(synth, kind, prompts, per_prompt, seed_base)
        record = {"synthesizer": synth.synthesizer_id, "family": family, "steps": steps}
    run.save(run_dir)
    runs[name] = {**record, "dir": str(run_dir.resolve()), "kind": kind.value, "prompts": prompts,
                  "per_prompt": per_prompt, "seed_base": seed_base, "checksum": run.checksum, "n": len(run)}
    reg.update(sid, runs=runs)
    _print({"run": name, "dir": str(run_dir), "images": len(run), "checksum": run.checksum})
    return EXIT_OK


def _find_run(entry: dict, kind: str, name: str | None) -> dict:
    runs = entry.get("runs", {})
    if name:
        if name not in runs:
            raise RegistryError(f"missing synthesis run {name!r} for subject {entry['subject_id']}")
        return runs[name]
    matches = [r for r in runs.values() if r["kind"] == kind]
    if not matches:
        raise RegistryError(f"missing {kind} synthesis run for subject {entry['subject_id']};"
                            f" run `genmark synth --kind {kind}` first")
    return matches[-1]


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    reg = Registry(cfg.registry)
    sid = args.subject_id
    entry = reg.require(sid)
    d, _ = _pretrained(cfg, reg, args.detector, "detector")
    r0, r1 = _find_run(entry, "clean", args.clean_run), _find_run(entry, "watermarked", args.wm_run)
    s, s_w = SynthesisRun.load(Path(r0["dir"]), cfg.resolution), SynthesisRun.load(Path(r1["dir"]), cfg.resolution)
    fcfg = cfg.finetune_config(sid)
    history: list = []
    d_ft = finetune_detector(d, s, s_w, fcfg, history)
    path = reg.subject_dir(sid) / "detector.ckpt"
    prov = {"subject_id": sid, "clean_run": r0["checksum"], "watermarked_run": r1["checksum"],
            "finetune": asdict(fcfg), "history": history}
    os.replace(_save_atomic(d_ft, path, prov), path)
    (path.parent / "detector.json").write_text(json.dumps(prov, indent=2, sort_keys=True))
    reg.update(sid, detector_checkpoint=str(path.resolve()), finetune=prov)
    _print({"detector": str(path), "fine_tuned_for": d_ft.fine_tuned_for, "history": history})
    return EXIT_OK


def _subject_eval_context(cfg: ExperimentConfig, reg: Registry, sid: str):
    entry, x, x_w = _subject_assets(cfg, reg, sid)
    if not entry.get("detector_checkpoint"):
        raise RegistryError(f"subject {sid}: missing fine-tuned detector; run `genmark finetune` first")
    d_ft, _ = load_model(Path(entry["detector_checkpoint"]), expect="detector")
    g, _ = load_model(Path(entry["generator_checkpoint"]), expect="generator")
    pattern = generate_watermark(g, sample_latent(int(entry["latent_seed"]), g.config.k))
    seed = int(entry.get("seed", cfg.seed))
    e = cfg.evaluation
    cache = TrainCache()
    # evaluation retrains the same proxies the fine-tuning sets came from unless told otherwise
    own = [r for r in entry.get("runs", {}).values() if "steps" in r]
    family = cfg.family if "family" in cfg.sources or not own else own[-1]["family"]
    steps = cfg.synth_steps if "synth_steps" in cfg.sources or not own else int(own[-1]["steps"])
    sa = SubjectAssets(x, pattern, d_ft, entry["prompt_split"]["known"], family, steps,
                       cfg.proxy_config(), seed, cfg.finetune_config(sid), e["per_prompt_known"], cache, SeedAudit())
    return entry, x, x_w, d_ft, sa


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    out = _ensure_writable(Path(args.out or Path(cfg.output) / "evaluate"))
    if args.toy_grid:
        return _evaluate_toy_grid(args, cfg, out)
    reg = Registry(cfg.registry)
    subjects = [args.subject_id] if args.subject_id else reg.subjects()
    if not subjects:
        raise RegistryError(f"no subjects registered in {reg.root}")
    scenarios = _int_list(args.scenarios) if args.scenarios else list(cfg.evaluation["scenarios"])
    specs = [ScenarioSpec.of(s) for s in scenarios]
    fractions = _float_list(args.partial) if args.partial else []
    e = cfg.evaluation
    rep = EvalReport(seeds=[cfg.seed], config=cfg.to_dict())
    per_subject, partial, sizes = {}, {}, {}
    for sid in subjects:
        entry, x, x_w, d_ft, sa = _subject_eval_context(cfg, reg, sid)
        cells = {}
        if specs:
            m, m_w = sa.train(x), sa.train(x_w)
            synths = {sa.family: (m, m_w)}
            if any(not s.model_known for s in specs):
                alt = e["alternate_family"]
                synths[alt] = (sa.cache.train(alt, x, e["alternate_steps"], sa.train_seed, sa.proxy_config),
                               sa.cache.train(alt, x_w, e["alternate_steps"], sa.train_seed, sa.proxy_config))
            assets = ScenarioAssets(synths, sa.family, entry["prompt_split"]["known"],
                                    entry["prompt_split"]["heldout"], e["per_prompt_known"],
                                    e["per_prompt_heldout"], e["alternate_family"])
            # the detector under test was fine-tuned on the registered runs
            audit = sa.audit
            for r in entry.get("runs", {}).values():
                if Path(r.get("dir", "")).is_dir():
                    audit.record_finetune("main", SynthesisRun.load(Path(r["dir"])))
            for spec in specs:
                clean, wm = scenario_test_set(spec, assets)
                audit.record_test("main", clean, wm)
                cells[str(spec.id)] = balanced_accuracy(d_ft, clean.images, wm.images)
                sizes[f"scenario{spec.id}"] = len(clean)
                rep.runs.setdefault(sid, {})[f"scenario{spec.id}"] = [clean.checksum, wm.checksum]
        if fractions:
            sa.detector, _ = _pretrained(cfg, reg, None, "detector")
            curve = eval_partial_watermarking(fractions, sa, [sa.train_seed])
            partial[sid] = {str(f): a for f, a in curve}
        per_subject[sid] = cells
        rep.seed_audit.update({f"{sid}/{k}": v for k, v in sa.audit.summary().items()})
        rep.fine_tuned_for.append(d_ft.fine_tuned_for or "")
    for spec in specs:
        rep.scenarios[str(spec.id)] = summarize([per_subject[s][str(spec.id)] for s in subjects])
    for f in fractions:
        rep.partial[str(f)] = summarize([partial[s][str(f)] for s in subjects])
    rep.set_sizes = sizes
    rep.config["per_subject"] = per_subject
    rep.save(out)
    _print({"out": str(out), "scenarios": {k: v["mean"] for k, v in rep.scenarios.items()},
            "partial": {k: v["mean"] for k, v in rep.partial.items()}, "per_subject": per_subject})
    return EXIT_OK


def _evaluate_toy_grid(args, cfg: ExperimentConfig, out: Path) -> int:
    from .pipeline import run_toy_grid

    reg = Registry(cfg.registry)
    g, _ = _pretrained(cfg, reg, args.generator, "generator")
    d, _ = _pretrained(cfg, reg, args.detector, "detector")
    tg = cfg.toy_grid_config()
    if args.scenarios:
        tg.scenarios = tuple(_int_list(args.scenarios))
    if args.partial:
        tg.fractions = tuple(_float_list(args.partial))
    seeds = tuple(_int_list(args.seeds)) if args.seeds else (cfg.seed,)
    rep = run_toy_grid(g, d, tg, seeds, extra_config={"experiment": cfg.to_dict()})
    rep.save(out)
    _print({"out": str(out), "scenarios": {k: v["mean"] for k, v in rep.scenarios.items()}})
    return EXIT_OK


def cmd_countermeasure(args, cfg: ExperimentConfig) -> int:
    out = _ensure_writable(Path(args.out or Path(cfg.output) / "countermeasure"))
    reg = Registry(cfg.registry)
    subjects = [args.subject_id] if args.subject_id else reg.subjects()
    if not subjects:
        raise RegistryError(f"no subjects registered in {reg.root}")
    sides = ["input", "output"] if args.side == "both" else [args.side]
    rows = []
    rep = EvalReport(seeds=[cfg.seed], config=cfg.to_dict())
    for sid in subjects:
        entry, x, x_w, d_ft, sa = _subject_eval_context(cfg, reg, sid)
        if args.kind == "forgery":
            m = sa.train(x)
            assets = ScenarioAssets({sa.family: (m, sa.train(x_w))}, sa.family, sa.known_prompts,
                                    per_prompt_known=sa.per_prompt_test)
            clean, _ = scenario_test_set(ScenarioSpec.of(1), assets)
            sigmas = _float_list(args.param) if args.param else [sa.pattern.rms]
            for sigma, acc in eval_forgery(d_ft, clean.images, sigmas, sa.train_seed):
                rows.append({"subject_id": sid, "kind": "forgery", "param": sigma, "side": "output",
                             "accuracy": acc})
        else:
            if args.param is None:
                raise ConfigurationError("--param is required for removal attacks")
            param = float(args.param)
            if args.kind == "jpeg":
                if not param.is_integer():
                    raise ConfigurationError(f"JPEG quality must be an integer, got {args.param}")
                param = int(param)
            for side in sides:
                acc = eval_removal(d_ft, sa, args.kind, param, side, sa.train_seed)
                rows.append({"subject_id": sid, "kind": args.kind, "param": param, "side": side, "accuracy": acc})
    for key in sorted({(r["kind"], r["side"], r["param"]) for r in rows}, key=str):
        vals = [r["accuracy"] for r in rows if (r["kind"], r["side"], r["param"]) == key]
        rep.countermeasures[f"{key[0]}_{key[1]}_{key[2]}"] = {**summarize(vals), "side": key[1], "param": key[2]}
    rep.save(out, plots=False)
    lines = ["subject_id,kind,param,side,accuracy"] + [
        f"{r['subject_id']},{r['kind']},{r['param']},{r['side']},{r['accuracy']!r}" for r in rows]
    (out / "countermeasure_cells.csv").write_text("\n".join(lines) + "\n")
    _print({"out": str(out), "rows": rows})
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig) -> int:
    reports = []
    for p in args.reports:
        path = Path(p)
        path = path / "report.json" if path.is_dir() else path
        if not path.is_file():
            raise RegistryError(f"missing report {path}")
        reports.append(EvalReport.from_json(path.read_text()))
    merged = reports[0] if len(reports) == 1 else _merge_reports(reports)
    merged.validate()
    if args.out:
        merged.save(_ensure_writable(Path(args.out)))
    for name, text in merged.tables().items():
        print(f"# {name}")
        print(text, end="")
    return EXIT_OK


def _merge_reports(reports: list[EvalReport]) -> EvalReport:
    out = EvalReport(seeds=[s for r in reports for s in r.seeds],
                     config={"merged": [r.config for r in reports]},
                     extractor_version=reports[0].extractor_version)
    for attr in ("scenarios", "partial"):
        keys = {k for r in reports for k in getattr(r, attr)}
        for k in keys:
            vals = [v for r in reports if k in getattr(r, attr) for v in getattr(r, attr)[k]["per_seed"]]
            getattr(out, attr)[k] = summarize(vals)
    for r in reports:
        for k, v in r.countermeasures.items():
            if isinstance(v, dict) and "per_seed" in v and k in out.countermeasures:
                prev = out.countermeasures[k]
                out.countermeasures[k] = {**v, **summarize(prev["per_seed"] + v["per_seed"])}
            else:
                out.countermeasures[k] = v
        out.seed_audit.update(r.seed_audit)
        out.fine_tuned_for.extend(r.fine_tuned_for)
        out.set_sizes.update(r.set_sizes)
    return out


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (lowest-priority layer above defaults)")
    common.add_argument("--registry", help="registry root (overrides GENMARK_REGISTRY)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set pretrain.lr_generator=5e-4")
    common.add_argument("--seed", type=int, help="experiment seed")
    common.add_argument("--resolution", type=int, help="image resolution (32, 64, 128 or 256)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="genmark", description="Watermark subjects against subject-driven synthesis.")
    parser.add_argument("--version", action="version", version=f"genmark {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("subjects", parents=[common], help="write synthetic subjects to an image folder")
    p.add_argument("--out", required=True, help="output folder")
    p.add_argument("--n-subjects", type=int, default=2)
    p.add_argument("--n-images", type=int, default=30)
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--prefix", default=None, help="subject id prefix")
    p.set_defaults(func=cmd_subjects)

    p = sub.add_parser("pretrain", parents=[common], help="Phase 1: train generator and detector")
    p.add_argument("--out", help="checkpoint directory (default <registry>/pretrain)")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--corpus-size", type=int, help="number of synthetic training images")
    p.add_argument("--data", help="image folder with manifest.json to train on instead")
    p.add_argument("--checkpoint-every", type=int, help="also write checkpoints every K steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("watermark", parents=[common], help="watermark one subject's images")
    p.add_argument("--data", required=True, help="image folder (with manifest.json, or loose images)")
    p.add_argument("--subject-id", required=True)
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--generator", help="generator checkpoint (default: registry pretrain)")
    p.add_argument("--latent-seed", type=int, help="latent seed for a new subject")
    p.add_argument("--per-image-latents", action="store_true", help="one latent per image instead of per subject")
    p.add_argument("--force", action="store_true", help="resample the latent even if one is persisted")
    p.set_defaults(func=cmd_watermark)

    p = sub.add_parser("synth", parents=[common], help="train a synthesis proxy and write a SynthesisRun")
    p.add_argument("--subject-id", required=True)
    p.add_argument("--kind", required=True, choices=[k.value for k in ModelKind])
    p.add_argument("--family", choices=["ddpm", "autoencoder"])
    p.add_argument("--prompts", default="known", help="known, heldout, all, or ids like 0-9,12")
    p.add_argument("--per-prompt", type=int, help="images per prompt (default: finetune images_per_prompt)")
    p.add_argument("--seed-base", type=int, help="first image seed (default: the fine-tune seed range)")
    p.add_argument("--steps", type=int, help="proxy training steps")
    p.add_argument("--external", help="ingest images synthesized elsewhere instead of training a proxy")
    p.add_argument("--external-id", help="synthesizer id recorded for external images")
    p.add_argument("--external-prompt", type=int, help="prompt id of external images")
    p.add_argument("--external-seed", type=int, help="seed of external images")
    p.add_argument("--force", action="store_true", help="re-synthesize even if the run exists")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("finetune", parents=[common], help="Phase 2: fine-tune the detector for a subject")
    p.add_argument("--subject-id", required=True)
    p.add_argument("--detector", help="pretrained detector checkpoint (default: registry pretrain)")
    p.add_argument("--clean-run", help="registered clean run name (default: latest)")
    p.add_argument("--wm-run", help="registered watermarked run name (default: latest)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common], help="scenario and partial-watermarking evaluation")
    p.add_argument("--subject-id", help="evaluate one subject (default: all registered)")
    p.add_argument("--scenarios", help="comma-separated scenario ids, e.g. 1,2,3,4")
    p.add_argument("--partial", help="comma-separated watermarked fractions, e.g. 0.25,0.5,1.0")
    p.add_argument("--steps", type=int, help="proxy training steps")
    p.add_argument("--out", help="report directory")
    p.add_argument("--toy-grid", action="store_true", help="run the full grid on fresh synthetic subjects")
    p.add_argument("--seeds", help="toy-grid seeds, e.g. 0,1,2")
    p.add_argument("--generator")
    p.add_argument("--detector")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("countermeasure", parents=[common], help="forgery and removal attacks")
    p.add_argument("--subject-id")
    p.add_argument("--kind", required=True, choices=["gaussian", "jpeg", "forgery"])
    p.add_argument("--param", help="noise std, JPEG quality, or comma-separated forgery sigmas")
    p.add_argument("--side", default="both", choices=["input", "output", "both"])
    p.add_argument("--steps", type=int, help="proxy training steps")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_countermeasure)

    p = sub.add_parser("report", parents=[common], help="print or merge saved reports")
    p.add_argument("reports", nargs="+", help="report directories or report.json files")
    p.add_argument("--out", help="write merged tables and plots here")
    p.set_defaults(func=cmd_report)
    return parser


def _overrides(args) -> dict:
    o = parse_assignments(args.set)
    flag_map = {"registry": "registry", "seed": "seed", "resolution": "resolution", "task": "task",
                "batch_size": "pretrain.batch_size",
                "corpus_size": "corpus_size", "checkpoint_every": "pretrain.checkpoint_every",
                "epochs": "finetune.epochs", "lr": "finetune.lr", "family": "family"}
    for attr, key in flag_map.items():
        if getattr(args, attr, None) is not None:
            o[key] = getattr(args, attr)
    steps = getattr(args, "steps", None)
    if steps is not None:
        o["pretrain.steps" if args.command == "pretrain" else "synth_steps"] = steps
    if args.command == "pretrain" and getattr(args, "seed", None) is not None:
        o["pretrain.seed"] = args.seed
    return o


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = load_config(args.config, overrides=_overrides(args))
        return args.func(args, cfg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigurationError, ValidationError) as exc:
        print(f"genmark: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GenmarkError, OSError, RuntimeError, ValueError) as exc:
        print(f"genmark: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

if __name__ == "__main__":
    sys.exit(main())
