import numpy as np
import pytest
import torch

from genmark.errors import ConfigurationError, TrainingAborted, ValidationError
from genmark.finetune import (FINETUNE_SEED_LIMIT, FinetuneConfig, build_finetune_set, check_balance,
                              finetune_detector, resolve_prompts)
from genmark.imagery import PromptSet, generate_synthetic_subjects
from genmark.synthesis import ImageProvenance, SynthesisRun
from genmark.watermark import DetectorConfig, DetectorModel, apply_watermark, detect_batch

from helpers import StubSynth


def _runs(n, pattern, seed=0, offset=0):
    images = generate_synthetic_subjects("artistic_style", 1, n, 32, seed=seed)[0].images
    clean = SynthesisRun(images, [ImageProvenance("m", "clean", 0, offset + i) for i in range(n)])
    wm = SynthesisRun(apply_watermark(images, pattern),
                      [ImageProvenance("mw", "watermarked", 0, offset + i) for i in range(n)])
    return clean, wm


@pytest.fixture(scope="module")
def pattern32():
    return np.random.default_rng(0).normal(0, 0.05, (32, 32, 3)).astype(np.float32)


def test_seed_bases_disjoint_and_bounded():
    for seed in (0, 1, 7, 10 ** 6):
        cfg = FinetuneConfig(images_per_prompt=40, seed=seed)
        a, b = cfg.seed_bases()
        assert b == a + 40 and b + 40 <= FINETUNE_SEED_LIMIT


def test_config_validation():
    for bad in (dict(images_per_prompt=0), dict(prompts_used=()), dict(epochs=0), dict(lr=0),
                dict(val_fraction=1.0)):
        with pytest.raises(ConfigurationError):
            FinetuneConfig(**bad).validate()


def test_resolve_prompts():
    ps = PromptSet(((3, "a"), (5, "b"), (8, "c")), known_count=2)
    assert resolve_prompts(ps, FinetuneConfig()) == [3, 5]
    assert resolve_prompts(ps, FinetuneConfig(prompts_used=(8,))) == [8]


def test_build_finetune_set_is_balanced_with_provenance():
    imgs = generate_synthetic_subjects("human_face", 1, 4, 32, seed=0)[0].images
    m, m_w = StubSynth(imgs, "a"), StubSynth(np.clip(imgs + 0.02, 0, 1), "b")
    prompts = PromptSet(((0, ""), (1, ""), (2, "")), 3)
    s, s_w = build_finetune_set(m, m_w, prompts, FinetuneConfig(images_per_prompt=5))
    assert len(s) == len(s_w) == 15
    assert s.model_kind.value == "clean" and s_w.model_kind.value == "watermarked"
    assert {p.seed for p in s.provenance}.isdisjoint({p.seed for p in s_w.provenance})
    assert max(p.seed for p in s_w.provenance) < FINETUNE_SEED_LIMIT


def test_build_rejects_size_mismatch():
    a = StubSynth(np.zeros((1, 32, 32, 3)))
    b = StubSynth(np.zeros((1, 16, 16, 3)))
    with pytest.raises(ConfigurationError):
        build_finetune_set(a, b, PromptSet(((0, ""),), 1))


def test_check_balance():
    check_balance(100, 101)
    with pytest.raises(ValidationError):
        check_balance(100, 110)
    with pytest.raises(ValidationError):
        check_balance(0, 0)


def test_finetune_learns_pattern_on_heldout(pattern32):
    torch.manual_seed(0)
    d = DetectorModel(DetectorConfig(resolution=32, widths=(16, 32, 32)))
    s, s_w = _runs(200, pattern32)
    history = []
    out = finetune_detector(d, s, s_w, FinetuneConfig(epochs=6, lr=1e-3, subject_id="subj"), history)
    te_c, te_w = _runs(200, pattern32, seed=99, offset=10 ** 6)
    acc = 0.5 * (np.mean(detect_batch(out, te_c.images) <= 0.5) + np.mean(detect_batch(out, te_w.images) > 0.5))
    assert acc >= 0.9
    assert out.fine_tuned_for == "subj" and d.fine_tuned_for is None
    assert [h["epoch"] for h in history] == list(range(1, 7))
    assert all("val_loss" in h for h in history)


def test_finetune_does_not_touch_input_detector(pattern32):
    d = DetectorModel(DetectorConfig(resolution=32, widths=(8, 8)))
    before = {k: v.clone() for k, v in d.state_dict().items()}
    s, s_w = _runs(20, pattern32)
    finetune_detector(d, s, s_w, FinetuneConfig(epochs=1, lr=1e-2))
    for k, v in d.state_dict().items():
        assert torch.equal(v, before[k])


def test_finetune_is_deterministic(pattern32):
    d = DetectorModel(DetectorConfig(resolution=32, widths=(8, 8)))
    s, s_w = _runs(20, pattern32)
    a = finetune_detector(d, s, s_w, FinetuneConfig(epochs=2, lr=1e-3))
    b = finetune_detector(d, s, s_w, FinetuneConfig(epochs=2, lr=1e-3))
    for x, y in zip(a.parameters(), b.parameters()):
        assert torch.equal(x, y)


def test_finetune_rejects_wrong_kinds(pattern32):
    d = DetectorModel(DetectorConfig(resolution=32, widths=(8, 8)))
    s, s_w = _runs(10, pattern32)
    with pytest.raises(ValidationError):
        finetune_detector(d, s_w, s)
    with pytest.raises(ValidationError):
        finetune_detector(d, s, SynthesisRun(s_w.images[:5], s_w.provenance[:5]))


def test_finetune_aborts_on_nonfinite(pattern32, monkeypatch):
    import sys
    mod = sys.modules["genmark.finetune"]
    monkeypatch.setattr(mod, "bce", lambda *a: torch.tensor(float("nan"), requires_grad=True))
    d = DetectorModel(DetectorConfig(resolution=32, widths=(8, 8)))
    s, s_w = _runs(10, pattern32)
    with pytest.raises(TrainingAborted):
        finetune_detector(d, s, s_w, FinetuneConfig(epochs=1))
