import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from genmark.errors import ConfigurationError, TrainingAborted
from genmark.imagery import synthetic_corpus
from genmark.metrics import to_nchw
from genmark.pretrain import PretrainConfig, TrainingLog, pretrain, split_corpus, total_loss
from genmark.watermark import DetectorConfig, DetectorModel, GeneratorConfig, GeneratorModel, bce

TINY = dict(resolution=32, batch_size=8, steps=6, val_every=3, latent_dim=16)


@pytest.fixture(scope="module")
def corpus32():
    return synthetic_corpus(60, 32, seed=0)


@pytest.mark.parametrize("lg,ld,alpha,want", [(0.03, 0.5, 1.0, 0.53), (0.03, 0.4, 1.0, 0.43),
                                              (0.03, 0.5, 0.0, 0.5), (0.1, 0.2, 2.0, 0.4)])
def test_total_loss_values(lg, ld, alpha, want):
    assert total_loss(lg, ld, alpha) == pytest.approx(want, abs=1e-12)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_total_loss_linearity(lg, ld, alpha):
    assert total_loss(lg, ld, alpha) - ld == pytest.approx(alpha * lg, abs=1e-9)


def test_split_corpus_is_a_partition(corpus32):
    tr, va = split_corpus(corpus32, 0.1, 0)
    assert len(tr) + len(va) == len(corpus32) and len(va) == 6
    rows = {r.tobytes() for r in corpus32}
    assert {r.tobytes() for r in tr} | {r.tobytes() for r in va} == rows


def test_logged_total_matches_components(corpus32):
    _, _, log = pretrain(corpus32, PretrainConfig(**TINY, alpha=0.7))
    assert len(log.records) == 6
    for lg, ld, lt in log.losses():
        assert lt == pytest.approx(total_loss(lg, ld, 0.7), abs=1e-6)
    assert log.last_validation()["step"] == 6
    assert log.metadata["optimizer"] == "Adam"
    assert log.metadata["lr_generator"] == PretrainConfig().lr_generator
    csv = log.to_csv().splitlines()
    assert csv[0].split(",") == list(TrainingLog.COLUMNS) and len(csv) == 7


def test_pretrain_is_deterministic(corpus32):
    g1, d1, l1 = pretrain(corpus32, PretrainConfig(**TINY))
    g2, d2, l2 = pretrain(corpus32, PretrainConfig(**TINY))
    assert l1.losses() == l2.losses()
    for a, b in zip(list(g1.parameters()) + list(d1.parameters()), list(g2.parameters()) + list(d2.parameters())):
        assert torch.equal(a, b)


def test_checkpoint_callback_every_k(corpus32):
    seen = []
    pretrain(corpus32, PretrainConfig(**{**TINY, "checkpoint_every": 2}),
             on_checkpoint=lambda step, g, d: seen.append(step))
    assert seen == [2, 4, 6]


def test_generator_gets_gradient_from_detector_branch():
    torch.manual_seed(0)
    g = GeneratorModel(GeneratorConfig(k=8, resolution=16, base_width=16))
    d = DetectorModel(DetectorConfig(resolution=16, widths=(8, 8)))
    x = to_nchw(synthetic_corpus(4, 32, seed=1)[:, ::2, ::2])
    z = torch.randn(4, 8)

    def wm_loss():
        with torch.no_grad():
            return float(bce(d((x + g(z)).clamp(0, 1)), torch.ones(4)))

    base = wm_loss()
    assert base > 0
    param = g.fc.bias
    with torch.no_grad():
        param[0] += 1.0
    moved = wm_loss()
    with torch.no_grad():
        param[0] -= 1.0
    assert moved != base
    # and autograd agrees that the gradient is nonzero
    loss = bce(d((x + g(z)).clamp(0, 1)), torch.ones(4))
    loss.backward()
    assert sum(float(p.grad.abs().sum()) for p in g.parameters() if p.grad is not None) > 0


def test_config_validation(corpus32):
    with pytest.raises(ConfigurationError):
        PretrainConfig(p=-1).validate()
    with pytest.raises(ConfigurationError):
        PretrainConfig(steps=0).validate()
    with pytest.raises(ConfigurationError):
        pretrain(corpus32, PretrainConfig(**{**TINY, "batch_size": 100}))
    with pytest.raises(ConfigurationError):
        pretrain(corpus32, PretrainConfig(**{**TINY, "resolution": 64}))


def test_nonfinite_loss_aborts_with_log(corpus32, monkeypatch):
    import genmark.pretrain as mod

    monkeypatch.setattr(mod, "bce", lambda *a: torch.tensor(math.nan, requires_grad=True))
    with pytest.raises(TrainingAborted) as err:
        pretrain(corpus32, PretrainConfig(**TINY))
    assert isinstance(err.value.log, TrainingLog)
    assert err.value.log.records[-1]["step"] == 1


def test_short_training_improves_detector():
    corpus = synthetic_corpus(300, 32, seed=5)
    cfg = PretrainConfig(resolution=32, steps=120, batch_size=16, val_every=120, latent_dim=16)
    _, _, log = pretrain(corpus, cfg)
    first = np.mean([r["loss_d"] for r in log.records[:10]])
    last = np.mean([r["loss_d"] for r in log.records[-10:]])
    assert last < first
