import math

import numpy as np
import pytest

from bislot.harness import train as T
from bislot.harness.config import preset
from bislot.tensor import parameter


def test_lr_schedule():
    assert T.lr_scale(0, 100, 10) == pytest.approx(0.1)
    assert T.lr_scale(9, 100, 10) == 1.0
    assert T.lr_scale(10, 100, 10) == 1.0
    assert T.lr_scale(55, 100, 10) == pytest.approx(0.5)
    assert T.lr_scale(100, 100, 10) == pytest.approx(0.0, abs=1e-12)
    assert T.lr_scale(0, 5, 0) == 1.0


def adam_oracle(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8, decay=True):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        if decay:
            theta = theta * (1 - lr * wd)
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adamw_matches_scalar_oracle():
    w = parameter(np.full((2, 2), 0.7))
    b = parameter(np.full(3, 0.7))
    opt = T.AdamW([([w], 0.01), ([b], 0.02)], weight_decay=0.1)
    grads = [0.3, -0.2, 0.5]
    for g in grads:
        opt.zero_grad()
        w.grad = np.full_like(w.data, g)
        b.grad = np.full_like(b.data, g)
        opt.step()
    assert w.data[0, 0] == pytest.approx(adam_oracle(0.7, grads, 0.01, 0.1), abs=1e-14)
    # vectors are not decayed
    assert b.data[0] == pytest.approx(adam_oracle(0.7, grads, 0.02, 0.1, decay=False), abs=1e-14)


def test_clip_gradients():
    p = parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert T.clip_gradients([p], 1.0) == 5.0
    assert np.allclose(p.grad, [0.6, 0.8])


@pytest.fixture(scope="module")
def tiny():
    cfg = preset("tiny", epochs=2)
    return cfg, T.load_splits(cfg)


def test_training_is_deterministic(tiny):
    cfg, splits = tiny
    a = T.train(cfg, 0, splits)
    b = T.train(cfg, 0, splits)
    assert a.curve == b.curve and a.test_auc == b.test_auc
    for x, y in zip(a.model.state_arrays(), b.model.state_arrays()):
        assert np.array_equal(x, y)
    assert len(a.curve) == 2 and 1 <= a.best_epoch <= 2
    assert all(math.isfinite(r["loss"]) for r in a.curve)


def test_evaluate_is_deterministic(tiny):
    cfg, splits = tiny
    res = T.train(cfg, 1, splits)
    e1 = T.evaluate(res.model, splits["test"], cfg.eval_seed, sigma=0.1)
    e2 = T.evaluate(res.model, splits["test"], cfg.eval_seed, sigma=0.1)
    assert np.array_equal(e1.logits, e2.logits)
    clean = T.evaluate(res.model, splits["test"], cfg.eval_seed)
    assert clean.auc == pytest.approx(res.test_auc, abs=0)


def test_zero_epochs_evaluates_initial_model(tiny):
    cfg, splits = tiny
    res = T.train(cfg.replace(epochs=0), 0, splits)
    assert res.best_epoch == 0 and res.curve == [] and math.isfinite(res.test_auc)


def test_non_finite_loss_raises(tiny, monkeypatch):
    cfg, splits = tiny
    real = T.BilateralModel.init

    def poisoned(config, seed):
        model = real(config, seed)
        model.encoder.proj.data[...] = np.nan
        return model

    monkeypatch.setattr(T.BilateralModel, "init", staticmethod(poisoned))
    with pytest.raises(T.DivergenceError) as info:
        T.train(cfg, 0, splits)
    assert info.value.record["epoch"] == 0 and "non-finite" in str(info.value)


def test_variants_train(tiny):
    cfg, splits = tiny
    for v in ("no_slots", "no_bilateral", "frozen_encoder", "lambda_zero"):
        res = T.train(cfg, 0, splits, variant=v)
        assert res.variant == v and math.isfinite(res.test_auc)
