import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from hart.models import build_model
from hart.pipeline import Provenance, WindowSet
from hart.synth import synthetic_windows
from hart.training import (AdamState, DivergenceError, TrainConfig, adam_step, evaluate, fit, weighted_smoothed_ce)

import oracles

D = torch.float64


# loss

def test_loss_hand_value():
    logits = torch.log(torch.tensor([[0.7, 0.2, 0.1]], dtype=D))
    assert abs(weighted_smoothed_ce(logits, [0], None, 0.1).item() - 0.4632) <= 1e-4


@pytest.mark.parametrize("c", [2, 6, 10])
def test_uniform_logits_give_log_c(c):
    logits = torch.full((4, c), 0.37, dtype=D)
    for eps in (0.0, 0.1, 0.5):
        loss = weighted_smoothed_ce(logits, [0, 1, 1, c - 1], torch.ones(c), eps)
        assert abs(loss.item() - math.log(c)) <= 1e-6


def test_zero_smoothing_is_cross_entropy():
    logits = torch.randn(8, 5, dtype=D)
    targets = torch.randint(0, 5, (8,))
    assert abs(weighted_smoothed_ce(logits, targets, None, 0.0).item() - F.cross_entropy(logits, targets).item()) <= 1e-7


def test_weights_scale_loss():
    logits = torch.randn(6, 3, dtype=D)
    targets = [0, 1, 2, 2, 1, 0]
    w = torch.tensor([0.5, 2.0, 1.5], dtype=D)
    a = weighted_smoothed_ce(logits, targets, w, 0.1)
    b = weighted_smoothed_ce(logits, targets, 3 * w, 0.1)
    assert torch.allclose(b, 3 * a, atol=1e-14)


def test_loss_rejects_bad_targets():
    with pytest.raises(ValueError, match="target ids"):
        weighted_smoothed_ce(torch.zeros(2, 3), [0, 3])
    with pytest.raises(ValueError, match="class weights"):
        weighted_smoothed_ce(torch.zeros(2, 3), [0, 1], torch.ones(2))


@pytest.mark.parametrize("dtype,tol", [(torch.float64, 1e-6), (torch.float32, 1e-3)], ids=["float64", "float32"])
def test_loss_gradient_matches_finite_differences(dtype, tol):
    logits = torch.from_numpy(np.random.default_rng(0).standard_normal((5, 4)))
    w = torch.tensor([1.0, 0.5, 2.0, 1.2], dtype=D)
    fn = lambda x: weighted_smoothed_ce(x, [0, 3, 1, 1, 2], w.to(x.dtype), 0.1)
    assert oracles.gradient_check(fn, [logits], analytic_dtype=dtype) <= tol


# Adam

def test_adam_zero_gradient_keeps_params():
    p = torch.tensor([1.5, -2.0])
    state = AdamState.zeros_like([p])
    adam_step([p], [torch.zeros(2)], state, lr=0.1)
    assert p.tolist() == [1.5, -2.0] and state.t == 1


def test_adam_first_step_magnitude_is_lr():
    p = torch.zeros(3, dtype=D)
    adam_step([p], [torch.tensor([3.0, -0.01, 250.0], dtype=D)], AdamState.zeros_like([p]), lr=0.05)
    np.testing.assert_allclose(p.numpy(), [-0.05, 0.05, -0.05], rtol=1e-6)


def test_adam_two_step_recurrence():
    # g = 1 twice, lr = 0.1: m1 = 0.1, v1 = 0.001, m2 = 0.19, v2 = 0.001999,
    # both bias-corrected ratios equal 1, so theta drops by 0.1 per step
    p = torch.tensor([1.0], dtype=D)
    state = AdamState.zeros_like([p])
    adam_step([p], [torch.ones(1, dtype=D)], state, lr=0.1)
    assert state.m[0].item() == pytest.approx(0.1) and state.v[0].item() == pytest.approx(0.001)
    assert p.item() == pytest.approx(0.9, abs=1e-7)
    adam_step([p], [torch.ones(1, dtype=D)], state, lr=0.1)
    assert state.m[0].item() == pytest.approx(0.19) and state.v[0].item() == pytest.approx(0.001999)
    assert p.item() == pytest.approx(0.8, abs=1e-7)


def test_adam_shape_mismatch():
    p = torch.zeros(2)
    with pytest.raises(ValueError, match="shape"):
        adam_step([p], [torch.zeros(3)], AdamState.zeros_like([p]), lr=0.1)


# fit / evaluate

def micro_model(seed=0, num_classes=6, **kw):
    return build_model("hart", "tiny", dim=48, depth=2, heads=2, num_classes=num_classes, seed=seed, **kw)


def test_lr_zero_leaves_parameters():
    train = synthetic_windows(40, seed=1)
    model = micro_model()
    before = {k: v.clone() for k, v in model.state_dict().items() if "running" not in k}
    history, _ = fit(model, train, None, TrainConfig(epochs=2, lr=0.0, batch_size=16), 6)
    for k, v in before.items():
        assert torch.equal(model.state_dict()[k], v), k
    assert len(history.records) == 2


def test_steps_per_epoch_keep_partial_batch():
    train = synthetic_windows(45, seed=2)
    history, _ = fit(micro_model(), train, None, TrainConfig(epochs=1, batch_size=16), 6)
    assert history.records[0]["steps"] == 3


def test_fit_is_deterministic():
    train, dev = synthetic_windows(60, seed=3), synthetic_windows(30, seed=4)
    runs = []
    for _ in range(2):
        model = micro_model(seed=5)
        history, best = fit(model, train, dev, TrainConfig(epochs=2, batch_size=16, seed=9), 6)
        runs.append((history.records, {k: v.numpy().tobytes() for k, v in best.items()}))
    assert runs[0] == runs[1]


def test_fit_keeps_best_dev_epoch():
    train, dev = synthetic_windows(60, seed=3), synthetic_windows(30, seed=4)
    model = micro_model(seed=5)
    history, best = fit(model, train, dev, TrainConfig(epochs=3, batch_size=16), 6)
    scores = [r["dev_macro_f1"] for r in history.records]
    assert history.best_epoch == 1 + scores.index(max(scores))
    assert evaluate(model, dev, 6).macro_f1 == pytest.approx(max(scores))


def test_divergence_aborts_with_location():
    train = synthetic_windows(20, seed=6)
    train.data[3, 0, 0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 1, batch"):
        fit(micro_model(), train, None, TrainConfig(epochs=1, batch_size=8), 6)


def test_fit_rejects_empty_train_and_bad_config():
    with pytest.raises(ValueError, match="empty"):
        fit(micro_model(), WindowSet.empty(128, 6), None, TrainConfig(epochs=1), 6)
    for bad in ({"lr": -1.0}, {"batch_size": 0}, {"label_smoothing": 1.0}, {"epochs": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class Constant(torch.nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.tensor(logits)

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


def labelled(labels):
    n = len(labels)
    return WindowSet(np.zeros((n, 4, 6), np.float32), np.asarray(labels),
                     [Provenance("p", None, None, "r", i) for i in range(n)])


def test_evaluate_constant_predictor_and_ties():
    ws = labelled([0, 1, 0, 1])
    report = evaluate(Constant([0.0, 0.0]), ws, 2)  # tie -> class 0
    assert report.macro_f1 == pytest.approx(1 / 3)
    assert [sum(r) for r in report.confusion] == report.support == [2, 2]
    with pytest.raises(ValueError, match="empty"):
        evaluate(Constant([0.0, 0.0]), labelled([]), 2)


def test_evaluate_oracle_predictor():
    ws = labelled([0, 2, 1, 2])

    class Oracle(torch.nn.Module):
        def forward(self, x):
            return F.one_hot(torch.tensor(ws.labels), 3).float()

    assert evaluate(Oracle(), ws, 3).macro_f1 == 1.0
