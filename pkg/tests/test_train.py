from dataclasses import replace

import numpy as np
import pytest

from kmae import tensor as T
from kmae.model import KMAE, ModelConfig, classification_logits, model_from_checkpoint, param_hash
from kmae.nn import ConfigError
from kmae.optim import OptimizerState, adam_step
from kmae.phantom import PhantomParams, make_cohort
from kmae.tensor import Tensor
from kmae.train import (
    KSpaceBank,
    NumericalError,
    TaskSpec,
    TrainConfig,
    bce_with_logits,
    cross_entropy,
    dice_score,
    evaluate,
    finetune,
    huber_loss,
    mean_frame_dice,
    metrics_from_predictions,
    predictions_from_arrays,
    predictions_to_arrays,
    pretrain,
    regression_target,
    robustness_sweep,
)

TINY = dict(T=2, S=1, embed_dim=16, heads=2, encoder_layers=1, decoder_layers=1, decoder_dim=8, decoder_heads=2)


@pytest.fixture(scope="module")
def cohort():
    return make_cohort(20, seed=4, base=replace(PhantomParams(), frames=2, slices=1))


@pytest.fixture(scope="module")
def reg_cohort():
    return make_cohort(20, regression_mode=True, seed=5, base=replace(PhantomParams(), frames=2, slices=1))


@pytest.fixture(scope="module")
def pretrained(cohort):
    ckpt, report = pretrain(cohort, ModelConfig(**TINY), TrainConfig(epochs=2, lr_peak=1e-3), KSpaceBank(cohort))
    return ckpt, report


def test_huber_at_zero_residual():
    x = Tensor(np.array([0.25, -3.0]), requires_grad=True)
    loss = huber_loss(x, np.array([0.25, -3.0]))
    loss.backward()
    assert float(loss.data) == 0.0
    np.testing.assert_array_equal(x.grad, 0.0)
    # quadratic inside delta, linear outside
    assert float(huber_loss(Tensor(np.array([0.5])), 0.0).data) == pytest.approx(0.125)
    assert float(huber_loss(Tensor(np.array([3.0])), 0.0).data) == pytest.approx(2.5)


def test_cross_entropy_and_bce_values():
    logits = Tensor(np.array([2.0, -1.0]))
    assert float(cross_entropy(logits, 0).data) == pytest.approx(np.log1p(np.exp(-3.0)))
    z = np.array([-30.0, 0.0, 2.0, 40.0])
    y = np.array([0.0, 1.0, 1.0, 0.0])
    ref = np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0) - z * y)
    assert float(bce_with_logits(Tensor(z), y).data) == pytest.approx(ref)


def test_dice_conventions():
    g = np.zeros((4, 4), bool)
    assert dice_score(g, g) == 1.0
    g[1:3, 1:3] = True
    assert dice_score(g, g) == 1.0
    assert dice_score(np.zeros_like(g), g) == 0.0
    p = np.zeros_like(g)
    p[1:3, 1:2] = True
    assert dice_score(p, g) == pytest.approx(2 * 2 / (2 + 4))
    prob = np.stack([g * 0.9, np.zeros((4, 4))])
    assert mean_frame_dice(prob, np.stack([g, np.zeros_like(g)])) == 1.0


def test_perfect_predictions_metrics():
    assert metrics_from_predictions({"pred": np.array([1.0, 2.0]), "truth": np.array([1.0, 2.0])}, "regress_ef")["mae"] == 0
    prob = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert metrics_from_predictions({"prob": prob, "truth": np.array([0.0, 1.0])}, "classify")["accuracy"] == 1.0
    truth = np.zeros((1, 2, 4, 4), np.uint8)
    truth[0, :, 1:3, 1:3] = 1
    m = metrics_from_predictions({"prob": truth.astype(float), "truth": truth, "dc_exact": np.ones(1, np.uint8)}, "segment")
    assert m["dice_mean"] == 1.0 and m["dc_exact"]


def test_constant_mean_regressor_mae(reg_cohort):
    idx = reg_cohort.splits["test"]
    truth = np.array([regression_target(reg_cohort, i, "regress_ef") for i in idx])
    mean = truth.mean()
    m = metrics_from_predictions({"pred": np.full_like(truth, mean), "truth": truth}, "regress_ef")
    mad = sum(abs(t - mean) for t in truth.tolist()) / len(truth)
    assert m["mae"] == pytest.approx(mad, abs=1e-12)


def test_toy_separable_classification_within_200_steps():
    rng = np.random.default_rng(0)
    d = 16
    w_true = rng.standard_normal(d)
    feats = rng.standard_normal((200, 4, d))
    score = feats.mean(axis=1) @ w_true
    # keep a margin so a linear head can separate every point
    feats = feats[np.abs(score) > 0.5][:40]
    labels = (feats.mean(axis=1) @ w_true > 0).astype(int)
    n = len(feats)
    model = KMAE(ModelConfig(**TINY, dtype="float64"))
    params = {"w": model.cls_head.weight, "b": model.cls_head.bias}
    state = OptimizerState.for_params(params)
    for step in range(200):
        i = step % n
        for p in params.values():
            p.grad = None
        cross_entropy(classification_logits(model, Tensor(feats[i])), labels[i]).backward()
        adam_step(params, {k: p.grad for k, p in params.items()}, state, 0.05)
    with T.no_grad():
        pred = [int(np.argmax(classification_logits(model, Tensor(f)).data)) for f in feats]
    assert np.mean(np.array(pred) == labels) == 1.0


def test_pretrain_improves_and_is_deterministic(cohort, pretrained):
    ckpt, report = pretrained
    curve = np.asarray(report.curve)
    assert curve[-5:].mean() < curve[:5].mean()
    again, rep2 = pretrain(cohort, ModelConfig(**TINY), TrainConfig(epochs=2, lr_peak=1e-3), KSpaceBank(cohort))
    np.testing.assert_allclose(rep2.curve, report.curve, atol=1e-6)
    assert param_hash(again.params) == param_hash(ckpt.params)
    assert report.meta["epochs"][0]["val_psnr"] == rep2.meta["epochs"][0]["val_psnr"]


def test_lr_zero_changes_nothing(cohort):
    bank = KSpaceBank(cohort)
    ckpt, report = pretrain(cohort, ModelConfig(**TINY), TrainConfig(epochs=1, lr_peak=0.0), bank)
    init = KMAE(ModelConfig(**TINY)).param_dict()
    assert all(np.array_equal(init[n].data, ckpt.params[n]) for n in init)
    untrained = evaluate(ckpt, cohort, "val", (4,), bank)[0].per_R[4.0]["psnr_mean"]
    assert report.metrics["psnr_mean"] == pytest.approx(untrained, abs=1e-6)


def test_frozen_encoder_is_bit_identical(cohort, pretrained):
    ckpt, _ = pretrained
    out, _ = finetune(ckpt, cohort, TaskSpec("classify", epochs=1, freeze_encoder=True), KSpaceBank(cohort))
    names = model_from_checkpoint(ckpt).encoder_param_names()
    assert all(np.array_equal(out.params[n], ckpt.params[n]) for n in names)
    assert out.meta["encoder_hash"] == ckpt.meta["encoder_hash"]
    unfrozen, _ = finetune(ckpt, cohort, TaskSpec("classify", epochs=1, freeze_encoder=False), KSpaceBank(cohort))
    assert unfrozen.meta["encoder_hash"] != ckpt.meta["encoder_hash"]


def test_task_validation(cohort, reg_cohort, pretrained):
    ckpt, _ = pretrained
    with pytest.raises(ConfigError):
        TaskSpec("translate")
    with pytest.raises(ConfigError):
        TaskSpec("classify", batch_size=0)
    with pytest.raises(ConfigError):
        TaskSpec("segment", arch="cnn")
    with pytest.raises(ConfigError):
        finetune(ckpt, reg_cohort, TaskSpec("segment", epochs=1))
    with pytest.raises(ConfigError):
        finetune(None, cohort, TaskSpec("classify", epochs=1))
    other = make_cohort(20, seed=1, base=replace(PhantomParams(), frames=4, slices=1))
    with pytest.raises(ConfigError):
        finetune(ckpt, other, TaskSpec("classify", epochs=1))


def test_non_finite_loss_aborts(cohort):
    with pytest.raises(NumericalError) as info:
        pretrain(cohort, ModelConfig(**TINY), TrainConfig(epochs=1, lr_peak=1e30), KSpaceBank(cohort))
    ctx = info.value.context
    assert {"epoch", "step", "subject", "slice", "mask_seed", "loss"} <= set(ctx)


@pytest.mark.parametrize("task", ["regress_ef", "segment"])
def test_evaluate_report_recomputes_from_predictions(task, cohort, reg_cohort, pretrained):
    ckpt, _ = pretrained
    data = reg_cohort if task.startswith("regress") else cohort
    bank = KSpaceBank(data)
    out, _ = finetune(ckpt, data, TaskSpec(task, epochs=1), bank)
    rows, report, arrays = robustness_sweep(out, data, bank)
    stored = predictions_from_arrays(predictions_to_arrays(arrays))
    for R, preds in stored.items():
        fresh = metrics_from_predictions(preds, task)
        for k, v in fresh.items():
            assert abs(float(v) - float(report.per_R[R][k])) <= 1e-9
    assert rows[0]["R"] == 1.0 and all(v == 0 for k, v in rows[0].items() if k.startswith("delta_"))
    r1 = evaluate(out, data, "test", (1,), bank, offset=1000)[0]
    assert r1.per_R[1.0] == report.per_R[1.0]
    if task == "segment":
        assert all(bool(report.per_R[R]["dc_exact"]) for R in report.per_R)
        assert all(0 <= report.per_R[R]["dice_mean"] <= 1 for R in report.per_R)
    else:
        assert all(report.per_R[R]["mae"] >= 0 for R in report.per_R)


def test_cnn_baseline_runs_classification(cohort):
    out, report = finetune(None, cohort, TaskSpec("classify", arch="cnn", epochs=1), KSpaceBank(cohort))
    assert out.arch == "cnn"
    r = evaluate(out, cohort, "test", (1, 4), KSpaceBank(cohort))[0]
    assert 0 <= r.per_R[4.0]["accuracy"] <= 1
