import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from octseg.data import MaskVolume, Volume
from octseg.evaluate import (
    ConfigurationError,
    ConfusionCounts,
    VolumeMetrics,
    benchmark_inference,
    binarize,
    confusion_counts,
    evaluate_set,
    evaluate_volume,
    format_table,
    metrics_from_counts,
    predict_volume,
    report_from_volumes,
)
from octseg.model import init_model
from octseg.preprocess import TransformSpec

SMALL_T = TransformSpec(target_width=64, crop_height=32, crop_width=64)


def loop_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def test_binarize_strict():
    assert binarize(np.array([0.49, 0.5, 0.51]), 0.5).tolist() == [0, 0, 1]
    assert not binarize(np.zeros((4, 4))).any()
    assert not binarize(np.ones((4, 4)), 1.0).any()
    assert binarize(torch.tensor([0.7]), 0.5).tolist() == [1]


@pytest.mark.parametrize("tau", [-0.1, 1.01])
def test_binarize_bad_threshold(tau):
    with pytest.raises(ConfigurationError):
        binarize(np.zeros(3), tau)


def test_counts_small_cases():
    gt = np.zeros((4, 4), np.uint8)
    gt[1, 1:3] = 1
    assert confusion_counts(gt, gt) == ConfusionCounts(2, 0, 0, 14)
    a = np.zeros((4, 4), np.uint8)
    b = np.zeros((4, 4), np.uint8)
    a[0, 0] = 1
    b[3, 3] = 1
    assert confusion_counts(a, b) == ConfusionCounts(0, 1, 1, 14)
    with pytest.raises(ValueError):
        confusion_counts(a, np.zeros((4, 5)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_counts_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 2, (2, 16, 16))
    assert confusion_counts(pred, gt) == loop_counts(pred, gt)


def test_metric_cases():
    assert metrics_from_counts(ConfusionCounts(1, 1, 1, 0)) == (0.5, 0.5, 0.5)
    assert metrics_from_counts(ConfusionCounts(5, 0, 0, 3)) == (1.0, 1.0, 1.0)
    assert metrics_from_counts(ConfusionCounts(0, 0, 0, 9)) == (1.0, 1.0, 1.0)
    assert metrics_from_counts(ConfusionCounts(0, 3, 0, 9)) == (0.0, 0.0, 0.0)
    assert metrics_from_counts(ConfusionCounts(0, 0, 2, 9)) == (0.0, 0.0, 0.0)
    assert metrics_from_counts(ConfusionCounts(0, 2, 2, 9))[1:] == (0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.integers(0, 500), st.integers(0, 500))
def test_dsc_is_harmonic_mean(tp, fp, fn):
    dsc, p, r = metrics_from_counts(ConfusionCounts(tp, fp, fn, 0))
    assert dsc == pytest.approx(2 * p * r / (p + r), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_self_comparison_is_perfect(seed):
    x = np.random.default_rng(seed).integers(0, 2, (8, 8)) * np.random.default_rng(seed).integers(0, 2)
    assert metrics_from_counts(confusion_counts(x, x)) == (1.0, 1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adding_true_positive_never_lowers_dsc(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 2, (2, 8, 8))
    missed = np.argwhere((pred == 0) & (gt == 1))
    if len(missed) == 0:
        return
    better = pred.copy()
    better[tuple(missed[0])] = 1
    assert metrics_from_counts(confusion_counts(better, gt))[0] >= metrics_from_counts(confusion_counts(pred, gt))[0]


class ConstantModel(torch.nn.Module):
    """Emits fixed per-slice logits keyed by call order; exposes the attributes the evaluator reads."""

    def __init__(self, preds, config):
        super().__init__()
        self.config = config
        self.preds = [torch.from_numpy(np.where(p > 0, 10.0, -10.0)).float() for p in preds]
        self.dummy = torch.nn.Parameter(torch.zeros(1))
        self.i = 0

    def forward(self, x):
        out = torch.stack(self.preds[self.i:self.i + len(x)])[:, None]
        self.i += len(x)
        return out


def _toy_volume(labels_pred, labels_gt, vid="toy"):
    s, h, w = labels_gt.shape
    vol = Volume(vid, np.zeros((s, h, w), np.float32), h, w)
    return vol, MaskVolume(vid, labels_gt.astype(np.uint8))


def test_pooled_not_averaged(tiny_config):
    t = TransformSpec(target_width=32, crop_height=32, crop_width=32)
    gt = np.zeros((2, 32, 32), np.uint8)
    pred = np.zeros_like(gt)
    # slice 0: 8 gt pixels all found; slice 1: 2 gt pixels, 0 found, 2 false positives
    gt[0, 0, :8] = 1
    pred[0, 0, :8] = 1
    gt[1, 5, :2] = 1
    pred[1, 9, :2] = 1
    vol, mask = _toy_volume(pred, gt)
    m = evaluate_volume(ConstantModel(pred, tiny_config), vol, mask, t)
    # pooled: tp 8, fp 2, fn 2 -> 16 / 20
    assert m.dsc == pytest.approx(0.8, abs=1e-15)
    per_slice = np.mean([1.0, 0.0])
    assert m.dsc != per_slice
    # slice order does not matter
    m2 = evaluate_volume(ConstantModel(pred[::-1], tiny_config), *_toy_volume(pred[::-1], gt[::-1]), t)
    assert (m2.dsc, m2.precision, m2.recall) == (m.dsc, m.precision, m.recall)
    assert m.seconds_per_slice * m.slice_count == pytest.approx(m.seconds_total, rel=1e-12)


def test_perfect_model_scores_one(small_pairs, oracle_model):
    model = oracle_model(small_pairs)
    for n in (1, 4):
        vol, mask = small_pairs[0]
        sub = Volume(vol.id, vol.slices[:n], vol.native_height, vol.native_width)
        m = evaluate_volume(model, sub, MaskVolume(vol.id, mask.labels[:n]), SMALL_T)
        assert m.dsc == 1.0


def test_set_means(tiny_config):
    per = [VolumeMetrics("a", 1.0, 1.0, 1.0), VolumeMetrics("b", 0.5, 0.25, 1.0), VolumeMetrics("c", 0.0, 0.0, 0.0)]
    rep = report_from_volumes(per)
    assert (rep.mean_dsc, rep.mean_precision, rep.mean_recall) == (0.5, 1.25 / 3, 2 / 3)
    with pytest.raises(ConfigurationError):
        report_from_volumes([])


def test_evaluate_set_and_serialized_recompute(small_pairs, small_config, tmp_path):
    model = init_model(small_config, 0)
    rep = evaluate_set(model, small_pairs, SMALL_T, checkpoint_ref="x.ckpt")
    single = evaluate_set(model, small_pairs[:1], SMALL_T)
    assert single.mean_dsc == single.per_volume[0].dsc
    rep.save(tmp_path / "metrics.json")
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert data["mean_dsc"] == pytest.approx(np.mean([v["dsc"] for v in data["per_volume"]]), abs=1e-15)
    assert data["mean_recall"] == pytest.approx(np.mean([v["recall"] for v in data["per_volume"]]), abs=1e-15)
    for key in ("loss_config_id", "mean_precision", "timing_scope"):
        assert key in data
    assert set(data["per_volume"][0]) >= {"volume_id", "dsc", "precision", "recall", "seconds_total",
                                          "seconds_per_slice"}
    with pytest.raises(ConfigurationError):
        evaluate_set(model, [], SMALL_T)


def test_evaluate_volume_shape_mismatch(small_pairs, small_config):
    vol, mask = small_pairs[0]
    with pytest.raises(ValueError):
        evaluate_volume(init_model(small_config), vol, MaskVolume(vol.id, mask.labels[:2]), SMALL_T)


def test_predict_volume_threshold_one_is_empty(small_pairs, small_config):
    preds, _ = predict_volume(init_model(small_config), small_pairs[0][0], SMALL_T, threshold=1.0)
    assert preds.shape == (4, 32, 64) and not preds.any()


def test_predict_volume_batch_size_irrelevant(small_pairs, small_config):
    model = init_model(small_config, 2)
    a, ca = predict_volume(model, small_pairs[0][0], SMALL_T, 0.5, 1, small_pairs[0][1])
    b, cb = predict_volume(model, small_pairs[0][0], SMALL_T, 0.5, 16, small_pairs[0][1])
    assert np.array_equal(a, b) and ca == cb


def _vol(n, h=64, w=128, seed=0):
    rng = np.random.default_rng(seed)
    return Volume("bench", rng.random((n, h, w)).astype(np.float32), h, w)


def test_benchmark_summary(small_config):
    t = TransformSpec(target_width=128, crop_height=64, crop_width=128)
    out = benchmark_inference(init_model(small_config), _vol(4), t, repeats=3)
    assert len(out["samples_seconds_total"]) == 3
    s = out["seconds_total"]
    assert s["min"] <= s["mean"] <= s["max"]
    assert out["seconds_per_slice"]["mean"] * 4 == pytest.approx(s["mean"], rel=1e-12)
    with pytest.raises(ConfigurationError):
        benchmark_inference(init_model(small_config), _vol(4), t, repeats=0)


def test_benchmark_scales_with_slices(small_config):
    t = TransformSpec(target_width=128, crop_height=64, crop_width=128)
    model = init_model(small_config)
    one = benchmark_inference(model, _vol(16), t, repeats=5, batch_size=16)["seconds_total"]["min"]
    two = benchmark_inference(model, _vol(32), t, repeats=5, batch_size=16)["seconds_total"]["min"]
    assert 2 * 0.7 <= two / one <= 2 * 1.3


def test_format_table(small_pairs, small_config):
    rep = evaluate_set(init_model(small_config), small_pairs[:1], SMALL_T)
    text = format_table([(4, rep)], with_time=True)
    lines = text.splitlines()
    assert "DSC" in lines[0] and "Inference" in lines[0]
    assert lines[2].split("|")[0].strip() == "4"
