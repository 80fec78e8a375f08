import json

import numpy as np
import pytest

from volseg.metrics import confusion_counts
from volseg.phantom import generate_phantoms
from volseg.tensor import Tensor
from volseg.training import (
    AdamState, Dataset, NumericError, TrainConfig, adam_step, evaluate_split, read_history, train, write_history,
)
from volseg.unet import UNetConfig, build_unet
from volseg.volume import Mask, Volume, fuse_masks, zscore_normalize

from oracles import counts_ref


def test_adam_zero_gradient_is_a_fixpoint():
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]))}
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(3)}, state)
    assert p["w"].data.tolist() == [1.0, -2.0, 3.0]
    assert np.all(state.m["w"] == 0) and np.all(state.v["w"] == 0)
    assert state.step_count == 5


def test_adam_first_step_by_hand():
    # m_hat = 1, v_hat = 1 -> step = -lr * 1 / (1 + 1e-8)
    p = {"w": Tensor(np.array([0.0]))}
    adam_step(p, {"w": np.array([1.0])}, AdamState(lr=0.01))
    assert abs(p["w"].data[0] + 0.01) < 1e-6


def test_adam_rejects_non_finite_without_side_effects():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    state = AdamState()
    with pytest.raises(NumericError, match="b"):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state)
    assert state.step_count == 0 and p["a"].data.tolist() == [1.0, 1.0]


def test_adam_deterministic(rng):
    grads = [rng.normal(size=4) for _ in range(10)]

    def run():
        p = {"w": Tensor(np.zeros(4, np.float32))}
        s = AdamState()
        for g in grads:
            adam_step(p, {"w": g.astype(np.float32)}, s)
        return p["w"].data.tobytes()

    assert run() == run()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(threshold=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2)


def _dataset(spec, split="train"):
    return Dataset([(zscore_normalize(v), fuse_masks(l, r)) for v, l, r in generate_phantoms(spec)], split)


def test_overfit_single_sample(small_spec):
    ds = _dataset(small_spec)
    model = build_unet(UNetConfig.preset("desk"), seed=0)
    _, hist = train(model, ds, None, TrainConfig(epochs=100, lr=1e-2))
    assert len(hist) == 100
    assert hist[-1].loss < hist[0].loss / 10


def test_training_is_deterministic(small_spec, tmp_path):
    from dataclasses import replace
    spec = replace(small_spec, count=2)

    def run(tag):
        model = build_unet(UNetConfig.preset("desk"), seed=1)
        _, hist = train(model, _dataset(spec), _dataset(spec, "test"), TrainConfig(epochs=2))
        write_history(hist, tmp_path / f"{tag}.jsonl")
        return model, hist

    m1, h1 = run("a")
    m2, h2 = run("b")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()
    assert read_history(tmp_path / "a.jsonl") == h1
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"epoch", "loss", "train_iou", "test_iou"}


def test_train_rejects_incompatible_shapes():
    ds = Dataset([(Volume(np.zeros((6, 8, 8))), Mask(np.zeros((6, 8, 8))))])
    with pytest.raises(ValueError, match="axis D"):
        train(build_unet(UNetConfig.preset("desk")), ds, None, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(build_unet(UNetConfig.preset("desk")), Dataset([]), None, TrainConfig(epochs=1))


def test_train_reports_non_finite_loss(small_spec):
    ds = _dataset(small_spec)
    model = build_unet(UNetConfig.preset("desk"), seed=0)
    model.params["head.bias"].data[...] = np.nan
    with pytest.raises(NumericError, match="epoch 1, sample 0"):
        train(model, ds, None, TrainConfig(epochs=1))


def test_dataset_dim_check():
    with pytest.raises(ValueError):
        Dataset([(Volume(np.zeros((2, 2, 2))), Mask(np.zeros((2, 2, 4))))])


class FixedPredictor:
    def __init__(self, outputs):
        self.outputs = iter(outputs)

    def predict_proba(self, _volume):
        return next(self.outputs)


def test_evaluate_split_perfect_and_empty(rng):
    masks = [Mask((rng.random((4, 4, 4)) < 0.3).astype(np.uint8)) for _ in range(3)]
    ds = Dataset([(Volume(np.zeros((4, 4, 4))), m) for m in masks])
    iou, reports = evaluate_split(FixedPredictor([m.data.astype(float) for m in masks]), ds)
    assert iou == 1.0 and len(reports) == 3
    iou, _ = evaluate_split(FixedPredictor([np.zeros((4, 4, 4))] * 3), ds)
    assert iou == 0.0


def test_evaluate_split_matches_voxel_counts(rng):
    gts = [(rng.random((4, 4, 4)) < 0.4) for _ in range(3)]
    probs = [rng.random((4, 4, 4)) for _ in range(3)]
    ds = Dataset([(Volume(np.zeros((4, 4, 4))), Mask(g.astype(np.uint8))) for g in gts])
    iou, _ = evaluate_split(FixedPredictor(probs), ds, threshold=0.5)
    expected = []
    for p, g in zip(probs, gts):
        tp, fp, fn, _ = counts_ref(p >= 0.5, g)
        expected.append(tp / (tp + fp + fn))
    assert iou == pytest.approx(np.mean(expected), abs=1e-12)
