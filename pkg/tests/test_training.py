import csv

import numpy as np
import pytest

from hotline_ser.fusion_model import FusionModel
from hotline_ser.numerics import load_checkpoint
from hotline_ser.training import (
    DataError, Dataset, EvalReport, NumericalError, TrainConfig, confusion_matrix, cross_validate, encode_label,
    evaluate, load_feature_cache, make_split, metrics_from_confusion, save_feature_cache, train,
)

from tiny import FRAMES, WAVE_LEN, tiny_config


def tiny_dataset(n=8, seed=0, n_subjects=4) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    wave = (0.3 * rng.normal(size=(n, WAVE_LEN))).astype(np.float32)
    wave += (labels[:, None] * 0.5).astype(np.float32)   # separable offset
    return Dataset(wave=wave, mfcc=rng.normal(size=(n, FRAMES, 39)).astype(np.float32),
                   pitch=rng.normal(size=(n, FRAMES, 1)).astype(np.float32), labels=labels,
                   subjects=np.array([f"s{i % n_subjects}" for i in range(n)]), ids=[f"x{i}" for i in range(n)])


# -- splits ------------------------------------------------------------------------
def test_split_105_subjects():
    plan = make_split([f"p{i}" for i in range(105)], n_folds=5)
    assert len(plan.train_subjects) == 84 and len(plan.test_subjects) == 21
    assert not set(plan.train_subjects) & set(plan.test_subjects)
    sizes = [len(v) for _, v in plan.folds]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 84
    for tr, va in plan.folds:
        assert set(tr) | set(va) == set(plan.train_subjects) and not set(tr) & set(va)


def test_split_10_subjects():
    plan = make_split([f"p{i}" for i in range(10)], n_folds=0)
    assert len(plan.train_subjects) == 8 and len(plan.test_subjects) == 2 and plan.folds is None


def test_split_deterministic_and_seeded():
    subj = [f"p{i}" for i in range(30)]
    assert make_split(subj, seed=3) == make_split(list(reversed(subj)), seed=3)
    assert make_split(subj, seed=3).test_subjects != make_split(subj, seed=4).test_subjects


def test_split_val_subjects_come_from_train():
    plan = make_split([f"p{i}" for i in range(20)], n_folds=0, val_subjects=2)
    assert len(plan.val_subjects) == 2 and len(plan.train_subjects) == 14 and len(plan.test_subjects) == 4
    assert plan.side(plan.val_subjects[0]) == "val"


def test_split_too_few_subjects():
    with pytest.raises(DataError):
        make_split(["a", "b", "c", "d"])


def test_split_duplicates_are_one_subject():
    plan = make_split(["a", "a", "b", "c", "d", "e"], n_folds=0)
    assert len(plan.train_subjects) + len(plan.test_subjects) == 5


# -- metrics -------------------------------------------------------------------------
def test_metric_oracle_binary():
    # rows true, columns predicted; class 1 is the detected class
    m = metrics_from_confusion([[5, 1], [1, 3]])
    assert m["precision"] == 0.75 and m["recall"] == 0.75 and m["f1"] == 0.75
    assert m["accuracy"] == 0.8


def test_metric_ua_wa():
    # class recalls 1.0 (support 10) and 0.5 (support 30)
    m = metrics_from_confusion([[10, 0], [15, 15]])
    assert m["ua"] == pytest.approx(0.75) and m["wa"] == pytest.approx(0.625)
    assert m["wa"] == pytest.approx(m["accuracy"])


def test_metric_perfect():
    m = metrics_from_confusion([[7, 0], [0, 9]])
    assert all(m[k] == 1.0 for k in ("accuracy", "precision", "recall", "f1", "ua", "wa", "weighted_f1"))


def test_metric_no_predicted_positive():
    m = metrics_from_confusion([[5, 0], [3, 0]])
    assert m["precision"] == 0.0 and m["f1"] == 0.0


def test_report_recomputes_bitwise():
    rng = np.random.default_rng(0)
    y, p = rng.integers(2, size=50), rng.integers(2, size=50)
    cm = confusion_matrix(y, p)
    assert cm[1, 0] == np.sum((y == 1) & (p == 0))
    rep = EvalReport.from_confusion(cm)
    again = EvalReport.from_confusion(rep.confusion)
    assert rep.to_json() == again.to_json()
    assert rep.to_json()["class_names"] == ["non_negative", "negative"]


def test_empty_confusion_rejected():
    with pytest.raises(DataError):
        metrics_from_confusion([[0, 0], [0, 0]])


def test_label_encoding():
    assert encode_label("negative") == 1 and encode_label("non_negative") == 0
    with pytest.raises(DataError):
        encode_label("angry")


# -- training -------------------------------------------------------------------------
def test_zero_lr_leaves_parameters_unchanged():
    model = FusionModel(tiny_config(), seed=0)
    before = {k: v.data.copy() for k, v in model.parameters().items()}
    train(model, tiny_dataset(), TrainConfig(lr=0.0, epochs=1, batch_size=4))
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(v.data, before[k], err_msg=k)


def test_single_example_memorized():
    data = tiny_dataset(n=1)
    res = train(FusionModel(tiny_config(), seed=0), data, TrainConfig(lr=3e-2, epochs=50, batch_size=1))
    assert res.history[-1].train_loss < 0.01
    assert res.history[-1].train_loss < res.history[0].train_loss


def test_epoch_loss_bit_identical_across_runs():
    def run():
        return train(FusionModel(tiny_config(dropout=0.2), seed=1), tiny_dataset(),
                     TrainConfig(lr=1e-3, epochs=2, batch_size=3, seed=5)).history
    a, b = run(), run()
    assert [r.train_loss for r in a] == [r.train_loss for r in b]


def test_empty_dataset_errors():
    with pytest.raises(DataError):
        train(FusionModel(tiny_config(), seed=0), tiny_dataset().subset([]), TrainConfig(epochs=1))
    with pytest.raises(DataError):
        evaluate(FusionModel(tiny_config(), seed=0), tiny_dataset().subset([]))


def test_nan_input_raises_numerical_error():
    data = tiny_dataset()
    data.wave[0, 5] = np.nan
    with pytest.raises(NumericalError):
        train(FusionModel(tiny_config(), seed=0), data, TrainConfig(epochs=1, batch_size=8))


def test_best_validation_epoch_restored_and_logged(tmp_path):
    data = tiny_dataset(n=8)
    res = train(FusionModel(tiny_config(), seed=0), data, TrainConfig(lr=1e-2, epochs=4, batch_size=4),
                val=data, log_path=tmp_path / "log.csv", checkpoint_path=tmp_path / "ck.bin", meta={"seed": 0})
    f1s = [r.val_f1 for r in res.history]
    assert res.best_epoch == 1 + int(np.argmax(f1s)) and res.best_val_f1 == max(f1s)
    assert evaluate(res.model, data).f1 == res.best_val_f1
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert len(rows) == len(res.history) and float(rows[0]["train_loss"]) == res.history[0].train_loss
    _, meta = load_checkpoint(tmp_path / "ck.bin")
    assert meta["best_epoch"] == res.best_epoch and meta["seed"] == 0


def test_target_f1_stops_early():
    data = tiny_dataset(n=8)
    res = train(FusionModel(tiny_config(), seed=0), data,
                TrainConfig(lr=1e-2, epochs=30, batch_size=4, target_val_f1=0.0), val=data)
    assert len(res.history) == 1


def test_cross_validate_runs_per_fold():
    data = tiny_dataset(n=12, n_subjects=6)
    plan = make_split([f"s{i}" for i in range(6)], n_folds=2)
    reps = cross_validate(lambda: FusionModel(tiny_config(), seed=0), data, plan, TrainConfig(epochs=1, batch_size=4))
    assert len(reps) == 2 and all(r.n > 0 for r in reps)


def test_feature_cache_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mfcc, pitch = rng.normal(size=(3, 5, 39)).astype(np.float32), rng.normal(size=(3, 5, 1)).astype(np.float32)
    save_feature_cache(tmp_path / "c.bin", ["a", "b", "c"], mfcc, pitch)
    m2, p2 = load_feature_cache(tmp_path / "c.bin", ["a", "b", "c"])
    np.testing.assert_array_equal(m2, mfcc)
    np.testing.assert_array_equal(p2, pitch)
    with pytest.raises(DataError):
        load_feature_cache(tmp_path / "c.bin", ["a", "b"])
