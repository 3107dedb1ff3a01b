import numpy as np
import pytest

from gapkit.bnlayer import BatchNormParams, bn_forward
from gapkit.embstore import unit_rows
from gapkit.errors import ConfigError, DataError, TrainingDivergedError
from gapkit.gapmetrics import Severity, centroid_gap, classify_severity, gap_report
from gapkit.losses import LossKind
from gapkit import losses, trainer
from gapkit.synthetic import two_cluster_dataset
from gapkit.trainer import StepRecord, TrainerConfig, TrainLog, fit_running_stats, train_bn


@pytest.fixture(scope="module")
def small():
    return two_cluster_dataset(n=256, d=16, seed=4)


def test_single_full_batch_alpha_one_is_exact(small):
    cfg = TrainerConfig(batch_size=256, epochs=1, alpha=1.0)
    rs_x, rs_y = fit_running_stats(small, cfg)
    x = unit_rows(small.images.data)
    # the full batch is the sorted permutation of all rows, so the sum order is the same
    np.testing.assert_array_equal(rs_x.mean, x.mean(axis=0))
    np.testing.assert_allclose(rs_y.var, unit_rows(small.texts.data).var(axis=0), atol=1e-15)


def test_many_epochs_converge_to_column_stats(small):
    rs_x, _ = fit_running_stats(small, TrainerConfig(batch_size=256, epochs=80))
    x = unit_rows(small.images.data)
    np.testing.assert_allclose(rs_x.mean, x.mean(axis=0), rtol=0, atol=1e-3)
    np.testing.assert_allclose(rs_x.var, x.var(axis=0), rtol=0, atol=1e-3)


def test_minibatch_stats_settle_within_batch_noise(small):
    # with mini-batches the running mean keeps fluctuating; its spread is about
    # sqrt(alpha / (2 - alpha)) times the spread of a single batch mean
    rs_x, _ = fit_running_stats(small, TrainerConfig(epochs=60))
    x = unit_rows(small.images.data)
    batch_sd = x.std(axis=0) / np.sqrt(64) * np.sqrt((256 - 64) / 255)
    noise = np.sqrt(0.1 / 1.9) * batch_sd
    assert np.all(np.abs(rs_x.mean - x.mean(axis=0)) < 5 * noise)


def test_zero_learning_rate_keeps_identity(small):
    img, txt, log = train_bn(small, TrainerConfig(learning_rate=0.0, max_steps=15))
    for s in (img, txt):
        np.testing.assert_array_equal(s.params.weight, 1.0)
        np.testing.assert_array_equal(s.params.bias, 0.0)
    assert len(log.records) == 15


def test_zero_steps_is_pure_standardization(small):
    cfg = TrainerConfig(max_steps=0)
    img, txt, log = train_bn(small, cfg)
    rs_x, _ = fit_running_stats(small, cfg)
    x = unit_rows(small.images.data)
    np.testing.assert_array_equal(img.forward(x).data, bn_forward(x, rs_x, BatchNormParams.identity(16)).data)
    assert log.records == []


def test_training_is_deterministic(small):
    cfg = TrainerConfig(max_steps=20, probe_every=5)
    a = train_bn(small, cfg)
    b = train_bn(small, cfg)
    assert a[2].records == b[2].records
    for sa, sb in zip(a[:2], b[:2]):
        np.testing.assert_array_equal(sa.params.weight, sb.params.weight)
        np.testing.assert_array_equal(sa.params.bias, sb.params.bias)


def test_mcsie_with_duplicates_is_four_times_cyclip(small):
    base = dict(max_steps=12, learning_rate=1e-2)
    _, _, plain = train_bn(small, TrainerConfig(loss_kind=LossKind.CYCLIP, **base))
    _, _, four = train_bn(small, TrainerConfig(loss_kind=LossKind.MCSIE_CYCLIP, **base), aug=small)
    assert four.totals[0] == pytest.approx(4 * plain.totals[0], rel=1e-12)
    # Adam is scale-free up to its epsilon, so later steps agree to that order
    np.testing.assert_allclose(four.totals, 4 * plain.totals, rtol=1e-6)


def test_training_closes_severe_gap():
    ds = two_cluster_dataset(n=512, d=32, seed=6)
    assert gap_report(ds).severity is Severity.SEVERE
    img, txt, log = train_bn(ds, TrainerConfig(max_steps=300, probe_every=50))
    assert log.final_probe_cd < log.initial_probe_cd
    assert classify_severity(log.final_probe_cd) in (Severity.MODERATE, Severity.LOW)
    out = centroid_gap(img.forward(unit_rows(ds.images.data)).data, txt.forward(unit_rows(ds.texts.data)).data)
    assert out == pytest.approx(log.final_probe_cd, abs=1e-12)


def test_inputs_are_not_mutated(small):
    before = gap_report(small)
    img_copy, txt_copy = small.images.data.copy(), small.texts.data.copy()
    train_bn(small, TrainerConfig(max_steps=5))
    np.testing.assert_array_equal(small.images.data, img_copy)
    np.testing.assert_array_equal(small.texts.data, txt_copy)
    assert gap_report(small) == before


def test_probe_logged_every_k_steps_and_at_end(small):
    _, _, log = train_bn(small, TrainerConfig(max_steps=23, probe_every=10))
    probed = [r.step for r in log.records if r.probe_cd is not None]
    assert probed == [10, 20, 23]


def test_joint_stats_keep_updating(small):
    frozen = train_bn(small, TrainerConfig(max_steps=4))
    joint = train_bn(small, TrainerConfig(max_steps=4, joint_stats=True))
    assert joint[0].stats.t == frozen[0].stats.t + 4


def test_config_and_data_guards(small):
    with pytest.raises(ConfigError):
        TrainerConfig(forward_stats="sometimes")
    with pytest.raises(ConfigError):
        train_bn(small, TrainerConfig(loss_kind=LossKind.MCSIE_CLIP))
    with pytest.raises(DataError):
        train_bn(small.take(np.arange(10)), TrainerConfig())


def test_odd_batch_size_warns(caplog):
    with caplog.at_level("WARNING"):
        TrainerConfig(batch_size=100)
    assert "outside" in caplog.text


def test_divergence_reports_last_good_state(small, monkeypatch):
    real = losses.loss_and_grad_bn
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        value, grads = real(*args, **kwargs)
        if calls["n"] == 3:
            value = losses.LossValue(float("nan"), value.components, value.weights)
        return value, grads

    monkeypatch.setattr(trainer, "loss_and_grad_bn", flaky)
    with pytest.raises(TrainingDivergedError) as info:
        train_bn(small, TrainerConfig(max_steps=10))
    assert info.value.step == 3
    assert len(info.value.log.records) == 2


def test_log_rejects_out_of_order_steps(tmp_path):
    log = TrainLog(0.5)
    log.append(StepRecord(1, 2.0, {"clip": 2.0}))
    with pytest.raises(ValueError):
        log.append(StepRecord(1, 1.0, {}))
    log.write_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "step,total,clip,probe_cd"
