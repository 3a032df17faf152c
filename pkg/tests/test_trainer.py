import numpy as np
import pytest

from ma2t import trainer as tr
from ma2t.driving import DatasetConfig, build_dataset
from ma2t.errors import ContractError, NumericError
from ma2t.pipeline import SITE_IDS
from ma2t.trainer import Checkpoint, TrainConfig


@pytest.fixture(scope="module")
def tiny():
    return build_dataset(DatasetConfig(seed=11, n_scenarios=48))


def test_config_defaults_and_validation():
    assert TrainConfig().learning_rate == 1e-3
    assert TrainConfig("ma2t").learning_rate == 1e-4
    assert TrainConfig("fat").attack.method == "fgsm"
    assert TrainConfig("pgd_l2").attack.budgets == {"Images": pytest.approx(0.2 * 1024)}
    for bad in [dict(method="x"), dict(epochs=-1), dict(learning_rate=0.0), dict(frozen=("Nope",)),
                dict(method="pgd_linf", attack={"budgets": {"MotionPlan": 0.1}})]:
        with pytest.raises(ContractError):
            TrainConfig(**bad)


def test_zero_budget_ma2t_equals_clean_finetune(pretrained, tiny):
    train, _ = tiny
    zero = {"method": "pgd", "budgets": {s: 0.0 for s in SITE_IDS}}
    a = tr.finetune(pretrained, train, TrainConfig("ma2t", epochs=1, attack=zero, dwaa_enabled=False))
    b = tr.finetune(pretrained, train, TrainConfig("clean", epochs=1, learning_rate=1e-4))
    for k in a.checkpoint.params:
        assert a.checkpoint.params[k].tobytes() == b.checkpoint.params[k].tobytes()


def test_frozen_modules_do_not_move(pretrained, tiny):
    train, _ = tiny
    res = tr.finetune(pretrained, train, TrainConfig("clean", epochs=1, frozen=("Track", "Map")))
    for k, v in res.checkpoint.params.items():
        same = np.array_equal(v, pretrained.params[k])
        assert same == (k.startswith("Track.") or k.startswith("Map.")), k


def test_training_is_deterministic(tiny):
    train, _ = tiny
    cfg = TrainConfig("clean", epochs=1, seed=4)
    a = tr.pretrain_clean(train, cfg).checkpoint
    b = tr.pretrain_clean(train, cfg).checkpoint
    assert a.content_hash() == b.content_hash()
    assert tr.pretrain_clean(train, TrainConfig("clean", epochs=1, seed=5)).checkpoint.content_hash() \
        != a.content_hash()


def test_checkpoint_round_trip(tmp_path, pretrained):
    pretrained.save(tmp_path / "c.ckpt")
    back = Checkpoint.load(tmp_path / "c.ckpt")
    assert back.to_bytes() == pretrained.to_bytes()
    assert back.to_pipeline().checksum() == pretrained.to_pipeline().checksum()
    raw = pretrained.to_bytes()
    with pytest.raises(ContractError):
        Checkpoint.from_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ContractError):
        Checkpoint.from_bytes(raw[:8] + np.array([99], "<u4").tobytes() + raw[12:])
    with pytest.raises(ContractError):
        Checkpoint({}, arch="other").to_pipeline()


def test_ma2t_records_dwaa_updates(pretrained, tiny):
    train, _ = tiny
    cfg = TrainConfig("ma2t", epochs=2, batch_size=8, update_period=2,
                      attack={"restarts": 1, "steps": 1})
    res = tr.finetune_ma2t(pretrained, train, cfg)
    # 5 batches per epoch, 10 batches, 5 window boundaries, 4 updates after warm-up
    assert len(res.batch_log) == 10 and res.dwaa.t == 4
    assert np.isclose(res.dwaa.W.sum(), 5.0)
    assert res.checkpoint.dwaa["t"] == 4 and res.checkpoint.method == "ma2t"
    assert res.checkpoint.epoch == pretrained.epoch + 2


def test_baselines_train(pretrained, tiny):
    train, _ = tiny
    for method in tr.BASELINES:
        cfg = TrainConfig(method, epochs=1, batch_size=20, attack=None)
        cfg.attack = cfg.attack.replace(restarts=1, steps=1 if method == "fat" else 2)
        res = tr.finetune_baseline(pretrained, train, cfg)
        assert res.dwaa is None and res.checkpoint.method == method
        assert any(not np.array_equal(v, pretrained.params[k]) for k, v in res.checkpoint.params.items())
    with pytest.raises(ContractError):
        tr.finetune_baseline(pretrained, train, TrainConfig("ma2t"))


def test_nonfinite_data_aborts_with_last_good(tiny):
    train, _ = tiny
    bad = train.subset(np.arange(len(train)))
    bad.observations = bad.observations.copy()
    bad.observations[:] = np.nan
    with pytest.raises(NumericError) as info:
        tr.pretrain_clean(bad, TrainConfig("clean", epochs=1))
    assert isinstance(info.value, tr.TrainingAborted) and info.value.checkpoint is not None


def test_log_emit_and_validation_loss(tmp_path, tiny, pretrained):
    train, val = tiny
    res = tr.pretrain_clean(train, TrainConfig("clean", epochs=1))
    run = tr.train_log_emit(res, tmp_path)
    assert {p.name for p in run.iterdir()} == {"batches.csv", "checkpoint.ckpt", "config.json"}
    assert len((run / "batches.csv").read_text().splitlines()) == len(res.batch_log) + 1
    with pytest.raises(FileExistsError):
        tr.train_log_emit(res, tmp_path)
    tr.train_log_emit(res, tmp_path, force=True)
    assert np.isfinite(tr.validation_loss(res.checkpoint, val))
