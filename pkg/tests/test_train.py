import csv
import sys

import numpy as np
import pytest

from titn.augment import AugmentConfig, normalize
from titn.distill import OracleTeacher, distillation_loss
from titn.model import ModelConfig, TitnModel, load_checkpoint
from titn.pipeline import SGD, TrainConfig, evaluate, make_synthetic, train
from titn.pipeline.train import NonFiniteLossError, no_weight_decay, predict

TOY = ModelConfig(image_size=8, patch_size=4, pixel_size=2, patch_dim=16, pixel_dim=8,
                  depth=1, outer_heads=2, inner_heads=2, num_classes=3)


@pytest.fixture(scope="module")
def data():
    return make_synthetic(n_train=96, n_test=30)


def quick_cfg(**kw):
    base = dict(batch_size=32, epochs=2, lr_max=0.05, seed=0, augment=AugmentConfig(crop_pad=1))
    base.update(kw)
    return TrainConfig(**base)


def test_zero_lr_keeps_parameters_bit_identical(data):
    tr, te = data
    m = TitnModel.init(TOY, seed=0)
    before = {k: v.copy() for k, v in m.state_dict().items()}
    train(m, tr, te, OracleTeacher(tr.labels, 3), quick_cfg(lr_max=0.0, epochs=3))
    for k, v in m.state_dict().items():
        assert v.tobytes() == before[k].tobytes(), k


def test_same_seed_same_trajectory(data):
    tr, te = data
    runs = []
    for _ in range(2):
        m = TitnModel.init(TOY, seed=1)
        hist = train(m, tr, te, OracleTeacher(tr.labels, 3), quick_cfg(record_time=False))
        runs.append(([r.as_dict() for r in hist], m.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


def test_different_seed_differs(data):
    tr, te = data
    a = train(TitnModel.init(TOY, seed=1), tr, te, None, quick_cfg(seed=0))
    b = train(TitnModel.init(TOY, seed=1), tr, te, None, quick_cfg(seed=1))
    assert a[-1].train_loss != b[-1].train_loss


def test_fixed_batch_loss_decreases(data):
    tr, _ = data
    m = TitnModel.init(TOY, seed=2)
    mean, std = tr.channel_stats()
    x = normalize(tr.images[:16], mean, std)
    y = tr.labels[:16]
    opt = SGD(list(m.named_parameters()), momentum=0.0)
    losses = []
    for _ in range(11):
        c, d = m(x)
        loss = distillation_loss(c, d, y, y, 1.0, y)
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step(0.01)
    assert all(b < a + 1e-9 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_shuffle_is_permutation(data, monkeypatch):
    tr, te = data
    seen = []
    # the package re-exports ``train`` the function, so fetch the module itself
    tmod = sys.modules["titn.pipeline.train"]
    real = tmod.batch_loss

    def spy(model, images, indices, labels, *a, **k):
        seen.append(np.array(indices))
        return real(model, images, indices, labels, *a, **k)

    monkeypatch.setattr(tmod, "batch_loss", spy)
    train(TitnModel.init(TOY, seed=0), tr, te, None, quick_cfg(batch_size=20, epochs=2))
    per_epoch = len(seen) // 2
    for e in range(2):
        idx = np.concatenate(seen[e * per_epoch:(e + 1) * per_epoch])
        assert sorted(idx.tolist()) == list(range(len(tr)))
    assert not np.array_equal(np.concatenate(seen[:per_epoch]), np.concatenate(seen[per_epoch:]))


def test_artifacts_and_checkpoint_reproduce_metrics(tmp_path, data):
    tr, te = data
    m = TitnModel.init(TOY, seed=3)
    hist = train(m, tr, te, OracleTeacher(tr.labels, 3), quick_cfg(epochs=3), out_dir=tmp_path)
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == ["epoch", "train_loss", "top1", "top5", "precision", "recall", "f1", "lr", "seconds"]
    assert len(rows) == 4
    assert (tmp_path / "best.ckpt").exists()
    loaded, meta = load_checkpoint(tmp_path / "final.ckpt")
    rec = evaluate(loaded, te, meta["norm_mean"], meta["norm_std"])
    last = hist[-1]
    for k in ("top1", "top5", "precision", "recall", "f1"):
        assert getattr(rec, k) == getattr(last, k)
    assert float(rows[-1][2]) == last.top1
    assert all(r.top5 >= r.top1 for r in hist)


def test_class_mismatch_rejected(data):
    tr, te = data
    m = TitnModel.init(TOY, seed=0)
    with pytest.raises(ValueError, match="teacher"):
        train(m, tr, te, OracleTeacher(tr.labels, 4), quick_cfg())
    big = ModelConfig(**dict(TOY.to_dict(), num_classes=5))
    with pytest.raises(ValueError, match="classes"):
        train(TitnModel.init(big, seed=0), tr, te, None, quick_cfg())


def test_nonfinite_loss_dumps_batch(tmp_path, data):
    tr, te = data
    m = TitnModel.init(TOY, seed=0)
    m.class_head.w.data[:] = np.nan
    with pytest.raises(NonFiniteLossError, match="epoch 0, batch 0"):
        train(m, tr, te, None, quick_cfg(), out_dir=tmp_path)
    dumps = list(tmp_path.glob("nonfinite_*.npz"))
    assert len(dumps) == 1 and "indices" in np.load(dumps[0]).files


def test_parallel_predict_matches_serial(data):
    tr, _ = data
    m = TitnModel.init(TOY, seed=0)
    mean, std = tr.channel_stats()
    a = predict(m, tr.images, mean, std, batch_size=10, workers=1)
    b = predict(m, tr.images, mean, std, batch_size=10, workers=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_weight_decay_exemptions():
    assert no_weight_decay("blocks.0.inner.norm1.gamma")
    assert no_weight_decay("final_norm.beta")
    assert no_weight_decay("outer_pos") and no_weight_decay("class_token")
    assert not no_weight_decay("blocks.0.bridge.w")


def test_train_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    cfg = quick_cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
