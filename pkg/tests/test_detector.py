import numpy as np
import pytest

from matdetect import nn
from matdetect.clustering import cluster_materials
from matdetect.dataset import Air
from matdetect.detector import (
    Crnn,
    CrnnConfig,
    class_weights_for,
    detect,
    fit,
    load_checkpoint,
    predict_batch,
    predict_posteriors,
    save_checkpoint,
    select_rows,
)
from matdetect.errors import DegenerateLabels, EmptySplit, SampleRateMismatch, ShapeMismatch
from matdetect.evaluation import score
from matdetect.features import Standardizer

SMALL = dict(conv_filters=(4, 6), gru_hidden=8, batch_size=16)


@pytest.fixture(scope="module")
def table(sample_db):
    return cluster_materials(sample_db, k=10, seed=0)


def toy_task(n, seed, T=12, F=9, C=3):
    """Features where category c adds a bump to its own band region; labels are random."""
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, size=(n, C))
    x = 0.3 * r.standard_normal((n, T, F))
    for c in range(C):
        x[:, :, 3 * c : 3 * c + 3] += 1.5 * y[:, c, None, None]
    return x.astype(np.float32), y


def test_crnn_end_to_end_gradients():
    cfg = CrnnConfig(output_dim=3, conv_filters=(2, 3), gru_hidden=4)
    model = Crnn(cfg, 9, dtype=np.float64)
    r = np.random.default_rng(0)
    x = r.standard_normal((2, 5, 9))
    y = np.array([[1, 0, 1], [0, 1, 1]])
    w = r.uniform(0.5, 2.0, size=(3, 2))
    model.zero_grad()
    _, dz = nn.weighted_bce_with_logits(model.logits(x), y, w)
    model.backward(dz)
    grads = {k: v.copy() for k, v in model.named_grads().items()}

    def loss():
        return nn.weighted_bce_with_logits(model.logits(x), y, w)[0]

    for name, p in model.named_params().items():
        idx = [tuple(r.integers(0, s) for s in p.shape) for _ in range(6)]
        for i in idx:
            old = p[i]
            p[i] = old + 1e-6
            up = loss()
            p[i] = old - 1e-6
            down = loss()
            p[i] = old
            num = (up - down) / 2e-6
            assert abs(num - grads[name][i]) <= 1e-6 * max(1.0, abs(num)), (name, i)


def test_posteriors_range_and_zero_head():
    model = Crnn(CrnnConfig(output_dim=10, **SMALL), 33)
    x = np.random.default_rng(1).standard_normal((3, 132, 33)).astype(np.float32)
    p = model.posteriors(x)
    assert p.shape == (3, 10) and np.all((p > 0) & (p < 1))
    head = model.layers[-1]
    head.params["W"][:] = 0.0
    head.params["b"][:] = 0.0
    np.testing.assert_array_equal(model.posteriors(x), 0.5)


def test_identical_airs_identical_posteriors():
    model = Crnn(CrnnConfig(output_dim=4, **SMALL), 33)
    taps = np.random.default_rng(2).standard_normal(3200) * 0.01
    a, b = predict_batch(model, [Air(taps), Air(taps.copy())])
    np.testing.assert_array_equal(a, b)


def test_sample_rate_mismatch():
    model = Crnn(CrnnConfig(output_dim=2, **SMALL), 33)
    with pytest.raises(SampleRateMismatch):
        predict_posteriors(model, Air(np.zeros(3200), sample_rate=8000))


def test_select_rows(table):
    res = select_rows(np.full(10, 0.49), table, 0.5)
    assert res.present == () and res.a_hat.shape == (0, 8)
    p = np.array([0.9, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.7])
    res = select_rows(p, table, 0.5)
    assert res.present == (0, 9)
    np.testing.assert_array_equal(res.a_hat, table.matrix()[[0, 9]])
    assert select_rows(np.full(10, 0.5), table, 0.5).present == tuple(range(10))
    with pytest.raises(ShapeMismatch):
        select_rows(np.full(3, 0.5), table, 0.5)


def test_per_category_thresholds():
    cfg = CrnnConfig(output_dim=3, threshold=(0.2, 0.5, 0.9))
    np.testing.assert_array_equal(cfg.thresholds(), [0.2, 0.5, 0.9])
    with pytest.raises(ValueError):
        CrnnConfig(output_dim=3, threshold=(0.2, 0.5))
    with pytest.raises(ValueError):
        CrnnConfig(output_dim=3, threshold=1.0)


def test_degenerate_labels_zero_weight():
    y = np.array([[1, 0], [1, 1], [1, 0]])
    with pytest.warns(DegenerateLabels):
        w = class_weights_for(y)
    assert np.all(w[0] == 0.0) and np.all(w[1] > 0)


def test_fit_preconditions():
    x, y = toy_task(8, 0)
    cfg = CrnnConfig(output_dim=3, max_epochs=1, **SMALL)
    with pytest.raises(EmptySplit):
        fit(x, y, x[:0], y[:0], cfg)
    with pytest.raises(ShapeMismatch):
        fit(x, y[:, :2], x, y[:, :2], cfg)


def test_separable_toy_task():
    x_tr, y_tr = toy_task(160, 0)
    x_va, y_va = toy_task(40, 1)
    cfg = CrnnConfig(output_dim=3, max_epochs=40, lr=3e-3, **SMALL)
    model, report = fit(x_tr, y_tr, x_va, y_va, cfg)
    pred = model.posteriors(x_va) >= 0.5
    assert score(pred, y_va).macro_f1 >= 0.9
    assert report.val_loss[report.selected_epoch] == min(report.val_loss)


def test_training_deterministic():
    x, y = toy_task(40, 3)
    cfg = CrnnConfig(output_dim=3, max_epochs=3, **SMALL)
    _, a = fit(x, y, x, y, cfg)
    _, b = fit(x, y, x, y, cfg)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss


def test_patience_rules():
    # one sample and a negligible learning rate keep both losses exactly constant
    x, y = toy_task(1, 4)
    w = np.ones((3, 2))
    frozen = dict(output_dim=3, lr=1e-30, max_epochs=50, **SMALL)
    _, rep = fit(x, y, x, y, CrnnConfig(patience_train=2, patience_val=30, **frozen), w)
    assert len(set(rep.train_loss)) == 1
    assert rep.stop_reason == "train_patience" and len(rep.train_loss) == 3 and rep.selected_epoch == 0
    _, rep = fit(x, y, x, y, CrnnConfig(patience_train=30, patience_val=3, **frozen), w)
    assert rep.stop_reason == "val_patience" and len(rep.train_loss) == 4


def test_improving_loss_runs_to_max_epochs():
    x, y = toy_task(32, 5)
    cfg = CrnnConfig(output_dim=3, lr=1e-3, max_epochs=8, patience_train=1, patience_val=1,
                     conv_filters=(4, 6), gru_hidden=8, batch_size=32)
    _, rep = fit(x, y, x, y, cfg)
    assert np.all(np.diff(rep.train_loss) < 0)
    assert rep.stop_reason == "max_epochs" and len(rep.train_loss) == 8


def test_checkpoint_round_trip(tmp_path, table):
    cfg = CrnnConfig(output_dim=10, threshold=0.4, **SMALL)
    model = Crnn(cfg, 33)
    r = np.random.default_rng(6)
    model.standardizer = Standardizer.fit(r.standard_normal((4, 132, 33)))
    save_checkpoint(model, tmp_path / "m.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"MDCK"
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.cfg == cfg
    air = Air(r.standard_normal(3200) * 0.01)
    np.testing.assert_array_equal(predict_posteriors(back, air), predict_posteriors(model, air))
    res = detect(back, air, table)
    assert res.present == tuple(np.flatnonzero(res.posteriors >= 0.4))
