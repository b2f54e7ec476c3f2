"""Training harness: data loading, the two-layer net, and the SGD loop."""

import struct

import numpy as np
import pytest

from ldconv.tensor import Rng
from ldconv.training import (
    Dataset,
    DivergenceError,
    TinyNet,
    TrainConfig,
    evaluate,
    load_idx,
    load_net,
    save_net,
    softmax_cross_entropy,
    synthetic_bars,
    train,
)


def _write_idx_images(path, array):
    m, h, w = array.shape
    path.write_bytes(struct.pack(">4I", 0x00000803, m, h, w) + array.tobytes())


def _write_idx_labels(path, labels):
    path.write_bytes(struct.pack(">2I", 0x00000801, len(labels)) + bytes(labels))


def _net(cfg, seed=None):
    return TinyNet.create(n1=cfg.n1, n2=cfg.n2, strategy=cfg.strategy,
                          post=cfg.post, rng=Rng(cfg.seed if seed is None else seed))


# -- IDX loading ------------------------------------------------------------------


def test_idx_round_trip(tmp_path):
    gen = Rng(0).stream("pixels")
    raw = gen.integers(0, 256, size=(6, 28, 28)).astype(np.uint8)
    labels = [3, 1, 4, 1, 5, 9]
    _write_idx_images(tmp_path / "img", raw)
    _write_idx_labels(tmp_path / "lab", labels)
    data = load_idx(tmp_path / "img", tmp_path / "lab")
    assert data.images.shape == (6, 1, 28, 28)
    assert data.images.dtype == np.float32
    assert np.allclose(data.images[:, 0], raw.astype(np.float32) / 255.0)
    assert data.labels.tolist() == labels
    assert np.all(data.images >= 0.0) and np.all(data.images <= 1.0)


def test_idx_ten_thousand_image_header(tmp_path):
    raw = np.zeros((10000, 28, 28), dtype=np.uint8)
    _write_idx_images(tmp_path / "img", raw)
    _write_idx_labels(tmp_path / "lab", [0] * 10000)
    data = load_idx(tmp_path / "img", tmp_path / "lab")
    assert data.images.shape == (10000, 1, 28, 28)


def test_idx_bad_magic(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">4I", 0xDEADBEEF, 1, 2, 2) + b"\x00" * 4)
    _write_idx_labels(tmp_path / "lab", [0])
    with pytest.raises(ValueError, match="bad magic"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated_payload(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">4I", 0x00000803, 2, 28, 28) + b"\x00" * 100)
    _write_idx_labels(tmp_path / "lab", [0, 1])
    with pytest.raises(ValueError, match="truncated"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_count_mismatch(tmp_path):
    _write_idx_images(tmp_path / "img", np.zeros((3, 4, 4), dtype=np.uint8))
    _write_idx_labels(tmp_path / "lab", [0, 1])
    with pytest.raises(ValueError, match="count mismatch"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_dataset_validation():
    with pytest.raises(ValueError, match="count mismatch"):
        Dataset(np.zeros((3, 1, 4, 4)), np.zeros(2, dtype=np.int64))
    with pytest.raises(ValueError, match="labels outside"):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 10]))
    with pytest.raises(ValueError, match="subset"):
        Dataset(np.zeros((2, 1, 4, 4)), np.zeros(2, dtype=np.int64)).take(3)


# -- synthetic data ----------------------------------------------------------------


def test_synthetic_bars_contract():
    data = synthetic_bars(64, Rng(7))
    assert data.images.shape == (64, 1, 28, 28)
    assert np.all(data.images >= 0.0) and np.all(data.images <= 1.0)
    assert set(np.unique(data.labels)) == {0, 1, 2, 3}
    again = synthetic_bars(64, Rng(7))
    assert np.array_equal(data.images, again.images)
    assert np.array_equal(data.labels, again.labels)
    other = synthetic_bars(64, Rng(8))
    assert np.any(data.images != other.images)


def test_synthetic_bars_paint_full_span_bars():
    data = synthetic_bars(32, Rng(3))
    for i in range(32):
        img = data.images[i, 0]
        label = int(data.labels[i])
        full_rows = int(np.sum(np.all(img == 1.0, axis=1)))
        full_cols = int(np.sum(np.all(img == 1.0, axis=0)))
        if label == 0:
            assert 2 <= full_rows <= 4 and full_cols == 0
        elif label == 1:
            assert 2 <= full_cols <= 4 and full_rows == 0
        elif label == 2:
            assert 4 <= full_rows <= 8 and full_cols == 0
        else:
            assert 4 <= full_cols <= 8 and full_rows == 0


# -- network -----------------------------------------------------------------------


def test_net_forward_dims_and_unique_names():
    cfg = TrainConfig()
    net = _net(cfg)
    logits, _ = net.forward(np.zeros((3, 1, 28, 28), dtype=np.float32))
    assert logits.shape == (3, 10)
    names = list(net.params())
    assert len(names) == len(set(names))
    assert net.param_count() == sum(p.size for p in net.params().values())


def test_softmax_cross_entropy_matches_hand_value():
    logits = np.array([[2.0, 0.0, 0.0]], dtype=np.float32)
    loss, dlogits = softmax_cross_entropy(logits, np.array([0]))
    z = np.exp([0.0, -2.0, -2.0])
    assert loss == pytest.approx(-np.log(z[0] / z.sum()), rel=1e-6)
    assert dlogits.shape == (1, 3)
    assert dlogits.sum() == pytest.approx(0.0, abs=1e-7)


def test_strategy_swap_preserves_logits():
    cfg = TrainConfig()
    base = _net(cfg)
    images = synthetic_bars(8, Rng(1)).images
    want, _ = base.forward(images)
    for strategy in ("conv3d-style", "column-conv"):
        other = _net(TrainConfig(strategy=strategy))
        scale = max(float(np.max(np.abs(want))), 1e-12)
        got, _ = other.forward(images)
        assert np.max(np.abs(got - want)) / scale < 1e-4


def test_evaluate_tie_breaks_to_lowest_class():
    cfg = TrainConfig()
    net = _net(cfg)
    net.fc_w[:] = 0.0
    net.fc_b[:] = 0.0
    labels = np.array([0, 0, 1, 2], dtype=np.int64)
    data = Dataset(np.zeros((4, 1, 28, 28), dtype=np.float32), labels)
    # all logits equal -> argmax picks class 0 everywhere
    assert evaluate(net, data) == pytest.approx(0.5)


def test_evaluate_rejects_empty():
    net = _net(TrainConfig())
    with pytest.raises(ValueError, match="empty"):
        evaluate(net, Dataset(np.zeros((0, 1, 28, 28)), np.zeros(0, dtype=np.int64)))


# -- training loop -----------------------------------------------------------------


def test_lr_zero_leaves_parameters_untouched():
    data = synthetic_bars(16, Rng(2))
    cfg = TrainConfig(epochs=2, subset=16, batch=8, lr=0.0)
    net = _net(cfg)
    before = {k: v.copy() for k, v in net.params().items()}
    train(net, data, cfg)
    after = net.params()
    for name, val in before.items():
        assert np.array_equal(val, after[name]), name


def test_loss_decreases_over_five_seeds():
    data = synthetic_bars(64, Rng(5))
    for seed in range(5):
        cfg = TrainConfig(epochs=10, subset=32, batch=8, lr=0.05, seed=seed)
        res = train(_net(cfg), data, cfg)
        assert res.loss[9] < res.loss[0], f"seed {seed}: {res.loss}"


def test_training_is_deterministic():
    data = synthetic_bars(24, Rng(6))
    cfg = TrainConfig(epochs=2, subset=24, batch=8)

    def run():
        net = _net(cfg)
        res = train(net, data, cfg)
        return res, net

    res_a, net_a = run()
    res_b, net_b = run()
    assert res_a.loss == res_b.loss
    assert res_a.acc == res_b.acc
    for (name, pa), pb in zip(net_a.params().items(), net_b.params().values()):
        assert np.array_equal(pa, pb), name


def test_offset_weights_move_after_one_step():
    data = synthetic_bars(8, Rng(9))
    cfg = TrainConfig(epochs=1, subset=8, batch=8)
    net = _net(cfg)
    before = {k: v.copy() for k, v in net.params().items() if k.endswith("offset_w")}
    train(net, data, cfg)
    after = net.params()
    assert any(np.any(after[k] != v) for k, v in before.items())


def test_divergence_raises():
    data = synthetic_bars(8, Rng(10))
    cfg = TrainConfig(epochs=1, subset=8, batch=8)
    net = _net(cfg)
    net.fc_b[0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 1, batch 1"):
        train(net, data, cfg)


def test_train_result_metrics_shape():
    data = synthetic_bars(16, Rng(11))
    cfg = TrainConfig(epochs=3, subset=16, batch=8)
    res = train(_net(cfg), data, cfg)
    metrics = res.metrics()
    assert len(metrics["loss"]) == 3 and len(metrics["acc"]) == 3
    assert 0.0 <= metrics["final_acc"] <= 1.0
    assert metrics["param_count"] == _net(cfg).param_count()
    assert set(res.ao_batch) == {"ld1", "ld2"}


# -- config ------------------------------------------------------------------------


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"epochs": 1, "optimizer": "adam"})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(strategy="sparse")


# -- checkpointing -----------------------------------------------------------------


def test_net_checkpoint_round_trip(tmp_path):
    data = synthetic_bars(16, Rng(12))
    cfg = TrainConfig(epochs=1, subset=16, batch=8)
    net = _net(cfg)
    train(net, data, cfg)
    path = tmp_path / "net.ldt"
    save_net(net, path, cfg)
    back, sidecar = load_net(path)
    assert sidecar["kind"] == "tinynet"
    assert sidecar["config"]["epochs"] == 1
    probe = data.images[:4]
    assert np.array_equal(net.forward(probe)[0], back.forward(probe)[0])


def test_load_net_rejects_layer_checkpoint(tmp_path):
    from ldconv.layer import LdconvLayer, save_layer

    path = tmp_path / "layer.ldt"
    save_layer(LdconvLayer.create(3, 1, 2), path)
    with pytest.raises(ValueError, match="not a network checkpoint"):
        load_net(path)
