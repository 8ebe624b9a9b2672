import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from encodenet.autodiff import functional as F
from encodenet.datasets import DataSplit, LabeledImageSet
from encodenet.errors import CheckpointError, ConfigError, NumericError, ShapeError
from encodenet.model_ir import ModelSpec, conv, dense, layer
from encodenet.network import Network
from encodenet.trainer import (
    RunRecord,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    evaluate_accuracy,
    holdout_split,
    train_autoencoder,
    train_classifier,
)

TINY = ModelSpec(
    "tiny",
    (1, 8, 8),
    (conv(4), layer("batchnorm"), layer("relu"), layer("maxpool"), layer("flatten"), dense(2), layer("softmax")),
)


def blob_images(n, seed):
    """Two classes: a Gaussian blob centred top-left or bottom-right, plus noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:8, 0:8]
    labels = np.arange(n) % 2
    centers = np.where(labels[:, None] == 0, [2.0, 2.0], [5.0, 5.0]) + rng.normal(0, 0.5, size=(n, 2))
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    img = np.exp(-d2 / 4.0) + rng.normal(0, 0.1, size=(n, 8, 8))
    return LabeledImageSet(np.clip(img, 0, 1)[:, None].astype(np.float32), labels, 2)


@pytest.fixture(scope="module")
def blobs():
    return DataSplit(blob_images(80, 0), blob_images(80, 1), 0)


def test_blobs_are_linearly_separable(blobs):
    probe = LogisticRegression(max_iter=2000).fit(blobs.train.images.reshape(80, -1), blobs.train.labels)
    assert probe.score(blobs.test.images.reshape(80, -1), blobs.test.labels) >= 0.95


def test_classifier_learns_blobs(blobs):
    cfg = TrainConfig(epochs=20, batch_size=16, lr=0.05)
    net, rec = train_classifier(TINY, blobs, cfg)
    assert rec.final_metric >= 0.95
    assert len(rec.train_loss) == len(rec.eval_metric) == 20
    assert evaluate_accuracy(net, blobs.test) == rec.final_metric


def test_zero_lr_keeps_parameters(blobs):
    init = Network(TINY, seed=3)
    net, _ = train_classifier(init, blobs, TrainConfig(epochs=2, lr=0.0, weight_decay=0.0))
    for name, value in init.params.items():
        np.testing.assert_array_equal(net.params[name], value)


def test_fully_frozen(blobs):
    init = Network(TINY, seed=4)
    before = evaluate_accuracy(init, blobs.test)
    net, rec = train_classifier(init, blobs, TrainConfig(epochs=2, frozen_prefix=len(TINY.layers)))
    assert rec.final_metric == before
    assert rec.trainable_params == 0
    for name, value in init.params.items():
        np.testing.assert_array_equal(net.params[name], value)
    for name, value in init.buffers.items():
        np.testing.assert_array_equal(net.buffers[name], value)


def test_frozen_prefix_bit_identical(blobs):
    init = Network(TINY, seed=5)
    net, _ = train_classifier(init, blobs, TrainConfig(epochs=3, frozen_prefix=4))
    for name in init.param_names(stop=4):
        np.testing.assert_array_equal(net.params[name], init.params[name])
    assert any(not np.array_equal(net.params[n], init.params[n]) for n in init.param_names(start=4))


def test_frozen_prefix_too_long(blobs):
    with pytest.raises(ConfigError):
        train_classifier(TINY, blobs, TrainConfig(epochs=1, frozen_prefix=99))


def test_seeded_determinism(blobs):
    cfg = TrainConfig(epochs=3, seed=11)
    _, a = train_classifier(TINY, blobs, cfg)
    _, b = train_classifier(TINY, blobs, cfg)
    assert a.train_loss == b.train_loss
    assert a.eval_metric == b.eval_metric


def test_small_lr_does_not_increase_batch_loss(blobs):
    net = Network(TINY, seed=0)
    x, y = blobs.train.images[:32], blobs.train.labels[:32]

    def fixed_loss(n):
        return float(F.softmax_cross_entropy(n.forward(x, logits=True), y).data)

    trained, _ = train_classifier(net, blobs, TrainConfig(epochs=1, lr=1e-4, weight_decay=0.0, schedule="constant"))
    assert fixed_loss(trained) <= fixed_loss(net) + 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(blobs):
    with pytest.raises(NumericError, match="epoch 1"):
        train_classifier(TINY, blobs, TrainConfig(epochs=2, lr=1e38, schedule="constant"))


def test_classifier_requires_softmax(blobs):
    spec = TINY.with_layers(TINY.layers[:-1])
    with pytest.raises(ShapeError):
        train_classifier(spec, blobs, TrainConfig(epochs=1))
    wide = TINY.with_layers(TINY.layers[:-2] + (dense(3), layer("softmax")))
    with pytest.raises(ShapeError):
        train_classifier(wide, blobs, TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 2, "momentumm": 0.9})
    assert TrainConfig(lr=0.2, schedule="cosine").lr_at(0) == pytest.approx(0.2)


AE = ModelSpec("ae", (1, 8, 8), (conv(8), layer("relu"), conv(1), layer("sigmoid")))


def test_autoencoder_memorizes_identity():
    images = blob_images(50, 2).images
    cfg = TrainConfig(epochs=150, batch_size=10, optimizer="adam", lr=1e-2, weight_decay=0.0, schedule="constant")
    _, rec = train_autoencoder(AE, (images, images), cfg, holdout_fraction=0.0)
    assert rec.final_metric < 1e-3
    assert rec.extra["n_holdout_pairs"] == 50


def test_autoencoder_learns_black():
    images = blob_images(20, 3).images
    cfg = TrainConfig(epochs=500, batch_size=20, optimizer="adam", lr=1e-1, weight_decay=0.0, schedule="constant")
    net, _ = train_autoencoder(AE, (images, np.zeros_like(images)), cfg, holdout_fraction=0.0)
    assert net.predict_batches(images).max() < 1e-3


def test_autoencoder_shape_check():
    images = np.zeros((4, 1, 8, 8), np.float32)
    with pytest.raises(ShapeError):
        train_autoencoder(AE, (images, np.zeros((4, 1, 4, 4), np.float32)), TrainConfig(epochs=1))


def test_holdout_split():
    tr, ho = holdout_split(100, 0.1, seed=0)
    assert len(ho) == 10 and not set(tr) & set(ho)
    assert sorted(np.concatenate([tr, ho])) == list(range(100))
    tr2, ho2 = holdout_split(100, 0.1, seed=0)
    np.testing.assert_array_equal(ho, ho2)


def test_accuracy_forced_and_tied():
    labels = np.repeat(np.arange(10), 5)
    images = np.zeros((50, 1, 1, 1), np.float32)
    images[:, 0, 0, 0] = labels / 10
    data = LabeledImageSet(images, labels, 10)
    spec = ModelSpec("m", (1, 1, 1), (layer("flatten"), dense(10), layer("softmax")))
    net = Network(spec)
    net.params["1.weight"][...] = 0
    net.params["1.bias"][...] = 0
    # Uniform logits: every argmax tie goes to class 0.
    assert evaluate_accuracy(net, data) == pytest.approx(0.1)
    # Logits -(10x - c)^2 peak at the true class.
    forced = ModelSpec("m", (1, 1, 1), (layer("flatten"), dense(10), layer("softmax")))
    net2 = Network(forced)
    c = np.arange(10)
    net2.params["1.weight"][...] = (20.0 * c)[None, :]
    net2.params["1.bias"][...] = -(c**2).astype(np.float32)
    # -(10x-c)^2 = -100x^2 + 20cx - c^2; the -100x^2 term is shared by all classes.
    assert evaluate_accuracy(net2, data) == 1.0
    with pytest.raises(ShapeError):
        evaluate_accuracy(net2, data.take([]))


def test_run_record_files(tmp_path):
    rec = RunRecord("baseline", "accuracy", [1.0, 0.5], [0.2, 0.4], 0.4, 10, 10, 0, 1.5)
    js, cs = rec.save(tmp_path)
    assert RunRecord.load(js) == rec
    assert cs.read_text().splitlines()[0] == "epoch,train_loss,accuracy"


def test_checkpoint_round_trip(tmp_path, blobs):
    net, _ = train_classifier(TINY, blobs, TrainConfig(epochs=1))
    path = checkpoint_save(net, tmp_path / "m.ckpt", meta={"stage": "x"})
    back, meta = checkpoint_load(path, expected_spec=TINY)
    assert meta == {"stage": "x"}
    for name, value in net.state().items():
        assert back.state()[name].tobytes() == value.tobytes()


def test_checkpoint_errors(tmp_path):
    path = checkpoint_save(Network(TINY), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "short.ckpt")
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_load(tmp_path / "flip.ckpt")
    with pytest.raises(CheckpointError, match="spec mismatch"):
        checkpoint_load(path, expected_spec=AE)
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(tmp_path / "junk.ckpt")


def test_checkpoint_version_mismatch(tmp_path):
    import struct
    import zlib

    raw = checkpoint_save(Network(TINY), tmp_path / "m.ckpt").read_bytes()
    body = raw[:8] + struct.pack("<I", 99) + raw[12:-4]
    (tmp_path / "v.ckpt").write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(tmp_path / "v.ckpt")
