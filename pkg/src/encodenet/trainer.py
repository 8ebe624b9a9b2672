"""Seeded training loops, evaluation, run records, and checkpoints."""

from __future__ import annotations

import csv
import json
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, cosine_lr
from .autodiff import functional as F
from .autodiff.optim import Optimizer, OptimizerState
from .datasets import LabeledImageSet, epoch_order
from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .model_ir import ModelSpec, output_shape, parse_model_spec
from .network import Network


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    optimizer: str = "sgd"
    lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.0
    schedule: str = "cosine"
    seed: int = 0
    frozen_prefix: int = 0

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs must be a positive integer, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        # lr == 0 is accepted so a run can be checked for parameter stasis.
        if self.lr < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("lr, weight_decay and momentum must be non-negative")
        if self.frozen_prefix < 0:
            raise ConfigError("frozen_prefix must be non-negative")

    @classmethod
    def from_dict(cls, values):
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**values)

    def replace(self, **changes):
        return TrainConfig(**{**asdict(self), **changes})

    def lr_at(self, epoch):
        if self.schedule == "cosine":
            return cosine_lr(self.lr, epoch, self.epochs)
        return self.lr


@dataclass
class RunRecord:
    stage: str
    eval_name: str
    train_loss: list = field(default_factory=list)
    eval_metric: list = field(default_factory=list)
    final_metric: float | None = None
    param_count: int = 0
    trainable_params: int = 0
    seed: int = 0
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, directory, stem=None):
        """Write ``<stem>.json`` and ``<stem>.csv`` (epoch, train_loss, eval_metric)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.stage
        json_path = directory / f"{stem}.json"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        csv_path = directory / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", self.eval_name])
            for epoch, (lo, ev) in enumerate(zip(self.train_loss, self.eval_metric), start=1):
                writer.writerow([epoch, repr(lo), repr(ev)])
        return json_path, csv_path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_network(model, seed):
    if isinstance(model, Network):
        return model.copy()
    if isinstance(model, ModelSpec):
        return Network(model, seed=seed)
    raise TypeError(f"expected a ModelSpec or Network, got {type(model).__name__}")


def _trainable(net, frozen_prefix):
    if frozen_prefix > net.num_layers:
        raise ConfigError(f"frozen_prefix {frozen_prefix} exceeds {net.num_layers} layers")
    tensors = {}
    for name in net.param_names(start=frozen_prefix):
        t = Tensor._wrap(net.params[name], "param")
        t.requires_grad = True
        t.name = name
        tensors[name] = t
    return tensors


def _optimizer(cfg, tensors):
    state = OptimizerState(cfg.optimizer, cfg.lr, cfg.weight_decay, momentum=cfg.momentum)
    return Optimizer(list(tensors.values()), state)


def _run_epochs(net, cfg, inputs, targets, loss_fn, evaluate, record, start=0):
    """Shared minibatch loop; ``start`` skips a frozen prefix whose outputs were cached."""
    tensors = _trainable(net, cfg.frozen_prefix)
    opt = _optimizer(cfg, tensors)
    n = len(inputs)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = epoch_order(n, cfg.seed, epoch)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            try:
                with Tape() as tape:
                    out = net.forward(inputs[idx], train=True, params=tensors, start=start,
                                      logits=True, frozen_prefix=cfg.frozen_prefix)
                    loss = loss_fn(out, targets[idx])
                if tensors:
                    opt.zero_grad()
                    tape.backward(loss)
                    opt.step()
            except NumericError as exc:
                raise NumericError(f"{record.stage}: training diverged in epoch {epoch + 1}: {exc}") from None
            total += float(loss.data) * len(idx)
        record.train_loss.append(total / n)
        record.eval_metric.append(float(evaluate()))
    record.final_metric = record.eval_metric[-1]


def _check_classifier(net, num_classes):
    out = output_shape(net.spec)
    if out != (num_classes,):
        raise ShapeError(f"{net.spec.name} outputs {out}, expected ({num_classes},) class scores")


def train_classifier(model, data, cfg, stage="classifier"):
    """Minimize softmax cross-entropy; eval metric is test accuracy per epoch.

    Returns ``(network, record)``; the input network is not modified.
    """
    net = _as_network(model, cfg.seed)
    if net.spec.layers[-1].kind != "softmax":
        raise ShapeError(f"{net.spec.name} must end in softmax to train as a classifier")
    _check_classifier(net, data.train.num_classes)
    fp = cfg.frozen_prefix
    if fp > net.num_layers:
        raise ConfigError(f"frozen_prefix {fp} exceeds {net.num_layers} layers")
    began = time.perf_counter()
    # A frozen prefix runs in eval mode with fixed weights, so its outputs
    # can be computed once instead of every epoch.
    train_x = net.predict_batches(data.train.images, stop=fp) if fp else data.train.images
    test_x = net.predict_batches(data.test.images, stop=fp) if fp else data.test.images

    record = RunRecord(stage, "accuracy", param_count=net.parameter_count(),
                       trainable_params=int(sum(net.params[n].size for n in net.param_names(start=fp))),
                       seed=cfg.seed, extra={"config": asdict(cfg)})
    if fp >= net.num_layers:
        # Everything frozen: the cached outputs already are the class probabilities.
        def evaluate():
            return _accuracy(test_x, data.test.labels)

        loss_fn = _probability_nll
    else:
        def evaluate():
            return _accuracy(net.predict_batches(test_x, start=fp, logits=True), data.test.labels)

        loss_fn = F.softmax_cross_entropy
    _run_epochs(net, cfg, train_x, data.train.labels, loss_fn, evaluate, record, start=min(fp, net.num_layers))
    record.wall_seconds = time.perf_counter() - began
    return net, record


def _probability_nll(probs, labels):
    p = np.clip(probs.data, 1e-12, 1.0)
    return Tensor(-np.log(p[np.arange(len(labels)), labels]).mean())


def holdout_split(n, fraction, seed):
    """Indices (train, held_out); ``fraction=0`` evaluates on the training pairs."""
    order = np.random.default_rng([int(seed), 7919]).permutation(n)
    if fraction <= 0:
        return np.sort(order), np.sort(order)
    n_hold = max(1, int(round(n * fraction)))
    if n_hold >= n:
        raise ConfigError(f"holdout fraction {fraction} leaves no training pairs out of {n}")
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def train_autoencoder(model, pairs, cfg, holdout_fraction=0.1, stage="autoencoder"):
    """Minimize MSE from pair inputs to pair targets.

    ``pairs`` is a ConversionPairs (or an ``(inputs, targets)`` array tuple).
    The eval metric is the held-out reconstruction MSE per epoch.
    """
    net = _as_network(model, cfg.seed)
    if hasattr(pairs, "input_images"):
        inputs, targets = pairs.input_images(), pairs.target_images()
    else:
        inputs, targets = (np.asarray(a, dtype=np.float32) for a in pairs)
    if inputs.shape != targets.shape:
        raise ShapeError(f"pair inputs {inputs.shape} and targets {targets.shape} differ")
    if tuple(targets.shape[1:]) != output_shape(net.spec):
        raise ShapeError(f"targets {targets.shape[1:]} do not match model output {output_shape(net.spec)}")
    began = time.perf_counter()
    train_idx, hold_idx = holdout_split(len(inputs), holdout_fraction, cfg.seed)
    xtr, ytr = inputs[train_idx], targets[train_idx]
    xho, yho = inputs[hold_idx], targets[hold_idx]

    def evaluate():
        return reconstruction_loss(net, xho, yho)

    record = RunRecord(stage, "reconstruction_mse", param_count=net.parameter_count(),
                       trainable_params=int(sum(net.params[n].size for n in net.param_names(start=cfg.frozen_prefix))),
                       seed=cfg.seed,
                       extra={"config": asdict(cfg), "holdout_fraction": holdout_fraction,
                              "n_train_pairs": int(len(train_idx)), "n_holdout_pairs": int(len(hold_idx))})
    _run_epochs(net, cfg, xtr, ytr, F.mse, evaluate, record)
    record.wall_seconds = time.perf_counter() - began
    return net, record


def reconstruction_loss(net, inputs, targets, batch_size=256):
    """Eval-mode MSE over all elements of all pairs."""
    if len(inputs) == 0:
        raise ShapeError("reconstruction loss of an empty set")
    pred = net.predict_batches(inputs, batch_size=batch_size)
    diff = pred.astype(np.float64) - targets
    return float((diff * diff).mean())


def _accuracy(scores, labels):
    # argmax already breaks ties towards the lowest class index
    return float((scores.argmax(axis=1) == labels).mean())


def evaluate_accuracy(net, data):
    if len(data) == 0:
        raise ShapeError("cannot evaluate accuracy on an empty set")
    _check_classifier(net, data.num_classes)
    return _accuracy(net.predict_batches(data.images, logits=True), data.labels)


def predict_proba(net, images):
    scores = net.predict_batches(images, logits=True)
    return F.softmax_array(scores.astype(np.float64))


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"ENCNCKPT"
CHECKPOINT_VERSION = 1


def checkpoint_save(net, path, meta=None):
    """Write the network to ``path``; see docs/checkpoint_format.md for the layout."""
    spec_bytes = net.spec.to_text().encode("utf-8")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    arrays = net.state()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(spec_bytes)), spec_bytes,
             struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint is truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path, expected_spec=None):
    """Read a checkpoint; returns ``(network, meta)``.

    Raises CheckpointError on truncation, CRC failure, unknown version, or
    when ``expected_spec`` describes a different architecture.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not an encodenet checkpoint (bad magic or truncated)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(len(CHECKPOINT_MAGIC))
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    (spec_len,) = r.unpack("<I")
    spec = parse_model_spec(r.take(spec_len).decode("utf-8"))
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    if expected_spec is not None and not same_architecture(spec, expected_spec):
        raise CheckpointError(f"{path}: spec mismatch ({spec.name} in file vs {expected_spec.name} expected)")
    net = Network(spec)
    if set(arrays) != set(net.state()):
        raise CheckpointError(f"{path}: tensor names do not match the stored spec")
    net.load_state(arrays)
    return net, meta


def same_architecture(a, b):
    return tuple(a.input_shape) == tuple(b.input_shape) and tuple(a.layers) == tuple(b.layers)
