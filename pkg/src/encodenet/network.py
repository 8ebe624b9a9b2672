"""Executable networks built from a :class:`ModelSpec`.

Parameters are named ``"<layer index>.<role>"`` so that a model and any
spec sharing its leading layers (feature extractor, autoencoder) agree on
names for those layers.
"""

from __future__ import annotations

import copy
import math

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .model_ir import infer_shapes

_KAIMING_GAIN = math.sqrt(2.0)


def _kaiming_uniform(rng, shape, fan_in):
    bound = _KAIMING_GAIN * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Network:
    """Parameters, batchnorm buffers, and a forward pass for one spec."""

    def __init__(self, spec, seed=0):
        self.spec = spec.validate()
        self.shapes = infer_shapes(spec)
        self.params = {}
        self.buffers = {}
        self._init(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------------

    def _init(self, rng):
        in_shape = tuple(self.spec.input_shape)
        for i, layer in enumerate(self.spec.layers):
            kind = layer.kind
            if kind == "conv":
                self._conv(rng, f"{i}", in_shape[0], layer.filters, layer.kernel)
            elif kind == "dense":
                fan_in = math.prod(in_shape)
                self.params[f"{i}.weight"] = _kaiming_uniform(rng, (fan_in, layer.units), fan_in)
                self.params[f"{i}.bias"] = np.zeros(layer.units, np.float32)
            elif kind == "batchnorm":
                self._bn(f"{i}", in_shape[0])
            elif kind == "resblock":
                c, f = in_shape[0], layer.filters
                self._conv(rng, f"{i}.conv1", c, f, 3)
                self._bn(f"{i}.bn1", f)
                self._conv(rng, f"{i}.conv2", f, f, 3)
                self._bn(f"{i}.bn2", f)
                if layer.stride != 1 or c != f:
                    self._conv(rng, f"{i}.proj", c, f, 1)
                    self._bn(f"{i}.projbn", f)
            in_shape = self.shapes[i]

    def _conv(self, rng, prefix, c, f, k):
        fan_in = c * k * k
        self.params[f"{prefix}.weight"] = _kaiming_uniform(rng, (f, c, k, k), fan_in)
        self.params[f"{prefix}.bias"] = np.zeros(f, np.float32)

    def _bn(self, prefix, c):
        self.params[f"{prefix}.gamma"] = np.ones(c, np.float32)
        self.params[f"{prefix}.beta"] = np.zeros(c, np.float32)
        self.buffers[f"{prefix}.running_mean"] = np.zeros(c, np.float32)
        self.buffers[f"{prefix}.running_var"] = np.ones(c, np.float32)

    # -- introspection -------------------------------------------------------------

    @property
    def num_layers(self):
        return len(self.spec.layers)

    def layer_of(self, name):
        return int(name.split(".", 1)[0])

    def param_names(self, start=0, stop=None):
        stop = self.num_layers if stop is None else stop
        return [n for n in self.params if start <= self.layer_of(n) < stop]

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        return copy.deepcopy(self)

    def state(self):
        """All arrays (parameters then buffers), keyed by name."""
        out = {f"param:{k}": v for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def load_state(self, arrays, prefix_layers=None):
        """Copy matching arrays in. With ``prefix_layers`` only layers below it."""
        for key, value in arrays.items():
            kind, name = key.split(":", 1)
            if prefix_layers is not None and self.layer_of(name) >= prefix_layers:
                continue
            target = self.params if kind == "param" else self.buffers
            if name not in target:
                raise KeyError(f"no {kind} named {name!r} in {self.spec.name}")
            if target[name].shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {target[name].shape}")
            target[name] = np.array(value, dtype=np.float32, copy=True)

    # -- forward -------------------------------------------------------------------

    def forward(self, x, train=False, params=None, start=0, stop=None, logits=False, frozen_prefix=0):
        """Run layers ``[start, stop)`` on ``x``.

        ``params`` maps names to Tensors (for training); missing names fall
        back to constant tensors built from ``self.params``. Layers below
        ``frozen_prefix`` always run in eval mode. With ``logits=True`` a
        trailing softmax is skipped.
        """
        stop = self.num_layers if stop is None else stop
        if logits and stop == self.num_layers and self.spec.layers[-1].kind == "softmax":
            stop -= 1
        params = params or {}
        h = x if isinstance(x, Tensor) else Tensor(x)

        def p(name):
            t = params.get(name)
            return t if t is not None else Tensor._wrap(self.params[name], "param")

        for i in range(start, stop):
            layer = self.spec.layers[i]
            layer_train = train and i >= frozen_prefix
            h = self._apply(i, layer, h, p, layer_train)
        return h

    __call__ = forward

    def _bn_apply(self, prefix, h, p, train):
        return F.batchnorm2d(
            h,
            p(f"{prefix}.gamma"),
            p(f"{prefix}.beta"),
            self.buffers[f"{prefix}.running_mean"],
            self.buffers[f"{prefix}.running_var"],
            train,
        )

    def _apply(self, i, layer, h, p, train):
        kind = layer.kind
        if kind == "conv":
            return F.conv2d(h, p(f"{i}.weight"), p(f"{i}.bias"), layer.stride, layer.padding)
        if kind == "batchnorm":
            return self._bn_apply(f"{i}", h, p, train)
        if kind == "relu":
            return F.relu(h)
        if kind == "sigmoid":
            return F.sigmoid(h)
        if kind == "maxpool":
            return F.max_pool2x2(h)
        if kind == "globalavgpool":
            return F.global_avg_pool(h)
        if kind == "upsample":
            return F.upsample_nearest2x(h)
        if kind == "flatten":
            return F.flatten(h)
        if kind == "dense":
            if h.data.ndim != 2:
                h = F.flatten(h)
            return F.dense(h, p(f"{i}.weight"), p(f"{i}.bias"))
        if kind == "softmax":
            return F.softmax(h)
        if kind == "resblock":
            y = F.conv2d(h, p(f"{i}.conv1.weight"), p(f"{i}.conv1.bias"), layer.stride, "same")
            y = F.relu(self._bn_apply(f"{i}.bn1", y, p, train))
            y = F.conv2d(y, p(f"{i}.conv2.weight"), p(f"{i}.conv2.bias"), 1, "same")
            y = self._bn_apply(f"{i}.bn2", y, p, train)
            if f"{i}.proj.weight" in self.params:
                s = F.conv2d(h, p(f"{i}.proj.weight"), p(f"{i}.proj.bias"), layer.stride, "same")
                s = self._bn_apply(f"{i}.projbn", s, p, train)
            else:
                s = h
            return F.relu(F.add(y, s))
        raise ValueError(f"unsupported layer kind {kind!r}")

    def predict_batches(self, images, batch_size=256, start=0, stop=None, logits=False):
        """Eval-mode forward over ``images`` in fixed-size chunks; returns an array."""
        outs = []
        for lo in range(0, len(images), batch_size):
            outs.append(self.forward(images[lo : lo + batch_size], False, start=start, stop=stop, logits=logits).data)
        return np.concatenate(outs, axis=0)
