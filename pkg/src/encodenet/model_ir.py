"""Declarative network specs: parsing, shape inference, splitting, decoder synthesis.

Grammar (one directive per line, ``#`` starts a comment)::

    spec      := [name] input layer+
    name      := "name" IDENT
    input     := "input" C H W
    layer     := "conv" F K S ("same" | "valid")
               | "resblock" F S
               | "dense" U
               | "batchnorm" | "relu" | "sigmoid" | "maxpool"
               | "globalavgpool" | "upsample" | "flatten" | "softmax"

All numbers are positive decimal integers. ``K`` is in {1, 3, 5} and ``S``
in {1, 2}. ``resblock F S`` is the residual shorthand
``conv F 3 S / bn / relu / conv F 3 1 / bn  (+ shortcut) / relu`` where the
shortcut is a strided 1x1 conv + bn whenever the shape changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ShapeError, SpecSyntaxError, SpecValidationError, SplitError, SynthesisError

CONV_KERNELS = (1, 3, 5)
CONV_STRIDES = (1, 2)
PADDINGS = ("same", "valid")
BARE_KINDS = ("batchnorm", "relu", "sigmoid", "maxpool", "globalavgpool", "upsample", "flatten", "softmax")
LAYER_KINDS = ("conv", "resblock", "dense") + BARE_KINDS
HEAD_BOUNDARY = ("flatten", "globalavgpool")
DECODER_MIN_WIDTH = 16


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: str | None = None
    units: int | None = None

    def __post_init__(self):
        _validate_layer(self)

    def to_line(self):
        if self.kind == "conv":
            return f"conv {self.filters} {self.kernel} {self.stride} {self.padding}"
        if self.kind == "resblock":
            return f"resblock {self.filters} {self.stride}"
        if self.kind == "dense":
            return f"dense {self.units}"
        return self.kind


def conv(filters, kernel=3, stride=1, padding="same"):
    return LayerSpec("conv", filters=filters, kernel=kernel, stride=stride, padding=padding)


def dense(units):
    return LayerSpec("dense", units=units)


def layer(kind):
    return LayerSpec(kind)


def _validate_layer(spec):
    kind = spec.kind
    if kind not in LAYER_KINDS:
        raise SpecValidationError(f"unknown layer kind {kind!r}")
    wanted = {
        "conv": {"filters", "kernel", "stride", "padding"},
        "resblock": {"filters", "stride"},
        "dense": {"units"},
    }.get(kind, set())
    for attr in ("filters", "kernel", "stride", "padding", "units"):
        present = getattr(spec, attr) is not None
        if present != (attr in wanted):
            verb = "requires" if attr in wanted else "does not take"
            raise SpecValidationError(f"{kind} {verb} attribute {attr!r}")
    for attr in ("filters", "units"):
        v = getattr(spec, attr)
        if v is not None and (not isinstance(v, int) or v < 1):
            raise SpecValidationError(f"{kind}: {attr} must be a positive integer, got {v!r}")
    if spec.kernel is not None and spec.kernel not in CONV_KERNELS:
        raise SpecValidationError(f"conv kernel must be one of {CONV_KERNELS}, got {spec.kernel}")
    if spec.stride is not None and spec.stride not in CONV_STRIDES:
        raise SpecValidationError(f"{kind} stride must be one of {CONV_STRIDES}, got {spec.stride}")
    if spec.padding is not None and spec.padding not in PADDINGS:
        raise SpecValidationError(f"conv padding must be 'same' or 'valid', got {spec.padding!r}")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def validate(self):
        """Check structural invariants and full shape inference; returns self."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecValidationError(f"input shape must be three positive ints, got {self.input_shape}")
        if not self.layers:
            raise SpecValidationError("model spec has no layers")
        kinds = [layer.kind for layer in self.layers]
        if kinds.count("flatten") > 1:
            raise SpecValidationError("at most one flatten layer is allowed")
        flat_at = kinds.index("flatten") if "flatten" in kinds else None
        for i, kind in enumerate(kinds):
            if kind in ("dense", "softmax") and (flat_at is None or i < flat_at):
                # globalavgpool followed by dense is also a valid head; allow it
                # when every layer in between keeps the tensor at 1x1 spatial.
                if not _after_global_pool(kinds, i):
                    raise SpecValidationError(f"layer {i} ({kind}) must come after flatten")
        infer_shapes(self)
        return self

    def to_text(self):
        lines = [f"name {self.name}", "input {} {} {}".format(*self.input_shape)]
        lines += [layer.to_line() for layer in self.layers]
        return "\n".join(lines) + "\n"

    def with_layers(self, layers, name=None, input_shape=None):
        return ModelSpec(name or self.name, input_shape or self.input_shape, tuple(layers))


def _after_global_pool(kinds, i):
    return "globalavgpool" in kinds[:i]


def parse_model_spec(text):
    """Parse grammar text into a validated :class:`ModelSpec`."""
    name = "model"
    input_shape = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *args = line.split()
        try:
            if head == "name":
                if len(args) != 1:
                    raise SpecSyntaxError("name takes exactly one token", lineno)
                name = args[0]
            elif head == "input":
                if input_shape is not None:
                    raise SpecSyntaxError("duplicate input directive", lineno)
                if layers:
                    raise SpecSyntaxError("input must precede all layers", lineno)
                input_shape = tuple(_ints(args, 3, lineno))
            elif input_shape is None:
                raise SpecSyntaxError("layers must follow the input directive", lineno)
            elif head == "conv":
                if len(args) != 4:
                    raise SpecSyntaxError("conv takes F K S PADDING", lineno)
                f, k, s = _ints(args[:3], 3, lineno)
                layers.append(LayerSpec("conv", filters=f, kernel=k, stride=s, padding=args[3]))
            elif head == "resblock":
                f, s = _ints(args, 2, lineno)
                layers.append(LayerSpec("resblock", filters=f, stride=s))
            elif head == "dense":
                (u,) = _ints(args, 1, lineno)
                layers.append(LayerSpec("dense", units=u))
            elif head in BARE_KINDS:
                if args:
                    raise SpecSyntaxError(f"{head} takes no arguments", lineno)
                layers.append(LayerSpec(head))
            else:
                raise SpecSyntaxError(f"unknown layer kind {head!r}", lineno)
        except SpecValidationError as exc:
            raise SpecSyntaxError(str(exc), lineno) from None
    if input_shape is None:
        raise SpecValidationError("missing input directive")
    return ModelSpec(name, input_shape, tuple(layers)).validate()


def _ints(tokens, count, lineno):
    if len(tokens) != count:
        raise SpecSyntaxError(f"expected {count} integer arguments, got {len(tokens)}", lineno)
    try:
        values = [int(t) for t in tokens]
    except ValueError:
        raise SpecSyntaxError(f"expected integers, got {' '.join(tokens)!r}", lineno) from None
    if any(v < 1 for v in values):
        raise SpecSyntaxError("integer arguments must be positive", lineno)
    return values


def layer_output_shape(layer, shape, index=None):
    """Output shape of ``layer`` given an input ``shape`` (C, H, W) or (D,)."""
    where = f"layer {index} ({layer.kind})" if index is not None else layer.kind
    kind = layer.kind
    spatial = len(shape) == 3
    if kind in ("conv", "resblock", "batchnorm", "maxpool", "globalavgpool", "upsample") and not spatial:
        raise ShapeError(f"{where}: needs a C x H x W input, got {shape}")
    if kind == "conv":
        c, h, w = shape
        return (layer.filters, _conv_dim(h, layer, where), _conv_dim(w, layer, where))
    if kind == "resblock":
        c, h, w = shape
        return (layer.filters, -(-h // layer.stride), -(-w // layer.stride))
    if kind == "maxpool":
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"{where}: maxpool needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)
    if kind == "globalavgpool":
        return (shape[0], 1, 1)
    if kind == "upsample":
        c, h, w = shape
        return (c, 2 * h, 2 * w)
    if kind == "flatten":
        return (math.prod(shape),)
    if kind == "dense":
        if spatial:
            if shape[1:] != (1, 1):
                raise ShapeError(f"{where}: dense after spatial map {shape}; flatten first")
            return (layer.units,)
        return (layer.units,)
    return shape


def _conv_dim(size, layer, where):
    if layer.padding == "same":
        return -(-size // layer.stride)
    if size < layer.kernel:
        raise ShapeError(f"{where}: valid conv with kernel {layer.kernel} on size {size}")
    return (size - layer.kernel) // layer.stride + 1


def infer_shapes(spec):
    """Per-layer output shapes, in layer order."""
    shapes = []
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        shape = layer_output_shape(layer, shape, i)
        shapes.append(shape)
    return shapes


def output_shape(spec):
    shapes = infer_shapes(spec)
    return shapes[-1] if shapes else tuple(spec.input_shape)


@dataclass(frozen=True)
class SplitModel:
    encoder: ModelSpec
    head: ModelSpec
    split_index: int

    def join(self):
        return ModelSpec(self.encoder.name.removesuffix("-encoder"), self.encoder.input_shape,
                         self.encoder.layers + self.head.layers)


def split_model(spec):
    """Split at the first flatten/globalavgpool: encoder before it, head from it on."""
    kinds = [layer.kind for layer in spec.layers]
    boundary = next((i for i, k in enumerate(kinds) if k in HEAD_BOUNDARY), None)
    if boundary is None:
        raise SplitError(f"{spec.name}: no flatten or globalavgpool layer to split at")
    if boundary == 0:
        raise SplitError(f"{spec.name}: empty feature extractor (boundary is the first layer)")
    enc_layers = spec.layers[:boundary]
    encoder = ModelSpec(f"{spec.name}-encoder", spec.input_shape, enc_layers)
    head_input = output_shape(encoder)
    head = ModelSpec(f"{spec.name}-head", head_input, spec.layers[boundary:])
    return SplitModel(encoder, head, boundary)


@dataclass(frozen=True)
class DecoderSpec:
    layers: tuple
    output_shape: tuple


def synthesize_decoder(encoder, target_shape, widths=None):
    """Mirror an encoder with (upsample, conv3x3, batchnorm, relu) blocks.

    One block per factor-2 spatial reduction; widths halve from the
    encoder's final width with a floor of 16 unless ``widths`` overrides
    them. A final 3x3 conv to the target channel count plus sigmoid
    restores ``target_shape``.
    """
    target_shape = tuple(target_shape)
    c_enc, h_enc, w_enc = output_shape(encoder)
    c_out, h_out, w_out = target_shape
    if h_out % h_enc or w_out % w_enc:
        raise SynthesisError(f"encoder output {h_enc}x{w_enc} does not divide target {h_out}x{w_out}")
    ratio_h, ratio_w = h_out // h_enc, w_out // w_enc
    if ratio_h != ratio_w or ratio_h & (ratio_h - 1):
        raise SynthesisError(f"spatial reduction {ratio_h}x{ratio_w} is not a single power of two")
    blocks = ratio_h.bit_length() - 1
    if widths is None:
        widths, width = [], c_enc
        for _ in range(blocks):
            width = max(width // 2, DECODER_MIN_WIDTH)
            widths.append(width)
    elif len(widths) != blocks:
        raise SynthesisError(f"{len(widths)} width overrides for {blocks} decoder blocks")
    layers = []
    for width in widths:
        layers += [layer("upsample"), conv(width, 3, 1, "same"), layer("batchnorm"), layer("relu")]
    layers += [conv(c_out, 3, 1, "same"), layer("sigmoid")]
    decoder = DecoderSpec(tuple(layers), target_shape)
    got = output_shape(ModelSpec("decoder", (c_enc, h_enc, w_enc), decoder.layers))
    if got != target_shape:
        raise SynthesisError(f"decoder produces {got}, expected {target_shape}")
    return decoder


def autoencoder_spec(encoder, decoder):
    return ModelSpec(encoder.name.removesuffix("-encoder") + "-cae", encoder.input_shape,
                     encoder.layers + decoder.layers).validate()


def layer_parameter_count(layer, in_shape):
    kind = layer.kind
    if kind == "conv":
        return layer.filters * in_shape[0] * layer.kernel**2 + layer.filters
    if kind == "dense":
        return math.prod(in_shape) * layer.units + layer.units
    if kind == "batchnorm":
        return 2 * in_shape[0]
    if kind == "resblock":
        c, f = in_shape[0], layer.filters
        count = (f * c * 9 + f) + 2 * f + (f * f * 9 + f) + 2 * f
        if layer.stride != 1 or c != f:
            count += (f * c + f) + 2 * f
        return count
    return 0


def count_parameters(spec):
    """Trainable parameters (weights, biases, batchnorm affine)."""
    total = 0
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        total += layer_parameter_count(layer, shape)
        shape = layer_output_shape(layer, shape, i)
    return total
