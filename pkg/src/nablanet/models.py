"""Nabla-N segmentation nets and the IRRCNN classifier, built from a ModelSpec."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from nablanet import ops
from nablanet.blocks import (
    DecoderParams,
    Initializer,
    StageFeature,
    decoder_forward,
    encoder_forward,
    irru_forward,
    make_decoder,
    make_irru,
    make_rrcu,
    named_bn_states,
    named_tensors,
)
from nablanet.ops import ConvKernel
from nablanet.tensor import Tensor

NABLA_WIDTHS = (16, 32, 64, 128, 256, 512)
# stem, then the three inception units
IRRCNN_WIDTHS = (96, 256, 640, 1280)
VARIANTS = ("A", "B", "AB")


@dataclass
class ModelSpec:
    family: str = "nabla"
    variant: str = "AB"
    n_decoders: int = 2
    widths: Optional[tuple] = None
    t: int = 2
    input_size: int = 256
    in_channels: int = 3
    classes: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.widths is None:
            self.widths = NABLA_WIDTHS if self.family == "nabla" else IRRCNN_WIDTHS
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self) -> None:
        w = self.widths
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.t < 0:
            raise ValueError(f"t must be >= 0, got {self.t}")
        if self.family == "nabla":
            if self.variant not in VARIANTS:
                raise ValueError(f"unknown fusion variant {self.variant!r}; expected one of {VARIANTS}")
            if not 1 <= self.n_decoders <= 4:
                raise ValueError(f"n_decoders must be in [1, 4], got {self.n_decoders}")
            if self.n_decoders > len(w):
                raise ValueError(f"n_decoders={self.n_decoders} exceeds the {len(w)} encoder stages")
            if any(b <= a for a, b in zip(w, w[1:])):
                raise ValueError(f"widths must be strictly increasing, got {w}")
            s = self.input_size
            if s <= 0 or s & (s - 1) or s < 2 ** (len(w) - 1):
                raise ValueError(f"input_size {s} must be a power of two >= 2^{len(w) - 1}")
        elif self.family == "irrcnn":
            if self.classes < 2:
                raise ValueError(f"classes must be >= 2, got {self.classes}")
            if len(w) != 4:
                raise ValueError(f"irrcnn widths are (stem, unit1, unit2, unit3), got {w}")
            if any(x % 4 for x in w[1:]):
                raise ValueError(f"irrcnn unit widths must be divisible by 4, got {w[1:]}")
            if self.input_size <= 0 or self.input_size % 8:
                raise ValueError(f"irrcnn input_size must be divisible by 8, got {self.input_size}")
        else:
            raise ValueError(f"unknown model family {self.family!r}")

    def to_json(self) -> str:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class NablaParts:
    encoder: list
    decoders: list  # decoder k = 1..N at index k-1
    head: ConvKernel


@dataclass
class IRRCNNParts:
    stem: ConvKernel
    stem_bn: object
    units: list
    classifier: ConvKernel


@dataclass
class Model:
    spec: ModelSpec
    parts: object
    graph: list = field(default_factory=list)  # (src, dst, kind) edges

    def named_parameters(self) -> list:
        return list(named_tensors(self.parts))

    def parameters(self) -> list:
        return [t for _, t in named_tensors(self.parts)]

    def param_dict(self) -> dict:
        return dict(named_tensors(self.parts))

    def named_bn_states(self) -> list:
        return list(named_bn_states(self.parts))

    @property
    def decoder_starts(self) -> list:
        if self.spec.family != "nabla":
            return []
        return [d.start_stage for d in self.parts.decoders]

    def edges(self, kind: str) -> list:
        return [e for e in self.graph if e[2] == kind]

    def forward(self, batch: Tensor, mode: str = "train") -> Tensor:
        if self.spec.family == "nabla":
            return forward_segment(self, batch, mode)
        return forward_classify(self, batch, mode)


# --- builders ---------------------------------------------------------------


def _donor_levels(spec: ModelSpec, k: int) -> set:
    """Levels where decoder k (1-based) receives decoder k+1's output."""
    if spec.variant == "A" or k >= spec.n_decoders:
        return set()
    donor_start = len(spec.widths) - 1 - k  # decoder k+1 starts one stage shallower
    return set(range(donor_start))


def build_nabla_net(spec: ModelSpec, dtype=np.float32) -> Model:
    if spec.family != "nabla":
        raise ValueError(f"build_nabla_net needs family 'nabla', got {spec.family!r}")
    spec.validate()
    init = Initializer(spec.seed, dtype)
    w = spec.widths
    n_stages = len(w)
    encoder = [make_rrcu(init, spec.in_channels if i == 0 else w[i - 1], w[i], spec.t) for i in range(n_stages)]
    decoders = []
    for k in range(1, spec.n_decoders + 1):
        concat_levels = _donor_levels(spec, k) if spec.variant == "AB" else set()
        decoders.append(make_decoder(init, w, n_stages - k, concat_levels, spec.t))
    head = init.conv(1, spec.n_decoders * w[0], 1, gain=1.0)
    model = Model(spec, NablaParts(encoder, decoders, head))
    model.graph = _nabla_graph(spec)
    return model


def _nabla_graph(spec: ModelSpec) -> list:
    n_stages = len(spec.widths)
    edges = [("input", "enc0", "rrcu")]
    edges += [(f"enc{i - 1}", f"enc{i}", "pool_rrcu") for i in range(1, n_stages)]
    for k in range(1, spec.n_decoders + 1):
        start = n_stages - k
        prev = f"enc{start}"
        for level in range(start - 1, -1, -1):
            node = f"dec{k}.L{level}"
            edges.append((prev, node, "upsample"))
            edges.append((f"enc{level}", node, "skip_concat"))
            if level in _donor_levels(spec, k):
                edges.append((f"dec{k + 1}.L{level}", node, "decoder_add"))
                if spec.variant == "AB":
                    edges.append((f"dec{k + 1}.L{level}", node, "decoder_concat"))
            prev = node
        edges.append((prev, "head", "head_concat"))
    edges.append(("head", "output", "conv1x1_sigmoid"))
    return edges


def build_irrcnn(spec: ModelSpec, dtype=np.float32) -> Model:
    if spec.family != "irrcnn":
        raise ValueError(f"build_irrcnn needs family 'irrcnn', got {spec.family!r}")
    spec.validate()
    init = Initializer(spec.seed, dtype)
    stem_w, *unit_w = spec.widths
    stem = init.conv(stem_w, spec.in_channels, 3)
    stem_bn = init.batchnorm(stem_w, 1)
    units, c_in = [], stem_w
    for width in unit_w:
        units.append(make_irru(init, c_in, width, spec.t))
        c_in = width
    classifier = init.conv(spec.classes, c_in, 1, gain=1.0)
    model = Model(spec, IRRCNNParts(stem, stem_bn, units, classifier))
    model.graph = (
        [("input", "stem", "conv_bn_relu")]
        + [(f"irru{i}" if i else "stem", f"irru{i + 1}", "irru_pool") for i in range(len(units))]
        + [(f"irru{len(units)}", "gap", "global_avg_pool"), ("gap", "output", "conv1x1_softmax")]
    )
    return model


def build_model(spec: ModelSpec, dtype=np.float32) -> Model:
    return build_nabla_net(spec, dtype) if spec.family == "nabla" else build_irrcnn(spec, dtype)


# --- forward passes ---------------------------------------------------------


def _check_batch(model: Model, batch: Tensor) -> None:
    s = model.spec
    if batch.data.ndim != 4 or batch.shape[1] != s.in_channels or batch.shape[2:] != (s.input_size, s.input_size):
        raise ValueError(
            f"batch shape {batch.shape} does not match model input (N, {s.in_channels}, {s.input_size}, {s.input_size})"
        )


def forward_segment(model: Model, batch: Tensor, mode: str = "train") -> Tensor:
    """N x 1 x H x W lesion probabilities."""
    if model.spec.family != "nabla":
        raise ValueError("forward_segment needs a nabla model")
    _check_batch(model, batch)
    parts: NablaParts = model.parts
    feats = encoder_forward(batch, parts.encoder, mode)
    n = len(parts.decoders)
    finals: list = [None] * n
    donor: Optional[dict] = None
    variant = model.spec.variant
    # deepest-first so decoder k+1 exists when decoder k needs it
    for idx in range(n - 1, -1, -1):
        dec: DecoderParams = parts.decoders[idx]
        start = feats[dec.start_stage]
        final, outs = decoder_forward(
            start,
            feats,
            dec,
            encoder_skips=True,
            add_donor=donor if variant in ("B", "AB") else None,
            concat_donor=donor if variant == "AB" else None,
            mode=mode,
        )
        finals[idx] = final
        donor = outs
    merged = finals[0]
    for f in finals[1:]:
        merged = ops.concat_channels(merged, f)
    return ops.sigmoid(ops.conv2d(merged, parts.head, 1, 0))


def forward_classify(model: Model, batch: Tensor, mode: str = "train") -> Tensor:
    """N x K x 1 x 1 class probabilities."""
    if model.spec.family != "irrcnn":
        raise ValueError("forward_classify needs an irrcnn model")
    _check_batch(model, batch)
    parts: IRRCNNParts = model.parts
    x = ops.relu(parts.stem_bn.apply(ops.conv2d(batch, parts.stem, 1, 1), 0, mode))
    for unit in parts.units:
        x = ops.maxpool2d(irru_forward(x, unit, mode))
    logits = ops.conv2d(ops.global_avg_pool(x), parts.classifier, 1, 0)
    return ops.softmax(logits)


def count_params(model: Model) -> int:
    return int(sum(t.size for t in model.parameters()))


def layer_shapes(model: Model) -> list:
    return [(name, tuple(t.shape)) for name, t in model.named_parameters()]
