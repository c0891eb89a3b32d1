"""Recurrent convolution layers, RRCU / IRRU units and encoder/decoder stages."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from nablanet import ops
from nablanet.ops import BNState, ConvKernel
from nablanet.tensor import Tensor


class Initializer:
    """He-normal conv weights, zero biases, unit/zero BN scale/shift.

    ``gain`` is 2 for convolutions whose output passes through a ReLU and 1
    for purely linear paths (residual projections, upsampling, output heads),
    which keeps the residual stream from doubling its variance per unit.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def conv(self, c_out: int, c_in: int, k: int, bias: bool = True, gain: float = 2.0) -> ConvKernel:
        std = np.sqrt(gain / (c_in * k * k))
        w = self.rng.standard_normal((c_out, c_in, k, k)) * std
        b = Tensor(np.zeros(c_out, dtype=self.dtype), requires_grad=True) if bias else None
        return ConvKernel(Tensor(w.astype(self.dtype), requires_grad=True), b)

    def conv_transpose(self, c_in: int, c_out: int, k: int = 2, stride: int = 2, gain: float = 1.0) -> ConvKernel:
        # each output pixel sees c_in * (k / stride)^2 inputs
        fan_in = max(1, c_in * k * k // (stride * stride))
        w = self.rng.standard_normal((c_in, c_out, k, k)) * np.sqrt(gain / fan_in)
        b = Tensor(np.zeros(c_out, dtype=self.dtype), requires_grad=True)
        return ConvKernel(Tensor(w.astype(self.dtype), requires_grad=True), b)

    def batchnorm(self, channels: int, steps: int = 1) -> "BatchNormParams":
        return BatchNormParams(
            Tensor(np.ones(channels, dtype=self.dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=self.dtype), requires_grad=True),
            [BNState.fresh(channels, self.dtype) for _ in range(steps)],
        )


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    # one running-stat slot per recurrence step; scale/shift are shared
    states: list = field(default_factory=list)

    def apply(self, x: Tensor, step: int, mode: str) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.states[step], mode)


@dataclass
class RCLParams:
    ff: ConvKernel
    rec: Optional[ConvKernel]
    bn: BatchNormParams
    t: int = 2


@dataclass
class RRCUParams:
    proj: Optional[ConvKernel]
    rcl1: RCLParams
    rcl2: RCLParams

    @property
    def out_channels(self) -> int:
        return self.rcl2.ff.weight.shape[0]


@dataclass
class IRRUParams:
    branch_a: ConvKernel
    branch_b: RCLParams
    branch_c1: RCLParams
    branch_c2: RCLParams
    branch_d: ConvKernel
    proj: ConvKernel

    @property
    def out_channels(self) -> int:
        return self.proj.weight.shape[0]


@dataclass
class StageFeature:
    tensor: Tensor
    stage_index: int
    resolution: int


@dataclass
class DecoderParams:
    start_stage: int
    ups: list  # ConvKernel per upsampling step, deepest first
    units: list  # RRCUParams per upsampling step


# --- parameter construction -------------------------------------------------


def make_rcl(init: Initializer, c_in: int, c_out: int, t: int = 2) -> RCLParams:
    if t < 0:
        raise ValueError(f"recurrence steps must be >= 0, got {t}")
    ff = init.conv(c_out, c_in, 3)
    rec = init.conv(c_out, c_out, 3) if t > 0 else None
    return RCLParams(ff, rec, init.batchnorm(c_out, t + 1), t)


def make_rrcu(init: Initializer, c_in: int, c_out: int, t: int = 2) -> RRCUParams:
    proj = init.conv(c_out, c_in, 1, gain=1.0) if c_in != c_out else None
    return RRCUParams(proj, make_rcl(init, c_out, c_out, t), make_rcl(init, c_out, c_out, t))


def make_irru(init: Initializer, c_in: int, width: int, t: int = 2) -> IRRUParams:
    if width % 4:
        raise ValueError(f"IRRU width must be divisible by 4, got {width}")
    q = width // 4
    return IRRUParams(
        branch_a=init.conv(q, c_in, 1, gain=1.0),
        branch_b=make_rcl(init, c_in, q, t),
        branch_c1=make_rcl(init, c_in, q, t),
        branch_c2=make_rcl(init, q, q, t),
        branch_d=init.conv(q, c_in, 1, gain=1.0),
        proj=init.conv(width, c_in, 1, gain=1.0),
    )


def make_decoder(init: Initializer, widths, start_stage: int, concat_levels=(), t: int = 2) -> DecoderParams:
    """Upsample from ``start_stage`` to stage 0, mirroring encoder widths.

    Each step's RRCU sees the upsampled map and the encoder skip of the same
    width; at ``concat_levels`` a donor decoder's output is concatenated too.
    """
    ups, units = [], []
    for level in range(start_stage - 1, -1, -1):
        c_in = (3 if level in concat_levels else 2) * widths[level]
        ups.append(init.conv_transpose(widths[level + 1], widths[level]))
        units.append(make_rrcu(init, c_in, widths[level], t))
    return DecoderParams(start_stage, ups, units)


# --- parameter walking ------------------------------------------------------


def named_tensors(obj, prefix: str = "") -> Iterator[tuple]:
    """Yield (dotted name, Tensor) for every trainable tensor, in field order."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, ConvKernel):
        yield f"{prefix}.weight", obj.weight
        if obj.bias is not None:
            yield f"{prefix}.bias", obj.bias
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, (int, float, str)) or f.name == "states":
                continue
            yield from named_tensors(value, f"{prefix}.{f.name}" if prefix else f.name)


def named_bn_states(obj, prefix: str = "") -> Iterator[tuple]:
    """Yield (dotted name, BNState) for every running-statistics slot."""
    if isinstance(obj, BatchNormParams):
        for i, s in enumerate(obj.states):
            yield f"{prefix}.states.{i}", s
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_bn_states(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, (ConvKernel, BNState)):
        for f in dataclasses.fields(obj):
            yield from named_bn_states(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


def count_tensor_elements(obj) -> int:
    return sum(t.size for _, t in named_tensors(obj))


# --- forward functions ------------------------------------------------------


def rcl_forward(x: Tensor, p: RCLParams, mode: str = "train") -> Tensor:
    """Recurrent conv layer unrolled for ``p.t`` steps with a shared kernel."""
    fx = ops.conv2d(x, p.ff, 1, 1)
    s = ops.relu(p.bn.apply(fx, 0, mode))
    for k in range(1, p.t + 1):
        if p.rec.weight.shape[1] != s.shape[1]:
            raise ValueError(f"rcl: recurrent kernel {p.rec.weight.shape} does not match state {s.shape}")
        s = ops.relu(p.bn.apply(ops.add_elementwise(fx, ops.conv2d(s, p.rec, 1, 1)), k, mode))
    return s


def rrcu_forward(x: Tensor, p: RRCUParams, mode: str = "train") -> Tensor:
    h = x if p.proj is None else ops.conv2d(x, p.proj, 1, 0)
    y = rcl_forward(rcl_forward(h, p.rcl1, mode), p.rcl2, mode)
    return ops.add_elementwise(h, y, tag="residual")


def irru_forward(x: Tensor, p: IRRUParams, mode: str = "train") -> Tensor:
    a = ops.conv2d(x, p.branch_a, 1, 0)
    b = rcl_forward(x, p.branch_b, mode)
    c = rcl_forward(rcl_forward(x, p.branch_c1, mode), p.branch_c2, mode)
    d = ops.conv2d(ops.maxpool2d(x, size=3, stride=1, padding=1), p.branch_d, 1, 0)
    cat = ops.concat_channels(ops.concat_channels(ops.concat_channels(a, b), c), d)
    return ops.add_elementwise(ops.conv2d(x, p.proj, 1, 0), cat, tag="residual")


def encoder_forward(x: Tensor, stages: list, mode: str = "train") -> list:
    n_stages = len(stages)
    h, w = x.shape[2:]
    factor = 2 ** (n_stages - 1)
    if h % factor or w % factor:
        raise ValueError(f"encoder: input {h}x{w} not divisible by 2^{n_stages - 1}")
    feats = []
    cur = x
    for i, p in enumerate(stages):
        if i > 0:
            cur = ops.maxpool2d(cur)
        cur = rrcu_forward(cur, p, mode)
        feats.append(StageFeature(cur, i, cur.shape[2]))
    return feats


def decoder_forward(
    start: StageFeature,
    skips: list,
    p: DecoderParams,
    encoder_skips: bool = True,
    add_donor: Optional[dict] = None,
    concat_donor: Optional[dict] = None,
    mode: str = "train",
) -> tuple:
    """Run one decoder path from ``start`` up to full resolution.

    ``skips`` are encoder features indexed by stage. ``add_donor`` /
    ``concat_donor`` map a stage level to another decoder's output at that
    level. Returns the full-resolution map and this decoder's per-level outputs.
    """
    if start.stage_index != p.start_stage:
        raise ValueError(f"decoder built for stage {p.start_stage} got start stage {start.stage_index}")
    by_level = {s.stage_index: s for s in skips}
    cur = start.tensor
    outputs = {}
    for j, level in enumerate(range(p.start_stage - 1, -1, -1)):
        u = ops.conv_transpose2d(cur, p.ups[j], stride=2, padding=0)
        if add_donor and level in add_donor:
            u = ops.add_elementwise(u, add_donor[level], tag="decoder_fusion")
        if encoder_skips:
            skip = by_level.get(level)
            if skip is None or skip.tensor.shape[2:] != u.shape[2:]:
                raise ValueError(f"decoder: no encoder skip at resolution {u.shape[2]} (stage {level})")
            u = ops.concat_channels(u, skip.tensor)
        if concat_donor and level in concat_donor:
            u = ops.concat_channels(u, concat_donor[level])
        cur = rrcu_forward(u, p.units[j], mode)
        outputs[level] = cur
    return cur, outputs
