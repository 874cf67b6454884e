"""Med Block, filter schedule, encoder/decoder wiring and parameter accounting.

Wiring of a Med Block on an ``H x W x C`` input, with ``E = 6C`` expanded
and ``S = max(1, E // 24)`` squeeze channels::

    expand   1x1 C->E, norm, ELU
    dw       7x7 depthwise on E, norm, ELU                      -> D
    gate     GAP(D) -> 1x1 E->S, ELU -> 1x1 S->E, sigmoid       -> G
    fuse     D * G (broadcast over H x W)
    project  1x1 E->C, norm                                     -> C_last
    out      x + C_last

An encoder stage halves the resolution with a stride-2 3x3 conv, then adds a
chain of Med Blocks and a parallel 7x7 depthwise block. A decoder stage
upsamples, applies a 3x3 conv + norm + ReLU and adds the skip connection.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from . import ops
from .ops import ConvLayer, DepthwiseConvLayer
from .tensor import Tensor, add, mul

DEFAULT_RATIO = 1.32 ** 2

LAYER_IDS = ("stem", "enc1", "enc2", "enc3", "enc4", "bottleneck", "dec1", "dec2", "dec3", "dec4")


@dataclass(frozen=True)
class FilterSchedule:
    r: float = DEFAULT_RATIO
    f1: int = 32
    f2: int = 24
    depth: int = 11
    values: tuple = ()

    def __post_init__(self):
        if not self.values:
            object.__setattr__(self, "values", _schedule_values(self.r, self.f1, self.f2, self.depth))


def _schedule_values(r, f1, f2, depth):
    if not r > 0:
        raise ValueError(f"ratio must be positive, got {r}")
    if f1 < 1 or f2 < 1:
        raise ValueError(f"seed filter counts must be >= 1, got {f1}, {f2}")
    if depth < 2:
        raise ValueError(f"depth must be >= 2 (two seed values), got {depth}")
    values = [int(f1), int(f2)]
    while len(values) < depth:
        values.append(int(r * values[-1]))  # int() truncates toward zero
    return tuple(values)


def filter_schedule(r: float = DEFAULT_RATIO, f1: int = 32, f2: int = 24, depth: int = 11) -> FilterSchedule:
    return FilterSchedule(r, f1, f2, depth)


@dataclass(frozen=True)
class MedBlockConfig:
    channels: int
    expansion_factor: int = 6
    depthwise_kernel: int = 7
    reduction_divisor: int = 24
    use_expansion: bool = True
    use_reduction_gate: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.expansion_factor < 1 or self.reduction_divisor < 1:
            raise ValueError(f"invalid Med Block config {self}")
        if self.depthwise_kernel % 2 == 0:
            raise ValueError(f"depthwise kernel must be odd, got {self.depthwise_kernel}")

    @property
    def expanded(self) -> int:
        return self.channels * (self.expansion_factor if self.use_expansion else 1)

    @property
    def squeeze(self) -> int:
        return max(1, self.expanded // self.reduction_divisor)


@dataclass(frozen=True)
class AblationConfig:
    disable_expansion: bool = False
    disable_reduction_gate: bool = False
    plain_cnn_encoder: bool = False


VARIANTS = {
    "baseline": AblationConfig(),
    "no-expansion": AblationConfig(disable_expansion=True),
    "no-reduction-gate": AblationConfig(disable_reduction_gate=True),
    "plain-cnn-encoder": AblationConfig(plain_cnn_encoder=True),
}


def default_repeats(input_size) -> tuple:
    """Med Blocks per stage: 2 up to 256 px, +1 per doubling beyond."""
    side = input_size if isinstance(input_size, int) else min(input_size)
    n = max(2, int(math.floor(math.log2(side / 256))) + 2)
    return (n,) * 4


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (256, 256)
    input_channels: int = 3
    num_classes: int = 1
    schedule: FilterSchedule = field(default_factory=FilterSchedule)
    stem_width: Optional[int] = None
    stage_widths: Optional[tuple] = None
    stage_repeats: Optional[tuple] = None
    expansion_factor: int = 6
    depthwise_kernel: int = 7
    reduction_divisor: int = 24
    use_norm: bool = True
    norm_eps: float = 1e-5
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        size = self.input_size
        if isinstance(size, int):
            size = (size, size)
        object.__setattr__(self, "input_size", tuple(int(s) for s in size))
        if self.stem_width is None:
            object.__setattr__(self, "stem_width", self.schedule.values[0])
        if self.stage_widths is None:
            object.__setattr__(self, "stage_widths", tuple(self.schedule.values[1:5]))
        if self.stage_repeats is None:
            object.__setattr__(self, "stage_repeats", default_repeats(self.input_size))
        object.__setattr__(self, "stage_widths", tuple(int(v) for v in self.stage_widths))
        object.__setattr__(self, "stage_repeats", tuple(int(v) for v in self.stage_repeats))
        self.validate()

    def validate(self):
        h, w = self.input_size
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ValueError(f"input size {self.input_size} must be a positive multiple of 16")
        if any(v < 1 for v in self.schedule.values):
            raise ValueError(f"filter schedule contains values < 1: {self.schedule.values}")
        if len(self.stage_widths) != 4 or any(v < 1 for v in self.stage_widths):
            raise ValueError(f"need 4 positive stage widths, got {self.stage_widths}")
        if len(self.stage_repeats) != 4 or any(v < 1 for v in self.stage_repeats):
            raise ValueError(f"need 4 stage repeats >= 1, got {self.stage_repeats}")
        if self.stem_width < 1 or self.input_channels < 1 or self.num_classes < 1:
            raise ValueError("stem width, input channels and class count must be positive")

    def med_block(self, channels: int) -> MedBlockConfig:
        return MedBlockConfig(
            channels=channels,
            expansion_factor=self.expansion_factor,
            depthwise_kernel=self.depthwise_kernel,
            reduction_divisor=self.reduction_divisor,
            use_expansion=not self.ablation.disable_expansion,
            use_reduction_gate=not self.ablation.disable_reduction_gate,
        )

    def with_ablation(self, variant) -> "ModelConfig":
        abl = VARIANTS[variant] if isinstance(variant, str) else variant
        return replace(self, ablation=abl)

    @classmethod
    def tiny(cls, input_size=32, **kw) -> "ModelConfig":
        kw.setdefault("stem_width", 8)
        kw.setdefault("stage_widths", (8, 12, 16, 24))
        return cls(input_size=input_size, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = {k: d["schedule"][k] for k in ("r", "f1", "f2", "depth")}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["schedule"] = FilterSchedule(**d.get("schedule", {}))
        d["ablation"] = AblationConfig(**d.get("ablation", {}))
        for key in ("input_size", "stage_widths", "stage_repeats"):
            if d.get(key) is not None and not isinstance(d[key], int):
                d[key] = tuple(d[key])
        return cls(**d)


# --- weights ---------------------------------------------------------------


class Scope(Mapping):
    """Prefix view into a flat name -> Tensor mapping."""

    def __init__(self, weights: Mapping, prefix: str = ""):
        self._w = weights
        self._prefix = prefix

    def _key(self, name):
        return f"{self._prefix}.{name}" if self._prefix else name

    def __getitem__(self, name):
        return self._w[self._key(name)]

    def __contains__(self, name):
        return self._key(name) in self._w

    def __iter__(self):
        start = len(self._prefix) + 1 if self._prefix else 0
        return (k[start:] for k in self._w if not self._prefix or k.startswith(self._prefix + "."))

    def __len__(self):
        return sum(1 for _ in self)

    def child(self, name: str) -> "Scope":
        return Scope(self._w, self._key(name))


class _ParamBuilder:
    def __init__(self, seed: int, use_norm: bool):
        self.rng = np.random.default_rng(seed)
        self.use_norm = use_norm
        self.params: dict[str, np.ndarray] = {}

    def _add(self, name, arr):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = arr.astype(np.float32)

    def conv(self, name, k, cin, cout, zero=False):
        bound = math.sqrt(6.0 / (k * k * cin))
        w = np.zeros((k, k, cin, cout)) if zero else self.rng.uniform(-bound, bound, (k, k, cin, cout))
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(cout))

    def depthwise(self, name, k, c):
        bound = math.sqrt(6.0 / (k * k))
        self._add(f"{name}.w", self.rng.uniform(-bound, bound, (k, k, c)))
        self._add(f"{name}.b", np.zeros(c))

    def norm(self, name, c, scale=1.0):
        if self.use_norm:
            self._add(f"{name}.norm.scale", np.full(c, scale))
            self._add(f"{name}.norm.shift", np.zeros(c))


def _build_med_block(pb: _ParamBuilder, name: str, cfg: MedBlockConfig):
    c, e, s, k = cfg.channels, cfg.expanded, cfg.squeeze, cfg.depthwise_kernel
    pb.conv(f"{name}.expand", 1, c, e)
    pb.norm(f"{name}.expand", e)
    pb.depthwise(f"{name}.dw", k, e)
    pb.norm(f"{name}.dw", e)
    if cfg.use_reduction_gate:
        pb.conv(f"{name}.gate_reduce", 1, e, s)
        pb.conv(f"{name}.gate_expand", 1, s, e)
    # zero final scale (or zero projection without norm): block starts as identity
    pb.conv(f"{name}.project", 1, e, c, zero=not pb.use_norm)
    pb.norm(f"{name}.project", c, scale=0.0)


def init_med_block(cfg: MedBlockConfig, seed: int = 0, use_norm: bool = True) -> dict:
    """Build-time weights of a standalone Med Block, keyed without a prefix."""
    pb = _ParamBuilder(seed, use_norm)
    _build_med_block(pb, "b", cfg)
    return {k[2:]: v for k, v in pb.params.items()}


def _build_plain_block(pb: _ParamBuilder, name: str, c: int):
    for i in range(2):
        pb.conv(f"{name}.plain{i}", 3, c, c)
        pb.norm(f"{name}.plain{i}", c)


def _build_repeat(pb, name, cfg: "ModelConfig", width: int):
    if cfg.ablation.plain_cnn_encoder:
        _build_plain_block(pb, name, width)
    else:
        _build_med_block(pb, name, cfg.med_block(width))


# --- forward ----------------------------------------------------------------


def _conv_unit(x, w: Scope, act: Optional[str], stride=1, use_norm=True, eps=1e-5):
    kernel = w["w"]
    layer = ConvLayer(kernel, w["b"], stride=stride)
    y = ops.pointwise_conv(x, layer) if kernel.shape[:2] == (1, 1) and stride == 1 else ops.conv2d(x, layer)
    if use_norm and "norm.scale" in w:
        y = ops.channel_norm(y, w["norm.scale"], w["norm.shift"], eps)
    return ops.activation(act, y) if act else y


def _dw_unit(x, w: Scope, act: Optional[str], use_norm=True, eps=1e-5):
    y = ops.depthwise_conv2d(x, DepthwiseConvLayer(w["w"], w["b"]))
    if use_norm and "norm.scale" in w:
        y = ops.channel_norm(y, w["norm.scale"], w["norm.shift"], eps)
    return ops.activation(act, y) if act else y


def med_block_forward(x: Tensor, weights: Mapping, cfg: MedBlockConfig, use_norm: bool = True,
                      eps: float = 1e-5) -> Tensor:
    """One Med Block; output has the input's shape."""
    if x.shape[-1] != cfg.channels:
        raise ValueError(f"Med Block expects {cfg.channels} channels, got {x.shape[-1]}")
    w = weights if isinstance(weights, Scope) else Scope(weights)
    expanded = _conv_unit(x, w.child("expand"), "elu", use_norm=use_norm, eps=eps)
    d = _dw_unit(expanded, w.child("dw"), "elu", use_norm=use_norm, eps=eps)
    if cfg.use_reduction_gate:
        pooled = ops.global_avg_pool(d)
        squeezed = _conv_unit(pooled, w.child("gate_reduce"), "elu", use_norm=False)
        gate = _conv_unit(squeezed, w.child("gate_expand"), "sigmoid", use_norm=False)
        d = mul(d, gate)
    c_last = _conv_unit(d, w.child("project"), None, use_norm=use_norm, eps=eps)
    return add(x, c_last)


def _plain_block_forward(x, w: Scope, use_norm, eps):
    for i in range(2):
        x = _conv_unit(x, w.child(f"plain{i}"), "elu", use_norm=use_norm, eps=eps)
    return x


def _repeat_forward(x, w: Scope, cfg: "ModelConfig", width: int):
    if cfg.ablation.plain_cnn_encoder:
        return _plain_block_forward(x, w, cfg.use_norm, cfg.norm_eps)
    return med_block_forward(x, w, cfg.med_block(width), cfg.use_norm, cfg.norm_eps)


def encoder_stage_forward(x: Tensor, weights: Mapping, cfg: ModelConfig, stage: int):
    """Returns ``(stage_output, skip_output)``; both are the same tensor."""
    w = weights if isinstance(weights, Scope) else Scope(weights)
    width = cfg.stage_widths[stage]
    entry = _conv_unit(x, w.child("entry"), "elu", stride=2, use_norm=cfg.use_norm, eps=cfg.norm_eps)
    c_path = entry
    for i in range(cfg.stage_repeats[stage]):
        c_path = _repeat_forward(c_path, w.child(f"block{i}"), cfg, width)
    d_path = _dw_unit(entry, w.child("dpath"), "elu", use_norm=cfg.use_norm, eps=cfg.norm_eps)
    out = add(c_path, d_path)
    return out, out


def decoder_stage_forward(x: Tensor, skip: Tensor, weights: Mapping, use_norm: bool = True,
                          eps: float = 1e-5) -> Tensor:
    w = weights if isinstance(weights, Scope) else Scope(weights)
    u = ops.upsample2x(x)
    if u.shape[-3:-1] != skip.shape[-3:-1]:
        raise ValueError(f"upsampled input {u.shape} does not match skip {skip.shape} spatially")
    o = _conv_unit(u, w.child("conv"), "relu", use_norm=use_norm, eps=eps)
    return add(skip, o)


@dataclass
class ModelOutput:
    probs: Tensor
    logits: Tensor
    taps: dict


class Model:
    """Built network: a config plus named float arrays."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params

    def tensors(self, requires_grad=False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward(self, x, weights: Optional[Mapping] = None, training: bool = False,
                rng=None, dropout_rate: float = 0.5) -> ModelOutput:
        cfg = self.cfg
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 3:
            x = Tensor(x.data[None])
        if x.shape[-1] != cfg.input_channels:
            raise ValueError(f"model expects {cfg.input_channels} input channels, got {x.shape[-1]}")
        if x.shape[1] % 16 or x.shape[2] % 16:
            raise ValueError(f"spatial dims {x.shape[1:3]} must be multiples of 16")
        w = Scope(weights if weights is not None else self.tensors())
        norm, eps = cfg.use_norm, cfg.norm_eps
        taps = {}

        h = _conv_unit(x, w.child("stem"), "elu", use_norm=norm, eps=eps)
        taps["stem"] = h
        skips = [h]
        for s in range(4):
            h, skip = encoder_stage_forward(h, w.child(f"enc{s + 1}"), cfg, s)
            taps[f"enc{s + 1}"] = h
            skips.append(skip)
        h = _repeat_forward(h, w.child("bottleneck"), cfg, cfg.stage_widths[3])
        h = ops.dropout(h, dropout_rate, rng, training=training)
        taps["bottleneck"] = h
        for s, skip in enumerate(reversed(skips[:4])):
            h = decoder_stage_forward(h, skip, w.child(f"dec{s + 1}"), norm, eps)
            taps[f"dec{s + 1}"] = h
        logits = _conv_unit(h, w.child("head"), None, use_norm=False)
        probs = ops.sigmoid(logits) if cfg.num_classes == 1 else ops.softmax_channels(logits)
        return ModelOutput(probs, logits, taps)

    def predict(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Inference-mode probabilities for an ``N x H x W x C`` array."""
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        outs = [self.forward(images[i:i + batch_size]).probs.data for i in range(0, len(images), batch_size)]
        return np.concatenate(outs, axis=0)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    cfg.validate()
    pb = _ParamBuilder(seed, cfg.use_norm)
    pb.conv("stem", 3, cfg.input_channels, cfg.stem_width)
    pb.norm("stem", cfg.stem_width)
    cin = cfg.stem_width
    for s, (width, reps) in enumerate(zip(cfg.stage_widths, cfg.stage_repeats)):
        name = f"enc{s + 1}"
        pb.conv(f"{name}.entry", 3, cin, width)
        pb.norm(f"{name}.entry", width)
        for i in range(reps):
            _build_repeat(pb, f"{name}.block{i}", cfg, width)
        pb.depthwise(f"{name}.dpath", cfg.depthwise_kernel, width)
        pb.norm(f"{name}.dpath", width)
        cin = width
    _build_repeat(pb, "bottleneck", cfg, cfg.stage_widths[3])
    skip_widths = [cfg.stem_width, *cfg.stage_widths[:3]]
    for s, out_width in enumerate(reversed(skip_widths)):
        pb.conv(f"dec{s + 1}.conv", 3, cin, out_width)
        pb.norm(f"dec{s + 1}.conv", out_width)
        cin = out_width
    pb.conv("head", 1, cin, cfg.num_classes)
    return Model(cfg, pb.params)


# --- parameter accounting --------------------------------------------------------


@dataclass
class ParamTable:
    rows: list  # (stage, layer, param_count)
    total: int

    def by_stage(self) -> dict:
        out: dict = {}
        for stage, _, n in self.rows:
            out[stage] = out.get(stage, 0) + n
        return out


def _conv_count(k, cin, cout):
    return k * k * cin * cout + cout


def med_block_rows(cfg: MedBlockConfig, use_norm: bool = True) -> list:
    """Analytic (layer, count) pairs for one Med Block."""
    c, e, s, k = cfg.channels, cfg.expanded, cfg.squeeze, cfg.depthwise_kernel
    rows = [("expand", c * e + e)]
    if use_norm:
        rows.append(("expand.norm", 2 * e))
    rows.append(("dw", k * k * e + e))
    if use_norm:
        rows.append(("dw.norm", 2 * e))
    if cfg.use_reduction_gate:
        rows.append(("gate_reduce", e * s + s))
        rows.append(("gate_expand", s * e + e))
    rows.append(("project", e * c + c))
    if use_norm:
        rows.append(("project.norm", 2 * c))
    return rows


def _repeat_rows(cfg: ModelConfig, width: int) -> list:
    if cfg.ablation.plain_cnn_encoder:
        rows = []
        for i in range(2):
            rows.append((f"plain{i}", _conv_count(3, width, width)))
            if cfg.use_norm:
                rows.append((f"plain{i}.norm", 2 * width))
        return rows
    return med_block_rows(cfg.med_block(width), cfg.use_norm)


def count_parameters(model_or_cfg) -> ParamTable:
    """Per-layer parameter counts from closed-form layer formulas."""
    cfg = model_or_cfg.cfg if isinstance(model_or_cfg, Model) else model_or_cfg
    norm = 2 if cfg.use_norm else 0
    rows = [("stem", "conv", _conv_count(3, cfg.input_channels, cfg.stem_width))]
    if norm:
        rows.append(("stem", "conv.norm", norm * cfg.stem_width))
    cin = cfg.stem_width
    for s, (width, reps) in enumerate(zip(cfg.stage_widths, cfg.stage_repeats)):
        stage = f"enc{s + 1}"
        rows.append((stage, "entry", _conv_count(3, cin, width)))
        if norm:
            rows.append((stage, "entry.norm", norm * width))
        for i in range(reps):
            rows.extend((stage, f"block{i}.{layer}", n) for layer, n in _repeat_rows(cfg, width))
        rows.append((stage, "dpath", cfg.depthwise_kernel ** 2 * width + width))
        if norm:
            rows.append((stage, "dpath.norm", norm * width))
        cin = width
    rows.extend(("bottleneck", layer, n) for layer, n in _repeat_rows(cfg, cfg.stage_widths[3]))
    for s, width in enumerate(reversed([cfg.stem_width, *cfg.stage_widths[:3]])):
        rows.append((f"dec{s + 1}", "conv", _conv_count(3, cin, width)))
        if norm:
            rows.append((f"dec{s + 1}", "conv.norm", norm * width))
        cin = width
    rows.append(("head", "conv", _conv_count(1, cin, cfg.num_classes)))
    return ParamTable(rows, sum(n for _, _, n in rows))


def enumerate_parameters(model: Model) -> int:
    """Oracle: total element count of the allocated weight arrays."""
    return int(sum(v.size for v in model.params.values()))


def complexity_ledger(cfg: ModelConfig, variants=None) -> list:
    """Rows ``(variant, stage, layer, param_count, cumulative_total)`` per ablation variant."""
    rows = []
    for name in variants or VARIANTS:
        table = count_parameters(cfg.with_ablation(name))
        running = 0
        for stage, layer, n in table.rows:
            running += n
            rows.append((name, stage, layer, n, running))
    return rows


def ledger_totals(ledger_rows) -> dict:
    totals: dict = {}
    for variant, _, _, _, cumulative in ledger_rows:
        totals[variant] = cumulative
    return totals
