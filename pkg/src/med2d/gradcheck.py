"""Finite-difference verification suite for every differentiable primitive.

Each case is ``(name, fn, x)`` with ``fn`` mapping one float64 Tensor to a
scalar; other operands are frozen random constants. The full-model cases
check sampled coordinates of the input and of several parameter tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import ops
from .arch import MedBlockConfig, ModelConfig, build_model, med_block_forward
from .tensor import Tensor, add, grad_check, mean, mul, reshape, sub
from .tensor import sum as tensor_sum
from .train import bce_with_logits, ce_with_logits, dice_loss, encode_targets, compute_loss

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass(frozen=True)
class CheckRow:
    name: str
    max_rel_err: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    # random projection to a scalar so every output element matters
    return tensor_sum(mul(y, Tensor(w)))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def primitive_cases(seed: int = 0) -> Iterator[tuple]:
    rng = np.random.default_rng(seed)
    n, h, w, c = 2, 6, 6, 3

    def proj(shape):
        return rng.standard_normal(shape)

    x = rng.standard_normal((n, h, w, c))
    for stride, padding in ((1, "same"), (2, "same"), (1, "valid")):
        k = rng.standard_normal((3, 3, c, 4)) * 0.5
        b = rng.standard_normal(4)
        layer = ops.ConvLayer(Tensor(k), Tensor(b), stride, padding)
        wout = proj(ops.conv2d(Tensor(x), layer).shape)
        yield (f"conv2d s{stride} {padding} / input",
               lambda t, layer=layer, wout=wout: _weighted(ops.conv2d(t, layer), wout), x)
        yield (f"conv2d s{stride} {padding} / kernel",
               lambda t, b=b, s=stride, p=padding, wout=wout: _weighted(
                   ops.conv2d(Tensor(x), ops.ConvLayer(t, Tensor(b), s, p)), wout), k)
        yield (f"conv2d s{stride} {padding} / bias",
               lambda t, k=k, s=stride, p=padding, wout=wout: _weighted(
                   ops.conv2d(Tensor(x), ops.ConvLayer(Tensor(k), t, s, p)), wout), b)

    k1 = rng.standard_normal((1, 1, c, 5))
    b1 = rng.standard_normal(5)
    w1 = proj((n, h, w, 5))
    yield ("pointwise / input", lambda t: _weighted(ops.pointwise_conv(t, ops.ConvLayer(Tensor(k1), Tensor(b1))), w1), x)
    yield ("pointwise / kernel", lambda t: _weighted(ops.pointwise_conv(Tensor(x), ops.ConvLayer(t, Tensor(b1))), w1), k1)

    for stride in (1, 2):
        kd = rng.standard_normal((7, 7, c)) * 0.3
        bd = rng.standard_normal(c)
        layer = ops.DepthwiseConvLayer(Tensor(kd), Tensor(bd), stride)
        wd = proj(ops.depthwise_conv2d(Tensor(x), layer).shape)
        yield (f"depthwise 7x7 s{stride} / input",
               lambda t, layer=layer, wd=wd: _weighted(ops.depthwise_conv2d(t, layer), wd), x)
        yield (f"depthwise 7x7 s{stride} / kernel",
               lambda t, bd=bd, s=stride, wd=wd: _weighted(
                   ops.depthwise_conv2d(Tensor(x), ops.DepthwiseConvLayer(t, Tensor(bd), s)), wd), kd)
        yield (f"depthwise 7x7 s{stride} / bias",
               lambda t, kd=kd, s=stride, wd=wd: _weighted(
                   ops.depthwise_conv2d(Tensor(x), ops.DepthwiseConvLayer(Tensor(kd), t, s)), wd), bd)

    wg = proj((n, 1, 1, c))
    yield ("global_avg_pool", lambda t: _weighted(ops.global_avg_pool(t), wg), x)
    wu = proj((n, 2 * h, 2 * w, c))
    yield ("upsample2x", lambda t: _weighted(ops.upsample2x(t), wu), x)

    xa = _away_from_zero(rng, (n, h, w, c))
    wa = proj(xa.shape)
    for kind in ("relu", "elu", "sigmoid"):
        yield (kind, lambda t, kind=kind: _weighted(ops.activation(kind, t), wa), xa)
    yield ("softmax_channels", lambda t: _weighted(ops.softmax_channels(t), wa), x)

    scale = rng.uniform(0.5, 1.5, c)
    shift = rng.standard_normal(c)
    xn = rng.standard_normal((n, h, w, c)) * 2 + 1
    yield ("channel_norm / input", lambda t: _weighted(ops.channel_norm(t, Tensor(scale), Tensor(shift)), wa), xn)
    yield ("channel_norm / scale", lambda t: _weighted(ops.channel_norm(Tensor(xn), t, Tensor(shift)), wa), scale)
    yield ("channel_norm / shift", lambda t: _weighted(ops.channel_norm(Tensor(xn), Tensor(scale), t), wa), shift)

    other = rng.standard_normal(x.shape)
    chan = rng.standard_normal((n, 1, 1, c))
    yield ("add", lambda t: _weighted(add(t, Tensor(other)), wa), x)
    yield ("sub / right", lambda t: _weighted(sub(Tensor(other), t), wa), x)
    yield ("mul", lambda t: _weighted(mul(t, Tensor(other)), wa), x)
    yield ("mul / channel broadcast", lambda t: _weighted(mul(Tensor(x), t), wa), chan)
    ws, wr = proj((n, c)), proj((n, h * w, c))
    yield ("sum axis", lambda t: _weighted(tensor_sum(t, axis=(1, 2)), ws), x)
    yield ("mean", lambda t: mul(mean(t), Tensor(np.array(3.0))), x)
    yield ("reshape", lambda t: _weighted(reshape(t, (n, h * w, c)), wr), x)
    yield ("dropout (fixed mask)", lambda t: _weighted(ops.dropout(t, 0.5, rng=7, training=True), wa), x)

    probs = rng.uniform(0.05, 0.95, (n, h, w, 2))
    onehot = encode_targets(rng.integers(0, 2, (n, h, w)), 2, np.float64)
    yield ("dice_loss", lambda t: dice_loss(t, onehot), probs)
    binary = encode_targets(rng.integers(0, 2, (n, h, w)), 1, np.float64)
    yield ("bce_with_logits", lambda t: bce_with_logits(t, binary), rng.standard_normal((n, h, w, 1)) * 2)
    yield ("ce_with_logits", lambda t: ce_with_logits(t, onehot), rng.standard_normal((n, h, w, 2)) * 2)

    med = MedBlockConfig(channels=4)
    weights = _random_med_block_weights(rng, med)
    xm = rng.standard_normal((1, 8, 8, 4))
    wm = proj(xm.shape)
    yield ("med_block / input",
           lambda t: _weighted(med_block_forward(t, {k: Tensor(v) for k, v in weights.items()}, med), wm), xm)


def _random_med_block_weights(rng, cfg: MedBlockConfig) -> dict:
    e, s, c, k = cfg.expanded, cfg.squeeze, cfg.channels, cfg.depthwise_kernel
    shapes = {
        "expand.w": (1, 1, c, e), "expand.b": (e,), "dw.w": (k, k, e), "dw.b": (e,),
        "gate_reduce.w": (1, 1, e, s), "gate_reduce.b": (s,), "gate_expand.w": (1, 1, s, e),
        "gate_expand.b": (e,), "project.w": (1, 1, e, c), "project.b": (c,),
    }
    out = {name: rng.standard_normal(shape) * 0.3 for name, shape in shapes.items()}
    for unit, width in (("expand", e), ("dw", e), ("project", c)):
        out[f"{unit}.norm.scale"] = rng.uniform(0.5, 1.5, width)
        out[f"{unit}.norm.shift"] = rng.standard_normal(width) * 0.1
    return out


def tiny_grad_model(seed: int = 0, input_size: int = 32):
    """Tiny f64 model with every parameter randomized (no identity-initialized blocks)."""
    cfg = ModelConfig.tiny(input_size=input_size)
    model = build_model(cfg, seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, v in model.params.items():
        if name.endswith("norm.scale"):
            model.params[name] = rng.uniform(0.5, 1.5, v.shape)
        elif name.endswith(".b") or name.endswith("norm.shift"):
            model.params[name] = rng.standard_normal(v.shape) * 0.1
    return model


def model_cases(seed: int = 0, coords_per_tensor: int = 6) -> Iterator[tuple]:
    """Full tiny model (32 x 32 x 3) with dice + BCE loss and a fixed dropout mask."""
    model = tiny_grad_model(seed)
    rng = np.random.default_rng(seed + 2)
    x = rng.uniform(0, 1, (1, 32, 32, 3))
    target = encode_targets((rng.uniform(size=(1, 32, 32)) > 0.6).astype(np.uint8), 1, np.float64)

    def loss_for(weights, inp):
        out = model.forward(inp, weights, training=True, rng=11, dropout_rate=0.5)
        return compute_loss("dice_plus_bce", out, target)

    def coords(shape):
        flat = rng.choice(int(np.prod(shape)), size=min(coords_per_tensor, int(np.prod(shape))), replace=False)
        return [np.unravel_index(i, shape) for i in flat]

    frozen = {k: Tensor(v) for k, v in model.params.items()}
    yield ("model / input", lambda t: loss_for(frozen, t), x, coords(x.shape))
    for name in ("stem.w", "enc1.block0.expand.w", "enc1.block0.dw.w", "enc2.block0.gate_reduce.w",
                 "enc3.dpath.w", "enc4.entry.w", "bottleneck.project.norm.scale", "dec1.conv.w",
                 "dec4.conv.norm.shift", "head.w", "head.b"):
        value = model.params[name]

        def f(t, name=name):
            weights = dict(frozen)
            weights[name] = t
            return loss_for(weights, Tensor(x))

        yield (f"model / {name}", f, value, coords(value.shape))


def run_suite(include_model: bool = True, seed: int = 0, progress: Optional[Callable[[CheckRow], None]] = None):
    rows = []
    for name, fn, x in primitive_cases(seed):
        rep = grad_check(fn, x, tol=PRIMITIVE_TOL)
        rows.append(CheckRow(name, rep.max_rel_err, PRIMITIVE_TOL, rep.checked))
        if progress:
            progress(rows[-1])
    if include_model:
        for name, fn, x, coords in model_cases(seed):
            rep = grad_check(fn, x, eps=1e-6, tol=MODEL_TOL, coords=coords)
            rows.append(CheckRow(name, rep.max_rel_err, MODEL_TOL, rep.checked))
            if progress:
                progress(rows[-1])
    return rows
