"""Registry of finite-difference gradient checks over primitives and composite blocks.

Each check builds a small double-precision problem and projects the output onto
fixed random weights, so the scalar under test has no accidental symmetries
(a plain sum of a softmax or a normalization output has zero gradient).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels as K
from . import tensor as T
from .gradcheck import GradCheckReport, finite_diff_check
from .layers import (Bottleneck, BottleneckSpec, DecoderStage, MultiHeadAttention, ResidualUnit,
                     SegmentationHead, ViTLayer, ViTSpec)
from .models import ModelConfig, build_res_unet
from .nn import Module
from .tensor import Tensor

F64 = np.float64
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    target: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _rand(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, dtype=F64)


def _positive(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(0.5, 2.0, shape), dtype=F64)


def _project(out: Tensor, seed: int = 99) -> Tensor:
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tsum(out * Tensor(w, dtype=F64))


def _module(m: Module) -> Module:
    m.cast(F64)
    return m


# Each builder returns a list of (target_name, tensor_to_perturb, scalar_fn, max_entries).
Case = tuple


def _unary(op: Callable, make_x: Callable) -> Callable:
    def build(rng):
        x = make_x(rng)
        return [("x", x, lambda v: _project(op(v)), None)]
    return build


def _conv3d(stride):
    def build(rng):
        x = _rand(rng, 1, 2, 4, 4, 4)
        w = _rand(rng, 3, 2, 3, 3, 3, scale=0.3)
        b = _rand(rng, 3)
        f = lambda _: _project(K.conv3d(x, w, b, stride=stride, padding=1))
        return [("input", x, f, None), ("weight", w, f, None), ("bias", b, f, None)]
    return build


def _maxpool(rng):
    x = _rand(rng, 1, 2, 4, 4, 4)
    return [("x", x, lambda v: _project(K.maxpool3d(v, 3, 2, 1)), None)]


def _matmul(rng):
    a = _rand(rng, 2, 3, 4)
    b = _rand(rng, 2, 4, 5)
    f = lambda _: _project(T.matmul(a, b))
    return [("a", a, f, None), ("b", b, f, None)]


def _binary(op):
    def build(rng):
        a = _rand(rng, 2, 3, 4)
        b = _positive(rng, 3, 1) if op is T.div else _rand(rng, 3, 1)
        f = lambda _: _project(op(a, b))
        return [("a", a, f, None), ("b", b, f, None)]
    return build


def _concat(rng):
    a = _rand(rng, 1, 2, 3, 3, 3)
    b = _rand(rng, 1, 3, 3, 3, 3)
    f = lambda _: _project(T.concat([a, b], axis=1))
    return [("a", a, f, None), ("b", b, f, None)]


def _prelu(rng):
    x = _rand(rng, 1, 3, 2, 2, 2)
    alpha = Tensor(np.full(3, 0.25), dtype=F64)
    f = lambda _: _project(T.prelu(x, alpha))
    return [("x", x, f, None), ("alpha", alpha, f, None)]


def _group_norm(rng):
    x = _rand(rng, 1, 4, 2, 2, 2)
    g = _positive(rng, 4)
    b = _rand(rng, 4)
    f = lambda _: _project(K.group_norm(x, 2, g, b))
    return [("x", x, f, None), ("gamma", g, f, None), ("beta", b, f, None)]


def _layer_norm(rng):
    x = _rand(rng, 2, 3, 6)
    g = _positive(rng, 6)
    b = _rand(rng, 6)
    f = lambda _: _project(K.layer_norm(x, g, b))
    return [("x", x, f, None), ("gamma", g, f, None), ("beta", b, f, None)]


def _resize(rng):
    x = _rand(rng, 1, 2, 2, 3, 2)
    return [("x", x, lambda v: _project(K.resize_trilinear(v, (3, 5, 4))), None)]


def _first_param(m: Module) -> tuple:
    name, p = next(iter(m.named_parameters()))
    return name, p


def _module_case(m: Module, x: Tensor, call=None, max_entries=None) -> list:
    call = call or (lambda: m(x))
    f = lambda _: _project(call())
    name, p = _first_param(m)
    return [("input", x, f, max_entries), (name, p, f, max_entries)]


def _bottleneck(stride):
    def build(rng):
        m = _module(Bottleneck(BottleneckSpec(4, 2, 8, stride), rng=rng))
        return _module_case(m, _rand(rng, 1, 4, 4, 4, 4))
    return build


def _mha(rng):
    m = _module(MultiHeadAttention(8, 2, rng=rng))
    return _module_case(m, _rand(rng, 1, 4, 8))


def _vit_layer(rng):
    spec = ViTSpec(hidden=8, mlp=16, heads=2, layers=1)
    m = _module(ViTLayer(spec, rng=rng))
    return _module_case(m, _rand(rng, 1, 4, 8))


def _decoder_stage(rng):
    m = _module(DecoderStage(3, 2, 4, rng=rng))
    x = _rand(rng, 1, 3, 2, 2, 2)
    skip = _rand(rng, 1, 2, 4, 4, 4)
    cases = _module_case(m, x, call=lambda: m(x, skip))
    cases.append(("skip", skip, cases[0][2], None))
    return cases


def _head(rng):
    m = _module(SegmentationHead(3, 4, rng=rng))
    return _module_case(m, _rand(rng, 1, 3, 3, 3, 3))


def _residual_unit(rng):
    m = _module(ResidualUnit(2, 3, stride=2, subunits=2, rng=rng))
    return _module_case(m, _rand(rng, 1, 2, 4, 4, 4))


def _dice_ce(rng):
    from .training import dice_ce_loss
    logits = _rand(rng, 1, 3, 4, 4, 4)
    labels = rng.integers(0, 3, size=(1, 4, 4, 4))
    f = lambda v: dice_ce_loss(T.softmax(v, axis=1), labels)
    return [("logits", logits, f, None)]


def _res_unet(rng):
    cfg = ModelConfig(kind="res_unet", input_extent=16, num_classes=3, unet_channels=(2, 2, 2, 2, 2))
    m = _module(build_res_unet(cfg, seed=int(rng.integers(1 << 30))))
    return _module_case(m, _rand(rng, 1, 1, 16, 16, 16), max_entries=48)


PRIMITIVES: dict[str, Callable] = {
    "conv3d": _conv3d(1),
    "conv3d_stride2": _conv3d(2),
    "maxpool3d": _maxpool,
    "trilinear_upsample": _unary(lambda v: K.trilinear_upsample(v, 2), lambda r: _rand(r, 1, 2, 2, 3, 2)),
    "resize_trilinear": _resize,
    "matmul": _matmul,
    "softmax": _unary(lambda v: T.softmax(v, axis=1), lambda r: _rand(r, 2, 4, 3)),
    "group_norm": _group_norm,
    "layer_norm": _layer_norm,
    "relu": _unary(T.relu, lambda r: _rand(r, 3, 4)),
    "prelu": _prelu,
    "gelu": _unary(T.gelu, lambda r: _rand(r, 3, 4)),
    "exp": _unary(T.exp, lambda r: _rand(r, 3, 4)),
    "log": _unary(T.log, lambda r: _positive(r, 3, 4)),
    "add": _binary(T.add),
    "mul": _binary(T.mul),
    "div": _binary(T.div),
    "concat": _concat,
    "mean": _unary(lambda v: T.mean(v, axis=1, keepdims=True), lambda r: _rand(r, 2, 3, 4)),
    "transpose": _unary(lambda v: T.transpose(v, (2, 0, 1)), lambda r: _rand(r, 2, 3, 4)),
    "getitem": _unary(lambda v: v[:, 1:, ::2], lambda r: _rand(r, 2, 3, 4)),
}

COMPOSITES: dict[str, Callable] = {
    "bottleneck": _bottleneck(1),
    "bottleneck_stride2": _bottleneck(2),
    "multi_head_attention": _mha,
    "vit_layer": _vit_layer,
    "decoder_stage": _decoder_stage,
    "segmentation_head": _head,
    "residual_unit": _residual_unit,
    "dice_ce_loss": _dice_ce,
    "res_unet": _res_unet,
}

REGISTRY: dict[str, Callable] = {**PRIMITIVES, **COMPOSITES}


def run_check(name: str, seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    """Run every target of one registered check."""
    if name not in REGISTRY:
        raise KeyError(f"unknown gradcheck op {name!r}; known: {', '.join(REGISTRY)}")
    rng = np.random.default_rng([seed, sorted(REGISTRY).index(name)])
    results = []
    for target, x, f, max_entries in REGISTRY[name](rng):
        t0 = time.perf_counter()
        report = finite_diff_check(f, x, tol=tol, max_entries=max_entries, seed=seed)
        results.append(CheckResult(name, target, report, time.perf_counter() - t0))
    return results


def run_all(names: Optional[list] = None, seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    out = []
    for name in names or list(REGISTRY):
        out.extend(run_check(name, seed, tol))
    return out


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'op':<22} {'target':<28} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<22} {r.target:<28} {r.report.max_rel_err:>12.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
