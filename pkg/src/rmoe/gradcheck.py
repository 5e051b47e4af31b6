"""Finite-difference verification of every differentiable kernel and the full loss.

Two paths are checked:

* 64-bit: analytic gradients of a float64 graph.
* 32-bit: analytic gradients of the float32 training graph.

Both are compared with central differences of an identical graph (same
inputs, same frozen routing) evaluated in extended precision, so the
reference carries far less rounding noise than either path under test.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import make_batch, synth_scene, compute_norm_stats
from .model import EncoderConfig, Modality, init_model
from .numkit import SeededRng
from .train import forward_loss

TOL64 = 1e-6
TOL32 = 1e-4
EPS = 1e-5
REF_DTYPE = np.longdouble
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def _weighted_sum(out: ad.Node, rng: SeededRng) -> ad.Node:
    """Scalar probe ``sum(out * r)`` so every output coordinate matters."""
    r = rng.normal(out.shape)
    return ad.sum(ad.mul(out, r))


# Each case draws float64 inputs from ``rng`` and returns ``(inputs, build)``
# where ``build(graph, leaves, rng)`` applies the kernel to the bound leaves.


def _case(name, shapes, build, positive=False):
    def make(rng: SeededRng):
        inputs = {}
        for i, shp in enumerate(shapes):
            x = rng.spawn(i).normal(shp)
            inputs[f"x{i}"] = np.abs(x) + 0.5 if positive else x
        return inputs, build
    make.__name__ = name
    return make


_ROWS = np.array([3, 0, 3, 1])


def _ln(g, xs):
    return ad.layer_norm(xs[0], xs[1], xs[2])


KERNELS = {
    "add": _case("add", [(3, 4), (4,)], lambda g, xs: ad.add(xs[0], xs[1])),
    "sub": _case("sub", [(3, 4), (3, 1)], lambda g, xs: ad.sub(xs[0], xs[1])),
    "mul": _case("mul", [(3, 4), (3, 4)], lambda g, xs: ad.mul(xs[0], xs[1])),
    "scale": _case("scale", [(5,)], lambda g, xs: ad.scale(xs[0], -1.7)),
    "square": _case("square", [(2, 3)], lambda g, xs: ad.square(xs[0])),
    "log": _case("log", [(6,)], lambda g, xs: ad.log(xs[0]), positive=True),
    "matmul": _case("matmul", [(3, 5), (5, 2)], lambda g, xs: ad.matmul(xs[0], xs[1])),
    "bmm": _case("bmm", [(2, 3, 4), (2, 4, 3)], lambda g, xs: ad.bmm(xs[0], xs[1])),
    "reshape": _case("reshape", [(2, 6)], lambda g, xs: ad.reshape(xs[0], (3, 4))),
    "transpose": _case("transpose", [(2, 3, 4)], lambda g, xs: ad.transpose(xs[0], (1, 0, 2))),
    "gelu": _case("gelu", [(4, 5)], lambda g, xs: ad.gelu(xs[0])),
    "softplus": _case("softplus", [(4, 5)], lambda g, xs: ad.softplus(xs[0])),
    "softmax": _case("softmax", [(3, 5)], lambda g, xs: ad.softmax(xs[0], axis=-1)),
    "layer_norm": _case("layer_norm", [(3, 6), (6,), (6,)], _ln),
    "sum": _case("sum", [(3, 4)], lambda g, xs: ad.sum(xs[0], axis=0)),
    "mean": _case("mean", [(3, 4)], lambda g, xs: ad.mean(xs[0], axis=1, keepdims=True)),
    "getitem": _case("getitem", [(4, 5)], lambda g, xs: ad.getitem(xs[0], (slice(1, 3), slice(None, None, 2)))),
    "gather_rows": _case("gather_rows", [(4, 3)], lambda g, xs: ad.gather_rows(xs[0], _ROWS)),
    "scatter_rows": _case("scatter_rows", [(3, 2)], lambda g, xs: ad.scatter_rows(xs[0], np.array([4, 0, 2]), 6)),
    "where": _case(
        "where", [(3, 4), (3, 4)],
        lambda g, xs: ad.where(np.arange(12).reshape(3, 4) % 3 == 0, xs[0], xs[1]),
    ),
}


@dataclass
class CheckResult:
    name: str
    seed: int
    path: str  # "64" | "32"
    max_rel_err: float
    tol: float
    max_coord_rel_err: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


@dataclass
class SuiteResult:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def worst(self, path: str) -> float:
        return max((r.max_rel_err for r in self.results if r.path == path), default=0.0)

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]


def _results(name: str, seed: int, r64: ad.GradReport, r32: ad.GradReport):
    return tuple(CheckResult(name, seed, path, r.max_rel_err, r.tol, r.max_coord_rel_err)
                 for path, r in (("64", r64), ("32", r32)))


def _build(make, seed: int, dtype):
    rng = SeededRng(seed)
    inputs, build = make(rng.spawn(0))
    graph = ad.CompGraph(dtype)
    leaves = [graph.param(k, v) for k, v in inputs.items()]
    _weighted_sum(build(graph, leaves), rng.spawn(1))
    return graph


def check_kernel(name: str, seed: int, eps: float = EPS, tol64: float = TOL64, tol32: float = TOL32):
    make = KERNELS[name]
    r64 = ad.finite_diff_check(_build(make, seed, np.float64), eps, tol64,
                               numeric_graph=_build(make, seed, REF_DTYPE))
    r32 = ad.compare_gradients(ad.backward(_build(make, seed, np.float32)), r64.numeric, r64.coords, tol32)
    return _results(name, seed, r64, r32)


# ------------------------------------------------------------- tiny model


def tiny_config() -> EncoderConfig:
    return EncoderConfig(
        dim=8, num_blocks=2, num_heads=2, expansion=4, patch_size=4, image_size=8,
        n_specialized=2, n_collaborative=2, top_k=1, init_std=0.2,
    )


def _tiny_graph(seed: int, dtype, alpha: float):
    cfg = tiny_config()
    model = init_model(cfg, seed)
    norm = compute_norm_stats(cfg.modalities, count=8, size=cfg.image_size)
    images = [synth_scene(m, 1000 * seed + i, cfg.image_size) for i, m in enumerate(Modality) for _ in range(2)]
    batch = make_batch(images, norm, cfg.patch_size, 0.5, seed)
    rng = SeededRng(seed).spawn(0x9A7E)
    graph, loss, _, _, terms = forward_loss(model, batch, rng, True, alpha, dtype)
    routes = {k: t.f.tolist() for k, t in terms.items()}
    return graph, routes


def check_full_loss(seed: int, eps: float = EPS, tol64: float = TOL64, tol32: float = TOL32,
                    max_coords: int | None = 2, alpha: float = 0.01):
    """Gradient check of reconstruction + alpha * balance on the tiny model, training-mode gating."""
    ref, routes_ref = _tiny_graph(seed, REF_DTYPE, alpha)
    g64, routes64 = _tiny_graph(seed, np.float64, alpha)
    g32, routes32 = _tiny_graph(seed, np.float32, alpha)
    if not routes64 == routes32 == routes_ref:
        raise RuntimeError(f"seed {seed}: graphs at different precisions routed differently")
    r64 = ad.finite_diff_check(g64, eps, tol64, numeric_graph=ref, max_coords=max_coords, seed=seed)
    r32 = ad.compare_gradients(ad.backward(g32), r64.numeric, r64.coords, tol32)
    return _results("full_loss", seed, r64, r32)


def run_suite(seeds=DEFAULT_SEEDS, eps: float = EPS, tol64: float = TOL64, tol32: float = TOL32,
              kernels=None, full_loss: bool = True, max_coords: int | None = 2) -> SuiteResult:
    t0 = time.perf_counter()
    out = SuiteResult()
    for name in kernels or KERNELS:
        for s in seeds:
            out.results.extend(check_kernel(name, s, eps, tol64, tol32))
    if full_loss:
        for s in seeds:
            out.results.extend(check_full_loss(s, eps, tol64, tol32, max_coords))
    out.seconds = time.perf_counter() - t0
    return out
