"""Named finite-difference gradient checks for every differentiable op.

Each check builds a small random problem per seed and registered shape,
reduces the op's output to a scalar with a fixed random projection, and
compares the analytic gradient of every input against central differences
in double precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .backbone import (
    ScaleBranch,
    ScaleBranchConfig,
    SparseFeatureMap,
    init_branch_params,
    strided_sparse_conv,
    submanifold_sparse_conv,
)
from .errors import ConfigError
from .fusion import FusionConfig, align_scales, attention_fuse, init_fusion_params
from .head import BEVGrid, Box3D, build_targets, detection_loss, init_head_params, run_head
from .numerics import Tensor, precision
from .pillars import PillarGridSpec, PointCloud, assign_pillars, encode_pillars

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_EPS = 1e-5
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

# A check returns the loss closure and the tensors whose gradients are compared.
Problem = tuple[Callable[[], Tensor], list[Tensor]]
# Keyword arguments of one problem size, passed to the builder.
Shape = dict[str, Any]


@dataclass
class GradCheck:
    """A named gradient check run over several problem shapes."""

    name: str
    description: str
    build: Callable[..., Problem]
    shapes: tuple[Shape, ...]

    def problem(self, seed: int, shape: int = 0) -> Problem:
        return self.build(np.random.default_rng(seed), **self.shapes[shape])


def shape_label(shape: Shape) -> str:
    return ",".join(f"{k}={v}" for k, v in shape.items())


@dataclass
class CheckResult:
    name: str
    max_error: float
    errors: list[float] = field(default_factory=list)
    tolerance: float = DEFAULT_TOLERANCE
    cases: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    @property
    def worst_case(self) -> str | None:
        if not self.errors or not self.cases:
            return None
        return self.cases[int(np.argmax(self.errors))]


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=out.shape))
    return lambda t: nx.sum(nx.mul(t, weights))


def _problem(fn: Callable[[], Tensor], inputs: list[Tensor], rng: np.random.Generator) -> Problem:
    reduce = _project(fn(), rng)
    return (lambda: reduce(fn())), inputs


def _random_sparse(rng: np.random.Generator, dims: tuple[int, int], channels: int) -> SparseFeatureMap:
    mask = rng.random(dims) < 0.4
    mask[0, 0] = True
    coords = np.argwhere(mask)
    return SparseFeatureMap(dims, coords, _leaf(rng, len(coords), channels))


# ============================================================================
# Problems
# ============================================================================


def _matmul(rng: np.random.Generator, m: int, k: int, n: int) -> Problem:
    a, b = _leaf(rng, m, k), _leaf(rng, k, n)
    return _problem(lambda: nx.matmul(a, b), [a, b], rng)


def _elementwise(rng: np.random.Generator, a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> Problem:
    a, b = _leaf(rng, *a_shape), _leaf(rng, *b_shape)
    return _problem(
        lambda: nx.add(nx.mul(nx.sigmoid(a), b), nx.log(nx.add_scalar(nx.exp(a), 1.0))), [a, b], rng
    )


def _softmax(rng: np.random.Generator, shape: tuple[int, ...], axis: int) -> Problem:
    a = _leaf(rng, *shape)
    return _problem(lambda: nx.softmax(a, axis=axis), [a], rng)


def _conv2d(
    rng: np.random.Generator,
    channels: int,
    height: int,
    width: int,
    out: int,
    kernel: int,
    stride: int,
    padding: int,
) -> Problem:
    x = _leaf(rng, channels, height, width)
    k, b = _leaf(rng, out, channels, kernel, kernel), _leaf(rng, out)
    return _problem(lambda: nx.conv2d(x, k, b, stride=stride, padding=padding), [x, k, b], rng)


def _submanifold(
    rng: np.random.Generator, dims: tuple[int, int], channels: int, out: int, kernel: int
) -> Problem:
    smap = _random_sparse(rng, dims, channels)
    k, b = _leaf(rng, out, channels, kernel, kernel), _leaf(rng, out)
    return _problem(lambda: submanifold_sparse_conv(smap, k, b).features, [smap.features, k, b], rng)


def _strided(
    rng: np.random.Generator,
    dims: tuple[int, int],
    channels: int,
    out: int,
    kernel: int,
    stride: int,
    padding: int | None = None,
) -> Problem:
    smap = _random_sparse(rng, dims, channels)
    k, b = _leaf(rng, out, channels, kernel, kernel), _leaf(rng, out)
    return _problem(
        lambda: strided_sparse_conv(smap, k, b, stride=stride, padding=padding).densify(),
        [smap.features, k, b],
        rng,
    )


def _pooling(
    rng: np.random.Generator,
    shape: tuple[int, int, int],
    pool_kernel: int,
    pool_stride: int,
    avg_factor: int,
    bilinear: int,
    nearest: int,
) -> Problem:
    x = _leaf(rng, *shape)
    return _problem(
        lambda: nx.concat(
            [
                nx.reshape(nx.max_pool2d(x, pool_kernel, pool_stride), (-1,)),
                nx.reshape(nx.avg_pool2d(x, avg_factor), (-1,)),
                nx.reshape(nx.bilinear_upsample(x, bilinear), (-1,)),
                nx.reshape(nx.nearest_upsample(x, nearest), (-1,)),
            ]
        ),
        [x],
        rng,
    )


def _pillar_encode(
    rng: np.random.Generator,
    pillar: float,
    half_extent: float,
    max_points: int,
    max_pillars: int,
    feature_dim: int,
    points: int,
) -> Problem:
    spec = PillarGridSpec.square(
        pillar,
        half_extent,
        max_points_per_pillar=max_points,
        max_pillars=max_pillars,
        feature_dim=feature_dim,
    )
    pts = np.column_stack(
        [
            rng.uniform(-half_extent, half_extent, (points, 2)),
            rng.uniform(-1, 1, points),
            rng.uniform(0, 1, points),
        ]
    )
    scene = assign_pillars(PointCloud(pts), spec, rng_seed=int(rng.integers(1 << 16)))
    w_f = _leaf(rng, scene.feature_width, spec.feature_dim)
    return _problem(lambda: encode_pillars(scene, w_f), [w_f], rng)


def _scale_branch(
    rng: np.random.Generator,
    dims: tuple[int, int],
    in_channels: int,
    stage_channels: tuple[int, ...],
    stage_strides: tuple[int, ...],
    refine_depth: int,
) -> Problem:
    cfg = ScaleBranchConfig(
        pillar_size=0.1,
        stage_channels=stage_channels,
        stage_strides=stage_strides,
        refine_depth=refine_depth,
        refine_channels=3,
        out_channels=2,
    )
    smap = _random_sparse(rng, dims, in_channels)
    params = init_branch_params(cfg, in_channels, rng)
    branch = ScaleBranch(cfg, params)
    inputs = [smap.features] + [params[n] for n in sorted(params)]
    return _problem(lambda: branch.forward(smap), inputs, rng)


def _fusion(
    rng: np.random.Generator,
    fine: tuple[int, int],
    factor: int,
    channels: int,
    mode: str,
    reference: int,
) -> Problem:
    cfg = FusionConfig(reference_index=reference, upsample_mode=mode, attention_hidden=3)
    fine_map = _leaf(rng, channels, *fine)
    coarse_map = _leaf(rng, channels, fine[0] // factor, fine[1] // factor)
    params = init_fusion_params(2, channels, cfg, rng)
    inputs = [fine_map, coarse_map] + [params[n] for n in sorted(params)]
    return _problem(lambda: attention_fuse(align_scales([fine_map, coarse_map], cfg), params)[0], inputs, rng)


def _head_loss(
    rng: np.random.Generator,
    dims: tuple[int, int],
    channels: int,
    hidden: int,
    classes: tuple[str, ...],
) -> Problem:
    grid = BEVGrid(x_min=0.0, y_min=0.0, cell=1.0, dims=dims)
    h, w = dims
    boxes = [
        Box3D(center=(0.3 * h + 0.1, 0.6 * w + 0.1, 0.9), size=(0.6, 0.5, 1.7), yaw=0.4),
        Box3D(center=(0.75 * h + 0.1, 0.2 * w + 0.1, 0.8), size=(0.7, 0.6, 1.6), yaw=-2.0, label=classes[-1]),
    ]
    targets = build_targets(boxes, grid, classes, min_radius=1)
    fused = _leaf(rng, channels, h, w)
    params = init_head_params(channels, hidden, len(classes), rng)
    for p in params.values():
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    inputs = [fused] + [params[n] for n in sorted(params)]
    return (lambda: detection_loss(run_head(fused, params), targets)[0]), inputs


CHECKS: dict[str, GradCheck] = {
    c.name: c
    for c in [
        GradCheck(
            "matmul",
            "2-D matrix product",
            _matmul,
            (dict(m=4, k=5, n=3), dict(m=1, k=7, n=2), dict(m=6, k=1, n=6)),
        ),
        GradCheck(
            "elementwise",
            "sigmoid, exp, log, add, mul with broadcast",
            _elementwise,
            (
                dict(a_shape=(3, 4), b_shape=(4,)),
                dict(a_shape=(5,), b_shape=(5,)),
                dict(a_shape=(2, 3, 5), b_shape=(3, 5)),
            ),
        ),
        GradCheck(
            "softmax",
            "softmax over the scale axis",
            _softmax,
            (dict(shape=(3, 4, 4), axis=0), dict(shape=(5,), axis=-1), dict(shape=(2, 3, 7), axis=1)),
        ),
        GradCheck(
            "conv2d",
            "dense conv over stride, padding and kernel variants",
            _conv2d,
            (
                dict(channels=2, height=7, width=6, out=3, kernel=3, stride=2, padding=1),
                dict(channels=1, height=5, width=5, out=2, kernel=3, stride=1, padding=0),
                dict(channels=3, height=8, width=9, out=2, kernel=1, stride=1, padding=0),
                dict(channels=2, height=6, width=7, out=2, kernel=5, stride=2, padding=2),
            ),
        ),
        GradCheck(
            "submanifold_conv",
            "submanifold sparse conv",
            _submanifold,
            (
                dict(dims=(6, 7), channels=2, out=3, kernel=3),
                dict(dims=(5, 5), channels=1, out=2, kernel=3),
                dict(dims=(8, 6), channels=3, out=2, kernel=5),
            ),
        ),
        GradCheck(
            "strided_sparse_conv",
            "strided sparse conv, densified",
            _strided,
            (
                dict(dims=(7, 6), channels=2, out=3, kernel=3, stride=2),
                dict(dims=(8, 8), channels=1, out=2, kernel=3, stride=2, padding=0),
                dict(dims=(9, 5), channels=2, out=2, kernel=5, stride=4),
            ),
        ),
        GradCheck(
            "pooling",
            "max/avg pooling, bilinear/nearest upsampling",
            _pooling,
            (
                dict(shape=(2, 6, 6), pool_kernel=3, pool_stride=1, avg_factor=2, bilinear=2, nearest=3),
                dict(shape=(1, 5, 5), pool_kernel=3, pool_stride=2, avg_factor=5, bilinear=3, nearest=2),
                dict(shape=(3, 4, 8), pool_kernel=5, pool_stride=1, avg_factor=4, bilinear=2, nearest=1),
            ),
        ),
        GradCheck(
            "pillar_encode",
            "shared point MLP and masked max",
            _pillar_encode,
            (
                dict(pillar=0.5, half_extent=2.0, max_points=4, max_pillars=10, feature_dim=5, points=40),
                dict(pillar=0.5, half_extent=1.5, max_points=2, max_pillars=8, feature_dim=4, points=30),
                dict(pillar=0.25, half_extent=1.0, max_points=6, max_pillars=20, feature_dim=3, points=60),
            ),
        ),
        GradCheck(
            "scale_branch",
            "sparse stages, refinement and F_i conv",
            _scale_branch,
            (
                dict(dims=(6, 6), in_channels=2, stage_channels=(3, 4), stage_strides=(1, 2), refine_depth=1),
                dict(dims=(7, 5), in_channels=1, stage_channels=(3,), stage_strides=(1,), refine_depth=1),
                dict(
                    dims=(9, 8),
                    in_channels=2,
                    stage_channels=(2, 3, 3),
                    stage_strides=(1, 2, 2),
                    refine_depth=2,
                ),
            ),
        ),
        GradCheck(
            "fusion",
            "scale alignment and attention fusion",
            _fusion,
            (
                dict(fine=(6, 6), factor=2, channels=2, mode="bilinear", reference=0),
                dict(fine=(4, 6), factor=2, channels=3, mode="nearest", reference=0),
                dict(fine=(6, 9), factor=3, channels=2, mode="bilinear", reference=1),
            ),
        ),
        GradCheck(
            "head_loss",
            "head convs, focal and L1 losses",
            _head_loss,
            (
                dict(dims=(8, 8), channels=3, hidden=4, classes=("pedestrian",)),
                dict(dims=(6, 9), channels=2, hidden=3, classes=("pedestrian", "cyclist")),
                dict(dims=(7, 5), channels=4, hidden=2, classes=("pedestrian",)),
            ),
        ),
    ]
}


# ============================================================================
# Running
# ============================================================================


def check_problem(problem: Problem, eps: float = DEFAULT_EPS) -> float:
    """Max gradient error over all inputs of one problem."""
    loss_fn, inputs = problem
    for t in inputs:
        t.zero_grad()
    nx.backward(loss_fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = nx.finite_difference_grad(lambda _: loss_fn(), t, eps=eps)
        worst = max(worst, nx.gradient_error(analytic, numeric.data))
    return worst


def check_case(name: str, seed: int, shape: int = 0, eps: float = DEFAULT_EPS) -> float:
    """Max gradient error of one check at one seed and shape, in float64."""
    check = get_check(name)
    with precision("float64"):
        return check_problem(check.problem(seed, shape), eps)


def get_check(name: str) -> GradCheck:
    try:
        return CHECKS[name]
    except KeyError:
        raise ConfigError(f"Unknown gradient check '{name}' (available: {', '.join(CHECKS)})") from None


def run_check(
    name: str,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    eps: float = DEFAULT_EPS,
    tolerance: float = DEFAULT_TOLERANCE,
) -> CheckResult:
    """Run one named check over every shape and several seeds in float64."""
    check = get_check(name)
    errors, cases = [], []
    for index, shape in enumerate(check.shapes):
        for seed in seeds:
            errors.append(check_case(name, seed, index, eps))
            cases.append(f"seed={seed} {shape_label(shape)}")
    result = CheckResult(name, max(errors), errors, tolerance, cases)
    log = logger.info if result.passed else logger.warning
    log(
        "gradcheck %s: max error %.3e over %d cases (worst: %s)",
        name,
        result.max_error,
        len(errors),
        result.worst_case,
    )
    return result


def resolve_names(ops: str | Iterable[str]) -> list[str]:
    """Expand "all" or a comma-separated list into check names."""
    names = ops.split(",") if isinstance(ops, str) else list(ops)
    names = [n.strip() for n in names if n.strip()]
    if names == ["all"]:
        return list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"Unknown gradient check(s): {', '.join(unknown)}")
    return names


def run_checks(
    ops: str | Iterable[str] = "all",
    seeds: Sequence[int] = DEFAULT_SEEDS,
    tolerance: float = DEFAULT_TOLERANCE,
) -> list[CheckResult]:
    return [run_check(n, seeds, tolerance=tolerance) for n in resolve_names(ops)]
