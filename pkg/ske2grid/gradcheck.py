"""Central-difference gradient checking and the verification suites.

``grad_check`` compares the tape's gradient of a scalar function with
central differences (``h = 1e-6``, f64 only) and reports
``max |analytic - numeric| / max(1, |numeric|)``. The suites exercise every
differentiable operation, the straight-through surrogate of the node-index
transform, one network block and the full pipeline.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigError, GradCheckError
from .network import BlockConfig, Block, Conv2d, ModelConfig, Recognizer, build_model
from .skeleton import SkeletonGraph
from .tensor import Tensor, no_grad
from .transform import (
    GitAssign,
    GridSize,
    TransformOptions,
    Upt,
    binarize_bijective,
    build_cascade,
    to_grid,
    upt_apply,
)

logger = logging.getLogger("ske2grid.gradcheck")

DEFAULT_STEP = 1e-6
OP_TOLERANCE = 1e-5
PIPELINE_TOLERANCE = 1e-4

ScalarFn = Callable[[Tensor], Tensor]


def numeric_gradient(f: ScalarFn, point: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``point``, coordinate by coordinate."""
    base = point.data.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            plus = f(Tensor(base, "f64")).item()
            flat[index] = original - h
            minus = f(Tensor(base, "f64")).item()
            flat[index] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                coordinate = np.unravel_index(index, base.shape)
                raise GradCheckError("non-finite function value", tuple(int(c) for c in coordinate))
            grad.reshape(-1)[index] = (plus - minus) / (2.0 * h)
    return grad


def analytic_gradient(f: ScalarFn, point: Tensor) -> np.ndarray:
    leaf = Tensor(point.data.copy(), "f64", requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ConfigError(f"gradient checks need a scalar function, got shape {out.shape}", "f")
    if not out.requires_grad:
        return np.zeros_like(leaf.data)
    out.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    if not np.all(np.isfinite(grad)):
        bad = np.argwhere(~np.isfinite(grad))[0]
        raise GradCheckError("non-finite analytic gradient", tuple(int(c) for c in bad))
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check(f: ScalarFn, point: Tensor, h: float = DEFAULT_STEP) -> float:
    """Max relative error between the tape gradient and central differences at ``point``."""
    if point.dtype != np.float64:
        raise ConfigError("gradient checks run in f64 only", "dtype")
    return relative_error(analytic_gradient(f, point), numeric_gradient(f, point, h))


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """``Σ out ⊙ R``: a scalar whose gradient exercises every output coordinate."""
    return (out * Tensor(weights, out.dtype)).sum()


# --- suites ---------------------------------------------------------------------------


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


Case = Tuple[ScalarFn, Tensor]
CaseBuilder = Callable[[np.random.Generator], List[Case]]


def _t(array: np.ndarray) -> Tensor:
    return Tensor(array, "f64")


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Values with |x| >= 0.1 so finite differences never straddle a relu kink."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _matmul_cases(rng):
    m, k, n = rng.integers(1, 5, size=3)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    r = rng.normal(size=(m, n))
    return [
        (lambda x: weighted_sum(F.matmul(x, _t(b)), r), _t(a)),
        (lambda x: weighted_sum(F.matmul(_t(a), x), r), _t(b)),
    ]


def _mix_nodes_cases(rng):
    p, n, c = rng.integers(1, 5, size=3)
    m, x = rng.normal(size=(p, n)), rng.normal(size=(2, 3, n, c))
    r = rng.normal(size=(2, 3, p, c))
    return [
        (lambda t: weighted_sum(F.mix_nodes(t, _t(x)), r), _t(m)),
        (lambda t: weighted_sum(F.mix_nodes(_t(m), t), r), _t(x)),
    ]


def _conv2d_cases(rng):
    k = int(rng.choice([1, 3]))
    b, cin, cout, h, w = 2, int(rng.integers(1, 3)), int(rng.integers(1, 3)), 3, 4
    x, kern = rng.normal(size=(b, cin, h, w)), rng.normal(size=(cout, cin, k, k))
    bias = rng.normal(size=cout)
    r = rng.normal(size=(b, cout, h, w))
    return [
        (lambda t: weighted_sum(F.conv2d_same(t, _t(kern), _t(bias)), r), _t(x)),
        (lambda t: weighted_sum(F.conv2d_same(_t(x), t, _t(bias)), r), _t(kern)),
        (lambda t: weighted_sum(F.conv2d_same(_t(x), _t(kern), t), r), _t(bias)),
    ]


def _temporal_cases(rng):
    kt, stride = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
    b, c, cout, frames, h, w = 1, 2, 2, int(rng.integers(3, 6)), 2, 2
    x, kern = rng.normal(size=(b, c, frames, h, w)), rng.normal(size=(cout, c, kt))
    bias = rng.normal(size=cout)
    r = rng.normal(size=(b, cout, F.temporal_output_length(frames, stride), h, w))
    return [
        (lambda t: weighted_sum(F.temporal_conv(t, _t(kern), stride, _t(bias)), r), _t(x)),
        (lambda t: weighted_sum(F.temporal_conv(_t(x), t, stride, _t(bias)), r), _t(kern)),
        (lambda t: weighted_sum(F.temporal_conv(_t(x), _t(kern), stride, t), r), _t(bias)),
    ]


def _batchnorm_cases(rng):
    c = int(rng.integers(1, 4))
    x = rng.normal(size=(3, c, 2, 2))
    gamma, beta = rng.uniform(0.5, 1.5, size=c), rng.normal(size=c)
    mean, var = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    r = rng.normal(size=x.shape)

    def bn(xt, g, bt, training):
        return F.batchnorm(xt, g, bt, mean.copy(), var.copy(), training)

    return [
        (lambda t: weighted_sum(bn(t, _t(gamma), _t(beta), True), r), _t(x)),
        (lambda t: weighted_sum(bn(_t(x), t, _t(beta), True), r), _t(gamma)),
        (lambda t: weighted_sum(bn(_t(x), _t(gamma), t, True), r), _t(beta)),
        (lambda t: weighted_sum(bn(t, _t(gamma), _t(beta), False), r), _t(x)),
    ]


def _head_cases(rng):
    b, din, k = 3, int(rng.integers(1, 5)), int(rng.integers(2, 5))
    x, w, bias = rng.normal(size=(b, din)), rng.normal(size=(k, din)), rng.normal(size=k)
    labels = rng.integers(0, k, size=b)
    pooled = rng.normal(size=(b, din, 2, 2, 2))
    relu_in = _away_from_zero(rng, (b, din))
    r = rng.normal(size=(b, din))
    return [
        (lambda t: weighted_sum(F.relu(t), r), _t(relu_in)),
        (lambda t: weighted_sum(F.global_avg_pool(t), r), _t(pooled)),
        (lambda t: F.softmax_cross_entropy(F.linear(t, _t(w), _t(bias)), labels), _t(x)),
        (lambda t: F.softmax_cross_entropy(F.linear(_t(x), t, _t(bias)), labels), _t(w)),
        (lambda t: F.softmax_cross_entropy(F.linear(_t(x), _t(w), t), labels), _t(bias)),
    ]


def _graph_conv_cases(rng):
    n = int(rng.integers(2, 6))
    A = np.eye(n, dtype=np.uint8)
    for i in range(1, n):
        j = int(rng.integers(0, i))
        A[i, j] = A[j, i] = 1
    edges = int(np.count_nonzero(A))
    cin, cout = 2, int(rng.integers(1, 3))
    x, w = rng.normal(size=(2, cin, 2, n)), rng.normal(size=(edges, cout, cin))
    r = rng.normal(size=(2, cout, 2, n))
    return [
        (lambda t: weighted_sum(F.graph_conv(t, _t(w), A), r), _t(x)),
        (lambda t: weighted_sum(F.graph_conv(_t(x), t, A), r), _t(w)),
    ]


def _upt_cases(rng):
    n, cells, c = int(rng.integers(2, 5)), int(rng.integers(4, 7)), 2
    A = (rng.random((n, n)) < 0.5).astype(np.float64)
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 1.0)
    lam, x = rng.normal(size=(cells, n)), rng.normal(size=(2, n, c))
    r = rng.normal(size=(2, cells, c))
    return [
        (lambda t: weighted_sum(upt_apply(Upt(t, True), A, _t(x)), r), _t(lam)),
        (lambda t: weighted_sum(upt_apply(Upt(_t(lam), True), A, t), r), _t(x)),
        (lambda t: weighted_sum(upt_apply(Upt(t, False), None, _t(x)), r), _t(lam)),
    ]


OP_SUITES: Dict[str, CaseBuilder] = {
    "matmul": _matmul_cases,
    "mix_nodes": _mix_nodes_cases,
    "conv2d_same": _conv2d_cases,
    "temporal_conv": _temporal_cases,
    "batchnorm": _batchnorm_cases,
    "relu/pool/linear/loss": _head_cases,
    "graph_conv": _graph_conv_cases,
    "upt_apply": _upt_cases,
}


def ste_surrogate_error(rng: np.random.Generator) -> float:
    """Straight-through Ψ gradient vs. finite differences of ``M ↦ L(reshape(M·X'))`` at M = Φ."""
    height, width, c = int(rng.integers(1, 3)), int(rng.integers(2, 4)), 2
    cells = height * width
    grid = GridSize(height, width)
    psi = rng.uniform(size=(cells, cells))
    phi = binarize_bijective(psi)
    x = rng.normal(size=(2, cells, c))
    r = rng.normal(size=(2, c, height, width))

    psi_t = Tensor(psi, "f64", requires_grad=True)
    weighted_sum(to_grid(GitAssign.apply(psi_t, _t(x), phi=phi), grid), r).backward()

    def surrogate(m: Tensor) -> Tensor:
        return weighted_sum(to_grid(F.mix_nodes(m, _t(x)), grid), r)

    numeric = numeric_gradient(surrogate, _t(phi))
    return relative_error(psi_t.grad, numeric)


def _tiny_block(rng: np.random.Generator) -> Block:
    cfg = BlockConfig(2, 3, spatial_kernel=3, temporal_kernel=3, temporal_stride=int(rng.choice([1, 2])))
    return Block(cfg, Conv2d(2, 3, 3, rng, np.float64), rng, np.float64)


def block_errors(rng: np.random.Generator) -> List[float]:
    block = _tiny_block(rng)
    x = rng.normal(size=(2, 2, 4, 2, 3))
    frames = F.temporal_output_length(4, block.cfg.temporal_stride)
    r = rng.normal(size=(2, 3, frames, 2, 3))
    weight = block.spatial.weight

    def wrt_input(t: Tensor) -> Tensor:
        return weighted_sum(block(t), r)

    def wrt_kernel(t: Tensor) -> Tensor:
        saved = weight.data
        weight.data = t.data
        try:
            out = block(_t(x))
        finally:
            weight.data = saved
        return weighted_sum(out, r)

    errors = [grad_check(wrt_input, _t(x))]
    block.zero_grad()
    weighted_sum(block(_t(x)), r).backward()
    errors.append(relative_error(weight.grad, numeric_gradient(wrt_kernel, _t(weight.data))))
    return errors


def _toy_recognizer(rng: np.random.Generator, graph: SkeletonGraph) -> Recognizer:
    grid = GridSize(2, 3)
    cascade = build_cascade(
        graph.n_joints, [grid], int(rng.integers(0, 2**31)), TransformOptions(), "f64"
    )
    cfg = ModelConfig(
        blocks=[BlockConfig(3, 2, temporal_kernel=3, residual=False)],
        grid=grid,
        n_classes=2,
    )
    model = build_model(cfg, "ske2grid", graph, int(rng.integers(0, 2**31)), "f64")
    return Recognizer(graph, model, cascade)


def pipeline_errors(rng: np.random.Generator) -> List[float]:
    """Cascade + network + loss on a 2-sequence toy batch, w.r.t. input, Λ and head weights."""
    graph = SkeletonGraph("path4", 4, ((0, 1), (1, 2), (2, 3)))
    recognizer = _toy_recognizer(rng, graph)
    x = rng.normal(size=(2, 4, graph.n_joints, 3))
    labels = np.array([0, 1])

    def loss_of(tensor_name: Optional[str]):
        params = recognizer.named_parameters(trainable_only=False)

        def f(t: Tensor) -> Tensor:
            if tensor_name is None:
                return F.softmax_cross_entropy(recognizer(t), labels)
            target = params[tensor_name]
            saved = target.data
            target.data = t.data
            try:
                return F.softmax_cross_entropy(recognizer(_t(x)), labels)
            finally:
                target.data = saved

        return f

    errors = [grad_check(loss_of(None), _t(x))]
    for name in ("stage1.lambda", "head.weight"):
        recognizer.zero_grad()
        F.softmax_cross_entropy(recognizer(_t(x)), labels).backward()
        param = recognizer.named_parameters(trainable_only=False)[name]
        numeric = numeric_gradient(loss_of(name), _t(param.data))
        errors.append(relative_error(param.grad, numeric))
    return errors


def _timed(name: str, instances: int, tolerance: float, fn: Callable[[], List[float]]) -> SuiteResult:
    start = time.perf_counter()
    worst = 0.0
    for _ in range(instances):
        worst = max([worst, *fn()])
    result = SuiteResult(name, instances, worst, tolerance, time.perf_counter() - start)
    logger.debug(f"{name}: max error {worst:.2e} over {instances} instances")
    return result


def run_suites(
    instances: int = 50,
    seed: int = 0,
    only: Optional[List[str]] = None,
    on_suite: Optional[Callable[[SuiteResult], None]] = None,
) -> List[SuiteResult]:
    """Run every suite (or the ``only`` subset) on ``instances`` random f64 points each."""
    suites: Dict[str, Tuple[float, Callable[[np.random.Generator], List[float]]]] = {}
    for name, builder in OP_SUITES.items():
        suites[name] = (
            OP_TOLERANCE,
            lambda rng, b=builder: [grad_check(f, p) for f, p in b(rng)],
        )
    suites["git_ste_surrogate"] = (OP_TOLERANCE, lambda rng: [ste_surrogate_error(rng)])
    suites["block"] = (PIPELINE_TOLERANCE, block_errors)
    suites["pipeline"] = (PIPELINE_TOLERANCE, pipeline_errors)
    if only:
        unknown = sorted(set(only) - set(suites))
        if unknown:
            raise ConfigError(f"unknown gradient suites {unknown}", "gradcheck.suite")
        suites = {name: suites[name] for name in only}

    results = []
    for index, (name, (tolerance, run)) in enumerate(suites.items()):
        rng = np.random.default_rng([seed, index])
        result = _timed(name, instances, tolerance, lambda r=rng, fn=run: fn(r))
        results.append(result)
        if on_suite is not None:
            on_suite(result)
    return results


SUITE_NAMES = tuple(OP_SUITES) + ("git_ste_surrogate", "block", "pipeline")