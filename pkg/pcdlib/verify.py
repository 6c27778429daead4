#!/usr/bin/env python3
"""Self-check suites run by ``pcdman verify``.

Each suite returns a :class:`SuiteResult`; a suite fails either by
reporting ``passed=False`` or by raising; the runner records the exception
as a failure and moves on to the next suite.
"""

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .adaptor import HeadSpec, adapt_head, verify_invariance
from .checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint
from .distillation import LossConfig, MemoryQueue, gradient_uniformity_check, normalize_rows, pcd_loss
from .exceptions import BadMagicError, PcdlibError, ValidationError
from .nn import BatchNorm, Conv2d, Linear, MultiHeadSelfAttention, ReLU
from .nn import functional as F
from .rng import SplitMix64, derive_seed
from .tensor import Tensor, backward, constant, double_precision, finite_diff_check, mul, reduce, relu

logger = logging.getLogger("pcdlib")

GRAD_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<12} {self.detail} ({self.seconds:.2f}s)"


# ------------------------------------------------------------------ heads


def _randomize_bn(bn: BatchNorm, rng: SplitMix64) -> None:
    c = bn.channels
    bn.set_running_stats(0.5 * rng.gaussian(c), 0.5 + rng.uniform(c))
    if bn.affine:
        bn.gamma.data = (1.0 + 0.5 * rng.gaussian(c)).astype(np.float32)
        bn.beta.data = (0.5 * rng.gaussian(c)).astype(np.float32)


def random_vector_head(rng: SplitMix64, max_dim: int = 16) -> HeadSpec:
    """A grammar-valid FC / BN / ReLU head with random dims and BN statistics.

    One to three FC layers, each optionally followed by BN and ReLU; the last
    FC may be followed by an affine-free BN.
    """
    def dim() -> int:
        return int(rng.integers(2, max_dim + 1, 1)[0])

    n_fc = int(rng.integers(1, 4, 1)[0])
    width = dim()
    layers = []
    for i in range(n_fc):
        out = dim()
        layers.append(Linear(width, out, bias=rng.bernoulli(0.5), rng=rng))
        last = i == n_fc - 1
        if rng.bernoulli(0.6):
            layers.append(BatchNorm(out, affine=not (last and rng.bernoulli(0.5)), layout="vector"))
        if not last and rng.bernoulli(0.8):
            layers.append(ReLU())
        width = out
    for layer in layers:
        if isinstance(layer, BatchNorm):
            _randomize_bn(layer, rng)
    head = HeadSpec(*layers)
    head.eval()
    return head


def check_invariance(n_heads: int = 100, trials: int = 16, seed: int = 0, tol: float = 1e-5) -> SuiteResult:
    worst = 0.0
    failures = 0
    for i in range(n_heads):
        head = random_vector_head(SplitMix64(derive_seed(seed, "head", i)))
        last = head[len(head) - 1]
        drop = isinstance(last, BatchNorm) and not last.affine
        adapted = adapt_head(head, drop_trailing_affine_free_bn=drop)
        report = verify_invariance(head, adapted, trials=trials, tol=tol, seed=i, drop_trailing_affine_free_bn=drop)
        worst = max(worst, report.max_abs_dev)
        failures += 0 if report.passed else 1
    return SuiteResult(
        "invariance", failures == 0, f"{n_heads} random heads, max deviation {worst:.2e} (tol {tol:.0e})"
    )


# ---------------------------------------------------------------- cw-relu


def check_cw_relu(n_tensors: int = 100, seed: int = 0, tol: float = 1e-6) -> SuiteResult:
    rng = SplitMix64(derive_seed(seed, "cw_relu"))
    worst = 0.0
    for _ in range(n_tensors):
        x = Tensor(rng.gaussian(2 * 4 * 3 * 3).reshape(2, 4, 3, 3))
        lhs = relu(F.global_avg_pool(x)).data.astype(np.float64)
        rhs = F.global_avg_pool(F.cw_relu(x)).data.astype(np.float64)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))

    # plain ReLU breaks the identity on a channel with mixed signs
    x = Tensor(np.array([-1.0, 3.0]).reshape(1, 1, 1, 2))
    plain_gap = abs(float(F.global_avg_pool(relu(x)).item()) - float(relu(F.global_avg_pool(x)).item()))
    passed = worst <= tol and plain_gap > tol
    return SuiteResult(
        "cw_relu",
        passed,
        f"{n_tensors} tensors, max deviation {worst:.2e}; plain ReLU counterexample gap {plain_gap:.2f}",
    )


# -------------------------------------------------------------- gradients


def _weighted(fn: Callable[[Tensor], Tensor], weights: np.ndarray) -> Callable[[Tensor], Tensor]:
    def f(x: Tensor) -> Tensor:
        return reduce("sum", mul(fn(x), constant(weights)))

    return f


def gradient_cases(seed: int = 0) -> List[Tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """``(name, scalar function, input)`` triples covering every layer and the loss."""
    rng = SplitMix64(derive_seed(seed, "gradcheck"))

    def gauss(*shape: int) -> np.ndarray:
        return rng.gaussian(int(np.prod(shape))).reshape(shape)

    conv = Conv2d(3, 4, 3, 1, 1, rng=rng)
    bn_train = BatchNorm(3)
    bn_eval = BatchNorm(3)
    _randomize_bn(bn_eval, rng)
    bn_eval.eval()
    attention = MultiHeadSelfAttention(4, heads=2, head_dim=3, rng=rng)
    # channel means kept away from the CW-ReLU kink at zero
    offsets = np.array([1.0, -1.0, 1.5, -1.5]).reshape(1, 4, 1, 1)
    teacher = gauss(1, 4, 2, 2)
    negatives = normalize_rows(gauss(3, 4))

    cases = [
        ("conv2d", conv, gauss(1, 3, 4, 4), (1, 4, 4, 4)),
        ("bn_train", bn_train, gauss(2, 3, 2, 2), (2, 3, 2, 2)),
        ("bn_infer", bn_eval, gauss(2, 3, 2, 2), (2, 3, 2, 2)),
        ("cw_relu", F.cw_relu, 0.3 * gauss(1, 4, 2, 2) + offsets, (1, 4, 2, 2)),
        ("bilinear", lambda x: F.bilinear_resize(x, 5, 3), gauss(1, 2, 3, 2), (1, 2, 5, 3)),
        ("mhsa", attention, gauss(1, 4, 2, 2), (1, 4, 2, 2)),
        ("l2_norm", lambda x: F.l2_normalize(x, axis=1), gauss(3, 4), (3, 4)),
    ]
    out = [(name, _weighted(fn, gauss(*shape)), x) for name, fn, x, shape in cases]
    out.append(("pcd_loss", lambda s: pcd_loss(s, teacher, negatives, LossConfig()), gauss(1, 4, 2, 2)))
    return out


def check_gradients(seed: int = 0, tol: float = GRAD_TOL) -> SuiteResult:
    errors = OrderedDict()
    for name, f, x in gradient_cases(seed):
        errors[name] = finite_diff_check(f, Tensor(x))
    worst = max(errors, key=errors.get)
    failed = [name for name, err in errors.items() if not err <= tol]
    detail = f"{len(errors)} cases, worst {worst} rel err {errors[worst]:.2e}"
    if failed:
        detail += f"; failed: {', '.join(failed)}"
    return SuiteResult("gradients", not failed, detail)


# ------------------------------------------------------------ loss oracle


def brute_force_pcd(s: np.ndarray, t: np.ndarray, negatives: np.ndarray, tau: float) -> float:
    """Pixel-by-pixel InfoNCE loop in float64 (teacher already at the student's size)."""
    n, d, h, w = s.shape
    total = 0.0
    for i in range(n):
        for y in range(h):
            for x in range(w):
                q = s[i, :, y, x] / max(np.linalg.norm(s[i, :, y, x]), 1e-12)
                k = t[i, :, y, x] / max(np.linalg.norm(t[i, :, y, x]), 1e-12)
                logits = [float(q @ k)] + [float(q @ neg) for neg in negatives]
                scaled = np.array(logits) / tau
                top = scaled.max()
                total += top + math.log(np.sum(np.exp(scaled - top))) - scaled[0]
    return total / (n * h * w)


def check_loss_oracle(n_instances: int = 50, seed: int = 0, tol: float = 1e-6) -> SuiteResult:
    rng = SplitMix64(derive_seed(seed, "oracle"))
    worst = 0.0
    with double_precision():
        for _ in range(n_instances):
            n = int(rng.integers(1, 3, 1)[0])
            d = int(rng.integers(2, 6, 1)[0])
            h = int(rng.integers(1, 5, 1)[0])
            w = int(rng.integers(1, 16 // h + 1, 1)[0])
            k = int(rng.integers(0, 9, 1)[0])
            s = rng.gaussian(n * d * h * w).reshape(n, d, h, w)
            t = rng.gaussian(n * d * h * w).reshape(n, d, h, w)
            negatives = normalize_rows(rng.gaussian(k * d).reshape(k, d)) if k else np.zeros((0, d))
            got = pcd_loss(Tensor(s), t, negatives, LossConfig(tau=0.2)).item()
            worst = max(worst, abs(got - brute_force_pcd(s, t, negatives, 0.2)))

        one = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        analytic = pcd_loss(Tensor(one), one, np.array([[0.0, 1.0]]), LossConfig(tau=0.2)).item()
    expected = math.log1p(math.exp(-5.0))
    analytic_err = abs(analytic - expected)
    passed = worst <= tol and analytic_err <= 1e-7
    return SuiteResult(
        "loss_oracle",
        passed,
        f"{n_instances} instances, max |loss - loop| {worst:.2e}; log(1+e^-5) case off by {analytic_err:.1e}",
    )


# -------------------------------------------------------------- uniformity


def check_uniformity(seed: int = 0) -> SuiteResult:
    with double_precision():
        image = gradient_uniformity_check("image", seed=seed)
        pixel = gradient_uniformity_check("pixel", seed=seed)
    passed = image.uniform(1e-6) and not pixel.uniform(1e-6)
    return SuiteResult(
        "uniformity",
        passed,
        f"image-level spread {image.relative_deviation:.1e}, pixel-level spread {pixel.relative_deviation:.1e}",
    )


# ------------------------------------------------------------------- queue


def check_queue(capacity: int = 4, pushes: int = 11, dim: int = 3, seed: int = 0) -> SuiteResult:
    rng = SplitMix64(derive_seed(seed, "queue"))
    queue = MemoryQueue(capacity, dim)
    pushed: List[np.ndarray] = []
    problems = []
    for i in range(pushes):
        key = rng.gaussian(dim).reshape(1, dim) * (1 + i)
        queue.push(key)
        pushed.append(normalize_rows(key)[0])
        expected = np.array(pushed[-capacity:], dtype=np.float32)
        snap = queue.snapshot()
        if len(queue) != min(i + 1, capacity) or not np.array_equal(snap, expected):
            problems.append(f"push {i + 1}: wrong content")
        if np.any(np.abs(np.linalg.norm(snap.astype(np.float64), axis=1) - 1.0) > 1e-6):
            problems.append(f"push {i + 1}: non-unit entry")

    negatives = [Tensor(row, requires_grad=True) for row in queue.snapshot()]
    query = Tensor(rng.gaussian(dim).reshape(1, dim, 1, 1), requires_grad=True)
    backward(pcd_loss(query, rng.gaussian(dim).reshape(1, dim, 1, 1), negatives, LossConfig()))
    if any(n.grad is not None for n in negatives):
        problems.append("gradient reached a negative")
    detail = f"capacity {capacity}, {pushes} pushes" + (f"; {'; '.join(problems)}" if problems else "")
    return SuiteResult("queue", not problems, detail)


# -------------------------------------------------------------- checkpoint


def check_checkpoint(seed: int = 0) -> SuiteResult:
    rng = SplitMix64(derive_seed(seed, "checkpoint"))
    c = Checkpoint({"model": "selftest", "seed": seed})
    for i, shape in enumerate([(3,), (2, 4), (2, 3, 1, 1), ()]):
        c.add(f"entry.{i}", rng.gaussian(max(int(np.prod(shape)), 1)).reshape(shape))
    data = encode_checkpoint(c)
    back = decode_checkpoint(data)
    exact = back.metadata == c.metadata and all(
        np.array_equal(back[p], c[p]) and back[p].shape == c[p].shape for p in c.paths()
    )
    exact = exact and encode_checkpoint(back) == data
    try:
        decode_checkpoint(b"XXXX" + data[4:])
        magic_caught = False
    except BadMagicError:
        magic_caught = True
    return SuiteResult(
        "checkpoint", exact and magic_caught, f"{len(c.entries)} entries, {len(data)} bytes round trip"
    )


SUITES: "OrderedDict[str, Callable[..., SuiteResult]]" = OrderedDict(
    [
        ("invariance", check_invariance),
        ("cw_relu", check_cw_relu),
        ("gradients", check_gradients),
        ("loss_oracle", check_loss_oracle),
        ("uniformity", check_uniformity),
        ("queue", check_queue),
        ("checkpoint", check_checkpoint),
    ]
)


def run_suites(names: Optional[Iterable[str]] = None, seed: int = 0) -> List[SuiteResult]:
    """Run the named suites (all by default) in a fixed order."""
    selected = list(names) if names else list(SUITES)
    unknown = [n for n in selected if n not in SUITES]
    if unknown:
        raise ValidationError(f"unknown suite(s): {', '.join(unknown)}", field="suite", value=unknown)
    results = []
    for name in SUITES:
        if name not in selected:
            continue
        start = time.perf_counter()
        try:
            result = SUITES[name](seed=seed)
        except PcdlibError as e:
            logger.error(f"suite {name} raised: {e}")
            result = SuiteResult(name, False, f"error: {e}")
        except Exception as e:
            logger.error(f"suite {name} crashed: {type(e).__name__}: {e}")
            result = SuiteResult(name, False, f"error: {type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - start
        logger.debug(result.line())
        results.append(result)
    return results


def summarize(results: Sequence[SuiteResult]) -> str:
    failed = sum(1 for r in results if not r.passed)
    return f"{len(results) - failed}/{len(results)} suites passed"
