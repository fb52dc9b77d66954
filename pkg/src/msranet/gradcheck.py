"""Central-difference verification of analytic gradients."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import GradTape, Tensor, backward, branch_log, precision

DENOM_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple[int, int] | None = None  # (param index, flat element index)
    skipped: int = 0  # elements whose central difference crossed a ReLU kink or clamp
    analytic: list[np.ndarray] = field(default_factory=list, repr=False)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), DENOM_FLOOR)


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    tol: float | None = None,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` against central differences.

    Every element of every parameter is perturbed unless ``max_elements``
    caps the count per parameter, in which case a random subset is drawn.
    With ``skip_kinks`` an element is skipped (and counted) when either
    perturbed evaluation takes a different ReLU/clamp branch than the
    unperturbed one, since the difference quotient is then not a derivative.
    Raises ``ContractError`` if ``tol`` is given and exceeded.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ContractError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    params = [Tensor(np.asarray(p.data), requires_grad=True) for p in params]
    if any(p.dtype != np.float64 for p in params):
        raise ContractError("gradient checking requires 64-bit parameters")

    def evaluate(ps):
        with branch_log() as branches:
            value = f(ps).item()
        return value, branches

    first, base_branches = evaluate(params)
    if evaluate(params)[0] != first:
        raise ContractError("function is not deterministic: two identical calls disagree")

    with GradTape() as tape:
        loss = f(params)
    grads = backward(loss, tape, wrt=params)
    analytic = [grads[p].data.ravel() for p in params]

    rng = rng or np.random.default_rng(0)
    worst_err, worst, n_checked, skipped = 0.0, None, 0, 0
    for pi, p in enumerate(params):
        base = p.data.ravel()
        idx = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            idx = np.sort(rng.choice(base.size, size=max_elements, replace=False))
        for e in idx:
            plus, minus = base.copy(), base.copy()
            plus[e] += eps
            minus[e] -= eps
            shifted = list(params)
            shifted[pi] = Tensor(plus.reshape(p.shape))
            fp, bp = evaluate(shifted)
            shifted[pi] = Tensor(minus.reshape(p.shape))
            fm, bm = evaluate(shifted)
            if skip_kinks and (bp != base_branches or bm != base_branches):
                skipped += 1
                continue
            err = rel_error(analytic[pi][e], (fp - fm) / (2 * eps))
            n_checked += 1
            if err > worst_err:
                worst_err, worst = err, (pi, int(e))
    report = GradCheckReport(worst_err, n_checked, worst, skipped, analytic)
    if tol is not None and not report.passed(tol):
        raise ContractError(f"gradient check failed: max relative error {worst_err:.3e} >= {tol}")
    return report


# --------------------------------------------------------------------------- op suite

SUITE_EPS = 1e-4
# each op below is affine or quadratic in any single input element, so central
# differences carry no truncation error and the largest step minimises roundoff
EXACT_EPS = 1e-2
EXACT_OPS = frozenset({
    "add", "sub", "mul", "scale", "matmul", "reduce_sum", "reduce_mean", "reshape", "select",
    "conv2d_3x3_s1", "conv2d_3x3_s2", "conv2d_3x3_valid", "conv2d_1x1", "dense", "global_avg_pool",
    "batch_norm_eval", "dropout", "bilinear_resize", "align_and_upsample", "fuse",
})
OP_TOL = 1e-6
MODEL_TOL = 1e-5


@dataclass
class OpResult:
    op: str
    max_rel_error: float
    instances: int
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op:<20} max_rel_err={self.max_rel_error:.3e} (tol {self.tol:g}, {self.instances} instances, {self.n_checked} elements)"


def _u(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


def _projected(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Scalarise an output map by a fixed random projection (avoids symmetric cancellation)."""
    from .tensor import mul, reduce_sum

    w = Tensor(rng.uniform(-1, 1, size=out.shape))
    return reduce_sum(mul(out, w))


def _case(build_out, *shapes):
    """Turn ``build_out(params) -> Tensor`` into an instance factory."""

    def make(rng):
        params = [_u(rng, *s) for s in shapes]
        proj_rng_state = rng.integers(2**32)

        def f(ps):
            out = build_out(ps)
            return _projected(out, np.random.default_rng(proj_rng_state))

        return f, params

    return make


def _instances() -> dict[str, Callable]:
    from . import layers as L
    from .attention import FusionParams, SEParams, align_and_upsample, fuse, se_block, se_excite
    from .model import HeadParams, head_forward
    from .tensor import add, matmul, mul, reduce_mean, reduce_sum, reshape, scale, select, sub
    from .train import cross_entropy

    def dense_p(w, b):
        return L.DenseParams(w, b)

    def se_p(ps, c=8, r=4):
        return SEParams(dense_p(ps[0], ps[1]), dense_p(ps[2], ps[3]), r)

    se_shapes = [(8, 2), (2,), (2, 8), (8,)]

    def bn_p(g, b, c):
        return L.BatchNormParams(g, b, Tensor(np.zeros(c)), Tensor(np.ones(c)))

    def head(ps, order="algorithm"):
        return HeadParams(dense_p(ps[1], ps[2]), bn_p(ps[3], ps[4], 6), dense_p(ps[5], ps[6]), 0.5, order)

    head_shapes = [(4, 3, 3, 8), (8, 6), (6,), (6,), (6,), (6, 3), (3,)]

    def head_case(rng):
        params = [_u(rng, *s) for s in head_shapes]
        drop_seed = int(rng.integers(2**32))
        proj_seed = int(rng.integers(2**32))

        def f(ps):
            logits, _ = head_forward(ps[0], head(ps), L.Mode.EVAL, np.random.default_rng(drop_seed))
            return _projected(logits, np.random.default_rng(proj_seed))

        return f, params

    def dropout_case(rng):
        params = [_u(rng, 4, 5)]
        seed = int(rng.integers(2**32))
        proj = int(rng.integers(2**32))
        return (lambda ps: _projected(L.dropout(ps[0], 0.3, L.Mode.TRAIN, np.random.default_rng(seed)),
                                      np.random.default_rng(proj))), params

    def ce_case(rng):
        logits = _u(rng, 5, 4)
        labels = rng.integers(4, size=5)
        return (lambda ps: cross_entropy(L.softmax(ps[0]), labels)), [logits]

    def select_case(rng):
        x = _u(rng, 3, 4)
        idx = (int(rng.integers(3)), int(rng.integers(4)))
        return (lambda ps: select(mul(ps[0], ps[0]), idx)), [x]

    def conv(stride, k, padding):
        return _case(lambda ps: L.conv2d(ps[0], L.ConvParams(ps[1], ps[2], stride, padding)),
                     (2, 6, 5, 3), (k, k, 3, 4), (4,))

    def fusion(ps):
        return FusionParams(L.ConvParams(ps[1], ps[2]), se_p(ps[3:7]), se_p(ps[3:7]))

    return {
        "add": _case(lambda ps: add(ps[0], ps[1]), (3, 4, 5), (5,)),
        "sub": _case(lambda ps: sub(ps[0], ps[1]), (3, 4), (3, 4)),
        "mul": _case(lambda ps: mul(ps[0], ps[1]), (3, 4, 5), (5,)),
        "scale": _case(lambda ps: scale(ps[0], -1.7), (3, 4)),
        "matmul": _case(lambda ps: matmul(ps[0], ps[1]), (3, 4), (4, 5)),
        "reduce_sum": _case(lambda ps: reduce_sum(ps[0], (0, 2)), (3, 4, 5)),
        "reduce_mean": _case(lambda ps: reduce_mean(ps[0], (1,)), (3, 4, 5)),
        "reshape": _case(lambda ps: reshape(ps[0], (4, 6)), (2, 3, 4)),
        "select": select_case,
        "conv2d_3x3_s1": conv(1, 3, "same"),
        "conv2d_3x3_s2": conv(2, 3, "same"),
        "conv2d_3x3_valid": conv(1, 3, "valid"),
        "conv2d_1x1": conv(1, 1, "same"),
        "dense": _case(lambda ps: L.dense(ps[0], dense_p(ps[1], ps[2])), (4, 6), (6, 3), (3,)),
        "relu": _case(lambda ps: L.relu(ps[0]), (4, 6)),
        "sigmoid": _case(lambda ps: L.sigmoid(scale(ps[0], 4.0)), (4, 6)),
        "softmax": _case(lambda ps: L.softmax(scale(ps[0], 3.0)), (4, 6)),
        "global_avg_pool": _case(lambda ps: L.global_avg_pool(ps[0]), (2, 3, 4, 5)),
        "batch_norm_train": _case(lambda ps: L.batch_norm(ps[0], bn_p(ps[1], ps[2], 5), L.Mode.TRAIN),
                                  (6, 5), (5,), (5,)),
        "batch_norm_eval": _case(lambda ps: L.batch_norm(ps[0], bn_p(ps[1], ps[2], 5), L.Mode.EVAL),
                                 (6, 5), (5,), (5,)),
        "dropout": dropout_case,
        "bilinear_resize": _case(lambda ps: L.bilinear_resize(ps[0], 7, 5), (2, 3, 4, 2)),
        "se_excite": _case(lambda ps: se_excite(ps[0], se_p(ps[1:])), (3, 8), *se_shapes),
        "se_block": _case(lambda ps: se_block(ps[0], se_p(ps[1:])), (2, 3, 3, 8), *se_shapes),
        "align_and_upsample": _case(lambda ps: align_and_upsample(ps[0], fusion(ps), 4, 4),
                                    (2, 2, 2, 6), (1, 1, 6, 8), (8,), *se_shapes),
        "fuse": _case(lambda ps: fuse(ps[0], ps[1]), (3, 3, 8), (3, 3, 8)),
        "head_forward": head_case,
        "cross_entropy": ce_case,
    }


def suite_ops() -> list[str]:
    return [*_instances(), "end_to_end"]


def _end_to_end(rng, max_elements: int):
    from .layers import Mode
    from .model import ModelConfig, build, forward
    from .train import cross_entropy

    cfg = ModelConfig(input_size=32, c1=8, c2=16, r=4, n_classes=3, hidden=16)
    model = build(cfg, seed=int(rng.integers(2**31)), dtype=np.float64)
    names = sorted(model.trainable())
    x = rng.uniform(0, 1, size=(3, 32, 32, 3))
    y = rng.integers(3, size=3)
    drop_seed = int(rng.integers(2**32))

    def f(ps):
        model.assign(dict(zip(names, ps)))
        probs, _ = forward(model, x, Mode.EVAL, np.random.default_rng(drop_seed))
        return cross_entropy(probs, y)

    params = [model.registry()[n] for n in names]
    return grad_check(f, params, SUITE_EPS, max_elements=max_elements, rng=rng)


def run_suite(instances: int = 5, seed: int = 0, e2e_instances: int = 2, e2e_elements: int = 4,
              ops: Sequence[str] | None = None) -> list[OpResult]:
    """Check every differentiable op on ``instances`` random inputs in 64-bit mode.

    The end-to-end tiny model samples ``e2e_elements`` entries per parameter.
    """
    table = _instances()
    wanted = list(ops) if ops is not None else suite_ops()
    unknown = [o for o in wanted if o not in table and o != "end_to_end"]
    if unknown:
        raise ContractError(f"unknown ops: {', '.join(unknown)}")
    results = []
    with precision("float64"):
        for name in wanted:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            worst, checked = 0.0, 0
            n_inst = e2e_instances if name == "end_to_end" else instances
            for _ in range(n_inst):
                if name == "end_to_end":
                    rep = _end_to_end(rng, e2e_elements)
                else:
                    f, params = table[name](rng)
                    rep = grad_check(f, params, EXACT_EPS if name in EXACT_OPS else SUITE_EPS)
                worst = max(worst, rep.max_rel_error)
                checked += rep.n_checked
            tol = MODEL_TOL if name == "end_to_end" else OP_TOL
            results.append(OpResult(name, worst, n_inst, checked, tol))
    return results
