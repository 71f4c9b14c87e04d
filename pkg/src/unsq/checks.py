"""Finite-difference gradient battery over every differentiable building block.

Each case draws a fresh random scenario per seed and runs :func:`grad_check`
on it. Ops are scalarized with a fixed random projection ``sum(out * R)`` so
every output cell contributes.

The end-to-end U-net case needs care. A central difference that straddles a
ReLU sign change or a max-pool argmax switch measures a different linear
piece on each side, and coordinates whose gradient is below the float64
resolution of the difference quotient (about ``|L| * 2**-52 / eps``) cannot
be checked at a relative tolerance at all. :func:`smooth_indices` keeps only
coordinates that are neither.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .layers import (BatchNormParams, ClassWeights, ConvParams, batch_norm2d, conv2d,
                     conv_transpose2d, max_pool2d, soft_cross_entropy, softmax_temperature,
                     weighted_cross_entropy)
from .tensor import Tape, Tensor, backward, grad_check, mul, reduce_sum
from .unet import UnetConfig, UnetModel, build, forward

EPSILON = 1e-5
TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    seed: int
    max_relative_error: float
    checked: int
    passed: bool


def _projection(out: Tensor, seed: int) -> Tensor:
    r = np.random.default_rng([seed, 99]).normal(size=out.shape)
    return reduce_sum(mul(out, Tensor(r)))


def _conv(rng, c_out, c_in, k) -> ConvParams:
    return ConvParams(Tensor(rng.normal(size=(c_out, c_in, k, k))),
                      Tensor(rng.normal(size=c_out)))


def _case_conv2d(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 5, 5))
    p = _conv(rng, 3, 2, 3)
    yield "input", lambda t: _projection(conv2d(t, p), seed), x
    yield "weight", lambda t: _projection(conv2d(Tensor(x), ConvParams(t, p.bias)), seed), p.weight.data
    yield "bias", lambda t: _projection(conv2d(Tensor(x), ConvParams(p.weight, t)), seed), p.bias.data


def _case_conv_transpose2d(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 3, 4))
    p = _conv(rng, 2, 3, 2)
    yield "input", lambda t: _projection(conv_transpose2d(t, p), seed), x
    yield "weight", lambda t: _projection(conv_transpose2d(Tensor(x), ConvParams(t, p.bias)), seed), p.weight.data
    yield "bias", lambda t: _projection(conv_transpose2d(Tensor(x), ConvParams(p.weight, t)), seed), p.bias.data


def _case_max_pool2d(seed):
    rng = np.random.default_rng(seed)
    # distinct values spaced far beyond eps, so no window changes its winner
    x = rng.permutation(96).reshape(2, 2, 4, 6) * 0.01 + rng.normal(scale=1e-3, size=(2, 2, 4, 6))
    yield "input", lambda t: _projection(max_pool2d(t)[0], seed), x


def _case_batch_norm2d(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3, 5, 5))
    p = BatchNormParams.create(3)
    p.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    p.beta.data[:] = rng.normal(size=3)
    p.running_mean[:] = rng.normal(size=3)
    p.running_var[:] = rng.uniform(0.5, 2.0, 3)

    def fresh(gamma=None, beta=None):
        return BatchNormParams(gamma or p.gamma, beta or p.beta,
                               p.running_mean.copy(), p.running_var.copy())

    yield "train-input", lambda t: _projection(batch_norm2d(t, fresh(), "train"), seed), x
    yield "train-gamma", lambda t: _projection(batch_norm2d(Tensor(x), fresh(gamma=t)), seed), p.gamma.data
    yield "train-beta", lambda t: _projection(batch_norm2d(Tensor(x), fresh(beta=t)), seed), p.beta.data
    yield "eval-input", lambda t: _projection(batch_norm2d(t, fresh(), "eval"), seed), x


def _case_softmax_temperature(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(2, 2, 3, 3))
    for T in (1.0, 4.0):
        yield f"T={T:g}", lambda t, T=T: _projection(softmax_temperature(t, T), seed), z


def _case_weighted_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(2, 2, 3, 4))
    y = rng.integers(0, 2, size=(2, 1, 3, 4)).astype(float)
    w = ClassWeights(rng.uniform(1, 20), rng.uniform(0.5, 2))
    yield "logits", lambda t: weighted_cross_entropy(t, y, w), z


def _case_soft_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(2, 2, 3, 3))
    teacher = softmax_temperature(Tensor(rng.normal(size=z.shape)), 2.0).data
    w = ClassWeights(rng.uniform(1, 20), 1.0)
    for T in (1.0, 5.0):
        yield f"T={T:g}", lambda t, T=T: soft_cross_entropy(t, teacher, T, w), z


# --- end-to-end ----------------------------------------------------------

def activation_pattern(tape: Tape) -> list[np.ndarray]:
    """ReLU signs and max-pool winners recorded on a tape: the piece a ReLU net is on."""
    out = []
    for node in tape.nodes:
        if node.op == "relu":
            out.append(node.inputs[0].data > 0)
        elif node.op == "max_pool2d":
            x = node.inputs[0].data
            win = sliding_window_view(x, (2, 2), axis=(2, 3))[:, :, ::2, ::2]
            out.append(win.reshape(*win.shape[:4], 4).argmax(axis=-1))
    return out


def _pattern_at(f, x: np.ndarray) -> list[np.ndarray]:
    with Tape() as tape:
        f(Tensor(x, requires_grad=True))
    return activation_pattern(tape)


def smooth_indices(f, x: np.ndarray, epsilon: float, count: int, rng: np.random.Generator,
                   tolerance: float = TOLERANCE) -> list[int]:
    """Up to ``count`` flat indices of ``x`` where ``f`` is smooth within ``epsilon``
    and whose gradient a central difference can resolve to ``tolerance``."""
    xt = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(xt)
    grad = backward(tape, loss)[xt].data
    noise = abs(loss.item()) * np.finfo(np.float64).eps / epsilon
    chosen: list[int] = []
    for i in rng.permutation(x.size):
        if noise > 0.1 * tolerance * abs(grad.flat[i]):
            continue
        up, down = x.copy(), x.copy()
        up.flat[i] += epsilon
        down.flat[i] -= epsilon
        if all(np.array_equal(a, b) for a, b in zip(_pattern_at(f, up), _pattern_at(f, down))):
            chosen.append(int(i))
            if len(chosen) == count:
                break
    return chosen


def substituted_loss(model: UnetModel, param: Tensor, replacement: Tensor, x: np.ndarray,
                     y: np.ndarray, weights: ClassWeights) -> Tensor:
    """Train-mode weighted CE of ``model`` with ``param`` swapped for ``replacement``.

    Running statistics are restored afterwards, so repeated calls see the
    same model.
    """
    holders = [h for _, h in model.conv_layers()] + [bn for _, bn in model.batch_norms()]
    swapped = []
    for h in holders:
        for attr in ("weight", "bias", "gamma", "beta"):
            if getattr(h, attr, None) is param:
                setattr(h, attr, replacement)
                swapped.append((h, attr))
    saved = [(bn.running_mean.copy(), bn.running_var.copy()) for _, bn in model.batch_norms()]
    try:
        return weighted_cross_entropy(forward(model, x, "train"), y, weights)
    finally:
        for h, attr in swapped:
            setattr(h, attr, param)
        for (_, bn), (rm, rv) in zip(model.batch_norms(), saved):
            bn.running_mean[...] = rm
            bn.running_var[...] = rv


def end_to_end_cases(seed: int, per_param: int = 3, stride: int = 2):
    """Whole 2-Unet (BN on) loss against a sample of parameters.

    Conv biases feeding batch norm have an exactly zero gradient and are never
    resolvable; they are skipped by :func:`smooth_indices`.
    """
    rng = np.random.default_rng(seed)
    model = build(UnetConfig(2, batch_norm_contracting=True), seed)
    # 32x32 leaves 2x2 per channel at the bottom level, enough for batch statistics
    x = rng.random((2, 1, 32, 32))
    y = (rng.random((2, 1, 32, 32)) > 0.7).astype(float)
    w = ClassWeights(3.0)
    for name, p in model.named_parameters()[seed % stride::stride]:
        f = (lambda t, p=p: substituted_loss(model, p, t, x, y, w))
        idx = smooth_indices(f, p.data.copy(), EPSILON, per_param, rng)
        if idx:
            yield name, f, p.data.copy(), idx


CASES = {
    "conv2d": _case_conv2d,
    "conv_transpose2d": _case_conv_transpose2d,
    "max_pool2d": _case_max_pool2d,
    "batch_norm2d": _case_batch_norm2d,
    "softmax_temperature": _case_softmax_temperature,
    "weighted_cross_entropy": _case_weighted_cross_entropy,
    "soft_cross_entropy": _case_soft_cross_entropy,
}


def run_battery(seeds=range(5), epsilon: float = EPSILON, tolerance: float = TOLERANCE,
                end_to_end: bool = True) -> list[CaseResult]:
    """One :class:`CaseResult` per (op, seed); the op passes only if every part does."""
    results = []
    for name, make in CASES.items():
        for seed in seeds:
            worst, checked, ok = 0.0, 0, True
            for _, f, x in make(seed):
                rep = grad_check(f, x, epsilon, tolerance)
                worst = max(worst, rep.max_relative_error)
                checked += rep.checked
                ok = ok and bool(rep.passed)
            results.append(CaseResult(name, seed, worst, checked, ok))
    if end_to_end:
        for seed in seeds:
            worst, checked, ok = 0.0, 0, True
            for _, f, x, idx in end_to_end_cases(seed):
                rep = grad_check(f, x, epsilon, tolerance, indices=idx)
                worst = max(worst, rep.max_relative_error)
                checked += rep.checked
                ok = ok and bool(rep.passed)
            # a case that resolved almost nothing would pass vacuously
            ok = ok and checked >= 20
            results.append(CaseResult("unet2_end_to_end", seed, worst, checked, ok))
    return results
