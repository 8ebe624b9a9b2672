"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, float64_mode


def numerical_gradient(fn, arrays, index, h=1e-4):
    """d fn / d arrays[index] by central differences. ``fn`` returns a float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(*base)
        flat[i] = orig - h
        fm = fn(*base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximum over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def gradcheck(op, arrays, h=1e-4, wrt=None):
    """Compare tape gradients of ``op`` with finite differences in float64.

    ``op`` maps Tensors to a scalar Tensor. Returns the maximum relative
    error over every input listed in ``wrt`` (default: all).
    """
    wrt = range(len(arrays)) if wrt is None else wrt

    def scalar(*xs):
        with float64_mode():
            return float(op(*[Tensor(x) for x in xs]).data)

    with float64_mode():
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = op(*leaves)
        tape.backward(out)
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros(np.shape(arrays[i]))
        numeric = numerical_gradient(scalar, arrays, i, h=h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# -- op suite ------------------------------------------------------------------------------


def _kink_free(rng, shape, gap=1e-2):
    """Normal samples kept at least ``gap`` from zero, so h-steps never cross a relu kink."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _distinct(rng, shape, spacing=1e-2):
    """Values with pairwise gaps of at least ``spacing`` (no max-pool ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape) + rng.uniform(0, spacing / 10)


def _weighted(out, rng):
    # A random upstream gradient exercises every output element's adjoint.
    from . import functional as F

    return F.sum(F.mul(out, Tensor(rng.normal(size=out.shape))))


def _case(name, rng):
    """(op, arrays) for one random case of the named operation."""
    from . import functional as F

    n, c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h = w = int(rng.choice([2, 4, 6]))
    if name in ("add", "sub", "mul"):
        shape = (n, c, h)
        other = shape if rng.random() < 0.5 else (1, c, 1)  # include a broadcast half the time
        fn = getattr(F, name)
        return (lambda a, b: _weighted(fn(a, b), np.random.default_rng(1))), [rng.normal(size=shape),
                                                                              rng.normal(size=other)]
    if name in ("sum", "mean"):
        fn = getattr(F, name)
        return (lambda a: fn(F.mul(a, a))), [rng.normal(size=(n, c, h))]
    if name == "reshape":
        return (lambda a: _weighted(F.reshape(a, (n, -1)), np.random.default_rng(2))), [rng.normal(size=(n, c, h, w))]
    if name == "relu":
        return (lambda a: _weighted(F.relu(a), np.random.default_rng(3))), [_kink_free(rng, (n, c, h))]
    if name == "sigmoid":
        return (lambda a: _weighted(F.sigmoid(a), np.random.default_rng(4))), [3 * rng.normal(size=(n, c, h))]
    if name == "conv2d":
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        padding = "same" if rng.random() < 0.5 or h < k else "valid"
        f = int(rng.integers(1, 4))

        def op(x, wt, b):
            return _weighted(F.conv2d(x, wt, b, stride=stride, padding=padding), np.random.default_rng(5))

        return op, [rng.normal(size=(n, c, h + 1, w)), rng.normal(size=(f, c, k, k)), rng.normal(size=f)]
    if name == "upsample":
        return (lambda a: _weighted(F.upsample_nearest2x(a), np.random.default_rng(6))), [rng.normal(size=(n, c, h, w))]
    if name == "maxpool":
        return (lambda a: _weighted(F.max_pool2x2(a), np.random.default_rng(7))), [_distinct(rng, (n, c, h, w))]
    if name == "globalavgpool":
        return (lambda a: _weighted(F.global_avg_pool(a), np.random.default_rng(8))), [rng.normal(size=(n, c, h, w))]
    if name == "dense":
        d, k = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        return (lambda x, wt, b: _weighted(F.dense(x, wt, b), np.random.default_rng(9))), [
            rng.normal(size=(n, d)), rng.normal(size=(d, k)), rng.normal(size=k)]
    if name in ("batchnorm_train", "batchnorm_eval"):
        train = name == "batchnorm_train"
        shape = (n + 1, c, h, w)
        mean, var = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)

        def op(x, g, b):
            out = F.batchnorm2d(x, g, b, mean.copy(), var.copy(), train=train)
            return _weighted(out, np.random.default_rng(10))

        return op, [rng.normal(size=shape), rng.normal(size=c), rng.normal(size=c)]
    if name == "softmax":
        return (lambda a: _weighted(F.softmax(a), np.random.default_rng(11))), [2 * rng.normal(size=(n, c + 1))]
    if name == "cross_entropy":
        k = c + 1
        if rng.random() < 0.5:
            target = rng.integers(0, k, size=n)
        else:
            target = rng.dirichlet(np.ones(k), size=n)
        return (lambda a: F.softmax_cross_entropy(a, target)), [2 * rng.normal(size=(n, k))]
    if name == "mse":
        return (lambda a, b: F.mse(a, b)), [rng.normal(size=(n, c, h)), rng.normal(size=(n, c, h))]
    raise ValueError(f"unknown op {name!r}")


GRADCHECK_OPS = ("add", "sub", "mul", "sum", "mean", "reshape", "relu", "sigmoid", "conv2d", "upsample", "maxpool",
                 "globalavgpool", "dense", "batchnorm_train", "batchnorm_eval", "softmax", "cross_entropy", "mse")


def gradcheck_suite(cases=20, seed=0, h=1e-4, ops=GRADCHECK_OPS):
    """Worst relative error per op over ``cases`` random small cases each."""
    out = {}
    for i, name in enumerate(ops):
        rng = np.random.default_rng([seed, i])
        out[name] = max(gradcheck(*_case(name, rng), h=h) for _ in range(cases))
    return out
