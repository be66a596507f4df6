"""Embedded invariant checks run by ``guidedconv selftest``.

Each group returns (passed, detail).  The checks are small versions of the
test-suite oracles so a deployed build can verify itself without pytest.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .cost import analyze, format_gb
from .guided import channelwise_variant_conv, crosschannel_conv, guided_module_forward, induce_full_kernels, naive_guided_conv
from .metrics import evaluate
from .tensor import Tensor, backward, no_grad, precision
from .trainer import masked_mse_loss
from .viz import PREWITT_X, kernels_to_field


def _numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def _rel_error(a, n):
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * max(np.abs(n).max(), 1e-30))
    return float((np.abs(a - n) / scale).max())


def gradient_error(fn, arrays, rng):
    """Worst relative error between tape gradients and central differences of sum(fn(*x) * r)."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    r = rng.normal(size=out.shape)
    backward(ops.sum(ops.mul(out, r)))

    def f():
        with no_grad():
            return float((fn(*tensors).data * r).sum())

    return max(_rel_error(t.grad, _numeric_grad(f, t.data)) for t in tensors)


def gradient_cases(rng):
    """(name, fn, arrays) for every differentiable operation, small random shapes, float64."""
    n = rng.normal
    running = (np.zeros(3), np.ones(3))
    mask = rng.uniform(size=(1, 1, 3, 3)) < 0.6
    mask[0, 0, 0, 0] = True
    gt = rng.uniform(1, 3, size=(1, 1, 3, 3))
    return [
        ("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
         [n(size=(2, 2, 5, 4)), n(size=(3, 2, 3, 3)), n(size=3)]),
        ("deconv2d", lambda x, w, b: ops.deconv2d(x, w, b, stride=2, padding=1, output_padding=1),
         [n(size=(1, 2, 3, 3)), n(size=(2, 3, 3, 3)), n(size=3)]),
        ("batch_norm", lambda x, g, b: ops.batch_norm(x, g, b, running[0].copy(), running[1].copy(), training=True),
         [n(size=(3, 3, 2, 2)), n(size=3), n(size=3)]),
        ("fully_connected", lambda x, w, b: ops.fully_connected(x, w, b),
         [n(size=(2, 4)), n(size=(3, 4)), n(size=3)]),
        ("channelwise_variant_conv", lambda s, k: channelwise_variant_conv(s, k),
         [n(size=(1, 2, 3, 4)), n(size=(1, 2, 9, 3, 4))]),
        ("crosschannel_conv", lambda d, k: crosschannel_conv(d, k),
         [n(size=(2, 2, 3, 3)), n(size=(2, 2, 3))]),
        ("guided_module", lambda i, d, kw, kb, fw, fb: guided_module_forward(
            i, d, {"kgl_weight": kw, "kgl_bias": kb, "fc_weight": fw, "fc_bias": fb}),
         [n(size=(1, 2, 3, 3)), n(size=(1, 2, 3, 3)), 0.5 * n(size=(18, 2, 3, 3)), n(size=18),
          n(size=(4, 2)), n(size=4)]),
        ("masked_mse_loss", lambda p: masked_mse_loss(p, gt, mask), [n(size=(1, 1, 3, 3))]),
    ]


def check_factorization(rng, trials=20):
    worst = 0.0
    for _ in range(trials):
        m, nn = rng.choice([1, 2, 4, 8], size=2)
        k = rng.choice([1, 3])
        h, b = rng.integers(3, 9, size=2)
        s = rng.normal(size=(1, m, h, b))
        wc = rng.normal(size=(1, m, k * k, h, b))
        wx = rng.normal(size=(1, m, nn))
        two = crosschannel_conv(channelwise_variant_conv(Tensor(s), wc), wx).data
        ref = naive_guided_conv(s, induce_full_kernels(wc, wx))
        worst = max(worst, float(np.abs(two - ref).max() / max(np.abs(ref).max(), 1e-300)))
    return worst < 1e-10, f"max relative deviation {worst:.2e} over {trials} configurations"


def check_gradients(rng):
    errors = {name: gradient_error(fn, arrays, rng) for name, fn, arrays in gradient_cases(rng)}
    worst = max(errors, key=errors.get)
    return errors[worst] < 1e-4, f"worst {worst} {errors[worst]:.2e}"


def check_cost():
    r = analyze(128, 128, 3, 64, 304, 4)
    ok = (r.naive_bytes == 11_475_615_744 and r.fact_bytes == 89_718_784
          and format_gb(r.naive_bytes) == "10.7" and format_gb(r.fact_bytes) == "0.08"
          and 127 <= float(1 / r.ratio) <= 129)
    return ok, f"{format_gb(r.naive_bytes)} GB -> {format_gb(r.fact_bytes)} GB, ratio {float(1 / r.ratio):.1f}"


def check_metrics():
    r = evaluate(np.array([1.0, 4.0]), np.array([2.0, 2.0]))
    ok = r.rel == 0.75 and r.delta_1 == 0.0 and r.rmse_m == np.sqrt(2.5)
    same = evaluate(np.array([3.0, 7.0]), np.array([3.0, 7.0]))
    ok = ok and same.rmse_mm == 0 and same.delta_1 == 100
    return ok, f"rel={r.rel} delta_1={r.delta_1} rmse_m={r.rmse_m:.6f}"


def check_prewitt():
    vx, vy = kernels_to_field(PREWITT_X)
    z = kernels_to_field(np.ones((3, 3)))
    return bool(vx == 6 and vy == 0 and not z.any()), f"prewitt_x -> ({vx:g}, {vy:g})"


def run(seed=0):
    """List of (group, passed, detail)."""
    rng = np.random.default_rng(seed)
    results = []
    with precision("float64"):
        for name, check in (("factorization", lambda: check_factorization(rng)),
                            ("gradients", lambda: check_gradients(rng)),
                            ("cost-eq8", check_cost),
                            ("metrics", check_metrics),
                            ("prewitt", check_prewitt)):
            try:
                ok, detail = check()
            except Exception as exc:  # a crash is a failed group, not a crashed selftest
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append((name, bool(ok), detail))
    return results
