"""
Oracle suites run by `tunnelwave.py selfcheck`: analytic Gaussian beam,
unitarity of the lossless march, wall phase screen, conv adjoint identity,
finite-difference gradient checks and a naive metrics re-implementation.
"""
from __future__ import annotations

import cmath
import math
import time
from dataclasses import dataclass

import numpy as np

from prbpn import Prbpn, PrbpnConfig, prbpn_loss
from pwe_solver import (
    Material,
    amplitude_std,
    analytic_beam_std,
    freespace_step,
    gaussian_source,
    phase_screen,
)
from rss_metrics import compute_metrics
from tensorcore import (
    ConvParams,
    Tensor,
    Xoshiro256,
    absolute,
    concat,
    conv2d,
    conv_transpose2d,
    grad_check,
    grad_check_params,
    mean,
    prelu,
    sigmoid,
    tensor_sum,
)
from tunnel_geometry import C0, GridSpec

# --- CONFIGURATION ---
BEAM_FREQUENCY = 2.4e9
BEAM_DISTANCE = 50.0
BEAM_TOL = 0.01
UNITARITY_STEPS = 100
UNITARITY_TOL = 1e-10
SCREEN_TOL = 1e-12
ADJOINT_CASES = 20
ADJOINT_TOL = 1e-10
GRAD_TOL = 1e-4
COMPOSITE_SAMPLES = 3  # elements checked per parameter
METRICS_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    threshold: float
    seconds: float = 0.0

    @property
    def passed(self):
        return bool(np.isfinite(self.value) and self.value < self.threshold)


def _free_grid(n, delta):
    return GridSpec(nx=n, ny=n, delta=delta, x_origin=-0.5 * (n - 1) * delta, y_origin=-0.5 * (n - 1) * delta)


# ==========================================
# SOLVER ORACLES
# ==========================================
def check_beam():
    """Relative error of the marched Gaussian width against the paraxial closed form."""
    lam = C0 / BEAM_FREQUENCY
    k = 2.0 * math.pi / lam
    s0, dz = 3.0 * lam, 2.0 * lam
    fld = gaussian_source(_free_grid(512, 0.1), (0.0, 0.0), s0)
    steps = int(math.floor(BEAM_DISTANCE / dz + 1e-9))
    for _ in range(steps):
        fld = freespace_step(fld, dz, k)
    expected = analytic_beam_std(s0, steps * dz, k)
    sx, sy = amplitude_std(fld)
    return max(abs(sx - expected), abs(sy - expected)) / expected


def check_unitarity():
    lam = C0 / BEAM_FREQUENCY
    k = 2.0 * math.pi / lam
    fld = gaussian_source(_free_grid(128, 0.4 * lam), (0.3, -0.2), 3.0 * lam)
    screen = phase_screen(np.ones((128, 128), dtype=bool), Material(1.0, 0.0), k, 2.0 * lam)
    p0 = np.sum(np.abs(fld.u) ** 2)
    for _ in range(UNITARITY_STEPS):
        fld = freespace_step(fld, 2.0 * lam, k)
        fld = type(fld)(u=fld.u * screen, z=fld.z, grid=fld.grid)
    return abs(np.sum(np.abs(fld.u) ** 2) - p0) / p0


def check_wall_screen():
    """Per-step wall magnitude against exp(-k |Im n| dz) from an independent complex root."""
    worst = 0.0
    for f, eps_r, sigma in [(0.9e9, 5.0, 0.01), (2.4e9, 7.5, 0.1), (5.9e9, 10.0, 0.001)]:
        k = 2.0 * math.pi * f / C0
        dz = 2.0 * C0 / f
        n = cmath.sqrt(complex(eps_r, -sigma / (2.0 * math.pi * f * 8.8541878128e-12)))
        expected = math.exp(-k * abs(n.imag) * dz)
        mask = np.zeros((4, 4), dtype=bool)
        got = abs(phase_screen(mask, Material(eps_r, sigma), k, dz)[0, 0])
        worst = max(worst, abs(got - expected) / expected)
    return worst


# ==========================================
# TENSOR ORACLES
# ==========================================
def check_adjoint(cases=ADJOINT_CASES, seed=0):
    rng = np.random.default_rng(seed)
    geometries = [(3, 1, 1), (1, 1, 0), (12, 8, 2), (8, 4, 2), (6, 2, 2), (3, 2, 1)]
    worst = 0.0
    for i in range(cases):
        k, s, p = geometries[i % len(geometries)]
        b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h_out, w_out = rng.integers(1, 4), rng.integers(1, 4)
        h, w = (h_out - 1) * s + k - 2 * p, (w_out - 1) * s + k - 2 * p
        x = rng.standard_normal((b, cin, h, w))
        weight = Tensor(rng.standard_normal((cout, cin, k, k)))
        params = ConvParams(weight, Tensor(np.zeros(cout)), s, p)
        y = conv2d(Tensor(x), params)
        r = rng.standard_normal(y.shape)
        back = conv_transpose2d(Tensor(r), ConvParams(weight, Tensor(np.zeros(cin)), s, p))
        lhs, rhs = np.vdot(y.data, r), np.vdot(x, back.data)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-300))
    return worst


def _conv_case(k, s, p, cin, cout, h, transposed=False):
    def f(x, w, b):
        params = ConvParams(w, b, s, p)
        y = conv_transpose2d(x, params) if transposed else conv2d(x, params)
        return tensor_sum(y * y)

    rng = np.random.default_rng(k * 100 + s)
    wshape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
    return f, [rng.standard_normal((1, cin, h, h)), rng.standard_normal(wshape), rng.standard_normal(cout)]


def _grad_cases():
    rng = np.random.default_rng(7)
    a = rng.uniform(0.5, 1.5, (2, 3)) * np.where(rng.random((2, 3)) < 0.5, -1.0, 1.0)
    b = rng.standard_normal((2, 3))
    return {
        "sum_of_squares": (lambda x: tensor_sum(x * x), [a]),
        "add": (lambda x, y: tensor_sum((x + y) * (x + y)), [a, b]),
        "sub": (lambda x, y: tensor_sum((x - y) * x), [a, b]),
        "mul": (lambda x, y: tensor_sum(x * y * x), [a, b]),
        "abs": (lambda x: tensor_sum(absolute(x) * x), [a]),
        "mean": (lambda x: mean(x * x, axis=1, keepdims=True) * 3.0, [a]),
        "concat": (lambda x, y: tensor_sum(concat([x, y], axis=1) * concat([y, x], axis=1)), [a, b]),
        "slice": (lambda x: tensor_sum(x[:, 1:] * x[:, :-1]), [a]),
        "sigmoid": (lambda x: tensor_sum(sigmoid(x) * x), [a]),
        "prelu": (lambda x, s: tensor_sum(prelu(x, s) * x), [a, np.array(0.25)]),
        "conv2d_3x3": _conv_case(3, 1, 1, 2, 2, 5),
        "conv2d_12_8_2": _conv_case(12, 8, 2, 1, 2, 24),
        "conv_transpose2d_3x3": _conv_case(3, 1, 1, 2, 2, 4, transposed=True),
        "conv_transpose2d_12_8_2": _conv_case(12, 8, 2, 2, 1, 3, transposed=True),
    }


def _scalar(f):
    def wrapped(*xs):
        y = f(*xs)
        return tensor_sum(y) if y.data.size != 1 else y
    return wrapped


def check_gradients(cases=None):
    """Worst grad_check error per named op."""
    cases = _grad_cases() if cases is None else cases
    return {name: grad_check(_scalar(f), inputs) for name, (f, inputs) in cases.items()}


def check_prbpn_gradients(seed=0):
    """Full forward + loss on a toy model, a few sampled elements per parameter."""
    cfg = PrbpnConfig(base_channels=2, resblocks_per_net=1, refine_iters=1, context_radius=1)
    model = Prbpn(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (1, cfg.window_length, 2, 2))
    hr = Tensor(rng.uniform(0.0, 1.0, (1, 1, 16, 16)))
    report = grad_check_params(
        lambda: prbpn_loss(model.forward(x), hr, 0.1),
        model.parameters(),
        max_elements=COMPOSITE_SAMPLES,
        rng=Xoshiro256(seed),
    )
    return max(report.values())


# ==========================================
# METRICS ORACLE
# ==========================================
def check_metrics(seed=0):
    rng = np.random.default_rng(seed)
    y = rng.uniform(-120.0, -40.0, 500)
    y_hat = y + rng.normal(0.0, 2.0, 500)
    got = compute_metrics(y, y_hat)
    err = y - y_hat
    naive = {
        "mae": np.sum(np.abs(err)) / y.size,
        "mape": 100.0 * np.sum(np.abs(err / y)) / y.size,
        "rmse": math.sqrt(np.sum(err**2) / y.size),
        "r2": 1.0 - np.sum(err**2) / np.sum((y - np.sum(y) / y.size) ** 2),
    }
    return max(abs(getattr(got, k) - v) / max(abs(v), 1.0) for k, v in naive.items())


# ==========================================
# RUNNER
# ==========================================
def run_selfcheck(verbose=True, grad_cases=None):
    results = []

    def timed(name, fn, threshold):
        start = time.perf_counter()
        value = fn()
        results.append(CheckResult(name, float(value), threshold, time.perf_counter() - start))

    timed("beam_oracle", check_beam, BEAM_TOL)
    timed("unitarity", check_unitarity, UNITARITY_TOL)
    timed("wall_screen", check_wall_screen, SCREEN_TOL)
    timed("adjoint", check_adjoint, ADJOINT_TOL)

    cases = _grad_cases() if grad_cases is None else grad_cases
    for name, (f, inputs) in cases.items():
        timed(f"grad:{name}", lambda: grad_check(_scalar(f), inputs), GRAD_TOL)
    timed("grad:prbpn_forward_loss", check_prbpn_gradients, GRAD_TOL)
    timed("metrics_oracle", check_metrics, METRICS_TOL)

    if verbose:
        for r in results:
            mark = "✅" if r.passed else "❌"
            print(f"{mark} {r.name:<28} {r.value:.3e} (< {r.threshold:.0e}) {r.seconds:6.2f}s")
    return results


if __name__ == "__main__":
    failed = [r.name for r in run_selfcheck() if not r.passed]
    print("❌ Failed: " + ", ".join(failed) if failed else "✅ All checks passed")
