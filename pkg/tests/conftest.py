import numpy as np
import pytest

from quantlab.nn import Activation, Layer, Mode, ModelGraph, backward, build_mlp, forward, mse_loss
from quantlab.tensor import make_rng


def naive_matmul(a, b):
    """Triple loop in float32 with the same i,k,j accumulation order as the kernels."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] = np.float32(out[i, j] + np.float32(aip * b[p, j]))
    return out


def forward_f64(model, x):
    """Independent float64 forward pass (eval mode) used as a gradient oracle."""
    h = np.asarray(x, dtype=np.float64)
    pres = []
    for layer in model.layers:
        z = h @ np.asarray(layer.dense_weight(), dtype=np.float64).T + np.asarray(layer.dense_bias(), dtype=np.float64)
        pres.append(z)
        h = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
    return h, pres


FD_STEP = 1e-3


def f64_loss(model, x, y, layer=None, kind=None, idx=None, delta=0.0):
    """MSE through the float64 oracle with one parameter nudged by ``delta``."""
    m = model.copy()
    for l in m.layers:
        l.weight = l.weight.astype(np.float64)
        l.bias = l.bias.astype(np.float64)
    if layer is not None:
        target = m.layers[layer].weight if kind == "w" else m.layers[layer].bias
        target[idx] += delta
    out, pres = forward_f64(m, x)
    return float(np.mean((out - y) ** 2)), pres


def sample_coords(model, rng, n):
    coords = []
    for _ in range(n):
        li = int(rng.integers(len(model.layers)))
        layer = model.layers[li]
        if rng.random() < 0.8:
            coords.append((li, "w", tuple(int(rng.integers(d)) for d in layer.weight.shape)))
        else:
            coords.append((li, "b", (int(rng.integers(layer.bias.shape[0])),)))
    return coords


def same_pattern(a, b):
    return all(np.array_equal(p > 0, q > 0) for p, q in zip(a, b))


def gradcheck(seed, n_coords=400):
    """Backward vs float64 central differences; returns (coordinates checked, worst relative error)."""
    rng = make_rng(100 + seed)
    model = build_mlp([5, 9, 7, 3], seed, dropout=0.0)
    x = rng.standard_normal((6, 5)).astype(np.float32)
    y = rng.standard_normal((6, 3)).astype(np.float32)
    out, cache = forward(model, x, Mode.EVAL)
    _, g = mse_loss(out, y)
    grads = backward(model, cache, g)
    _, base_pres = f64_loss(model, x, y)

    checked, worst = 0, 0.0
    for li, kind, idx in sample_coords(model, rng, n_coords):
        lp, pres_p = f64_loss(model, x, y, li, kind, idx, FD_STEP)
        lm, pres_m = f64_loss(model, x, y, li, kind, idx, -FD_STEP)
        if not (same_pattern(base_pres, pres_p) and same_pattern(base_pres, pres_m)):
            continue  # the step crosses a ReLU kink
        fd = (lp - lm) / (2 * FD_STEP)
        an = float(grads[li][0 if kind == "w" else 1][idx])
        denom = max(abs(fd), abs(an))
        if denom < 1e-6:
            continue  # dead unit; both sides are zero
        worst = max(worst, abs(an - fd) / denom)
        checked += 1
    return checked, worst


def linear_chain(dims, seed, std=None):
    return build_mlp(dims, seed, dropout=0.0, activation=Activation.NONE, weight_std=std)


def single_layer(w, b=None, activation=Activation.NONE):
    w = np.asarray(w, dtype=np.float32)
    if b is None:
        b = np.zeros(w.shape[0], dtype=np.float32)
    return ModelGraph([Layer(w, b, activation, 0.0)])


@pytest.fixture
def tiny_model():
    return build_mlp([6, 8, 8, 3], seed=7, dropout=0.0)


def run_cli(argv, cwd=None):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    import contextlib
    import io
    import os

    from quantlab.cli import main

    out, err = io.StringIO(), io.StringIO()
    old = os.getcwd()
    try:
        if cwd is not None:
            os.chdir(cwd)
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = main([str(a) for a in argv])
    finally:
        os.chdir(old)
    return code, out.getvalue(), err.getvalue()


# every stage on a reduced model, inputs and outputs relative to the run dir
PIPELINE = [
    ["gen-model", "--scale", "small", "--depth", "2", "--width", "32", "--in-dim", "8", "--out-dim", "3"],
    ["gen-data", "--task", "teacher", "--n", "128", "--dims", "8,3"],
    ["train", "--model", "model.qtm", "--data", "data.qcal", "--steps", "20", "--qat", "--bits", "4",
     "--refresh-every", "5", "--out", "qat.qtm"],
    ["train", "--model", "model.qtm", "--data", "data.qcal", "--steps", "40", "--batch", "16"],
    ["calibrate", "--model", "trained.qtm", "--data", "data.qcal", "--mode", "pct:99"],
    ["ptq", "--model", "trained.qtm", "--data", "data.qcal", "--bits", "4", "--gamma"],
    ["allocate", "--model", "trained.qtm", "--data", "data.qcal", "--budget", "12", "--bmax", "8"],
    ["analyze", "--model", "trained.qtm", "--quantized", "quantized.qtm", "--data", "data.qcal"],
    ["report", "--dir", "."],
]


def run_pipeline(directory, seed=42, stages=PIPELINE):
    """Run ``stages`` in ``directory``; returns {file name: bytes} of every artifact."""
    from pathlib import Path

    for argv in stages:
        code, _, err = run_cli(["--seed", seed, *argv], cwd=directory)
        assert code == 0, f"{argv[0]} failed: {err}"
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir()) if p.is_file()}


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
