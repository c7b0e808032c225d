import numpy as np
import pytest

from conftest import single_layer
from quantlab.calibration import CalibrationSet, Percentile, ScaleRule
from quantlab.errors import InputError, ParameterError
from quantlab.nn import build_mlp
from quantlab.ptq import PtqConfig, loss_gap, run_ptq
from quantlab.quantizer import QuantizedTensor, Scheme, dequantize, quantize_affine
from quantlab.tensor import make_rng
from quantlab.training import TrainConfig, evaluate_model, make_synthetic_task, train


def cal_for(model, n=8, seed=0):
    return CalibrationSet.from_array(make_rng(seed).standard_normal((n, model.input_dim)))


def on_grid_model():
    # every code 0..255 appears once, so the range is [-1, 127/128] and s = 1/128, z = 128
    q = make_rng(0).permutation(256).reshape(16, 16)
    w = ((q - 128) / 128).astype(np.float32)
    return single_layer(w)


def test_on_grid_weights_have_zero_error():
    model = on_grid_model()
    qmodel, report = run_ptq(model, cal_for(model), PtqConfig(bits=8))
    p = qmodel.layers[0].weight.params
    assert (p.scale, p.zero_point) == (np.float32(1 / 128), 128)
    assert report.errors[0].mse == 0.0 and report.errors[0].max_abs == 0.0
    np.testing.assert_array_equal(qmodel.layers[0].dense_weight(), model.layers[0].weight)


def test_requantizing_dequantized_weights_is_idempotent():
    model = build_mlp([8, 8], 1, dropout=0.0)
    qmodel, _ = run_ptq(model, None, PtqConfig(bits=5))
    qt = qmodel.layers[0].weight
    w_hat = dequantize(qt)
    assert quantize_affine(w_hat, qt.params).payload == qt.payload


def test_uniform_layer_half_step_bound():
    w = make_rng(3).uniform(-1, 1, (32, 32)).astype(np.float32)
    model = single_layer(w)
    qmodel, report = run_ptq(model, None, PtqConfig(bits=8, scale_rule=ScaleRule.ALG1))
    assert report.errors[0].max_abs <= qmodel.layers[0].weight.params.scale / 2 + 1e-7


def test_gamma_on_matches_second_moment_off_does_not():
    model = build_mlp([16, 16, 4], 5, dropout=0.0)
    q_on, rep_on = run_ptq(model, None, PtqConfig(bits=3, use_gamma=True))
    q_off, rep_off = run_ptq(model, None, PtqConfig(bits=3, use_gamma=False))
    assert all(g == 1.0 for g in rep_off.gammas)
    off_gaps = []
    for l, lon, loff in zip(model.layers, q_on.layers, q_off.layers):
        ref = np.mean(l.weight.astype(np.float64) ** 2)
        on = np.mean(lon.dense_weight().astype(np.float64) ** 2)
        off = np.mean(loff.dense_weight().astype(np.float64) ** 2)
        assert abs(on - ref) / ref <= 1e-6
        off_gaps.append(abs(off - ref) / ref)
    assert max(off_gaps) > 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_more_bits_means_lower_mse(seed):
    model = build_mlp([12, 10, 6], seed)
    _, r4 = run_ptq(model, None, PtqConfig(bits=4))
    _, r16 = run_ptq(model, None, PtqConfig(bits=16))
    for a, b in zip(r16.errors, r4.errors):
        assert a.mse < b.mse


def test_alpha_bound_on_large_model():
    model = build_mlp([250, 400, 10], 0)
    assert model.param_count >= 100_000
    for bits in (4, 8):
        _, report = run_ptq(model, None, PtqConfig(bits=bits))
        assert 0 < report.alpha_achieved < 1
        assert report.alpha_achieved <= bits / 32 + 0.02


def test_alpha_violation_flag():
    model = build_mlp([64, 64, 4], 0)
    _, loose = run_ptq(model, None, PtqConfig(bits=8, target_alpha=0.5))
    _, tight = run_ptq(model, None, PtqConfig(bits=8, target_alpha=0.1))
    _, none = run_ptq(model, None, PtqConfig(bits=8))
    assert loose.alpha_violated is False
    assert tight.alpha_violated is True
    assert none.alpha_violated is None


def test_bound_product_dominates_layers(tiny_model):
    _, report = run_ptq(tiny_model, None, PtqConfig(bits=4))
    assert report.bound_product >= max(e.relative_eq for e in report.errors)


def test_original_untouched(tiny_model):
    before = [l.weight.copy() for l in tiny_model.layers]
    qmodel, _ = run_ptq(tiny_model, cal_for(tiny_model), PtqConfig(bits=4))
    for l, w in zip(tiny_model.layers, before):
        assert isinstance(l.weight, np.ndarray)
        np.testing.assert_array_equal(l.weight, w)
    assert all(isinstance(l.weight, QuantizedTensor) for l in qmodel.layers)
    assert all(isinstance(l.bias, np.ndarray) for l in qmodel.layers)


def test_quantize_biases_flag(tiny_model):
    qmodel, _ = run_ptq(tiny_model, None, PtqConfig(bits=8, quantize_biases=True))
    assert all(isinstance(l.bias, QuantizedTensor) for l in qmodel.layers)


def test_global_range_shares_params():
    model = build_mlp([6, 6, 6], 2)
    qmodel, _ = run_ptq(model, None, PtqConfig(bits=8, per_tensor=False))
    a, b = (l.weight.params for l in qmodel.layers)
    assert (a.scale, a.zero_point) == (b.scale, b.zero_point)
    lo = min(float(l.weight.min()) for l in model.layers)
    hi = max(float(l.weight.max()) for l in model.layers)
    assert a.scale == np.float32((hi - lo) / 255)


def test_percentile_range_clips(tiny_model):
    q_mm, _ = run_ptq(tiny_model, None, PtqConfig(bits=8))
    q_pct, _ = run_ptq(tiny_model, None, PtqConfig(bits=8, range_mode=Percentile(90)))
    for a, b in zip(q_mm.layers, q_pct.layers):
        assert b.weight.params.scale < a.weight.params.scale


def test_log_scheme(tiny_model):
    qmodel, report = run_ptq(tiny_model, None, PtqConfig(bits=6, scheme=Scheme.LOG))
    assert all(l.weight.params.scheme is Scheme.LOG for l in qmodel.layers)
    assert all(e.relative_eq < 0.5 for e in report.errors)


def test_activation_stats_recorded(tiny_model):
    _, report = run_ptq(tiny_model, cal_for(tiny_model, n=5), PtqConfig(bits=8))
    assert [s.count for s in report.activation_stats] == [40, 40, 15]


def test_rejects_bad_inputs(tiny_model):
    bad = tiny_model.copy()
    bad.layers[0].weight[0, 0] = np.nan
    with pytest.raises(InputError):
        run_ptq(bad, None, PtqConfig())
    qmodel, _ = run_ptq(tiny_model, None, PtqConfig())
    with pytest.raises(InputError):
        run_ptq(qmodel, None, PtqConfig())
    with pytest.raises(ParameterError):
        PtqConfig(bits=1)


def test_report_json_keys(tiny_model):
    _, report = run_ptq(tiny_model, None, PtqConfig(bits=8, use_gamma=True))
    d = report.to_dict()
    assert {"layers", "alpha_achieved", "bound_product", "original_bytes", "quantized_bytes"} <= set(d)
    assert d["layers"][0]["norm"] == "spectral"


def test_evaluate_self_and_memorization():
    data = make_synthetic_task("teacher", (6, 3), 64, 1)
    model = build_mlp([6, 8, 8, 3], 7, dropout=0.0)
    assert evaluate_model(model, data) == evaluate_model(model, data)
    trained, _ = train(model, data, TrainConfig(learning_rate=0.05, max_steps=400, conv_eps=None))
    assert evaluate_model(trained, data).loss < evaluate_model(model, data).loss


def test_loss_gap_int8_small(tiny_model):
    data = make_synthetic_task("teacher", (6, 3), 256, 3)
    qmodel, _ = run_ptq(tiny_model, None, PtqConfig(bits=8))
    a, b, gap = loss_gap(tiny_model, qmodel, data)
    assert gap == pytest.approx((b.loss - a.loss) / a.loss)
    assert abs(gap) < 0.05
