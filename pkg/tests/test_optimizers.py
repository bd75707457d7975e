import numpy as np
import pytest

from kbfgs.data import Dataset, synthetic_autoencoder
from kbfgs.linalg import vec
from kbfgs.mlp import DataBatch, LayerSpec, NetworkModel, forward_backward, init_weights, layer_specs
from kbfgs.optimizers import (
    KBFGS,
    KFAC,
    FirstOrder,
    FirstOrderConfig,
    KbfgsConfig,
    KfacConfig,
    double_grad_average,
)
from kbfgs.qn import LbfgsBuffer, dd_skip_predicate


def tiny_setup(seed=0, n=200, widths=(16, 8, 4, 8, 16), acts=("relu", "linear", "relu", "sigmoid")):
    ds = synthetic_autoencoder(seed, n, widths[0])
    model = init_weights(layer_specs(list(widths), list(acts)), seed, "binary_entropy", 1e-5)
    return ds, model


def batches(ds, m, count, seed=0):
    r = np.random.default_rng(seed)
    for _ in range(count):
        idx = r.choice(len(ds), m, replace=False)
        yield DataBatch(ds.inputs[idx], ds.targets[idx])


def test_config_validation():
    with pytest.raises(ValueError):
        KbfgsConfig(lam=0.0)
    with pytest.raises(ValueError):
        KbfgsConfig(lr_decay_exponent=1.0)
    cfg = KbfgsConfig(lam=0.25)
    assert cfg.lambda_a == cfg.lambda_g == cfg.mu2 == 0.5
    assert (cfg.mu1, cfg.beta, cfg.p) == (0.2, 0.9, 100)


def test_warm_start_single_sample():
    model = NetworkModel([LayerSpec(1, 1, "linear")], [np.array([[1.0, 0.0]])], "mse")
    opt = KBFGS(KbfgsConfig(lam=0.25))
    opt.warm_start(model, Dataset([[1.0]], [[0.0]]), 1)
    st = opt.layers[0]
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_array_equal(st.ha.A, A)
    np.testing.assert_allclose(st.ha.Ha, np.linalg.inv(A + 0.5 * np.eye(2)), rtol=1e-14)
    np.testing.assert_array_equal(st.hg, np.eye(1))
    np.testing.assert_array_equal(st.grad_ma, 0.0)


def test_warm_start_lbfgs_is_identity():
    ds, model = tiny_setup()
    opt = KBFGS(KbfgsConfig(use_lbfgs=True))
    opt.warm_start(model, ds, 50)
    for st in opt.layers:
        assert isinstance(st.hg, LbfgsBuffer) and len(st.hg) == 0


def test_identity_preconditioner_reduces_to_sgd():
    model = NetworkModel([LayerSpec(1, 1, "linear")], [np.array([[1.0, 0.0]])], "mse")
    ds = Dataset([[1.0]], [[0.0]])
    opt = KBFGS(KbfgsConfig(alpha=0.1, beta=0.0))
    opt.warm_start(model, ds, 1)
    opt.layers[0].ha.Ha = np.eye(2)
    grad = forward_backward(model, ds.as_batch()).grads[0]
    w0 = model.weights[0].copy()
    opt.step(model, ds.as_batch())
    np.testing.assert_allclose(model.weights[0] - w0, -0.1 * grad, rtol=0, atol=1e-16)


@pytest.mark.parametrize("use_lbfgs", [False, True])
def test_kronecker_step_identity(use_lbfgs):
    ds, model = tiny_setup()
    opt = KBFGS(KbfgsConfig(alpha=0.05, use_lbfgs=use_lbfgs))
    opt.warm_start(model, ds, 50)
    it = batches(ds, 50, 6)
    for b in list(it)[:5]:
        opt.step(model, b)
    b = next(batches(ds, 50, 1, seed=9))
    grads = forward_backward(model, b).grads
    before = [w.copy() for w in model.weights]
    pre = []
    for st, g in zip(opt.layers, grads):
        hg = st.hg.to_dense() if use_lbfgs else st.hg.copy()
        pre.append((hg, 0.9 * st.grad_ma + 0.1 * g, st.ha.Ha.copy()))
    opt.step(model, b)
    for w, w0, (hg, gma, ha) in zip(model.weights, before, pre):
        p = (w0 - w) / 0.05
        ref = np.kron(ha, hg) @ vec(gma)
        assert np.linalg.norm(vec(p) - ref) <= 1e-10 * np.linalg.norm(ref)


def test_ha_stays_spd_and_steps_are_deterministic():
    def run():
        ds, model = tiny_setup()
        opt = KBFGS(KbfgsConfig(alpha=0.1))
        opt.warm_start(model, ds, 50)
        traj = []
        for b in batches(ds, 50, 10):
            opt.step(model, b)
            traj.append([w.copy() for w in model.weights])
        return opt, traj

    opt, t1 = run()
    _, t2 = run()
    for a, b in zip(t1, t2):
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
    for st in opt.layers:
        assert np.linalg.eigvalsh(st.ha.Ha)[0] > 0
        assert np.linalg.eigvalsh(st.hg)[0] > 0


def test_step_metrics_fields():
    ds, model = tiny_setup()
    opt = KBFGS(KbfgsConfig(alpha=0.1))
    opt.warm_start(model, ds, 50)
    m = opt.step(model, next(batches(ds, 50, 1)))
    assert np.isfinite(m.loss) and m.seconds > 0
    assert len(m.theta1) == len(m.theta2) == len(m.skipped) == len(model.layers)
    assert all(0 < t <= 1 for t in m.theta1 + m.theta2 if not np.isnan(t))


class PredicateRecorder:
    def __init__(self, mu1):
        self.mu1 = mu1
        self.checked = 0

    def hg_updated(self, layer, before, after, pair):
        assert dd_skip_predicate(pair, before, self.mu1)
        self.checked += 1


def test_skip_variant_only_stores_admissible_pairs():
    ds, model = tiny_setup()
    rec = PredicateRecorder(0.2)
    opt = KBFGS(KbfgsConfig(alpha=0.3, skip_variant=True, exact_A_inversion=True), observers=[rec])
    opt.warm_start(model, ds, 50)
    for b in batches(ds, 50, 30):
        opt.step(model, b)
    assert rec.checked > 0


def test_skip_variant_schedule_and_raw_gradient():
    ds, model = tiny_setup()
    opt = KBFGS(KbfgsConfig(alpha=0.4, skip_variant=True, use_lbfgs=True, exact_A_inversion=True))
    opt.warm_start(model, ds, 50)
    b = next(batches(ds, 50, 1))
    grads = forward_backward(model, b).grads
    m1 = opt.step(model, b)
    assert m1.alpha == 0.4
    for st, g in zip(opt.layers, grads):
        np.testing.assert_array_equal(st.grad_ma, g)
    m2 = opt.step(model, b)
    assert m2.alpha == pytest.approx(0.4 * 2 ** -0.75)


def test_exact_a_inversion_matches_moving_average():
    ds, model = tiny_setup()
    opt = KBFGS(KbfgsConfig(exact_A_inversion=True, alpha=0.1))
    opt.warm_start(model, ds, 50)
    A0 = [st.ha.A.copy() for st in opt.layers]
    b = next(batches(ds, 50, 1))
    a_outer = [lt.a_outer_mean for lt in forward_backward(model, b).layers]
    opt.step(model, b)
    for st, a0, ao in zip(opt.layers, A0, a_outer):
        np.testing.assert_allclose(st.ha.A, 0.9 * a0 + 0.1 * ao, rtol=1e-13)
        lam = opt.config.lambda_a
        np.testing.assert_allclose(st.ha.Ha @ (st.ha.A + lam * np.eye(len(a0))), np.eye(len(a0)), atol=1e-10)


def test_double_grad_average():
    g = [np.ones((2, 2))]
    np.testing.assert_array_equal(double_grad_average(g, g)[0], g[0])
    np.testing.assert_array_equal(double_grad_average(g, None)[0], g[0])
    np.testing.assert_array_equal(double_grad_average(g, [-g[0]])[0], 0.0)


def test_double_grad_option_runs():
    ds, model = tiny_setup()
    opt = KBFGS(KbfgsConfig(alpha=0.1, double_grad=True))
    opt.warm_start(model, ds, 50)
    for b in batches(ds, 50, 3):
        opt.step(model, b)
    assert opt.prev_second_grads is not None


def test_kfac_refresh_and_psd():
    ds, model = tiny_setup()
    opt = KFAC(KfacConfig(alpha=0.3, lam=1.0, T=1), rng=np.random.default_rng(0))
    opt.warm_start(model, ds, 50)
    for b in batches(ds, 50, 50):
        opt.step(model, b)
        for st in opt.layers:
            assert np.linalg.eigvalsh(st.A)[0] >= -1e-10
            assert np.linalg.eigvalsh(st.G)[0] >= -1e-10
            shift = np.sqrt(1.0)
            np.testing.assert_allclose(st.Ha @ (st.A + shift * np.eye(len(st.A))), np.eye(len(st.A)), atol=1e-9)


def test_kfac_skips_refresh_between_periods():
    ds, model = tiny_setup()
    opt = KFAC(KfacConfig(alpha=0.1, lam=1.0, T=3), rng=np.random.default_rng(0))
    opt.warm_start(model, ds, 50)
    seen = []
    for b in batches(ds, 50, 8):
        before = opt.layers[0].Ha.copy()
        opt.step(model, b)
        seen.append(not np.array_equal(before, opt.layers[0].Ha))
    # refreshed for k <= 3 and k = 6
    assert seen == [True, True, True, False, False, True, False, False]


def test_kfac_large_damping_is_scaled_gradient():
    ds, model = tiny_setup()
    lam, alpha = 1e14, 1e9
    opt = KFAC(KfacConfig(alpha=alpha, lam=lam, beta=0.9), rng=np.random.default_rng(0))
    opt.warm_start(model, ds, 50)
    for st in opt.layers:
        st.A = np.eye(len(st.A))
        st.G = np.eye(len(st.G))
    b = next(batches(ds, 50, 1))
    grads = forward_backward(model, b).grads
    w0 = [w.copy() for w in model.weights]
    opt.step(model, b)
    for w, w_prev, g in zip(model.weights, w0, grads):
        # grad_ma = 0.1 g, each factor contributes about 1/sqrt(lam)
        step = (w_prev - w) * lam / (0.1 * alpha)
        assert np.linalg.norm(step - g) <= 1e-4 * np.linalg.norm(g)


def test_adam_first_step_magnitude():
    model = NetworkModel([LayerSpec(1, 1, "linear")], [np.array([[1.0, 0.0]])], "mse")
    ds = Dataset([[1.0]], [[0.0]])
    opt = FirstOrder(FirstOrderConfig(kind="adam", alpha=0.01, eps=1e-8))
    opt.warm_start(model, ds, 1)
    w0 = model.weights[0].copy()
    opt.step(model, ds.as_batch())
    np.testing.assert_allclose(w0 - model.weights[0], [[0.01, 0.01]], rtol=1e-6)


def test_sgdm_beta_zero_is_sgd():
    model = NetworkModel([LayerSpec(1, 1, "linear")], [np.array([[1.0, 0.0]])], "mse")
    ds = Dataset([[1.0]], [[0.0]])
    opt = FirstOrder(FirstOrderConfig(kind="sgdm", alpha=0.1, beta=0.0))
    opt.warm_start(model, ds, 1)
    opt.step(model, ds.as_batch())
    np.testing.assert_allclose(model.weights[0], [[0.9, -0.1]])


def test_sgdm_heavy_ball_accumulates():
    model = NetworkModel([LayerSpec(1, 1, "linear")], [np.array([[0.0, 0.0]])], "mse")
    ds = Dataset([[0.0]], [[-1.0]])
    opt = FirstOrder(FirstOrderConfig(kind="sgdm", alpha=0.01, beta=0.9))
    opt.warm_start(model, ds, 1)
    opt.step(model, ds.as_batch())
    opt.step(model, ds.as_batch())
    # gradient of the bias is a - y; v1 = g1, v2 = 0.9 v1 + g2
    g1 = 1.0
    g2 = -0.01 + 1.0
    assert model.weights[0][0, 1] == pytest.approx(-0.01 * (g1 + 0.9 * g1 + g2))


def test_rmsprop_warm_start_first_step():
    model = NetworkModel([LayerSpec(1, 1, "linear")], [np.array([[1.0, 0.0]])], "mse")
    ds = Dataset([[1.0]], [[0.0]])
    opt = FirstOrder(FirstOrderConfig(kind="rmsprop", alpha=0.1, eps=1e-4))
    opt.warm_start(model, ds, 1)
    np.testing.assert_array_equal(opt.m2[0], [[1.0, 1.0]])
    opt.step(model, ds.as_batch())
    np.testing.assert_allclose(model.weights[0], [[1.0 - 0.1 / (1 + 1e-4), -0.1 / (1 + 1e-4)]], rtol=1e-14)
