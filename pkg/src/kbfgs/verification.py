"""Independent oracles and runtime monitors.

Suites return a :class:`SuiteReport`; :class:`BoundMonitor` is a pure
observer that can be attached to a K-BFGS run.  The oracles use dense
numpy linear algebra rather than the kernels they check.
"""

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .data import BatchSampler, synthetic_autoencoder
from .mlp import DataBatch, activate, forward, forward_backward, init_weights, layer_specs
from .mlp import loss_only, sample_losses
from .optimizers import KBFGS, KbfgsConfig
from .qn import (
    LbfgsBuffer,
    broyden_update,
    double_damp,
    powell_damp_H,
    sherman_morrison_rank1_inverse,
)

BOUNDED_ACTIVATIONS = ("sigmoid", "tanh")


@dataclass
class SuiteReport:
    name: str
    trials: int = 0
    failures: int = 0
    max_rel_err: float = 0.0
    seconds: float = 0.0
    notes: str = ""

    @property
    def passed(self):
        return self.failures == 0 and self.trials > 0


def _rel(a, b):
    """Relative error of ``a`` against reference ``b`` in the Frobenius norm."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_gradient(model, batch, h=1e-5):
    """Central-difference gradient of :func:`loss_only` for every weight."""
    grads = []
    for w in model.weights:
        g = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            orig = w[idx]
            w[idx] = orig + h
            up = loss_only(model, batch)
            w[idx] = orig - h
            down = loss_only(model, batch)
            w[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def _loss_from_h(model, x, y, layer, h_l):
    """Loss of one sample when layer ``layer``'s pre-activation is forced to ``h_l``."""
    a = activate(model.layers[layer].activation, h_l[None, :])
    for spec, w in zip(model.layers[layer + 1:], model.weights[layer + 1:]):
        a = activate(spec.activation, np.hstack([a, np.ones((1, 1))]) @ w.T)
    return float(sample_losses(model.loss_kind, a, y[None, :])[0])


def _fd_hessian(f, x0, h):
    """Second-order central differences of a scalar function of a vector."""
    n = x0.size
    H = np.zeros((n, n))
    f0 = f(x0)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        H[i, i] = (f(x0 + ei) - 2.0 * f0 + f(x0 - ei)) / (h * h)
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            v = (f(x0 + ei + ej) - f(x0 + ei - ej) - f(x0 - ei + ej) + f(x0 - ei - ej)) / (4 * h * h)
            H[i, j] = H[j, i] = v
    return H


def finite_diff_layer_hessian(model, batch, layer, h=1e-4):
    """Finite-difference Hessian blocks for one sample at layer ``layer`` (0-based).

    Returns ``(hess_w, g_fd, a_bar)`` where ``hess_w`` is the Hessian of the
    sample loss with respect to the column-stacked ``vec(W_layer)``, ``g_fd``
    the Hessian with respect to the pre-activation ``h_layer`` and ``a_bar``
    the homogeneous layer input.  The L2 term contributes ``l2_coeff * I``
    to ``hess_w``.
    """
    if len(batch) != 1:
        raise ValueError("finite_diff_layer_hessian needs a single-sample batch")
    w = model.weights[layer]
    shape = w.shape
    orig = w.copy()

    def loss_of_vec(v):
        model.weights[layer][...] = v.reshape(shape, order="F")
        try:
            return loss_only(model, batch)
        finally:
            model.weights[layer][...] = orig

    hess_w = _fd_hessian(loss_of_vec, orig.reshape(-1, order="F"), h)

    a_prevs, hs, _ = forward(model, batch.inputs)
    a_bar = a_prevs[layer][0]
    y = batch.targets[0]
    g_fd = _fd_hessian(lambda v: _loss_from_h(model, batch.inputs[0], y, layer, v), hs[layer][0], h)
    return hess_w, g_fd, a_bar


def gradient_oracle_suite(seeds=range(10), h=1e-5, tol=1e-5, batch_size=6):
    """Backward pass against central differences on two small nets."""
    t0 = time.perf_counter()
    rep = SuiteReport("gradient_oracle")
    nets = [
        ([8, 6, 4, 6, 8], ["tanh"] * 4, "mse"),
        ([8, 6, 4, 6, 8], ["tanh", "tanh", "tanh", "sigmoid"], "binary_entropy"),
    ]
    for seed in seeds:
        for widths, acts, loss in nets:
            rng = np.random.default_rng([seed, 7])
            model = init_weights(layer_specs(widths, acts), seed, loss, 1e-3)
            for w in model.weights:
                w[:, -1] = rng.uniform(-0.5, 0.5, size=w.shape[0])
            x = rng.random((batch_size, widths[0]))
            if loss == "mse":
                y = rng.standard_normal((batch_size, widths[-1]))
            else:
                y = (rng.random((batch_size, widths[-1])) < 0.5).astype(float)
            batch = DataBatch(x, y)
            bp = forward_backward(model, batch).grads
            fd = finite_diff_gradient(model, batch, h)
            for a, b in zip(bp, fd):
                err = _rel(a, b)
                rep.trials += 1
                rep.max_rel_err = max(rep.max_rel_err, err)
                rep.failures += err > tol
    rep.seconds = time.perf_counter() - t0
    return rep


def kronecker_hessian_suite(seeds=range(5), widths=(5, 4, 3), h=1e-4, tol=1e-4):
    """Single-sample Hessian of ``vec(W_l)`` against ``(a a^T) kron G_l``."""
    t0 = time.perf_counter()
    rep = SuiteReport("kronecker_hessian")
    acts = ["sigmoid"] * (len(widths) - 1)
    for seed in seeds:
        rng = np.random.default_rng([seed, 11])
        model = init_weights(layer_specs(widths, acts), seed, "binary_entropy", 0.0)
        for w in model.weights:
            w[:, -1] = rng.uniform(-0.5, 0.5, size=w.shape[0])
        batch = DataBatch(rng.random((1, widths[0])), rng.random((1, widths[-1])))
        for layer in range(len(model.layers)):
            hess_w, g_fd, a_bar = finite_diff_layer_hessian(model, batch, layer, h)
            err = _rel(hess_w, np.kron(np.outer(a_bar, a_bar), g_fd))
            rep.trials += 1
            rep.max_rel_err = max(rep.max_rel_err, err)
            rep.failures += err > tol
    rep.seconds = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# algebraic identities


def _random_spd(rng, d, lo=0.5):
    m = rng.standard_normal((d, d))
    return m @ m.T / d + lo * np.eye(d)


def dd_suite(instances=100_000, dmax=50, mu1=0.2, seed=0, slack=1e-12):
    """Double-damping guarantees on random ``(s, y, H)`` instances.

    Checks ``s~^T y >= mu1 y^T H y`` after the first stage and
    ``s~^T y~ >= mu2 s~^T s~`` after the second, each with relative slack.
    """
    t0 = time.perf_counter()
    rep = SuiteReport("double_damping")
    rng = np.random.default_rng(seed)
    # a small pool of SPD matrices keeps generation cost out of the loop
    pool = {d: [_random_spd(rng, d, lo=0.1) for _ in range(4)] for d in range(1, dmax + 1)}
    dims = rng.integers(1, dmax + 1, size=instances)
    mu2s = rng.uniform(0.05, 1.0, size=instances)
    for i in range(instances):
        d = int(dims[i])
        H = pool[d][i % 4]
        s = rng.standard_normal(d)
        y = rng.standard_normal(d)
        if not np.any(y):
            continue
        s1, _ = powell_damp_H(s, y, H, mu1)
        pair = double_damp(s, y, H, mu1, mu2s[i])
        yhy = float(y @ H @ y)
        lhs1, rhs1 = float(s1 @ y), mu1 * yhy
        lhs2, rhs2 = float(pair.s @ pair.y), mu2s[i] * float(pair.s @ pair.s)
        bad = lhs1 < rhs1 - slack * abs(rhs1) or lhs2 < rhs2 - slack * abs(rhs2)
        rep.trials += 1
        rep.failures += bool(bad)
        for lhs, rhs in ((lhs1, rhs1), (lhs2, rhs2)):
            if rhs > 0:
                rep.max_rel_err = max(rep.max_rel_err, max(0.0, (rhs - lhs) / rhs))
    rep.seconds = time.perf_counter() - t0
    return rep


def theorem1_suite(trials=1000, dmax=20, seed=0, tol=1e-8):
    """Broyden-family updates from an exact inverse equal the rank-one inverse."""
    t0 = time.perf_counter()
    rep = SuiteReport("theorem1")
    rng = np.random.default_rng(seed)
    for t in range(trials):
        d = int(rng.integers(1, dmax + 1))
        A = _random_spd(rng, d)
        H = np.linalg.inv(A)
        H = 0.5 * (H + H.T)
        a = rng.standard_normal(d)
        c = (0.5, 1.0, 2.0)[t % 3]
        dense = np.linalg.inv(A + c * np.outer(a, a))
        sm = sherman_morrison_rank1_inverse(H, a, c)
        errs = [_rel(sm, dense)]
        s = H @ a
        y = (A + c * np.outer(a, a)) @ s
        for phi in (0.0, 0.5, 1.0):
            errs.append(_rel(broyden_update(H, s, y, phi), dense))
        worst = max(errs)
        rep.trials += 1
        rep.max_rel_err = max(rep.max_rel_err, worst)
        rep.failures += worst > tol
    rep.seconds = time.perf_counter() - t0
    return rep


def lbfgs_equivalence_suite(trials=100, ps=(1, 5, 100), dims=(3, 50, 200), seed=0,
                            tol=1e-10, columns=4):
    """Compact L-BFGS products against the two-loop recursion, per column."""
    t0 = time.perf_counter()
    rep = SuiteReport("lbfgs_equivalence")
    rng = np.random.default_rng(seed)
    for p in ps:
        for d in dims:
            buf = LbfgsBuffer(p, dim=d)
            for _ in range(trials):
                # each state continues the stream, so eviction is exercised
                for _ in range(max(1, p // 10)):
                    s = rng.standard_normal(d)
                    y = rng.standard_normal(d)
                    pair = double_damp(s, y, buf, 0.2, 0.5)
                    buf.push(pair)
                V = rng.standard_normal((d, columns))
                compact = buf.apply_compact(V)
                for j in range(columns):
                    ref = buf.apply_two_loop(V[:, j])
                    err = float(np.linalg.norm(compact[:, j] - ref) / np.linalg.norm(ref))
                    rep.trials += 1
                    rep.max_rel_err = max(rep.max_rel_err, err)
                    rep.failures += err > tol
    rep.seconds = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------------------
# runtime monitors


@dataclass
class MonitorReport:
    ha_min: List[List[float]] = field(default_factory=list)
    ha_max: List[List[float]] = field(default_factory=list)
    hg_min: List[List[float]] = field(default_factory=list)
    hg_max: List[List[float]] = field(default_factory=list)
    dd_fraction_epochs: List[List[float]] = field(default_factory=list)
    dd_fraction_total: List[float] = field(default_factory=list)
    skip_fraction: float = 0.0
    lemma1_checks: int = 0
    growth_checks: int = 0
    max_growth_ratio: float = 0.0
    lbfgs_checks: int = 0
    violations: List[str] = field(default_factory=list)


class BoundMonitor:
    """Records eigenvalue extremes and damping statistics of a K-BFGS run.

    Hooks: ``on_step(optimizer, metrics)``, ``on_epoch(epoch, optimizer)``
    and ``hg_updated(layer, before, after, pair)``.  Nothing in the
    optimizer is modified.  ``every_step`` also records ``H_a`` extremes
    after each iteration.  ``inputs_bounded`` declares network inputs to lie
    in ``[-1, 1]`` so the first layer is covered by the ``H_a`` interval.
    """

    def __init__(self, model, config: KbfgsConfig, every_step=False, inputs_bounded=True,
                 max_probe_dim=64):
        self.config = config
        self.every_step = every_step
        self.max_probe_dim = max_probe_dim
        self.report = MonitorReport()
        n = len(model.layers)
        self._sat = np.zeros(n)
        self._tot = np.zeros(n)
        self._ep_sat = np.zeros(n)
        self._ep_tot = np.zeros(n)
        self._skips = 0
        self._updates = 0
        self._lemma1 = []
        for l, spec in enumerate(model.layers):
            prev_bounded = inputs_bounded if l == 0 else model.layers[l - 1].activation in BOUNDED_ACTIVATIONS
            if config.exact_A_inversion and prev_bounded:
                lam = config.lambda_a
                self._lemma1.append((1.0 / (1.0 + spec.in_dim + lam), 1.0 / lam))
            else:
                self._lemma1.append(None)

    # hooks -----------------------------------------------------------------

    def on_step(self, optimizer, metrics):
        for l, (ok, skipped) in enumerate(zip(metrics.dd_satisfied, metrics.skipped)):
            self._skips += bool(skipped)
            self._updates += 1
            if np.isnan(metrics.dd_ratio[l]):
                continue
            self._tot[l] += 1
            self._ep_tot[l] += 1
            self._sat[l] += ok
            self._ep_sat[l] += ok
        if self.every_step:
            self._record(optimizer, optimizer.k)

    def on_epoch(self, epoch, optimizer):
        with np.errstate(invalid="ignore", divide="ignore"):
            self.report.dd_fraction_epochs.append((self._ep_sat / self._ep_tot).tolist())
        self._ep_sat[:] = 0
        self._ep_tot[:] = 0
        if not self.every_step:
            self._record(optimizer, f"epoch {epoch}")

    def hg_updated(self, layer, before, after, pair):
        if isinstance(before, LbfgsBuffer):
            return
        mu1 = self.config.mu1
        if float(pair.s @ pair.y) < mu1 * float(pair.y @ before @ pair.y):
            return
        # B = H^{-1}, so lambda_max(B) = 1 / lambda_min(H)
        b_max = 1.0 / np.linalg.eigvalsh(before)[0]
        b_plus = 1.0 / np.linalg.eigvalsh(after)[0]
        ratio = b_plus / b_max
        self.report.growth_checks += 1
        self.report.max_growth_ratio = max(self.report.max_growth_ratio, ratio)
        if ratio > (1.0 + 1.0 / mu1) * (1.0 + 1e-8):
            self.report.violations.append(
                f"layer {layer}: lambda_max(B+)/lambda_max(B) = {ratio:.6g} exceeds 1 + 1/mu1")

    # internals ---------------------------------------------------------------

    def _record(self, optimizer, when):
        cfg = self.config
        ha_min, ha_max, hg_min, hg_max = [], [], [], []
        for l, st in enumerate(optimizer.layers, start=1):
            ev = np.linalg.eigvalsh(st.ha.Ha)
            ha_min.append(float(ev[0]))
            ha_max.append(float(ev[-1]))
            bounds = self._lemma1[l - 1]
            if bounds is not None:
                lo, hi = bounds
                self.report.lemma1_checks += 1
                if ev[0] < lo * (1 - 1e-6) or ev[-1] > hi * (1 + 1e-6):
                    self.report.violations.append(
                        f"{when} layer {l}: H_a spectrum [{ev[0]:.6g}, {ev[-1]:.6g}] "
                        f"outside [{lo:.6g}, {hi:.6g}]")
            if isinstance(st.hg, LbfgsBuffer):
                if st.hg.dim > self.max_probe_dim:
                    hg_min.append(float("nan"))
                    hg_max.append(float("nan"))
                    continue
                evg = np.linalg.eigvalsh(st.hg.to_dense())
                if cfg.skip_variant:
                    floor = (1.0 + 1.0 / cfg.mu1) ** (-cfg.p)
                    self.report.lbfgs_checks += 1
                    if evg[0] < floor * (1 - 1e-6):
                        self.report.violations.append(
                            f"{when} layer {l}: L-BFGS operator lambda_min {evg[0]:.6g} < {floor:.6g}")
            else:
                evg = np.linalg.eigvalsh(st.hg)
            if evg[0] <= 0:
                self.report.violations.append(f"{when} layer {l}: H_g is not positive definite")
            hg_min.append(float(evg[0]))
            hg_max.append(float(evg[-1]))
        self.report.ha_min.append(ha_min)
        self.report.ha_max.append(ha_max)
        self.report.hg_min.append(hg_min)
        self.report.hg_max.append(hg_max)

    def finalize(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            self.report.dd_fraction_total = (self._sat / self._tot).tolist()
        self.report.skip_fraction = self._skips / self._updates if self._updates else 0.0
        return self.report


def monitored_run(widths, activations, loss, config, iterations=200, batch_size=100, n=1000,
                  seed=0, every_step=True):
    """Train on synthetic binary data with a :class:`BoundMonitor` attached."""
    dataset = synthetic_autoencoder(seed, n, widths[0], kind="binary")
    model = init_weights(layer_specs(widths, activations), seed, loss, 1e-5)
    monitor = BoundMonitor(model, config, every_step=every_step)
    opt = KBFGS(config, observers=[monitor])
    opt.warm_start(model, dataset, batch_size)
    sampler = BatchSampler(len(dataset), batch_size, seed=seed + 1)
    epoch = 0
    for k in range(1, iterations + 1):
        metrics = opt.step(model, sampler.next_batch(dataset))
        monitor.on_step(opt, metrics)
        if k % sampler.batches_per_epoch == 0:
            epoch += 1
            monitor.on_epoch(epoch, opt)
    return monitor.finalize(), model


def lemma1_suite(iterations=200, seed=0, lambda_a=0.316):
    """``H_a`` spectra under exact ``A`` inversion on a sigmoid ``[16, 8, 16]`` net."""
    t0 = time.perf_counter()
    cfg = KbfgsConfig(alpha=0.3, lam=lambda_a ** 2, use_lbfgs=True, skip_variant=True,
                      exact_A_inversion=True)
    report, _ = monitored_run([16, 8, 16], ["sigmoid", "sigmoid"], "binary_entropy", cfg,
                              iterations=iterations, seed=seed)
    rep = SuiteReport("lemma1_bounds", trials=report.lemma1_checks,
                      failures=sum("H_a spectrum" in v for v in report.violations))
    rep.notes = f"lbfgs floor checks {report.lbfgs_checks}, violations {len(report.violations)}"
    rep.failures += sum("L-BFGS" in v for v in report.violations)
    rep.seconds = time.perf_counter() - t0
    return rep


def norm_growth_suite(iterations=200, seed=0):
    """``lambda_max(B+) <= lambda_max(B) (1 + 1/mu1)`` over a dense skip-variant run."""
    t0 = time.perf_counter()
    cfg = KbfgsConfig(alpha=0.3, lam=0.3, use_lbfgs=False, skip_variant=True,
                      exact_A_inversion=True)
    widths = [16, 8, 4, 8, 16]
    acts = ["relu", "linear", "relu", "sigmoid"]
    report, _ = monitored_run(widths, acts, "binary_entropy", cfg, iterations=iterations,
                              seed=seed, every_step=False)
    rep = SuiteReport("norm_growth", trials=report.growth_checks,
                      failures=sum("exceeds" in v for v in report.violations),
                      max_rel_err=report.max_growth_ratio)
    rep.notes = f"max growth ratio {report.max_growth_ratio:.6g}"
    rep.seconds = time.perf_counter() - t0
    return rep


SUITES = {
    "double_damping": dd_suite,
    "theorem1": theorem1_suite,
    "lbfgs_equivalence": lbfgs_equivalence_suite,
    "gradient_oracle": gradient_oracle_suite,
    "kronecker_hessian": kronecker_hessian_suite,
    "lemma1_bounds": lemma1_suite,
    "norm_growth": norm_growth_suite,
}


def run_all(out_csv=None, names=None) -> Dict[str, SuiteReport]:
    """Run every suite and optionally write a pass/fail CSV summary."""
    reports = {}
    for name, fn in SUITES.items():
        if names and name not in names:
            continue
        reports[name] = fn()
    if out_csv is not None:
        path = Path(out_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["suite", "passed", "trials", "failures", "max_rel_err", "seconds", "notes"])
            for rep in reports.values():
                writer.writerow([rep.name, rep.passed, rep.trials, rep.failures,
                                 f"{rep.max_rel_err:.9g}", f"{rep.seconds:.9g}", rep.notes])
    return reports
