"""Per-iteration training drivers.

Every optimizer exposes ``warm_start(model, dataset, batch_size,
num_batches=None)`` and ``step(model, batch) -> StepMetrics``.  Steps
update ``model.weights`` in place.
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DegeneratePairError
from .linalg import kron_sandwich, spd_inverse, symmetrize
from .mlp import DataBatch, apply_step, forward, forward_backward, sample_predictive_targets
from .qn import (
    HessianActionState,
    LbfgsBuffer,
    bfgs_inverse_update,
    curvature_ratio,
    dd_skip_predicate,
    double_damp,
    hessian_action_step,
)


@dataclass
class KbfgsConfig:
    alpha: float = 0.3
    lam: float = 0.3
    beta: float = 0.9
    mu1: float = 0.2
    use_lbfgs: bool = False
    p: int = 100
    skip_variant: bool = False
    exact_A_inversion: bool = False
    lr_decay_exponent: float = 0.75
    double_grad: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if not 0.0 < self.mu1 < 1.0:
            raise ValueError("mu1 must lie in (0, 1)")
        if self.p < 1:
            raise ValueError("p must be at least 1")
        if not 0.5 < self.lr_decay_exponent < 1.0:
            raise ValueError("lr_decay_exponent must lie in (0.5, 1)")

    @property
    def lambda_a(self):
        return float(np.sqrt(self.lam))

    @property
    def lambda_g(self):
        return float(np.sqrt(self.lam))

    @property
    def mu2(self):
        return self.lambda_g


@dataclass
class KfacConfig:
    alpha: float = 1.0
    lam: float = 3.0
    beta: float = 0.9
    T: int = 20

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.T < 1:
            raise ValueError("T must be at least 1")


@dataclass
class FirstOrderConfig:
    kind: str = "sgdm"
    alpha: float = 0.03
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("sgdm", "adam", "rmsprop"):
            raise ValueError(f"unknown first-order method {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass
class StepMetrics:
    loss: float
    alpha: float
    seconds: float = 0.0
    theta1: List[float] = field(default_factory=list)
    theta2: List[float] = field(default_factory=list)
    skipped: List[bool] = field(default_factory=list)
    dd_ratio: List[float] = field(default_factory=list)
    dd_satisfied: List[bool] = field(default_factory=list)


def double_grad_average(current, previous):
    """Average this iteration's gradient with the cached second-pass one."""
    if previous is None:
        return [g.copy() for g in current]
    return [0.5 * (g + h) for g, h in zip(current, previous)]


def iter_warm_batches(dataset, batch_size, num_batches=None):
    """Consecutive (unshuffled) batches covering the dataset."""
    n = len(dataset)
    starts = range(0, n, batch_size)
    if num_batches is not None:
        starts = list(starts)[:num_batches]
    for lo in starts:
        yield DataBatch(dataset.inputs[lo:lo + batch_size], dataset.targets[lo:lo + batch_size])


def _moment_sum(x):
    return x.T @ x


@dataclass
class KbfgsLayerState:
    grad_ma: np.ndarray
    ha: HessianActionState
    hg: object
    sg_ma: np.ndarray
    yg_ma: np.ndarray


class KBFGS:
    """K-BFGS and K-BFGS(L), including the skip variant with exact ``A`` inversion."""

    name = "kbfgs"

    def __init__(self, config: KbfgsConfig, observers=()):
        self.config = config
        self.observers = list(observers)
        self.k = 0
        self.layers = None
        self.prev_second_grads: Optional[list] = None

    def warm_start(self, model, dataset, batch_size, num_batches=None):
        cfg = self.config
        sums = [np.zeros((s.in_dim + 1, s.in_dim + 1)) for s in model.layers]
        count = 0
        for batch in iter_warm_batches(dataset, batch_size, num_batches):
            a_prevs, _, _ = forward(model, batch.inputs)
            for acc, a in zip(sums, a_prevs):
                acc += _moment_sum(a)
            count += len(batch)
        self.layers = []
        for spec, w, acc in zip(model.layers, model.weights, sums):
            A = symmetrize(acc / count)
            if cfg.use_lbfgs:
                hg = LbfgsBuffer(cfg.p, dim=spec.out_dim)
            else:
                hg = np.eye(spec.out_dim)
            self.layers.append(KbfgsLayerState(
                grad_ma=np.zeros_like(w),
                ha=HessianActionState.warm(A, cfg.lambda_a, cfg.beta),
                hg=hg,
                sg_ma=np.zeros(spec.out_dim),
                yg_ma=np.zeros(spec.out_dim),
            ))
        self.k = 0
        self.prev_second_grads = None

    def step_size(self):
        cfg = self.config
        if cfg.skip_variant:
            return cfg.alpha * self.k ** (-cfg.lr_decay_exponent)
        return cfg.alpha

    def step(self, model, batch):
        cfg = self.config
        t0 = time.perf_counter()
        self.k += 1
        trace = forward_backward(model, batch)
        grads = trace.grads
        if cfg.double_grad:
            grads = double_grad_average(grads, self.prev_second_grads)

        directions = []
        for st, g in zip(self.layers, grads):
            if cfg.skip_variant:
                st.grad_ma = g.copy()
            else:
                st.grad_ma = cfg.beta * st.grad_ma + (1.0 - cfg.beta) * g
            if cfg.use_lbfgs:
                directions.append(st.hg @ (st.grad_ma @ st.ha.Ha))
            else:
                directions.append(kron_sandwich(st.hg, st.grad_ma, st.ha.Ha))
        alpha_k = self.step_size()
        apply_step(model, directions, alpha_k)

        trace2 = forward_backward(model, batch)
        if cfg.double_grad:
            self.prev_second_grads = [g.copy() for g in trace2.grads]

        metrics = StepMetrics(loss=trace.loss, alpha=alpha_k)
        for l, (st, lt, lt2) in enumerate(zip(self.layers, trace.layers, trace2.layers), start=1):
            self._update_hg(l, st, lt, lt2, metrics)
            self._update_ha(st, lt)
        metrics.seconds = time.perf_counter() - t0
        return metrics

    def _update_hg(self, l, st, lt, lt2, metrics):
        cfg = self.config
        b = cfg.beta
        st.sg_ma = b * st.sg_ma + (1.0 - b) * (lt2.h_bar - lt.h_bar)
        st.yg_ma = b * st.yg_ma + (1.0 - b) * (lt2.g_bar - lt.g_bar)
        try:
            pair = double_damp(st.sg_ma, st.yg_ma, st.hg, cfg.mu1, cfg.mu2)
        except DegeneratePairError:
            metrics.theta1.append(np.nan)
            metrics.theta2.append(np.nan)
            metrics.skipped.append(True)
            metrics.dd_ratio.append(np.nan)
            metrics.dd_satisfied.append(False)
            return
        ratio = curvature_ratio(pair, st.hg)
        metrics.theta1.append(pair.theta1)
        metrics.theta2.append(pair.theta2)
        metrics.dd_ratio.append(ratio)
        metrics.dd_satisfied.append(bool(ratio <= 2.0 / cfg.mu1))
        if cfg.skip_variant and not dd_skip_predicate(pair, st.hg, cfg.mu1):
            pair.skipped = True
            metrics.skipped.append(True)
            return
        metrics.skipped.append(False)
        before = st.hg
        if cfg.use_lbfgs:
            st.hg.push(pair)
        else:
            st.hg = bfgs_inverse_update(st.hg, pair.s, pair.y)
        for obs in self.observers:
            obs.hg_updated(l, before, st.hg, pair)

    def _update_ha(self, st, lt):
        cfg = self.config
        if cfg.exact_A_inversion:
            ha = st.ha
            ha.A = symmetrize(ha.beta * ha.A + (1.0 - ha.beta) * lt.a_outer_mean)
            ha.Ha = spd_inverse(ha.A + ha.lambda_a * np.eye(ha.A.shape[0]))
        else:
            hessian_action_step(st.ha, lt.a_outer_mean, lt.a_bar_prev)


@dataclass
class KfacLayerState:
    grad_ma: np.ndarray
    A: np.ndarray
    G: np.ndarray
    Ha: np.ndarray
    Hg: np.ndarray


class KFAC:
    """KFAC with periodic inversion of damped Kronecker factors."""

    name = "kfac"

    def __init__(self, config: KfacConfig, rng=None):
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.k = 0
        self.layers = None

    def warm_start(self, model, dataset, batch_size, num_batches=None):
        a_sums = [np.zeros((s.in_dim + 1, s.in_dim + 1)) for s in model.layers]
        g_sums = [np.zeros((s.out_dim, s.out_dim)) for s in model.layers]
        count = 0
        for batch in iter_warm_batches(dataset, batch_size, num_batches):
            targets = sample_predictive_targets(model, batch.inputs, self.rng)
            trace = forward_backward(model, DataBatch(batch.inputs, targets))
            for acc_a, acc_g, lt in zip(a_sums, g_sums, trace.layers):
                acc_a += _moment_sum(lt.a_prev)
                acc_g += _moment_sum(lt.g)
            count += len(batch)
        self.layers = []
        for w, sa, sg in zip(model.weights, a_sums, g_sums):
            st = KfacLayerState(np.zeros_like(w), symmetrize(sa / count),
                                symmetrize(sg / count), None, None)
            self._invert(st)
            self.layers.append(st)
        self.k = 0

    def _invert(self, st):
        shift = np.sqrt(self.config.lam)
        st.Ha = spd_inverse(st.A + shift * np.eye(st.A.shape[0]))
        st.Hg = spd_inverse(st.G + shift * np.eye(st.G.shape[0]))

    def step(self, model, batch):
        cfg = self.config
        t0 = time.perf_counter()
        self.k += 1
        trace = forward_backward(model, batch)
        directions = []
        for st, g in zip(self.layers, trace.grads):
            st.grad_ma = cfg.beta * st.grad_ma + (1.0 - cfg.beta) * g
            directions.append(kron_sandwich(st.Hg, st.grad_ma, st.Ha))
        apply_step(model, directions, cfg.alpha)

        targets = sample_predictive_targets(model, batch.inputs, self.rng)
        trace2 = forward_backward(model, DataBatch(batch.inputs, targets))
        refresh = self.k <= cfg.T or self.k % cfg.T == 0
        for st, lt in zip(self.layers, trace2.layers):
            st.A = symmetrize(cfg.beta * st.A + (1.0 - cfg.beta) * lt.a_outer_mean)
            st.G = symmetrize(cfg.beta * st.G + (1.0 - cfg.beta) * lt.g_outer_mean)
            if refresh:
                self._invert(st)
        return StepMetrics(loss=trace.loss, alpha=cfg.alpha, seconds=time.perf_counter() - t0)


class FirstOrder:
    """SGD with momentum, RMSprop and Adam."""

    def __init__(self, config: FirstOrderConfig):
        self.config = config
        self.name = config.kind
        self.t = 0
        self.m1 = None
        self.m2 = None

    def _ensure(self, model):
        if self.m1 is None:
            self.m1 = [np.zeros_like(w) for w in model.weights]
            self.m2 = [np.zeros_like(w) for w in model.weights]

    def warm_start(self, model, dataset, batch_size, num_batches=None):
        self.m1 = self.m2 = None
        self._ensure(model)
        self.t = 0
        if self.config.kind != "rmsprop":
            return
        count = 0
        for batch in iter_warm_batches(dataset, batch_size, num_batches):
            for acc, g in zip(self.m2, forward_backward(model, batch).grads):
                acc += g * g
            count += 1
        for acc in self.m2:
            acc /= max(count, 1)

    def step(self, model, batch):
        cfg = self.config
        t0 = time.perf_counter()
        self._ensure(model)
        self.t += 1
        trace = forward_backward(model, batch)
        directions = []
        for i, g in enumerate(trace.grads):
            if cfg.kind == "sgdm":
                self.m1[i] = cfg.beta * self.m1[i] + g
                directions.append(self.m1[i])
            elif cfg.kind == "rmsprop":
                self.m2[i] = cfg.beta2 * self.m2[i] + (1.0 - cfg.beta2) * g * g
                directions.append(g / (np.sqrt(self.m2[i]) + cfg.eps))
            else:
                self.m1[i] = cfg.beta1 * self.m1[i] + (1.0 - cfg.beta1) * g
                self.m2[i] = cfg.beta2 * self.m2[i] + (1.0 - cfg.beta2) * g * g
                m_hat = self.m1[i] / (1.0 - cfg.beta1 ** self.t)
                v_hat = self.m2[i] / (1.0 - cfg.beta2 ** self.t)
                directions.append(m_hat / (np.sqrt(v_hat) + cfg.eps))
        apply_step(model, directions, cfg.alpha)
        return StepMetrics(loss=trace.loss, alpha=cfg.alpha, seconds=time.perf_counter() - t0)

