"""Pixel-space synthesis loop.

Starting from the content image plus Gaussian noise, repeatedly run the
extractor forward, evaluate the feature and covariance losses, inject their
activation gradients, backpropagate to the pixels, and step the optimizer.
Style statistics (per-layer covariances) are computed once per call and
reused across iterations. The whole loop is deterministic for a fixed
(inputs, config, seed) triple.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import LossConfig, coral_term, covariance, default_config, feature_term
from .net import NetworkSpec, backward_input_grad, forward

__all__ = [
    "SynthesisConfig",
    "SynthesisTrace",
    "TracePoint",
    "SweepResult",
    "DivergenceError",
    "init_image",
    "synthesize",
    "sweep_lambda",
]

MAX_STEP_HALVINGS = 5


class DivergenceError(RuntimeError):
    """Raised when the objective stays non-finite after repeated step halving."""


@dataclass(frozen=True)
class SynthesisConfig:
    loss: LossConfig = field(default_factory=default_config)
    sigma: float = 10.0
    seed: int = 0
    optimizer: str = "adam"
    step: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 500
    clamp: tuple[float, float] | None = None
    log_every: int = 50
    precision: str = "f32"
    rectified: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass(frozen=True)
class TracePoint:
    iteration: int
    feat: float
    coral: float
    total: float


@dataclass
class SynthesisTrace:
    points: list[TracePoint]
    image_dims: tuple[int, int, int, int]
    wall_time: float = 0.0
    halvings: int = 0

    @property
    def initial(self) -> TracePoint:
        return self.points[0]

    @property
    def final(self) -> TracePoint:
        return self.points[-1]


@dataclass(frozen=True)
class SweepResult:
    lam: float
    image: np.ndarray
    feat: float
    coral: float


def init_image(content: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Content plus i.i.d. N(0, sigma^2) noise from a seeded generator.

    sigma = 0 returns the content bit-exactly.
    """
    if content.ndim != 4 or content.shape[0] != 1:
        raise ValueError(f"expected content dims (1, c, h, w), got {content.shape}")
    if sigma == 0:
        return content.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=content.shape)
    return (content.astype(np.float64) + noise).astype(content.dtype)


def _evaluate(cache_d, content_acts, style_covs, cfg: LossConfig, rectified: bool):
    """Losses at the current iterate plus the gradients to inject.

    Gradients are collected only for terms that actually move the objective
    (nonzero weight, and lam > 0 for the covariance side); the loss values
    themselves are always measured.
    """
    feat = 0.0
    cor = 0.0
    injected: dict[str, np.ndarray] = {}

    def inject(name, grad):
        if name in injected:
            injected[name] = injected[name] + grad
        else:
            injected[name] = grad

    for name in sorted(cfg.feat_layers):
        omega = cfg.feat_layers[name]
        term, grad = feature_term(
            cache_d.get(name, rectified), content_acts[name], omega
        )
        feat += term
        if omega > 0:
            inject(name, grad)
    for name in sorted(cfg.coral_layers):
        omega = cfg.coral_layers[name]
        term, grad = coral_term(
            cache_d.get(name, rectified), style_covs[name], omega, cfg.cov_normalizer
        )
        cor += term
        if cfg.lam > 0 and omega > 0:
            inject(name, cfg.lam * grad)
    return feat, cor, injected


def synthesize(
    content: np.ndarray,
    style: np.ndarray,
    net: NetworkSpec,
    cfg: SynthesisConfig,
) -> tuple[np.ndarray, SynthesisTrace]:
    """Optimize an image against the combined feature/covariance objective.

    Returns the iterate after cfg.iterations steps together with a trace of
    the loss components. The style image may differ in spatial size from the
    content image; it enters only through its per-layer covariances, computed
    once up front. Every iterate, the returned one included, must evaluate to
    a finite objective: on a non-finite value the step is halved and the
    offending update is redone from the last finite iterate, at most five
    times in total.
    """
    t0 = time.perf_counter()
    loss_cfg = cfg.loss
    store = np.float32 if cfg.precision == "f32" else np.float64
    content = content.astype(store)
    style = style.astype(store)

    upto = loss_cfg.deepest_layer(net.layer_index)
    if loss_cfg.coral_layers:
        deepest_coral = max(loss_cfg.coral_layers, key=net.layer_index)
        style_cache = forward(net, style, deepest_coral, cfg.precision)
        style_covs = {
            name: covariance(style_cache.get(name, cfg.rectified), loss_cfg.cov_normalizer)
            for name in loss_cfg.coral_layers
        }
        del style_cache
    else:
        style_covs = {}
    if loss_cfg.feat_layers:
        deepest_feat = max(loss_cfg.feat_layers, key=net.layer_index)
        content_cache = forward(net, content, deepest_feat, cfg.precision)
        content_acts = {
            name: content_cache.get(name, cfg.rectified)
            for name in loss_cfg.feat_layers
        }
        del content_cache
    else:
        content_acts = {}

    image = init_image(content, cfg.sigma, cfg.seed)
    m = np.zeros(image.shape, dtype=np.float64)
    v = np.zeros(image.shape, dtype=np.float64)
    t = 0
    step = cfg.step
    halvings = 0
    checkpoint = image
    points: list[TracePoint] = []

    # a too-large step sends iterates to inf/nan before the halving logic
    # catches it; those transients are expected, not numpy errors
    quiet = dict(over="ignore", invalid="ignore")
    it = 0
    while True:
        with np.errstate(**quiet):
            cache_d = forward(net, image, upto, cfg.precision)
            feat, cor, injected = _evaluate(
                cache_d, content_acts, style_covs, loss_cfg, cfg.rectified
            )
            total = feat + loss_cfg.lam * cor
        if not np.isfinite(total):
            halvings += 1
            if halvings > MAX_STEP_HALVINGS:
                raise DivergenceError(
                    f"objective non-finite after {MAX_STEP_HALVINGS} step halvings"
                )
            step /= 2.0
            image = checkpoint.copy()
            m[:] = 0.0
            v[:] = 0.0
            t = 0
            # redo the update that produced the bad iterate
            it = max(it - 1, 0)
            continue
        checkpoint = image
        if it == cfg.iterations:
            break
        if it % cfg.log_every == 0:
            points.append(TracePoint(it, feat, cor, total))

        with np.errstate(**quiet):
            grad = backward_input_grad(net, cache_d, injected, cfg.rectified).astype(
                np.float64
            )
            if cfg.optimizer == "adam":
                t += 1
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
                m_hat = m / (1.0 - cfg.beta1**t)
                v_hat = v / (1.0 - cfg.beta2**t)
                update = step * m_hat / (np.sqrt(v_hat) + 1e-8)
            else:
                update = step * grad
            image = (image.astype(np.float64) - update).astype(store)
        it += 1

    if cfg.clamp is not None:
        lo, hi = cfg.clamp
        image = np.clip(image, lo, hi)
        cache_d = forward(net, image, upto, cfg.precision)
        feat, cor, _ = _evaluate(
            cache_d, content_acts, style_covs, loss_cfg, cfg.rectified
        )
    points.append(TracePoint(cfg.iterations, feat, cor, feat + loss_cfg.lam * cor))

    trace = SynthesisTrace(points, image.shape, time.perf_counter() - t0, halvings)
    return image, trace


def sweep_lambda(
    content: np.ndarray,
    style: np.ndarray,
    net: NetworkSpec,
    cfg: SynthesisConfig,
    lambdas: list[float],
) -> list[SweepResult]:
    """One synthesis per trade-off value, all from the same seed.

    Results are ordered by lambda ascending.
    """
    if not lambdas:
        raise ValueError("lambdas must be nonempty")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambdas must be nonnegative")
    results = []
    for lam in sorted(lambdas):
        run_cfg = replace(cfg, loss=replace(cfg.loss, lam=lam))
        image, trace = synthesize(content, style, net, run_cfg)
        results.append(SweepResult(lam, image, trace.final.feat, trace.final.coral))
    return results
