"""Loss functionals on cached activations and their analytic gradients.

Two losses drive the synthesis. The feature loss is a scaled squared l2
distance between a layer's activations for the generated image and for the
content image; it preserves object shape. The covariance loss is a scaled
squared Frobenius distance between the channel covariance matrices of the
generated image and of the style image; it matches second-order texture
statistics. Each loss term at layer l is normalized by alpha = N * F with
N the channel count and F the spatial position count of that layer.

Activations are flattened to an F x N matrix (rows are spatial positions,
columns are channels), so the covariance is N x N. Two normalizer
conventions are supported for the covariance: "channels" divides the raw
second moment and the centering term by N, "samples" divides both by F.
The gradients are the exact derivatives of the selected forward form.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .net import ActivationCache

__all__ = [
    "LossConfig",
    "default_config",
    "covariance",
    "feature_loss",
    "feature_loss_grad",
    "coral_loss",
    "coral_loss_grad",
    "total_objective",
    "feature_term",
    "coral_term",
]

NORMALIZERS = ("channels", "samples")


@dataclass(frozen=True)
class LossConfig:
    """Which layers each loss attaches to, their weights, and the trade-off.

    feat_layers and coral_layers map layer name to a nonnegative weight.
    lam scales the covariance loss against the feature loss in the combined
    objective. cov_normalizer selects the covariance convention; any constant
    rescaling it introduces can be absorbed into the layer weights.
    """

    feat_layers: dict[str, float]
    coral_layers: dict[str, float]
    lam: float = 1e3
    cov_normalizer: str = "channels"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.cov_normalizer not in NORMALIZERS:
            raise ValueError(f"unknown cov_normalizer {self.cov_normalizer!r}")
        for name, w in {**self.feat_layers, **self.coral_layers}.items():
            if w < 0:
                raise ValueError(f"negative loss weight at {name!r}")

    def deepest_layer(self, index_of) -> str:
        """Deepest layer either loss attaches to, per the given index function."""
        names = list(self.feat_layers) + list(self.coral_layers)
        if not names:
            raise ValueError("loss config has no layers")
        return max(names, key=index_of)


def default_config(lam: float = 1e3) -> LossConfig:
    """Feature loss on conv3_2; covariance loss on conv1_1..conv5_1 at 0.2."""
    return LossConfig(
        feat_layers={"conv3_2": 1.0},
        coral_layers={f"conv{b}_1": 0.2 for b in range(1, 6)},
        lam=lam,
    )


def _as_matrix(activation: np.ndarray) -> np.ndarray:
    """Flatten a (1, N, h, w) activation to the F x N position/channel matrix."""
    if activation.ndim != 4 or activation.shape[0] != 1:
        raise ValueError(
            f"expected activation dims (1, c, h, w), got {activation.shape}"
        )
    n = activation.shape[1]
    return activation.reshape(n, -1).T.astype(np.float64)


def _normalizer_count(normalizer: str, n: int, f: int) -> int:
    if normalizer not in NORMALIZERS:
        raise ValueError(f"unknown cov_normalizer {normalizer!r}")
    return n if normalizer == "channels" else f


def covariance(activation: np.ndarray, normalizer: str = "channels") -> np.ndarray:
    """Channel covariance of one activation map.

    Returns the N x N matrix (H^T H - (1/k) s s^T) / k where H is the F x N
    position/channel matrix, s its column sums, and k the normalizer count
    (N for "channels", F for "samples"). Accumulation is float64 with a
    fixed, row-major reduction order.
    """
    h = _as_matrix(activation)
    f, n = h.shape
    k = _normalizer_count(normalizer, n, f)
    raw = h.T @ h
    s = h.sum(axis=0)
    return (raw - np.outer(s, s) / k) / k


def feature_term(
    act_d: np.ndarray, act_c: np.ndarray, omega: float
) -> tuple[float, np.ndarray]:
    """One layer's feature loss and its gradient w.r.t. act_d."""
    if act_d.shape != act_c.shape:
        raise ValueError(
            f"activation shape mismatch: {act_d.shape} vs {act_c.shape}"
        )
    alpha = act_d[0].size
    diff = act_d.astype(np.float64) - act_c.astype(np.float64)
    loss = (omega / (2.0 * alpha)) * float(np.vdot(diff, diff))
    return loss, (omega / alpha) * diff


def coral_term(
    act_d: np.ndarray,
    cov_ref: np.ndarray,
    omega: float,
    normalizer: str = "channels",
) -> tuple[float, np.ndarray]:
    """One layer's covariance loss and gradient against a fixed reference.

    The reference covariance must come from the same normalizer convention.
    The gradient is the exact derivative of the loss term:
        (omega / (k * alpha^2)) * (H - (1/k) 1 s^T) (Cov_d - Cov_ref)
    reshaped back to the activation layout.
    """
    h = _as_matrix(act_d)
    f, n = h.shape
    if cov_ref.shape != (n, n):
        raise ValueError(
            f"reference covariance is {cov_ref.shape}, activation has {n} channels"
        )
    k = _normalizer_count(normalizer, n, f)
    s = h.sum(axis=0)
    cov_d = (h.T @ h - np.outer(s, s) / k) / k
    delta = cov_d - cov_ref
    alpha = n * f
    loss = (omega / (4.0 * alpha**2)) * float(np.vdot(delta, delta))
    grad = (omega / (k * alpha**2)) * ((h - s[None, :] / k) @ delta)
    return loss, grad.T.reshape(act_d.shape)


def feature_loss(
    cache_d: ActivationCache,
    cache_c: ActivationCache,
    cfg: LossConfig,
    rectified: bool = True,
) -> float:
    """Weighted squared activation distance summed over the feature layers."""
    total = 0.0
    for name in sorted(cfg.feat_layers):
        term, _ = feature_term(
            cache_d.get(name, rectified), cache_c.get(name, rectified),
            cfg.feat_layers[name],
        )
        total += term
    return total


def feature_loss_grad(
    cache_d: ActivationCache,
    cache_c: ActivationCache,
    cfg: LossConfig,
    layer: str,
    rectified: bool = True,
) -> np.ndarray:
    if layer not in cfg.feat_layers:
        raise ValueError(f"layer {layer!r} is not a feature-loss layer")
    _, grad = feature_term(
        cache_d.get(layer, rectified), cache_c.get(layer, rectified),
        cfg.feat_layers[layer],
    )
    return grad


def coral_loss(
    cache_d: ActivationCache,
    cache_r: ActivationCache,
    cfg: LossConfig,
    rectified: bool = True,
) -> float:
    """Weighted covariance distance summed over the coral layers.

    The reference cache may differ in spatial size; only channel counts must
    agree. Normalization uses alpha of the first argument's layers.
    """
    total = 0.0
    for name in sorted(cfg.coral_layers):
        cov_ref = covariance(cache_r.get(name, rectified), cfg.cov_normalizer)
        term, _ = coral_term(
            cache_d.get(name, rectified), cov_ref,
            cfg.coral_layers[name], cfg.cov_normalizer,
        )
        total += term
    return total


def coral_loss_grad(
    cache_d: ActivationCache,
    cache_r: ActivationCache,
    cfg: LossConfig,
    layer: str,
    rectified: bool = True,
) -> np.ndarray:
    if layer not in cfg.coral_layers:
        raise ValueError(f"layer {layer!r} is not a coral-loss layer")
    cov_ref = covariance(cache_r.get(layer, rectified), cfg.cov_normalizer)
    _, grad = coral_term(
        cache_d.get(layer, rectified), cov_ref,
        cfg.coral_layers[layer], cfg.cov_normalizer,
    )
    return grad


def total_objective(
    cache_d: ActivationCache,
    cache_c: ActivationCache,
    cache_r: ActivationCache,
    cfg: LossConfig,
    rectified: bool = True,
) -> tuple[float, float, float]:
    """Combined objective: (feat + lam * coral, feat, coral)."""
    feat = feature_loss(cache_d, cache_c, cfg, rectified)
    cor = coral_loss(cache_d, cache_r, cfg, rectified)
    return feat + cfg.lam * cor, feat, cor
