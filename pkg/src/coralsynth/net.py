"""VGG-style convolutional feature extractor with input-gradient backprop.

The network is a flat stack of conv / relu / pool layers. Forward passes
cache every conv layer's output; the backward pass takes gradients injected
at cached conv layers and maps them to a gradient with respect to the input
image. Only input gradients are ever computed (the network is never trained),
so conv backward reduces to a transposed convolution with the fixed kernels.

Convolutions are restricted to the VGG family: 3x3 kernels, stride 1, pad 1;
pooling is 2x2 stride 2 (max by default, average selectable per network).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "ActivationCache",
    "conv",
    "relu",
    "pool",
    "vgg16",
    "forward",
    "backward_input_grad",
    "receptive_field",
]

# Per-layer geometry of the supported family. Conv never changes spatial
# dims; pool floors them by 2.
CONV_KERNEL = 3
CONV_PAD = 1
POOL_WINDOW = 2
POOL_STRIDE = 2

# VGG-16 convolutional channel plan, grouped as (block, convs-in-block, width).
VGG16_BLOCKS = ((1, 2, 64), (2, 2, 128), (3, 3, 256), (4, 3, 512), (5, 3, 512))


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the stack.

    kind is "conv", "relu" or "pool". out_channels is meaningful for conv
    layers only; relu and pool preserve the channel count of their input.
    """

    name: str
    kind: str
    out_channels: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "relu", "pool"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.out_channels < 1:
            raise ValueError(f"conv layer {self.name!r} needs out_channels >= 1")


def conv(name: str, out_channels: int) -> LayerSpec:
    return LayerSpec(name, "conv", out_channels)


def relu(name: str) -> LayerSpec:
    return LayerSpec(name, "relu")


def pool(name: str) -> LayerSpec:
    return LayerSpec(name, "pool")


@dataclass
class NetworkSpec:
    """Ordered layer stack plus (optionally) the conv kernels and biases.

    Weights map conv-layer name to a (kernel, bias) pair with kernel shape
    (out_c, in_c, 3, 3) and bias shape (out_c,). Instances are treated as
    immutable once built and may be shared freely across workers.
    """

    layers: tuple[LayerSpec, ...]
    in_channels: int = 3
    pooling: str = "max"
    weights: dict[str, tuple[np.ndarray, np.ndarray]] | None = None
    preproc_means: tuple[float, float, float] | None = None
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _params64: dict[str, tuple[np.ndarray, np.ndarray]] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"unknown pooling mode {self.pooling!r}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique within a network")
        self._index = {l.name: i for i, l in enumerate(self.layers)}
        self._params64 = {}
        if self.weights is not None:
            self._check_weight_shapes()

    def layer_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown layer {name!r}") from None

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    def channel_plan(self) -> list[tuple[str, int, int]]:
        """(name, in_channels, out_channels) for every conv layer in order."""
        plan = []
        c = self.in_channels
        for layer in self.layers:
            if layer.kind == "conv":
                plan.append((layer.name, c, layer.out_channels))
                c = layer.out_channels
        return plan

    def out_channels_at(self, index: int) -> int:
        c = self.in_channels
        for layer in self.layers[: index + 1]:
            if layer.kind == "conv":
                c = layer.out_channels
        return c

    def with_weights(
        self,
        weights: dict[str, tuple[np.ndarray, np.ndarray]],
        preproc_means: tuple[float, float, float] | None = None,
    ) -> "NetworkSpec":
        return NetworkSpec(
            self.layers, self.in_channels, self.pooling, weights, preproc_means
        )

    def _check_weight_shapes(self):
        for name, cin, cout in self.channel_plan():
            if name not in self.weights:
                raise ValueError(f"missing weights for conv layer {name!r}")
            kernel, bias = self.weights[name]
            want = (cout, cin, CONV_KERNEL, CONV_KERNEL)
            if kernel.shape != want:
                raise ValueError(
                    f"kernel for {name!r} has shape {kernel.shape}, expected {want}"
                )
            if bias.shape != (cout,):
                raise ValueError(
                    f"bias for {name!r} has shape {bias.shape}, expected {(cout,)}"
                )

    def _conv_params64(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Per-tap kernel matrices and bias as float64, cached.

        The kernel (out_c, in_c, 3, 3) is rearranged to (9, out_c, in_c) so
        each tap is a contiguous matrix ready for a single matrix product.
        """
        if self.weights is None:
            raise ValueError("network has no weights attached")
        if name not in self._params64:
            kernel, bias = self.weights[name]
            cout, cin = kernel.shape[:2]
            taps = np.ascontiguousarray(
                kernel.astype(np.float64).transpose(2, 3, 0, 1).reshape(9, cout, cin)
            )
            self._params64[name] = (taps, np.ascontiguousarray(bias, dtype=np.float64))
        return self._params64[name]


def vgg16(pooling: str = "max") -> NetworkSpec:
    """The VGG-16 convolutional stack (conv1_1 .. pool5, no fc layers)."""
    layers: list[LayerSpec] = []
    for block, n_convs, width in VGG16_BLOCKS:
        for i in range(1, n_convs + 1):
            layers.append(conv(f"conv{block}_{i}", width))
            layers.append(relu(f"relu{block}_{i}"))
        layers.append(pool(f"pool{block}"))
    return NetworkSpec(tuple(layers), in_channels=3, pooling=pooling)


@dataclass
class ActivationCache:
    """Stored conv-layer outputs from one forward pass.

    Entries hold the raw conv outputs (pre-rectification). Retrieval defaults
    to the rectified view, which is where the losses attach; pass
    rectified=False for the raw conv output instead. A cache is confined to
    the worker that produced it.
    """

    entries: dict[str, np.ndarray]
    image: np.ndarray
    upto: str
    precision: str

    def get(self, name: str, rectified: bool = True) -> np.ndarray:
        try:
            act = self.entries[name]
        except KeyError:
            raise KeyError(f"layer {name!r} is not in the cache") from None
        return np.maximum(act, 0) if rectified else act

    def channels(self, name: str) -> int:
        return self.get(name, rectified=False).shape[1]

    def positions(self, name: str) -> int:
        _, _, h, w = self.get(name, rectified=False).shape
        return h * w

    def size(self, name: str) -> int:
        """Total element count per image at this layer (channels x positions)."""
        return self.channels(name) * self.positions(name)


def _check_image(net: NetworkSpec, image: np.ndarray):
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"expected image dims (1, c, h, w), got {image.shape}")
    if image.shape[1] != net.in_channels:
        raise ValueError(
            f"image has {image.shape[1]} channels, network expects {net.in_channels}"
        )


def _conv3x3(x: np.ndarray, taps: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 stride-1 convolution with zero padding 1, float64 accumulation.

    One matrix product per kernel tap over the whole padded input (keeping
    both operands contiguous for speed), accumulated into shifted views of
    the output. Reduction order per output element is fixed: bias first,
    then taps in row-major order, each reducing over input channels.
    """
    _, cin, h, w = x.shape
    cout = taps.shape[1]
    padded = np.zeros((cin, h + 2, w + 2), dtype=np.float64)
    padded[:, 1:-1, 1:-1] = x[0]
    flat = padded.reshape(cin, -1)
    out = np.empty((cout, h, w), dtype=np.float64)
    out[:] = bias[:, None, None]
    z = np.empty((cout, flat.shape[1]), dtype=np.float64)
    for t in range(9):
        di, dj = divmod(t, CONV_KERNEL)
        np.matmul(taps[t], flat, out=z)
        out += z.reshape(cout, h + 2, w + 2)[:, di : di + h, dj : dj + w]
    return out.reshape(1, cout, h, w)


def _conv3x3_input_grad(g: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Gradient of _conv3x3 with respect to its input (transposed convolution)."""
    _, cout, h, w = g.shape
    cin = taps.shape[2]
    g2 = np.ascontiguousarray(g[0], dtype=np.float64).reshape(cout, h * w)
    dpadded = np.zeros((cin, h + 2, w + 2), dtype=np.float64)
    for t in range(9):
        di, dj = divmod(t, CONV_KERNEL)
        dpadded[:, di : di + h, dj : dj + w] += (taps[t].T @ g2).reshape(cin, h, w)
    return dpadded[None, :, 1:-1, 1:-1]


def _pool_windows(x: np.ndarray) -> np.ndarray:
    """View of the even-cropped input as (1, c, ho, wo, 4) pooling windows."""
    _, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    cropped = x[:, :, : 2 * ho, : 2 * wo]
    return cropped.reshape(1, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        1, c, ho, wo, 4
    )


def _pool_forward(x: np.ndarray, mode: str, name: str) -> np.ndarray:
    _, _, h, w = x.shape
    if h < POOL_WINDOW or w < POOL_WINDOW:
        raise ValueError(f"spatial underflow at {name!r}: input is {h}x{w}")
    windows = _pool_windows(x)
    return windows.max(axis=-1) if mode == "max" else windows.mean(axis=-1)


def _pool_input_grad(g: np.ndarray, x_in: np.ndarray, mode: str) -> np.ndarray:
    _, c, h, w = x_in.shape
    ho, wo = h // 2, w // 2
    dwin = np.zeros((1, c, ho, wo, 4), dtype=np.float64)
    if mode == "max":
        # argmax picks the first maximal index in window scan order
        idx = _pool_windows(x_in).argmax(axis=-1)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
    else:
        dwin[:] = g[..., None] / 4.0
    dx = np.zeros((1, c, h, w), dtype=np.float64)
    dx[:, :, : 2 * ho, : 2 * wo] = (
        dwin.reshape(1, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(1, c, 2 * ho, 2 * wo)
    )
    return dx


def forward(
    net: NetworkSpec, image: np.ndarray, upto: str, precision: str = "f32"
) -> ActivationCache:
    """Run the stack through layer `upto` inclusive, caching conv outputs.

    precision "f32" stores cached activations as float32 (accumulation inside
    convolutions is float64 either way); "f64" keeps everything float64.
    Deterministic: identical weights and input give a bit-identical cache.
    """
    if precision not in ("f32", "f64"):
        raise ValueError(f"unknown precision {precision!r}")
    if net.weights is None:
        raise ValueError("network has no weights attached")
    _check_image(net, image)
    stop = net.layer_index(upto)
    store = np.float32 if precision == "f32" else np.float64

    entries: dict[str, np.ndarray] = {}
    cur = image.astype(np.float64, copy=False)
    for layer in net.layers[: stop + 1]:
        if layer.kind == "conv":
            taps, bias = net._conv_params64(layer.name)
            out = _conv3x3(cur, taps, bias)
            stored = out.astype(store)
            entries[layer.name] = stored
            # the stored (possibly rounded) value is what feeds the next layer
            cur = stored.astype(np.float64, copy=False)
        elif layer.kind == "relu":
            cur = np.maximum(cur, 0)
        else:
            cur = _pool_forward(cur, net.pooling, layer.name)
    return ActivationCache(entries, image.astype(store), upto, precision)


def backward_input_grad(
    net: NetworkSpec,
    cache: ActivationCache,
    injected: dict[str, np.ndarray],
    rectified: bool = True,
) -> np.ndarray:
    """Map per-layer activation gradients to a gradient on the input image.

    Each entry of `injected` is the gradient of some scalar loss with respect
    to a cached conv layer's activation; gradients injected at several layers
    accumulate additively. With rectified=True (the default) the injected
    gradients are taken with respect to the rectified activations, matching
    ActivationCache.get; with rectified=False they attach to the raw conv
    outputs.
    """
    if not injected:
        return np.zeros_like(cache.image)
    positions = {}
    for name, g in injected.items():
        if name not in cache.entries:
            raise ValueError(f"gradient injected at {name!r}, which is not cached")
        want = cache.entries[name].shape
        if g.shape != want:
            raise ValueError(
                f"injected gradient at {name!r} has shape {g.shape}, expected {want}"
            )
        positions[net.layer_index(name)] = name
    deepest = max(positions)

    # outputs of intermediate layers, rebuilt on demand from the cached conv
    # activations (memoized per call; index -1 is the input image)
    derived: dict[int, np.ndarray] = {}

    def output_of(i: int) -> np.ndarray:
        if i == -1:
            return cache.image
        if i not in derived:
            layer = net.layers[i]
            if layer.kind == "conv":
                derived[i] = cache.entries[layer.name]
            elif layer.kind == "relu":
                derived[i] = np.maximum(output_of(i - 1), 0)
            else:
                derived[i] = _pool_forward(output_of(i - 1), net.pooling, layer.name)
        return derived[i]

    g = np.zeros(cache.entries[positions[deepest]].shape, dtype=np.float64)
    for i in range(deepest, -1, -1):
        layer = net.layers[i]
        if layer.kind == "conv":
            if i in positions:
                inj = injected[positions[i]].astype(np.float64, copy=False)
                if rectified:
                    # fold the (virtual or real) downstream relu into the
                    # injection point: d relu(x)/dx masks by the sign of x
                    inj = inj * (cache.entries[layer.name] > 0)
                g = g + inj
            taps, _ = net._conv_params64(layer.name)
            g = _conv3x3_input_grad(g, taps)
        elif layer.kind == "relu":
            g = g * (output_of(i - 1) > 0)
        else:
            g = _pool_input_grad(g, output_of(i - 1), net.pooling)
    store = np.float32 if cache.precision == "f32" else np.float64
    return g.astype(store)


def receptive_field(net: NetworkSpec, layer: str) -> int:
    """Theoretical receptive field side length at the named layer."""
    stop = net.layer_index(layer)
    size, jump = 1, 1
    for spec in net.layers[: stop + 1]:
        if spec.kind == "conv":
            k, s = CONV_KERNEL, 1
        elif spec.kind == "relu":
            k, s = 1, 1
        else:
            k, s = POOL_WINDOW, POOL_STRIDE
        size += (k - 1) * jump
        jump *= s
    return size
