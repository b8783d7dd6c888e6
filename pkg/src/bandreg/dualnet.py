"""Complex-valued CNN over band spectra, run as two real-valued twin networks.

The real planes of the source/target spectra feed ``R_net`` and the imaginary
planes feed ``I_net``. Because a real kernel acts on each plane separately and
the activation rectifies each plane separately, this pair computes exactly
what a single complex network with those kernels would, and the squared loss
on complex velocities splits into a real-plane term plus an imaginary-plane
term, so each twin can be differentiated on its own.

``input_mode="stacked"`` instead feeds both twins all four planes. It gives
up the complex-network equivalence but still lets each twin own one output
plane. It is needed when the inputs are centered phantoms, whose spectra are
real, so the imaginary planes carry nothing for ``I_net`` to map.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .freq import BandSpec, FreqVectorField, symmetrize
from .registration import RegConfig, ssd
from .shooting import DeformationField, det_jacobian, shoot, to_deformation, warp


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class LayerSpec:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    activation: bool = True

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if self.stride != 1:
            raise ValueError("only stride 1 keeps the output on the band")


INPUT_CHANNELS = {"planes": 2, "stacked": 4}


def default_arch(dim: int = 2, widths: Sequence[int] = (16, 32, 32), kernel: int = 3,
                 input_mode: str = "planes") -> tuple:
    """Conv stack ending in ``dim`` velocity channels.

    ``input_mode="planes"`` feeds each twin its own plane of the source/target
    spectra. ``"stacked"`` feeds both twins all four planes, which lets the
    network move information between planes (needed when the images are
    symmetric and the imaginary input planes vanish).
    """
    if input_mode not in INPUT_CHANNELS:
        raise ValueError(f"input_mode must be one of {sorted(INPUT_CHANNELS)}, got {input_mode!r}")
    chans = [INPUT_CHANNELS[input_mode], *widths, dim]
    return tuple(
        LayerSpec(chans[p], chans[p + 1], kernel, 1, activation=p < len(chans) - 2)
        for p in range(len(chans) - 1)
    )


def check_arch(arch: Sequence[LayerSpec], dim: int):
    if arch[0].in_ch not in INPUT_CHANNELS.values():
        raise ValueError(f"first layer must take 2 or 4 input planes, got {arch[0].in_ch}")
    if arch[-1].out_ch != dim:
        raise ValueError(f"last layer must emit {dim} velocity components, got {arch[-1].out_ch}")
    for p in range(1, len(arch)):
        if arch[p].in_ch != arch[p - 1].out_ch:
            raise ValueError(f"layer {p} takes {arch[p].in_ch} channels but layer {p - 1} emits {arch[p - 1].out_ch}")


@dataclass
class DualNetWeights:
    arch: tuple
    dim: int
    r_layers: list
    i_layers: list
    tie_weights: bool = False
    input_scale: float = 1.0
    output_scale: float = 1.0

    def __post_init__(self):
        self.arch = tuple(self.arch)
        check_arch(self.arch, self.dim)
        for layers in (self.r_layers, self.i_layers):
            if len(layers) != len(self.arch):
                raise ValueError("layer list does not match the architecture")
            for spec, (k, b) in zip(self.arch, layers):
                want = (spec.out_ch, spec.in_ch) + (spec.kernel,) * self.dim
                if k.shape != want or b.shape != (spec.out_ch,):
                    raise ValueError(f"kernel {k.shape} / bias {b.shape} do not fit {spec}")
        if self.tie_weights:
            self.i_layers = self.r_layers

    @property
    def input_mode(self) -> str:
        return "planes" if self.arch[0].in_ch == 2 else "stacked"

    def nets(self) -> tuple:
        return (self.r_layers,) if self.tie_weights else (self.r_layers, self.i_layers)

    def params(self) -> list:
        """Flat list of the distinct parameter arrays (kernel, bias, kernel, bias, ...)."""
        return [a for net in self.nets() for layer in net for a in layer]

    def with_params(self, flat: Sequence[np.ndarray]) -> "DualNetWeights":
        flat = list(flat)
        n = 2 * len(self.arch)
        nets = [list(zip(flat[i: i + n: 2], flat[i + 1: i + n: 2])) for i in range(0, len(flat), n)]
        return replace(self, r_layers=nets[0], i_layers=nets[-1])

    def kernel_norm2(self) -> float:
        return float(sum(np.sum(k ** 2) for net in self.nets() for k, _ in net))


def init_weights(arch: Sequence[LayerSpec], dim: int = 2, seed: int = 0, tie_weights: bool = False,
                 input_scale: float = 1.0, output_scale: float = 1.0) -> DualNetWeights:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` kernels and biases."""
    rng = np.random.default_rng(seed)

    def net():
        layers = []
        for spec in arch:
            shape = (spec.out_ch, spec.in_ch) + (spec.kernel,) * dim
            bound = 1.0 / np.sqrt(spec.in_ch * spec.kernel ** dim)
            layers.append((rng.uniform(-bound, bound, shape), rng.uniform(-bound, bound, spec.out_ch)))
        return layers

    r = net()
    i = r if tie_weights else net()
    return DualNetWeights(tuple(arch), dim, r, i, tie_weights, input_scale, output_scale)


def zero_weights(arch: Sequence[LayerSpec], dim: int = 2, **kw) -> DualNetWeights:
    w = init_weights(arch, dim, **kw)
    return w.with_params([np.zeros_like(a) for a in w.params()])


# --- layer vocabulary -------------------------------------------------------

def _windows(x: np.ndarray, ksize: tuple) -> np.ndarray:
    d = len(ksize)
    pad = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in ksize]
    return sliding_window_view(np.pad(x, pad), ksize, axis=tuple(range(2, 2 + d)))


def conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None, win=None) -> np.ndarray:
    """Zero-padded 'same' cross-correlation; ``x`` is ``(N, C, *space)``, ``kernel`` ``(O, C, *k)``."""
    d = kernel.ndim - 2
    win = _windows(x, kernel.shape[2:]) if win is None else win
    y = np.tensordot(win, kernel, axes=([1, *range(2 + d, 2 + 2 * d)], [1, *range(2, 2 + d)]))
    y = np.moveaxis(y, -1, 1)
    if bias is not None:
        y = y + bias.reshape((1, -1) + (1,) * d)
    return y


def conv_backward(grad_y: np.ndarray, win: np.ndarray, kernel: np.ndarray):
    """Gradients w.r.t. input, kernel and bias of :func:`conv`."""
    d = kernel.ndim - 2
    space = tuple(range(2, 2 + d))
    g_kernel = np.tensordot(grad_y, win, axes=([0, *space], [0, *space]))
    g_bias = grad_y.sum(axis=(0, *space))
    flipped = np.flip(kernel, axis=tuple(range(2, 2 + d))).swapaxes(0, 1)
    g_x = conv(grad_y, flipped)
    return g_x, g_kernel, g_bias


def relu(x):
    return np.maximum(x, 0.0)


def complex_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Real kernel applied to the real and imaginary planes of ``x`` separately."""
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    return conv(np.real(x), kernel) + 1j * conv(np.imag(x), kernel)


def crelu(y: np.ndarray) -> np.ndarray:
    return relu(np.real(y)) + 1j * relu(np.imag(y))


def _net_forward(x: np.ndarray, layers, arch, keep: bool = False):
    cache = []
    for spec, (k, b) in zip(arch, layers):
        win = _windows(x, k.shape[2:])
        z = conv(x, k, b, win)
        x = relu(z) if spec.activation else z
        if keep:
            cache.append((win, z))
    return x, cache


def _net_backward(grad: np.ndarray, layers, arch, cache) -> list:
    grads = [None] * len(arch)
    for p in range(len(arch) - 1, -1, -1):
        win, z = cache[p]
        if arch[p].activation:
            grad = grad * (z > 0)
        g_x, g_k, g_b = conv_backward(grad, win, layers[p][0])
        grads[p] = (g_k, g_b)
        grad = g_x
    return grads


# --- model ------------------------------------------------------------------

def stack_inputs(examples) -> tuple:
    """``(N, 2, *band)`` complex source/target spectra and ``(N, d, *band)`` labels (or None)."""
    x = np.stack([np.stack([ex.s_freq.coeffs, ex.t_freq.coeffs]) for ex in examples])
    labels = [ex.v_opt for ex in examples]
    y = None if any(v is None for v in labels) else np.stack([v.coeffs for v in labels])
    return x, y


def _forward_arrays(x: np.ndarray, w: DualNetWeights, keep: bool = False):
    d = w.dim
    xr = np.real(x) * w.input_scale
    xi = np.imag(x) * w.input_scale
    if w.input_mode == "stacked":
        xr = xi = np.concatenate([xr, xi], axis=1)
    out_r, cache_r = _net_forward(xr, w.r_layers, w.arch, keep)
    out_i, cache_i = _net_forward(xi, w.i_layers, w.arch, keep)
    raw = (out_r + 1j * out_i) * w.output_scale
    return symmetrize(raw, d), (cache_r, cache_i)


def forward(examples, w: DualNetWeights) -> FreqVectorField:
    """Predicted initial velocities, batched over ``examples`` (a list or a single example)."""
    single = not isinstance(examples, (list, tuple))
    exs = [examples] if single else list(examples)
    spec = exs[0].spec
    if spec.dim != w.dim:
        raise ValueError(f"network is {w.dim}-D but examples are {spec.dim}-D")
    x, _ = stack_inputs(exs)
    v, _ = _forward_arrays(x, w)
    return FreqVectorField(spec, v[0] if single else v)


def complex_forward(x: np.ndarray, w: DualNetWeights) -> np.ndarray:
    """Reference forward pass in complex arithmetic; requires tied weights."""
    if not w.tie_weights or w.input_mode != "planes":
        raise ValueError("a single complex network exists only for tied twins fed one plane each")
    h = x * w.input_scale
    for spec, (k, b) in zip(w.arch, w.r_layers):
        h = complex_conv(h, k) + (1 + 1j) * b.reshape((1, -1) + (1,) * w.dim)
        if spec.activation:
            h = crelu(h)
    return symmetrize(h * w.output_scale, w.dim)


@dataclass
class TrainConfig:
    lam: float = 1e-4
    lr: float = 1e-4
    batch: int = 64
    epochs: int = 2000
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    widths: tuple = (16, 32, 32)
    kernel: int = 3
    tie_weights: bool = False
    normalize: bool = True
    input_mode: str = "planes"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError(f"optimizer must be 'sgd' or 'momentum', got {self.optimizer!r}")
        if self.input_mode not in INPUT_CHANNELS:
            raise ValueError(f"input_mode must be one of {sorted(INPUT_CHANNELS)}, got {self.input_mode!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(d["widths"])
        return d


def _loss_grad(x, y, w: DualNetWeights, lam: float, need_grad: bool = True):
    v, (cache_r, cache_i) = _forward_arrays(x, w, keep=need_grad)
    dr = np.real(v) - np.real(y)
    di = np.imag(v) - np.imag(y)
    with np.errstate(over="ignore", invalid="ignore"):  # train() reports non-finite losses
        data = float(np.sum(dr ** 2) + np.sum(di ** 2))
    loss = data + lam * w.kernel_norm2()
    if not need_grad:
        return loss, data, None
    # symmetrization is a self-adjoint projection, so it maps gradients as it maps values
    g = symmetrize(2.0 * (dr + 1j * di), w.dim) * w.output_scale
    g_r = _net_backward(np.real(g), w.r_layers, w.arch, cache_r)
    g_i = _net_backward(np.imag(g), w.i_layers, w.arch, cache_i)
    if w.tie_weights:
        nets = [[(a[0] + b[0], a[1] + b[1]) for a, b in zip(g_r, g_i)]]
    else:
        nets = [g_r, g_i]
    flat = []
    for gnet, net in zip(nets, w.nets()):
        for (g_k, g_b), (k, _) in zip(gnet, net):
            flat += [g_k + 2.0 * lam * k, g_b]
    return loss, data, flat


def loss(batch, w: DualNetWeights, cfg: TrainConfig) -> float:
    """Sum over examples of squared velocity error, real and imaginary planes apart, plus ``lam * |W|^2``."""
    if not batch:
        raise ValueError("empty batch")
    x, y = stack_inputs(batch)
    return _loss_grad(x, y, w, cfg.lam, need_grad=False)[0]


def backward(batch, w: DualNetWeights, cfg: TrainConfig) -> list:
    """Gradient of :func:`loss`, aligned with ``w.params()``."""
    if not batch:
        raise ValueError("empty batch")
    x, y = stack_inputs(batch)
    return _loss_grad(x, y, w, cfg.lam)[2]


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    wall_s: float = 0.0


def _scales(x: np.ndarray, y: np.ndarray) -> tuple:
    xs = np.concatenate([np.real(x).ravel(), np.imag(x).ravel()])
    ys = np.concatenate([np.real(y).ravel(), np.imag(y).ravel()])
    sx, sy = float(np.std(xs)), float(np.std(ys))
    return (1.0 / sx if sx > 0 else 1.0), (sy if sy > 0 else 1.0)


def train(train_set, cfg: TrainConfig, val_set=None, init: DualNetWeights | None = None):
    """Mini-batch SGD; returns ``(weights, history)`` with per-example mean losses per epoch."""
    if not train_set:
        raise ValueError("empty training set")
    t0 = time.perf_counter()
    x, y = stack_inputs(train_set)
    if y is None:
        raise ValueError("every training example needs a v_opt label")
    dim = train_set[0].spec.dim
    if init is None:
        in_s, out_s = _scales(x, y) if cfg.normalize else (1.0, 1.0)
        w = init_weights(default_arch(dim, cfg.widths, cfg.kernel, cfg.input_mode), dim, cfg.seed, cfg.tie_weights, in_s, out_s)
    else:
        w = init
    xv, yv = stack_inputs(val_set) if val_set else (None, None)
    rng = np.random.default_rng(cfg.seed)
    params = [a.copy() for a in w.params()]
    velocity = [np.zeros_like(a) for a in params]
    hist = TrainHistory()
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start: start + cfg.batch]
            _, data, grads = _loss_grad(x[idx], y[idx], w, cfg.lam)
            total += data
            for p, vel, g in zip(params, velocity, grads):
                if cfg.optimizer == "momentum":
                    vel *= cfg.momentum
                    vel -= cfg.lr * g
                    p += vel
                else:
                    p -= cfg.lr * g
            w = w.with_params(params)
        mean = total / n
        if not np.isfinite(mean):
            raise TrainingDiverged(epoch)
        hist.train_loss.append(mean)
        if xv is not None:
            hist.val_loss.append(_loss_grad(xv, yv, w, 0.0, need_grad=False)[1] / len(xv))
    hist.wall_s = time.perf_counter() - t0
    return w, hist


@dataclass
class Prediction:
    v_pre: FreqVectorField
    deformation: DeformationField
    ssd_before: float
    ssd_after: float
    min_detjac: float
    wall_s: float


def predict(S, T, w: DualNetWeights, cfg: RegConfig) -> Prediction:
    """Network forward pass followed by geodesic shooting of the predicted velocity."""
    from .data import example_from_images

    t0 = time.perf_counter()
    spec = cfg.spec
    S = np.asarray(S, float)
    T = np.asarray(T, float)
    v = forward(example_from_images(S, T, spec), w)
    path = shoot(v, cfg.operator(), cfg.steps)
    psi = to_deformation(path.displacement, spec.grid)
    after = float(ssd(warp(S, psi), T))
    min_dj = float(det_jacobian(psi).min())
    wall = time.perf_counter() - t0
    return Prediction(v, psi, float(ssd(S, T)), after, min_dj, wall)
