"""Binarization-aware layers and model assembly.

A binarized GEMM layer keeps continuous weights w* and computes its
effective weight through a custom-gradient node:

    w = s * F(w*)          backward multiplier  s * B(w*)

with ``s = mean |w*|`` (treated as a constant) when scaling is on.  The
training rule changes what the node computes:

* ``pcpp``: F and B from the quantizer pair (PC, BC, BNN, ... are pairs);
* ``pq``:   w = s P(w*), multiplier s;
* ``rpc``:  w = w* (the loss sees the continuous weights).

Task modes: BW binarizes GEMM weights, BWA additionally quantizes the
activation feeding every binarized GEMM, BWAA also wraps each binarized
layer's accumulator to 8 bits.  The first and last GEMM stay full
precision unless ``keep_fp_ends=False``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import CustomGradSpec, Tensor, apply_custom
from .errors import ConfigError
from .quantizers import QuantizerPair, bc_pair, fp_pair, sign_q

TASK_MODES = ("BW", "BWA", "BWAA")
LAYER_KINDS = ("linear", "conv2d", "relu", "pool", "flatten", "norm")


# ---------------------------------------------------------------- functional pieces

def weight_scale(w_star: np.ndarray) -> float:
    return float(np.mean(np.abs(w_star))) if w_star.size else 0.0


def quantized_weight(w_star: Tensor, pair: QuantizerPair, scale: bool = True) -> Tensor:
    s = weight_scale(w_star.data) if scale else 1.0
    spec = CustomGradSpec(lambda v: s * pair.F(v), lambda v: s * pair.B(v))
    return apply_custom(w_star, spec)


def bin_linear_forward(x, w_star, pair: QuantizerPair, scale: bool = True, bias=None) -> Tensor:
    """x @ (s F(w*))^T (+ bias); gradient to w* is multiplied by s B(w*)."""
    x, w_star = ad._as_tensor(x), ad._as_tensor(w_star)
    w = quantized_weight(w_star, pair, scale)
    out = ad.matmul(x, _transpose(w))
    return out + bias if bias is not None else out


def bin_activation(x, pair: QuantizerPair) -> Tensor:
    """F(x) forward, B(x) gradient multiplier."""
    return apply_custom(x, CustomGradSpec(pair.F, pair.B))


def accumulator_wrap(acc, bits: int = 8):
    """Cyclic wrap ((v + 2^(bits-1)) mod 2^bits) - 2^(bits-1); returns (values, overflow rate)."""
    if bits != 8:
        raise ConfigError(f"only 8-bit accumulators are supported, got {bits}")
    acc = np.asarray(acc, dtype=np.float64)
    wrapped, overflow = kernels.wrap_accumulator(acc, bits)
    return wrapped, (overflow / acc.size if acc.size else 0.0)


def _transpose(w: Tensor) -> Tensor:
    def backward(g):
        return (g.T,)
    return ad._record(np.ascontiguousarray(w.data.T), (w,), backward, "transpose")


# ---------------------------------------------------------------- quantization context

@dataclass
class QuantContext:
    """What the binarized layers compute for the current step."""
    pair: QuantizerPair = field(default_factory=fp_pair)
    act_pair: QuantizerPair = field(default_factory=bc_pair)
    rule: str = "pcpp"              # pcpp | pq | rpc
    prox: object = None             # P for pq / rpc
    scale: bool = True
    export: bool = False            # use s * sign(F(w*)) and hard activations

    def weight(self, w_star: Tensor) -> Tensor:
        if self.export:
            return Tensor(self.export_weight(w_star.data))
        if self.rule == "rpc":
            return w_star
        if self.rule == "pq":
            s = weight_scale(w_star.data) if self.scale else 1.0
            prox = self.prox
            return apply_custom(w_star, CustomGradSpec(lambda v: s * prox(v), lambda v: np.full_like(v, s)))
        return quantized_weight(w_star, self.pair, self.scale)

    def export_weight(self, w_star: np.ndarray) -> np.ndarray:
        # f32-representable scale so the packed file reproduces the weights exactly
        s = float(np.float32(weight_scale(w_star))) if self.scale else 1.0
        return s * sign_q(self.soft_weight(w_star))

    def soft_weight(self, w_star: np.ndarray) -> np.ndarray:
        """F(w*) (or P(w*)) without the scale."""
        if self.rule in ("pq", "rpc"):
            return np.asarray(self.prox(w_star), dtype=np.float64)
        return self.pair.F(w_star)

    def activation(self, x: Tensor) -> Tensor:
        if self.export:
            return Tensor(sign_q(self.act_pair.F(x.data)))
        return bin_activation(x, self.act_pair)


# ---------------------------------------------------------------- layers

@dataclass
class LayerSpec:
    kind: str
    dims: tuple = ()
    binarize_weights: bool | None = None       # None: decided by the task mode
    binarize_activations: bool | None = None
    accumulator_bits: int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.accumulator_bits not in (None, 8):
            raise ConfigError(f"only 8-bit accumulators are supported, got {self.accumulator_bits}")
        if self.kind not in ("linear", "conv2d") and (self.binarize_weights or self.accumulator_bits):
            raise ConfigError(f"{self.kind} layers carry no weights to binarize")


class Layer:
    name = ""

    def parameters(self):
        return []

    def forward(self, x: Tensor, training: bool, q: QuantContext) -> Tensor:
        raise NotImplementedError


class _Gemm(Layer):
    def __init__(self, name, weight, bias, binarize, act_quant, acc_bits):
        self.name = name
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.binarize = binarize
        self.act_quant = act_quant
        self.acc_bits = acc_bits
        self.overflow_rate = 0.0

    def parameters(self):
        return [(f"{self.name}.weight", self.weight, "binary" if self.binarize else "fp"),
                (f"{self.name}.bias", self.bias, "fp")]

    def effective_weight(self, q: QuantContext) -> Tensor:
        return q.weight(self.weight) if self.binarize else self.weight

    def _wrap(self, y: Tensor, q: QuantContext) -> Tensor:
        if not self.acc_bits:
            return y
        s = weight_scale(self.weight.data) if q.scale else 1.0
        if q.export:
            s = float(np.float32(s))
        if s == 0.0:
            return y
        bits = self.acc_bits
        rates = []

        def fwd(v):
            wrapped, rate = accumulator_wrap(v / s, bits)
            rates.append(rate)
            return s * wrapped

        out = apply_custom(y, CustomGradSpec(fwd, np.ones_like))
        self.overflow_rate = rates[0]
        return out

    def forward(self, x, training, q):
        if self.act_quant:
            x = q.activation(x)
        y = self._wrap(self._gemm(x, self.effective_weight(q)), q)
        return y + self._bias_view()


class Linear(_Gemm):
    def __init__(self, name, n_in, n_out, rng, binarize=False, act_quant=False, acc_bits=None):
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        super().__init__(name, w, np.zeros(n_out), binarize, act_quant, acc_bits)

    def _gemm(self, x, w):
        return ad.matmul(x, _transpose(w))

    def _bias_view(self):
        return self.bias


class Conv2d(_Gemm):
    def __init__(self, name, c_in, c_out, k, rng, stride=1, padding=0,
                 binarize=False, act_quant=False, acc_bits=None):
        fan_in = c_in * k * k
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
        super().__init__(name, w, np.zeros(c_out), binarize, act_quant, acc_bits)
        self.stride, self.padding = stride, padding

    def _gemm(self, x, w):
        return ad.conv2d(x, w, self.stride, self.padding)

    def _bias_view(self):
        return ad.reshape(self.bias, (1, -1, 1, 1))


class BatchNorm(Layer):
    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        self.name = name
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma, "fp"), (f"{self.name}.beta", self.beta, "fp")]

    def forward(self, x, training, q):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training, self.momentum, self.eps)


class ReLU(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, x, training, q):
        return ad.relu(x)


class ActQuant(Layer):
    """Activation quantization point (takes the place of a ReLU)."""

    def __init__(self, name):
        self.name = name

    def forward(self, x, training, q):
        return q.activation(x)


class MaxPool(Layer):
    def __init__(self, name, k=2):
        self.name, self.k = name, k

    def forward(self, x, training, q):
        return ad.maxpool2d(x, self.k)


class Flatten(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, x, training, q):
        return ad.reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- model

class Model:
    def __init__(self, layers: list[Layer], task_mode: str = "BW"):
        self.layers = layers
        self.task_mode = task_mode
        self.quant = QuantContext()

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def gemm_layers(self) -> list[_Gemm]:
        return [l for l in self.layers if isinstance(l, _Gemm)]

    def binary_layers(self) -> list[_Gemm]:
        return [l for l in self.gemm_layers() if l.binarize]

    def forward(self, x, training: bool = False, quant: QuantContext | None = None) -> Tensor:
        q = quant or self.quant
        out = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            out = layer.forward(out, training, q)
        return out

    def predict(self, x, quant: QuantContext | None = None, batch: int = 1000) -> np.ndarray:
        preds = []
        with ad.no_grad():
            for i in range(0, len(x), batch):
                preds.append(np.argmax(self.forward(x[i:i + batch], False, quant).data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def overflow_rates(self) -> dict[str, float]:
        return {l.name: l.overflow_rate for l in self.gemm_layers() if l.acc_bits}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All parameters plus batch-norm running statistics, by name."""
        out = {name: t.data for name, t, _ in self.parameters()}
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                out[f"{layer.name}.running_mean"] = layer.running_mean
                out[f"{layer.name}.running_var"] = layer.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        own = self.state_arrays()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise ConfigError(f"checkpoint lacks {missing}")
        for name, t, _ in self.parameters():
            if arrays[name].shape != t.data.shape:
                raise ConfigError(f"checkpoint shape {arrays[name].shape} != {t.data.shape} for {name}")
            t.data = np.array(arrays[name], dtype=np.float64)
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                layer.running_mean[...] = arrays[f"{layer.name}.running_mean"]
                layer.running_var[...] = arrays[f"{layer.name}.running_var"]


def build_model(specs: list[LayerSpec], task_mode: str = "BW", seed: int = 0,
                keep_fp_ends: bool = True) -> Model:
    """Instantiate layers and install quantization points for the task mode."""
    if task_mode not in TASK_MODES:
        raise ConfigError(f"task mode must be one of {TASK_MODES}, got {task_mode!r}")
    specs = list(specs)
    rng = np.random.default_rng(seed)
    gemm_idx = [i for i, s in enumerate(specs) if s.kind in ("linear", "conv2d")]
    if not gemm_idx:
        raise ConfigError("model has no linear or conv2d layer")
    ends = {gemm_idx[0], gemm_idx[-1]} if keep_fp_ends else set()

    bin_w, bin_a, acc = {}, {}, {}
    for i in gemm_idx:
        s = specs[i]
        bw = s.binarize_weights if s.binarize_weights is not None else i not in ends
        ba = s.binarize_activations if s.binarize_activations is not None else (bw and task_mode != "BW")
        bits = s.accumulator_bits if s.accumulator_bits is not None else (8 if bw and task_mode == "BWAA" else None)
        if bits and not ba:
            raise ConfigError(f"layer {i}: 8-bit accumulators need binarized activations (BWAA requires BWA)")
        if ba and not bw:
            raise ConfigError(f"layer {i}: activation binarization without binarized weights")
        bin_w[i], bin_a[i], acc[i] = bw, ba, bits

    # an activation quantizer replaces the ReLU feeding a binarized GEMM
    replaced, inline = set(), set()
    for i in gemm_idx:
        if not bin_a[i]:
            continue
        j = i - 1
        while j >= 0 and specs[j].kind in ("pool", "flatten"):
            j -= 1
        if j >= 0 and specs[j].kind == "relu":
            replaced.add(j)
        else:
            inline.add(i)

    layers: list[Layer] = []
    counts: dict[str, int] = {}
    for i, s in enumerate(specs):
        base = {"linear": "fc", "conv2d": "conv", "norm": "bn", "relu": "relu", "pool": "pool",
                "flatten": "flatten"}[s.kind]
        counts[base] = counts.get(base, 0) + 1
        name = s.name or f"{base}{counts[base]}"
        if s.kind == "linear":
            n_in, n_out = s.dims
            layers.append(Linear(name, n_in, n_out, rng, bin_w[i], i in inline, acc[i]))
        elif s.kind == "conv2d":
            c_in, c_out, k = s.dims[:3]
            stride = s.dims[3] if len(s.dims) > 3 else 1
            pad = s.dims[4] if len(s.dims) > 4 else 0
            layers.append(Conv2d(name, c_in, c_out, k, rng, stride, pad, bin_w[i], i in inline, acc[i]))
        elif s.kind == "norm":
            layers.append(BatchNorm(name, s.dims[0]))
        elif s.kind == "relu":
            layers.append(ActQuant(f"aq{i}") if i in replaced else ReLU(name))
        elif s.kind == "pool":
            layers.append(MaxPool(name, s.dims[0] if s.dims else 2))
        else:
            layers.append(Flatten(name))
    return Model(layers, task_mode)


def cnn_spec(in_ch: int = 1, size: int = 28, classes: int = 10,
             widths: tuple = (8, 16), hidden: int = 64) -> list[LayerSpec]:
    """conv-bn-relu-pool x2, then a hidden fully connected layer and the classifier."""
    c1, c2 = widths
    flat = c2 * (size // 4) * (size // 4)
    specs = [
        LayerSpec("conv2d", (in_ch, c1, 3, 1, 1)), LayerSpec("norm", (c1,)), LayerSpec("relu"),
        LayerSpec("pool", (2,)),
        LayerSpec("conv2d", (c1, c2, 3, 1, 1)), LayerSpec("norm", (c2,)), LayerSpec("relu"),
        LayerSpec("pool", (2,)), LayerSpec("flatten"),
    ]
    if hidden:
        specs += [LayerSpec("linear", (flat, hidden)), LayerSpec("norm", (hidden,)), LayerSpec("relu"),
                  LayerSpec("linear", (hidden, classes))]
    else:
        specs.append(LayerSpec("linear", (flat, classes)))
    return specs


def mlp_spec(dims: tuple, norm: bool = True) -> list[LayerSpec]:
    """Fully connected net with dims (in, hidden..., out); input is flattened first."""
    if len(dims) < 2:
        raise ConfigError("mlp needs at least input and output sizes")
    specs = [LayerSpec("flatten")]
    for a, b in zip(dims[:-2], dims[1:-1]):
        specs.append(LayerSpec("linear", (a, b)))
        if norm:
            specs.append(LayerSpec("norm", (b,)))
        specs.append(LayerSpec("relu"))
    specs.append(LayerSpec("linear", (dims[-2], dims[-1])))
    return specs
