"""Dense networks with hand-written backprop and Adam, float64 throughout."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "softplus")


@dataclass
class MLPParams:
    """Weights are stored out x in. Hidden layers use ReLU."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "identity"

    def __post_init__(self):
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in the order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays, output_activation="identity") -> "MLPParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), output_activation)

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.output_activation)

    def __eq__(self, other):
        if not isinstance(other, MLPParams) or self.output_activation != other.output_activation:
            return False
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def init_mlp(sizes, rng: np.random.Generator, output_activation="identity") -> MLPParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MLPParams(weights, biases, output_activation)


@dataclass
class GradientBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_grad: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def mlp_forward(params: MLPParams, x):
    """Forward pass on a single vector or a batch of row vectors.

    Returns ``(output, cache)``; the cache feeds :func:`mlp_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.in_dim:
        raise ValueError(f"input dimension {h.shape[1]} != network input {params.in_dim}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite network input")
    inputs, pre = [], []
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        if i < n - 1:
            h = np.maximum(z, 0.0)
        elif params.output_activation == "softplus":
            h = softplus(z)
        else:
            h = z
    cache = (inputs, pre, single)
    return (h[0] if single else h), cache


def mlp_backward(params: MLPParams, cache, output_grad, need_input_grad=False) -> GradientBundle:
    """Vector-Jacobian product of the forward map, summed over the batch."""
    inputs, pre, single = cache
    g = np.asarray(output_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != pre[-1].shape:
        raise ValueError(f"output_grad shape {g.shape} != output shape {pre[-1].shape}")
    n = len(params.weights)
    if params.output_activation == "softplus":
        g = g * _sigmoid(pre[-1])
    dw, db = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        dw[i] = g.T @ inputs[i]
        db[i] = g.sum(axis=0)
        if i == 0 and not need_input_grad:
            break
        g = g @ params.weights[i]
        if i > 0:
            g = g * (pre[i - 1] > 0)
    input_grad = None
    if need_input_grad:
        input_grad = g[0] if single else g
    return GradientBundle(dw, db, input_grad)


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def for_arrays(cls, arrays, **hyper) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)

    @classmethod
    def for_params(cls, params: MLPParams, **hyper) -> "AdamState":
        return cls.for_arrays(params.arrays(), **hyper)

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v],
                         self.t, self.lr, self.beta1, self.beta2, self.eps_hat)


def adam_update_arrays(arrays, grads, opt: AdamState):
    """Bias-corrected Adam on a flat list of arrays; returns new arrays and state."""
    if len(arrays) != len(grads) or len(arrays) != len(opt.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    t = opt.t + 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, grads, opt.m, opt.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_arrays.append(p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps_hat))
        new_m.append(m)
        new_v.append(v)
    return new_arrays, AdamState(new_m, new_v, t, opt.lr, opt.beta1, opt.beta2, opt.eps_hat)


def adam_step(params: MLPParams, grads: GradientBundle, opt: AdamState):
    arrays, opt = adam_update_arrays(params.arrays(), grads.arrays(), opt)
    return MLPParams.from_arrays(arrays, params.output_activation), opt
