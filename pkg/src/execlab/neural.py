"""Small dense leaky-ReLU network with hand-written backprop and ADAM.

All parameters live in one flat float64 buffer; the per-layer weight and bias
arrays are views into it, which keeps ADAM updates and target-network copies to
a handful of vector operations.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EXQNET01"
_HEADER = struct.Struct("<8sIIIId")


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 3
    hidden_layers: int = 5
    hidden_width: int = 30
    leaky_slope: float = 0.01
    output_dim: int = 1

    def __post_init__(self):
        for name in ("input_dim", "hidden_layers", "hidden_width", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))


class QNetwork:
    def __init__(self, config: NetConfig, params: np.ndarray | None = None):
        self.config = config
        self.params = np.zeros(config.n_params) if params is None else np.array(params, dtype=float)
        if self.params.shape != (config.n_params,):
            raise ValueError(f"expected {config.n_params} parameters, got {self.params.shape}")
        self.weights, self.biases = _views(self.params, config)

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)

    def clone(self) -> "QNetwork":
        return QNetwork(self.config, self.params.copy())


def _views(flat: np.ndarray, config: NetConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    d = config.dims
    weights, biases, off = [], [], 0
    for i in range(len(d) - 1):
        n = d[i] * d[i + 1]
        weights.append(flat[off:off + n].reshape(d[i], d[i + 1]))
        off += n
        biases.append(flat[off:off + d[i + 1]])
        off += d[i + 1]
    return weights, biases


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: QNetwork, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros_like(net.params), np.zeros_like(net.params), lr=lr, **kw)


def init_network(config: NetConfig, rng: np.random.Generator) -> QNetwork:
    """Glorot-uniform weights, zero biases."""
    net = QNetwork(config)
    for W in net.weights:
        limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return net


def leaky_relu(z: np.ndarray, slope: float) -> np.ndarray:
    # valid for 0 < slope < 1
    return np.maximum(z, slope * z)


def _forward_cache(net: QNetwork, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    slope = net.config.leaky_slope
    acts, pre = [x], []
    h = x
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        if i < last:
            pre.append(z)
            h = np.maximum(z, slope * z)
            acts.append(h)
        else:
            h = z
    return h, acts, pre


def forward(net: QNetwork, features) -> np.ndarray | float:
    """Evaluate the network on one feature vector (returns a float) or a batch (returns shape (b,))."""
    x = np.asarray(features, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != net.config.input_dim:
        raise ValueError(f"expected {net.config.input_dim} features, got {x.shape[1]}")
    out, _, _ = _forward_cache(net, x)
    if net.config.output_dim == 1:
        out = out[:, 0]
        return float(out[0]) if single else out
    return out[0] if single else out


def mse_and_grad(net: QNetwork, inputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its exact gradient with respect to the flat parameters."""
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float).reshape(len(x), -1)
    out, acts, pre = _forward_cache(net, x)
    diff = out - y
    b = len(x)
    loss = float(np.sum(diff**2) / b)

    grad = np.empty_like(net.params)
    gW, gb = _views(grad, net.config)
    slope = net.config.leaky_slope
    delta = 2.0 * diff / b
    for i in range(len(net.weights) - 1, -1, -1):
        gW[i][...] = acts[i].T @ delta
        gb[i][...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * np.where(pre[i - 1] > 0, 1.0, slope)
    return loss, grad


def adam_update(net: QNetwork, adam: AdamState, grad: np.ndarray) -> None:
    adam.step += 1
    adam.m *= adam.beta1
    adam.m += (1 - adam.beta1) * grad
    adam.v *= adam.beta2
    adam.v += (1 - adam.beta2) * grad * grad
    mhat = adam.m / (1 - adam.beta1**adam.step)
    vhat = adam.v / (1 - adam.beta2**adam.step)
    net.params -= adam.lr * mhat / (np.sqrt(vhat) + adam.eps)


def train_batch(net: QNetwork, adam: AdamState, inputs, targets) -> float:
    """One ADAM step on the batch MSE; returns the loss before the step."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError("inputs must be a non-empty 2-d batch")
    loss, grad = mse_and_grad(net, x, targets)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise FloatingPointError(f"non-finite loss or gradient (loss={loss})")
    adam_update(net, adam, grad)
    return loss


def copy_weights(src: QNetwork, dst: QNetwork) -> None:
    if src.config != dst.config:
        raise ValueError(f"config mismatch: {src.config} vs {dst.config}")
    dst.params[...] = src.params


# --- checkpoints -----------------------------------------------------------
#
# Layout (little-endian):
#   8s   magic "EXQNET01"
#   u32  input_dim, hidden_layers, hidden_width, output_dim
#   f64  leaky_slope
#   f64[n_params]  per layer: weights (fan_in x fan_out, row-major) then biases


def network_to_bytes(net: QNetwork) -> bytes:
    c = net.config
    head = _HEADER.pack(MAGIC, c.input_dim, c.hidden_layers, c.hidden_width, c.output_dim, c.leaky_slope)
    return head + net.params.astype("<f8").tobytes()


def network_from_bytes(blob: bytes) -> tuple[QNetwork, int]:
    """Parse a network from the start of ``blob``; also return the number of bytes consumed."""
    magic, i, h, w, o, slope = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValueError(f"bad network magic {magic!r}")
    config = NetConfig(i, h, w, slope, o)
    start = _HEADER.size
    end = start + 8 * config.n_params
    if len(blob) < end:
        raise ValueError("truncated network checkpoint")
    params = np.frombuffer(blob[start:end], dtype="<f8").astype(float)
    return QNetwork(config, params), end


def save_network(net: QNetwork, path) -> None:
    path = Path(path)
    path.write_bytes(network_to_bytes(net))
    sidecar = {"format": MAGIC.decode(), "n_params": net.config.n_params, **asdict(net.config)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_network(path) -> QNetwork:
    net, _ = network_from_bytes(Path(path).read_bytes())
    return net
