"""Numpy neural-network core for the dueling Q-network.

Two trunk families share one input layout (see
``trading_env.observation_flat``):

* ``ffdqn``: the whole flat vector goes through dense + ReLU layers.
* ``cnn``: the first ``channels * window`` entries are reshaped to
  ``(channels, window)`` and run through valid 1-D convolutions; the
  flattened feature map is concatenated with the trailing two scalars
  (position flag, unrealized P&L) before the dense layers.

Both trunks end in a feature vector feeding a value head (width 1) and an
advantage head (width 3), combined by :func:`dueling_aggregate`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ArchitectureMismatch,
    CheckpointMismatch,
    KernelTooLarge,
    ShapeMismatch,
    StaleCache,
)

N_ACTIONS = 3
CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------- primitives


def dueling_aggregate(v: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Q = V + (A - mean_a A), row by row."""
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or v.shape not in ((a.shape[0], 1), (a.shape[0],)):
        raise ShapeMismatch(f"value {v.shape} incompatible with advantage {a.shape}")
    return v.reshape(-1, 1) + (a - a.mean(axis=1, keepdims=True))


def conv_out_len(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (B, C, N) -> (B, L, C*k)
    b, c, _ = x.shape
    win = sliding_window_view(x, k, axis=2)[:, :, ::stride, :]
    return win.transpose(0, 2, 1, 3).reshape(b, win.shape[2], c * k)


def conv1d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid (unpadded) cross-correlation plus bias.

    ``x`` is ``(channels, N)`` or batched ``(B, channels, N)``; kernels are
    ``(out_ch, in_ch, k)``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or kernels.ndim != 3 or x.shape[1] != kernels.shape[1]:
        raise ShapeMismatch(f"input {x.shape} incompatible with kernels {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeMismatch(f"bias {bias.shape} does not match {kernels.shape[0]} output channels")
    if stride < 1:
        raise ShapeMismatch("stride must be positive")
    o, c, k = kernels.shape
    if x.shape[2] < k:
        raise KernelTooLarge(f"kernel {k} longer than input {x.shape[2]}")
    cols = _im2col(x, k, stride)
    y = (cols @ kernels.reshape(o, c * k).T + bias).transpose(0, 2, 1)
    return y[0] if single else y


# -------------------------------------------------------------------- layers


class Dense:
    kind = "dense"

    def __init__(self, name: str, n_in: int, n_out: int):
        self.name, self.n_in, self.n_out = name, n_in, n_out

    def param_shapes(self):
        return {f"{self.name}.W": (self.n_in, self.n_out), f"{self.name}.b": (self.n_out,)}

    def init(self, rng: np.random.Generator):
        limit = math.sqrt(6.0 / (self.n_in + self.n_out))
        return {
            f"{self.name}.W": rng.uniform(-limit, limit, size=(self.n_in, self.n_out)),
            f"{self.name}.b": np.zeros(self.n_out),
        }

    def forward(self, x, p):
        return x @ p[f"{self.name}.W"] + p[f"{self.name}.b"], x

    def backward(self, dy, x, p, grads):
        grads[f"{self.name}.W"] = x.T @ dy
        grads[f"{self.name}.b"] = dy.sum(axis=0)
        return dy @ p[f"{self.name}.W"].T

    def spec(self):
        return {"type": "dense", "name": self.name, "in": self.n_in, "out": self.n_out}


class ReLU:
    kind = "relu"

    def param_shapes(self):
        return {}

    def init(self, rng):
        return {}

    def forward(self, x, p):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask, p, grads):
        return dy * mask

    def spec(self):
        return {"type": "activation", "name": "relu"}


class Conv1d:
    kind = "conv1d"

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        self.name, self.in_ch, self.out_ch, self.kernel, self.stride = name, in_ch, out_ch, kernel, stride

    def param_shapes(self):
        return {f"{self.name}.W": (self.out_ch, self.in_ch, self.kernel), f"{self.name}.b": (self.out_ch,)}

    def init(self, rng):
        fan_in, fan_out = self.in_ch * self.kernel, self.out_ch * self.kernel
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return {
            f"{self.name}.W": rng.uniform(-limit, limit, size=(self.out_ch, self.in_ch, self.kernel)),
            f"{self.name}.b": np.zeros(self.out_ch),
        }

    def forward(self, x, p):
        w = p[f"{self.name}.W"]
        cols = _im2col(x, self.kernel, self.stride)
        y = (cols @ w.reshape(self.out_ch, -1).T + p[f"{self.name}.b"]).transpose(0, 2, 1)
        return y, (cols, x.shape)

    def backward(self, dy, cache, p, grads):
        cols, x_shape = cache
        b, length = dy.shape[0], dy.shape[2]
        w = p[f"{self.name}.W"]
        dcol = dy.transpose(0, 2, 1).reshape(b * length, self.out_ch)
        grads[f"{self.name}.W"] = (dcol.T @ cols.reshape(b * length, -1)).reshape(w.shape)
        grads[f"{self.name}.b"] = dy.sum(axis=(0, 2))
        dcols = (dcol @ w.reshape(self.out_ch, -1)).reshape(b, length, self.in_ch, self.kernel)
        dx = np.zeros(x_shape)
        s = self.stride
        for j in range(self.kernel):
            dx[:, :, j : j + s * (length - 1) + 1 : s] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dx

    def spec(self):
        return {
            "type": "conv1d",
            "name": self.name,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "kernel": self.kernel,
            "stride": self.stride,
        }


# ----------------------------------------------------------------- the net


@dataclass(frozen=True)
class NetSpec:
    """Architecture hyperparameters.

    ``hidden`` lists the dense trunk widths; for ``cnn`` they follow the
    flattened convolution features.  The conv tuples are ignored by ffdqn.
    """

    arch: str = "ffdqn"
    hidden: tuple[int, ...] = (128, 128)
    conv_channels: tuple[int, ...] = (32, 32)
    conv_kernels: tuple[int, ...] = (5, 5)
    conv_strides: tuple[int, ...] = (1, 1)

    @classmethod
    def default(cls, arch: str) -> "NetSpec":
        if arch == "cnn":
            return cls(arch="cnn", hidden=(128,))
        return cls(arch="ffdqn")


@dataclass
class ForwardCache:
    net_id: int
    version: int
    conv: list = field(default_factory=list)
    dense: list = field(default_factory=list)
    feat: np.ndarray | None = None
    image_shape: tuple | None = None
    flat_len: int = 0


class DuelingNet:
    """Dueling Q-network; parameters live in the ordered dict ``params``."""

    def __init__(self, arch_tag: str, input_size: int, n_channels: int, window_n: int,
                 conv_layers: list, dense_layers: list, feature_width: int):
        if arch_tag not in ("ffdqn", "cnn"):
            raise ArchitectureMismatch(f"unknown arch_tag {arch_tag!r}")
        self.arch_tag = arch_tag
        self.input_size = input_size
        self.n_channels = n_channels
        self.window_n = window_n
        self.conv_layers = conv_layers
        self.dense_layers = dense_layers
        self.value_head = Dense("value", feature_width, 1)
        self.advantage_head = Dense("advantage", feature_width, N_ACTIONS)
        self.params: dict[str, np.ndarray] = {}
        for layer in self._all_layers():
            for key, shape in layer.param_shapes().items():
                self.params[key] = np.zeros(shape)
        self._version = 0

    def _all_layers(self):
        return [*self.conv_layers, *self.dense_layers, self.value_head, self.advantage_head]

    # -- construction ---------------------------------------------------

    @classmethod
    def build(cls, spec: NetSpec, n_channels: int, window_n: int, rng: np.random.Generator | None = None) -> "DuelingNet":
        input_size = n_channels * window_n + 2
        conv_layers: list = []
        dense_layers: list = []
        width = input_size
        if spec.arch == "cnn":
            length, ch = window_n, n_channels
            convs = zip(spec.conv_channels, spec.conv_kernels, spec.conv_strides)
            for i, (out_ch, k, s) in enumerate(convs):
                if length < k:
                    raise KernelTooLarge(f"conv{i}: kernel {k} longer than feature length {length}")
                conv_layers += [Conv1d(f"conv{i}", ch, out_ch, k, s), ReLU()]
                length, ch = conv_out_len(length, k, s), out_ch
            width = ch * length + 2
        elif spec.arch != "ffdqn":
            raise ArchitectureMismatch(f"unknown arch {spec.arch!r}")
        for i, h in enumerate(spec.hidden):
            dense_layers += [Dense(f"fc{i}", width, h), ReLU()]
            width = h
        net = cls(spec.arch, input_size, n_channels, window_n, conv_layers, dense_layers, width)
        if rng is not None:
            net.init_params(rng)
        return net

    def init_params(self, rng: np.random.Generator) -> None:
        for layer in self._all_layers():
            self.params.update(layer.init(rng))
        self._version += 1

    def layer_specs(self) -> list[dict]:
        specs = [{"type": "input", "size": self.input_size, "channels": self.n_channels, "window": self.window_n}]
        specs += [layer.spec() for layer in self.conv_layers]
        if self.arch_tag == "cnn":
            specs += [{"type": "flatten"}, {"type": "concat_extras", "width": 2}]
        specs += [layer.spec() for layer in self.dense_layers]
        specs += [{**self.value_head.spec(), "role": "value_head"},
                  {**self.advantage_head.spec(), "role": "advantage_head"}]
        return specs

    @classmethod
    def from_layer_specs(cls, arch_tag: str, specs: list[dict]) -> "DuelingNet":
        inp = specs[0]
        if inp.get("type") != "input":
            raise CheckpointMismatch("first layer spec must be the input")
        conv_layers, dense_layers = [], []
        heads = {}
        seen_flatten = False
        for s in specs[1:]:
            t = s["type"]
            target = dense_layers if (arch_tag == "ffdqn" or seen_flatten) else conv_layers
            if t == "conv1d":
                conv_layers.append(Conv1d(s["name"], s["in_ch"], s["out_ch"], s["kernel"], s["stride"]))
            elif t == "activation":
                if s["name"] != "relu":
                    raise CheckpointMismatch(f"unsupported activation {s['name']!r}")
                target.append(ReLU())
            elif t == "flatten":
                seen_flatten = True
            elif t == "concat_extras":
                pass
            elif t == "dense" and "role" in s:
                heads[s["role"]] = s
            elif t == "dense":
                dense_layers.append(Dense(s["name"], s["in"], s["out"]))
            else:
                raise CheckpointMismatch(f"unknown layer type {t!r}")
        width = heads["value_head"]["in"]
        return cls(arch_tag, inp["size"], inp["channels"], inp["window"], conv_layers, dense_layers, width)

    def copy(self) -> "DuelingNet":
        other = DuelingNet.from_layer_specs(self.arch_tag, self.layer_specs())
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def same_architecture(self, other: "DuelingNet") -> bool:
        return self.arch_tag == other.arch_tag and self.layer_specs() == other.layer_specs()

    def mark_updated(self) -> None:
        self._version += 1

    # -- passes ---------------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ShapeMismatch(f"expected (batch, {self.input_size}) input, got {x.shape}")
        p = self.params
        cache = ForwardCache(id(self), self._version)
        h = x
        if self.arch_tag == "cnn":
            b = x.shape[0]
            h = x[:, :-2].reshape(b, self.n_channels, self.window_n)
            for layer in self.conv_layers:
                h, c = layer.forward(h, p)
                cache.conv.append(c)
            cache.image_shape = h.shape
            h = np.concatenate([h.reshape(b, -1), x[:, -2:]], axis=1)
            cache.flat_len = h.shape[1] - 2
        for layer in self.dense_layers:
            h, c = layer.forward(h, p)
            cache.dense.append(c)
        cache.feat = h
        v = h @ p["value.W"] + p["value.b"]
        a = h @ p["advantage.W"] + p["advantage.b"]
        return dueling_aggregate(v, a), cache

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def heads(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Raw value and advantage head outputs."""
        _, cache = self.forward(x)
        p = self.params
        return cache.feat @ p["value.W"] + p["value.b"], cache.feat @ p["advantage.W"] + p["advantage.b"]

    def backward(self, cache: ForwardCache, dq: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of ``sum(q * dq)`` with respect to every parameter."""
        if cache.net_id != id(self) or cache.version != self._version:
            raise StaleCache("cache does not belong to the current parameters")
        dq = np.asarray(dq, dtype=np.float64)
        if dq.shape != (cache.feat.shape[0], N_ACTIONS):
            raise ShapeMismatch(f"dq shape {dq.shape} does not match batch")
        p = self.params
        grads: dict[str, np.ndarray] = {}
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        dh = self.value_head.backward(dv, cache.feat, p, grads)
        dh = dh + self.advantage_head.backward(da, cache.feat, p, grads)
        for layer, c in zip(reversed(self.dense_layers), reversed(cache.dense)):
            dh = layer.backward(dh, c, p, grads)
        if self.arch_tag == "cnn":
            dh = dh[:, : cache.flat_len].reshape(cache.image_shape)
            for layer, c in zip(reversed(self.conv_layers), reversed(cache.conv)):
                dh = layer.backward(dh, c, p, grads)
        return {k: grads[k] for k in self.params}


# ---------------------------------------------------------------- updates


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{k}: grad {g.shape} vs param {p.shape}")
        out[k] = p - lr * g
    return out


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, net: DuelingNet, grads: dict[str, np.ndarray]) -> None:
        net.params = sgd_update(net.params, grads, self.lr)
        net.mark_updated()


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, net: DuelingNet, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, p in net.params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{k}: grad {g.shape} vs param {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        net.mark_updated()


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def sync_target(online: DuelingNet, target: DuelingNet) -> DuelingNet:
    """Hard copy of the online parameters into ``target``."""
    if not online.same_architecture(target):
        raise ArchitectureMismatch(f"cannot sync {online.arch_tag} into {target.arch_tag}")
    target.params = {k: v.copy() for k, v in online.params.items()}
    target.mark_updated()
    return target


# --------------------------------------------------------------- gradcheck


def half_sum_squares(q: np.ndarray) -> tuple[float, np.ndarray]:
    return 0.5 * float(np.sum(q * q)), q


def gradcheck(
    net: DuelingNet,
    x: np.ndarray,
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]] = half_sum_squares,
    h: float = 1e-5,
    grad_hook: Callable[[dict], None] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss`` maps q to ``(value, dL/dq)``.  ``grad_hook`` may mutate the
    analytic gradients before comparison (used for fault injection).
    """
    net = net.copy()
    q, cache = net.forward(x)
    analytic = net.backward(cache, loss(q)[1])
    if grad_hook is not None:
        grad_hook(analytic)
    worst = 0.0
    for key, p in net.params.items():
        flat = p.reshape(-1)
        g = analytic[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss(net.predict(x))[0]
            flat[i] = orig - h
            lm = loss(net.predict(x))[0]
            flat[i] = orig
            cd = (lp - lm) / (2.0 * h)
            denom = max(abs(g[i]), abs(cd), 1e-8)
            worst = max(worst, abs(g[i] - cd) / denom)
    return worst


# -------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    net: DuelingNet
    rng_seed: int | None = None
    training_step: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "arch_tag": self.net.arch_tag,
            "layer_specs": self.net.layer_specs(),
            "parameters": {k: v.tolist() for k, v in self.net.params.items()},
            "rng_seed": self.rng_seed,
            "training_step": self.training_step,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Checkpoint":
        if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointMismatch(f"unsupported checkpoint format {doc.get('format_version')!r}")
        net = DuelingNet.from_layer_specs(doc["arch_tag"], doc["layer_specs"])
        params = doc["parameters"]
        if set(params) != set(net.params):
            raise CheckpointMismatch("parameter names do not match layer_specs")
        for k, ref in net.params.items():
            arr = np.asarray(params[k], dtype=np.float64)
            if arr.shape != ref.shape:
                raise CheckpointMismatch(f"{k}: shape {arr.shape}, layer_specs say {ref.shape}")
            net.params[k] = arr
        net.mark_updated()
        return cls(net, doc.get("rng_seed"), int(doc.get("training_step", 0)), doc.get("meta", {}))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict()))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))


GRADCHECK_SPECS = {
    "ffdqn": NetSpec("ffdqn", hidden=(16, 16)),
    "cnn": NetSpec("cnn", hidden=(16,), conv_channels=(6, 6), conv_kernels=(3, 3), conv_strides=(1, 1)),
}


def random_gradcheck_case(arch: str, seed: int, n_channels: int = 3, window_n: int = 8, batch: int = 4):
    """Compact random net (non-zero biases) and input batch for gradient checks.

    The nets are kept small so a full central-difference sweep over every
    parameter stays fast and float64 rounding stays well below 1e-4.
    """
    rng = np.random.default_rng(seed)
    net = DuelingNet.build(GRADCHECK_SPECS[arch], n_channels, window_n, rng)
    for k in net.params:
        if k.endswith(".b"):
            net.params[k] = rng.normal(0.0, 0.1, net.params[k].shape)
    net.mark_updated()
    x = rng.normal(size=(batch, net.input_size))
    return net, x
