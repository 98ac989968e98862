"""Small dense networks with hand-written reverse-mode gradients.

Everything here works on flat float64 parameter vectors so that the
optimizer, the gradient checker and the checkpoint format only ever deal
with one array.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    CorruptFile,
    DegenerateNorm,
    DimensionMismatch,
    NonFiniteGradient,
    NonFiniteLoss,
    VersionMismatch,
)

PARAM_MAGIC = b"VIPP"
PARAM_VERSION = 1
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple((n, tuple(int(d) for d in s)) for n, s in self.layout))
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if values.ndim != 1 or values.size != expected:
            raise DimensionMismatch(f"{values.size} values for a layout of {expected}")

    def __len__(self) -> int:
        return self.values.size

    def views(self) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return replace(self, values=values)

    def fingerprint(self) -> bytes:
        """SHA-256 over the serialized bytes; chains artifacts to their inputs."""
        return hashlib.sha256(to_bytes(self)).digest()


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("an MLP needs at least two positive widths")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in ("identity", "l2_normalize"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.output_activation == "l2_normalize" and widths[-1] < 2:
            raise ValueError("l2_normalize needs an output width of at least 2")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        out = []
        for i, (a, b) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            out.append((f"W{i}", (a, b)))
            out.append((f"b{i}", (b,)))
        return tuple(out)

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())


def zeros_params(spec: MlpSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.n_params()), spec.layout())


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for a, b in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        limit = np.sqrt(6.0 / (a + b))
        chunks.append(rng.uniform(-limit, limit, size=a * b))
        chunks.append(np.zeros(b))
    return ParamVector(np.concatenate(chunks), spec.layout())


def _check(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    if params.layout != spec.layout():
        raise DimensionMismatch("parameter layout does not match the network spec")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.layer_widths[0]:
        raise DimensionMismatch(f"input shape {x.shape} for input width {spec.layer_widths[0]}")
    return x


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    return 1.0 - h * h if name == "tanh" else (z > 0.0).astype(np.float64)


def _forward(spec: MlpSpec, params: ParamVector, x: np.ndarray):
    p = params.views()
    pre, post = [], [x]
    h = x
    for i in range(spec.n_layers):
        z = h @ p[f"W{i}"] + p[f"b{i}"]
        pre.append(z)
        h = _act(spec.activation, z) if i < spec.n_layers - 1 else z
        post.append(h)
    norm = None
    if spec.output_activation == "l2_normalize":
        norm = np.linalg.norm(h, axis=-1, keepdims=True)
        if np.any(norm < NORM_FLOOR):
            raise DegenerateNorm("pre-normalization output norm below 1e-12")
        h = h / norm
    return h, (pre, post, norm)


def mlp_forward(spec: MlpSpec, params: ParamVector, x) -> np.ndarray:
    """Evaluate the network on one input vector or on a batch of rows."""
    x = _check(spec, params, x)
    return _forward(spec, params, x)[0]


def mlp_gradient(spec: MlpSpec, params: ParamVector, x, upstream) -> tuple[ParamVector, np.ndarray]:
    """Gradients of <output, upstream> w.r.t. parameters and input.

    For batched input the parameter gradient is summed over rows and the
    input gradient is returned per row.
    """
    x = _check(spec, params, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    out_shape = x.shape[:-1] + (spec.layer_widths[-1],)
    if upstream.shape != out_shape:
        raise DimensionMismatch(f"upstream shape {upstream.shape}, expected {out_shape}")
    y, cache = _forward(spec, params, x)
    return _backward(spec, params, y, cache, upstream)


def mlp_loss_gradient(spec: MlpSpec, params: ParamVector, x,
                      loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]]) -> tuple[float, ParamVector]:
    """One forward and one backward pass for a loss of the network output.

    ``loss_fn`` maps the output batch to ``(loss, d loss / d output)``.
    """
    x = _check(spec, params, x)
    y, cache = _forward(spec, params, x)
    loss, upstream = loss_fn(y)
    return loss, _backward(spec, params, y, cache, np.asarray(upstream, dtype=np.float64))[0]


def _backward(spec, params, y, cache, upstream):
    pre, post, norm = cache
    p = params.views()

    g = upstream
    if norm is not None:
        g = (g - y * np.sum(y * g, axis=-1, keepdims=True)) / norm
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1:
            g = g * _act_grad(spec.activation, pre[i], post[i + 1])
        h_in = post[i]
        if g.ndim == 1:
            grads[f"W{i}"] = np.outer(h_in, g)
            grads[f"b{i}"] = g.copy()
        else:
            grads[f"W{i}"] = h_in.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
        g = g @ p[f"W{i}"].T
    flat = np.concatenate([grads[name].ravel() for name, _ in spec.layout()])
    return ParamVector(flat, spec.layout()), g


@dataclass(frozen=True)
class OptimState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, n: int, **hyper) -> "OptimState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)


def adam_step(params: ParamVector, grad, state: OptimState) -> tuple[ParamVector, OptimState]:
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    n = len(params)
    if g.shape != (n,) or state.first_moment.shape != (n,) or state.second_moment.shape != (n,):
        raise DimensionMismatch("parameter, gradient and moment lengths disagree")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_values = params.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params.with_values(new_values), replace(state, first_moment=m, second_moment=v, step_count=t)


def grad_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``loss_fn`` maps a flat parameter array to ``(loss, gradient)``.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.array(params.values if isinstance(params, ParamVector) else params, dtype=np.float64)
    loss, analytic = loss_fn(x)
    if not np.isfinite(loss):
        raise NonFiniteLoss("loss is not finite at the check point")
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        up = loss_fn(x)[0]
        x[i] = orig - h
        down = loss_fn(x)[0]
        x[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteLoss(f"loss not finite around coordinate {i}")
        numeric = (up - down) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, err)
    return worst


def to_bytes(params: ParamVector) -> bytes:
    parts = [PARAM_MAGIC, struct.pack("<HI", PARAM_VERSION, len(params.layout))]
    for name, shape in params.layout:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
    parts.append(params.values.astype("<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> ParamVector:
    if len(blob) < 10 or blob[:4] != PARAM_MAGIC:
        raise CorruptFile("not a parameter file")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != PARAM_VERSION:
        raise VersionMismatch(f"parameter file version {version}")
    pos = 10
    layout = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            layout.append((name, shape))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFile("truncated layout table") from exc
    total = sum(int(np.prod(s)) for _, s in layout)
    if len(blob) - pos != 8 * total:
        raise CorruptFile(f"expected {total} values, found {(len(blob) - pos) / 8}")
    values = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    return ParamVector(values, tuple(layout))


def save_params(params: ParamVector, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load_params(path) -> ParamVector:
    return from_bytes(Path(path).read_bytes())

