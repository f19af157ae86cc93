"""Dense ReLU networks with hand-written backprop, tempered softmax and
parameter-vector utilities.

Every network is stored as one flat float64 vector. The layout is, for each
layer in order, the weight matrix (fan_in x fan_out, row-major) followed by
its bias vector. :meth:`ClientModel.layers` returns views into that vector,
so an update on the flat vector is an update on the layers.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, StateError

__all__ = [
    "ModelSpec",
    "ClientModel",
    "mlp_forward",
    "mlp_backward",
    "tempered_softmax",
    "log_tempered_softmax",
    "softmax_vjp",
    "save_params",
    "load_params",
    "param_digest",
]


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_layers: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1 or self.num_classes < 1:
            raise ParameterError("input_dim and num_classes must be positive")
        if any(h < 1 for h in self.hidden_layers):
            raise ParameterError(f"hidden widths must be positive, got {self.hidden_layers}")
        if self.activation != "relu":
            raise ParameterError("only the 'relu' activation is supported")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.num_classes)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return [(w[i], w[i + 1]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["input_dim"], tuple(d["hidden_layers"]), d["num_classes"], d.get("activation", "relu"))


@dataclass
class _Cache:
    inputs: np.ndarray
    pre: list          # pre-activations of every layer
    post: list         # layer inputs: post[0] is the network input


@dataclass
class ClientModel:
    """A network ``spec`` together with its flat parameter vector.

    ``forward`` remembers the activations of the most recent call so that
    ``backward`` can apply the Jacobian transpose without recomputation.
    """

    spec: ModelSpec
    params: np.ndarray
    _cache: _Cache | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.size != self.spec.n_params:
            raise ShapeError(
                f"parameter vector has {self.params.size} entries, spec needs {self.spec.n_params}"
            )

    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator) -> "ClientModel":
        """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
        chunks = []
        for fan_in, fan_out in spec.layer_shapes:
            s = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-s, s, size=fan_in * fan_out))
            chunks.append(rng.uniform(-s, s, size=fan_out))
        return cls(spec, np.concatenate(chunks))

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ClientModel":
        return cls(spec, np.zeros(spec.n_params))

    def copy(self) -> "ClientModel":
        return ClientModel(self.spec, self.params.copy())

    def with_params(self, params: np.ndarray) -> "ClientModel":
        return ClientModel(self.spec, np.array(params, dtype=np.float64, copy=True))

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``params`` (defaults to this model's vector)."""
        flat = self.params if params is None else params
        out, off = [], 0
        for fan_in, fan_out in self.spec.layer_shapes:
            W = flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = flat[off:off + fan_out]
            off += fan_out
            out.append((W, b))
        return out

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"expected inputs of shape (B, {self.spec.input_dim}), got {x.shape}")
        layers = self.layers()
        pre, post = [], [x]
        a = x
        for i, (W, b) in enumerate(layers):
            z = a @ W + b
            pre.append(z)
            if i < len(layers) - 1:
                a = np.maximum(z, 0.0)
                post.append(a)
            else:
                a = z
        self._cache = _Cache(x, pre, post)
        return a

    def backward(self, dlogits: np.ndarray, return_input_grad: bool = False):
        """Apply the Jacobian transpose of the last forward pass to ``dlogits``.

        Rows are summed, not averaged: loss gradients handed in here already
        carry their 1/B factor.
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        c = self._cache
        g = np.asarray(dlogits, dtype=np.float64)
        B = c.inputs.shape[0]
        if g.shape != (B, self.spec.num_classes):
            raise ShapeError(f"upstream gradient shape {g.shape} != {(B, self.spec.num_classes)}")
        grad = np.empty_like(self.params)
        gl = self.layers(grad)
        layers = self.layers()
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            gW, gb = gl[i]
            gW[...] = c.post[i].T @ g
            gb[...] = g.sum(axis=0)
            if i > 0 or return_input_grad:
                g = g @ W.T
                if i > 0:
                    g = g * (c.pre[i - 1] > 0)
        if return_input_grad:
            return grad, g
        return grad


def mlp_forward(model: ClientModel, inputs: np.ndarray) -> np.ndarray:
    return model.forward(inputs)


def mlp_backward(model: ClientModel, inputs: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    c = model._cache
    if c is None:
        raise StateError("no forward cache: call mlp_forward first")
    if c.inputs is not inputs and not np.array_equal(c.inputs, inputs):
        raise StateError("cached forward pass was computed on different inputs")
    return model.backward(dlogits)


def _check_temperature(E):
    if not E > 0:
        raise ParameterError(f"temperature must be positive, got {E}")


def tempered_softmax(logits: np.ndarray, E: float = 1.0) -> np.ndarray:
    _check_temperature(E)
    z = np.asarray(logits, dtype=np.float64) / E
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_tempered_softmax(logits: np.ndarray, E: float = 1.0) -> np.ndarray:
    _check_temperature(E)
    z = np.asarray(logits, dtype=np.float64) / E
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_vjp(p: np.ndarray, upstream: np.ndarray, E: float = 1.0) -> np.ndarray:
    """Row-wise (1/E) (diag(p) - p p^T) upstream."""
    _check_temperature(E)
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    if p.shape != u.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {u.shape}")
    return p * (u - (p * u).sum(axis=-1, keepdims=True)) / E


def param_digest(params: np.ndarray) -> str:
    import hashlib

    return hashlib.sha1(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()


# File layout: b"FKDP" | u32 LE header length | UTF-8 JSON header | float64 LE payload
_MAGIC = b"FKDP"


def save_params(path, spec: ModelSpec, params: np.ndarray, extra: dict | None = None) -> None:
    params = np.asarray(params, dtype="<f8").reshape(-1)
    if params.size != spec.n_params:
        raise ShapeError(f"{params.size} parameters do not match spec ({spec.n_params})")
    header = {"spec": spec.to_dict(), "dtype": "<f8", "count": int(params.size)}
    if extra:
        header.update(extra)
    hb = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(hb)) + hb + params.tobytes())


def load_params(path) -> tuple[ModelSpec, np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError("bad parameter-file magic", 0)
    if len(raw) < 8:
        raise FormatError("truncated header length", 4)
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise FormatError("truncated JSON header", 8)
    header = json.loads(raw[8:8 + hlen].decode())
    spec = ModelSpec.from_dict(header["spec"])
    body = raw[8 + hlen:]
    if len(body) != 8 * header["count"]:
        raise FormatError("payload length does not match header count", 8 + hlen)
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return spec, params, header
