"""Minimal dense-network core.

- ``ParamTensor`` / ``DenseLayer`` hold float64 parameters.
- ``Tape`` records a forward evaluation; ``backward`` walks it in reverse and
  returns exact gradients for every parameter the loss reaches.
- RMSProp and Adam updates, Glorot initialization, seeded ``Rng`` streams and the
  binary checkpoint codec shared with the harness.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Mapping, NamedTuple, Sequence

import numpy as np

from errors import NumericalError, StructuralError

logger = logging.getLogger("dvqn")

DTYPE = np.float64

RMSPROP_RHO = 0.99
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
OPTIMIZER_EPS = 1e-8

FD_STEP = 1e-5
# Gradients smaller than this are compared absolutely.
FD_ABS_FLOOR = 1e-5

CHECKPOINT_MAGIC = b"DVQN"
CHECKPOINT_VERSION = 1

ActivationName = Literal["identity", "relu", "elu"]
OptimizerName = Literal["rmsprop", "adam"]


# ===== Parameters and layers =====


@dataclass(eq=False)
class ParamTensor:
    """Named float64 parameter; ``values`` is row-major and C-contiguous."""

    name: str
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=DTYPE)
        if self.values.ndim == 0 or any(dim <= 0 for dim in self.values.shape):
            raise StructuralError(
                f"Parameter '{self.name}' must have a positive shape, got {self.values.shape}."
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(
                f"Parameter '{self.name}' contains non-finite values.", node=self.name
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.name, self.values.copy())


@dataclass(frozen=True)
class ActivationKind:
    name: ActivationName = "identity"
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.name not in ("identity", "relu", "elu"):
            raise StructuralError(f"Unknown activation '{self.name}'.")
        if not self.alpha > 0:
            raise StructuralError(f"Activation alpha must be positive, got {self.alpha}.")


IDENTITY = ActivationKind("identity")
RELU = ActivationKind("relu")
ELU = ActivationKind("elu", 1.0)


def parse_activation(name: str, alpha: float = 1.0) -> ActivationKind:
    normalized = str(name or "identity").strip().lower()
    if normalized == "elu":
        return ActivationKind("elu", alpha)
    return ActivationKind(normalized)  # type: ignore[arg-type]


@dataclass(eq=False)
class DenseLayer:
    """Affine map ``y = W x + b`` followed by an elementwise activation."""

    name: str
    weights: ParamTensor
    bias: ParamTensor
    activation: ActivationKind = IDENTITY

    def __post_init__(self) -> None:
        if len(self.weights.shape) != 2 or len(self.bias.shape) != 1:
            raise StructuralError(
                f"Layer '{self.name}' needs 2-D weights and 1-D bias, got "
                f"{self.weights.shape} and {self.bias.shape}."
            )
        if self.weights.shape[0] != self.bias.shape[0]:
            raise StructuralError(
                f"Layer '{self.name}' weight rows ({self.weights.shape[0]}) do not match "
                f"bias length ({self.bias.shape[0]})."
            )

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    def parameters(self) -> list[ParamTensor]:
        return [self.weights, self.bias]


def parameter_map(layers: Iterable[DenseLayer]) -> dict[str, ParamTensor]:
    params: dict[str, ParamTensor] = {}
    for layer in layers:
        for tensor in layer.parameters():
            if tensor.name in params:
                raise StructuralError(f"Duplicate parameter name '{tensor.name}'.")
            params[tensor.name] = tensor
    return params


# ===== Elementwise math =====


def activation_apply(kind: ActivationKind, x: Any) -> Any:
    """ReLU ``max(0, x)``; ELU ``x`` if ``x > 0`` else ``alpha (e^x - 1)``; identity."""

    arr = np.asarray(x, dtype=DTYPE)
    if kind.name == "relu":
        out = np.maximum(arr, 0.0)
    elif kind.name == "elu":
        out = np.where(arr > 0, arr, kind.alpha * np.expm1(np.minimum(arr, 0.0)))
    else:
        out = arr
    return float(out) if out.ndim == 0 else out


def activation_derivative(kind: ActivationKind, x: np.ndarray) -> np.ndarray:
    # ReLU'(0) is 0.
    if kind.name == "relu":
        return (x > 0).astype(DTYPE)
    if kind.name == "elu":
        return np.where(x > 0, 1.0, kind.alpha * np.exp(np.minimum(x, 0.0)))
    return np.ones_like(x)


def dense_forward(layer: DenseLayer, x: Any) -> np.ndarray:
    """Evaluate one layer on a vector or a batch of row vectors."""

    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim not in (1, 2) or arr.shape[-1] != layer.in_features:
        raise StructuralError(
            f"Layer '{layer.name}' expects {layer.in_features} inputs, got shape {arr.shape}."
        )
    pre = arr @ layer.weights.values.T + layer.bias.values
    return np.asarray(activation_apply(layer.activation, pre))


def mlp_forward(layers: Sequence[DenseLayer], x: Any) -> np.ndarray:
    out = np.asarray(x, dtype=DTYPE)
    for layer in layers:
        out = dense_forward(layer, out)
    return out


def mse(a: Any, b: Any) -> float:
    left = np.asarray(a, dtype=DTYPE)
    right = np.asarray(b, dtype=DTYPE)
    if left.shape != right.shape:
        raise StructuralError(f"mse needs equal shapes, got {left.shape} and {right.shape}.")
    return float(np.mean((left - right) ** 2))


def huber(x: Any, delta: float = 1.0) -> Any:
    arr = np.asarray(x, dtype=DTYPE)
    magnitude = np.abs(arr)
    out = np.where(magnitude <= delta, 0.5 * arr * arr, delta * (magnitude - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


# ===== Tape =====


class Node:
    """One recorded value. ``vjp`` maps the output gradient to parent gradients."""

    __slots__ = ("index", "name", "value", "parents", "vjp", "param")

    def __init__(
        self,
        index: int,
        name: str,
        value: np.ndarray,
        parents: tuple["Node", ...],
        vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None,
        param: str | None,
    ) -> None:
        self.index = index
        self.name = name
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param = param

    def item(self) -> float:
        return float(self.value)


class Tape:
    """Forward trace in creation order; reverse order is a valid backward order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}

    def record(
        self,
        name: str,
        value: Any,
        parents: tuple[Node, ...] = (),
        vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        *,
        param: str | None = None,
    ) -> Node:
        node = Node(len(self.nodes), name, np.asarray(value, dtype=DTYPE), parents, vjp, param)
        self.nodes.append(node)
        return node

    def param(self, tensor: ParamTensor) -> Node:
        node = self._params.get(tensor.name)
        if node is None:
            node = self.record(tensor.name, tensor.values, param=tensor.name)
            self._params[tensor.name] = node
        return node

    def constant(self, value: Any, name: str = "constant") -> Node:
        return self.record(name, value)

    # --- layers ---

    def affine(self, layer: DenseLayer, x: Node) -> Node:
        if x.value.ndim not in (1, 2) or x.value.shape[-1] != layer.in_features:
            raise StructuralError(
                f"Layer '{layer.name}' expects {layer.in_features} inputs, got shape {x.value.shape}."
            )
        w = self.param(layer.weights)
        b = self.param(layer.bias)
        x_val, w_val = x.value, w.value

        def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
            g2 = g.reshape(-1, w_val.shape[0])
            x2 = x_val.reshape(-1, w_val.shape[1])
            return (g2 @ w_val).reshape(x_val.shape), g2.T @ x2, g2.sum(axis=0)

        return self.record(f"{layer.name}.affine", x_val @ w_val.T + b.value, (x, w, b), vjp)

    def activate(self, x: Node, kind: ActivationKind, name: str) -> Node:
        if kind.name == "identity":
            return x
        pre = x.value

        def vjp(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * activation_derivative(kind, pre),)

        return self.record(name, activation_apply(kind, pre), (x,), vjp)

    def dense(self, layer: DenseLayer, x: Node) -> Node:
        return self.activate(self.affine(layer, x), layer.activation, f"{layer.name}.{layer.activation.name}")

    def mlp(self, layers: Sequence[DenseLayer], x: Node) -> Node:
        for layer in layers:
            x = self.dense(layer, x)
        return x

    # --- combinators ---

    def add(self, a: Node, b: Node, name: str = "add") -> Node:
        return self.record(name, a.value + b.value, (a, b), lambda g: (g, g))

    def linear_combination(self, terms: Sequence[tuple[float, Node]], name: str) -> Node:
        value = terms[0][0] * terms[0][1].value
        for coef, node in terms[1:]:
            value = value + coef * node.value
        coefs = [coef for coef, _ in terms]
        return self.record(
            name, value, tuple(node for _, node in terms), lambda g: [c * g for c in coefs]
        )

    def gather(self, q: Node, actions: np.ndarray, name: str = "gather") -> Node:
        idx = np.asarray(actions, dtype=np.int64)
        rows = np.arange(q.value.shape[0])
        shape = q.value.shape

        def vjp(g: np.ndarray) -> tuple[np.ndarray]:
            out = np.zeros(shape, dtype=DTYPE)
            out[rows, idx] = g
            return (out,)

        return self.record(name, q.value[rows, idx], (q,), vjp)

    # --- latent ---

    def reparameterize(self, mu: Node, logvar: Node, eps: np.ndarray, name: str = "z") -> Node:
        noise = np.asarray(eps, dtype=DTYPE)
        if noise.shape != mu.value.shape:
            raise StructuralError(f"eps shape {noise.shape} does not match mu {mu.value.shape}.")
        std = np.exp(0.5 * logvar.value)
        return self.record(
            name, mu.value + std * noise, (mu, logvar), lambda g: (g, g * noise * 0.5 * std)
        )

    def kl_standard_normal(self, mu: Node, logvar: Node, name: str = "kl") -> Node:
        """Batch-mean of ``-0.5 sum(1 + logvar - mu^2 - exp(logvar))``."""

        m, lv = mu.value, logvar.value
        batch = m.shape[0] if m.ndim == 2 else 1
        per_sample = -0.5 * np.sum(1.0 + lv - m * m - np.exp(lv), axis=-1)
        return self.record(
            name,
            np.mean(per_sample),
            (mu, logvar),
            lambda g: (g * m / batch, g * -0.5 * (1.0 - np.exp(lv)) / batch),
        )

    # --- losses ---

    def mse(self, pred: Node, target: Node, name: str = "mse") -> Node:
        if pred.value.shape != target.value.shape:
            raise StructuralError(
                f"mse needs equal shapes, got {pred.value.shape} and {target.value.shape}."
            )
        diff = pred.value - target.value
        count = diff.size

        def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            grad = g * 2.0 * diff / count
            return grad, -grad

        return self.record(name, np.mean(diff * diff), (pred, target), vjp)

    def huber(self, pred: Node, target: Node, delta: float = 1.0, name: str = "huber") -> Node:
        if pred.value.shape != target.value.shape:
            raise StructuralError(
                f"huber needs equal shapes, got {pred.value.shape} and {target.value.shape}."
            )
        diff = pred.value - target.value
        count = diff.size

        def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            grad = g * np.clip(diff, -delta, delta) / count
            return grad, -grad

        return self.record(name, np.mean(huber(diff, delta)), (pred, target), vjp)


class GradientStore(dict):
    """Parameter name -> gradient array of the parameter's shape."""

    def require(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        grad = self.get(name)
        if grad is None:
            raise StructuralError(f"Missing gradient entry for parameter '{name}'.")
        if tuple(grad.shape) != tuple(shape):
            raise StructuralError(
                f"Gradient for '{name}' has shape {grad.shape}, expected {shape}."
            )
        return grad


def backward(tape: Tape, root: Node, seed: float | np.ndarray = 1.0) -> GradientStore:
    """Reverse-mode pass from ``root`` over the recorded trace."""

    grads: list[np.ndarray | None] = [None] * (root.index + 1)
    grads[root.index] = np.broadcast_to(np.asarray(seed, dtype=DTYPE), root.value.shape).copy()
    store = GradientStore()

    for node in reversed(tape.nodes[: root.index + 1]):
        g = grads[node.index]
        if g is None:
            continue
        grads[node.index] = None
        if not np.all(np.isfinite(node.value)) or not np.all(np.isfinite(g)):
            raise NumericalError(f"Non-finite value at node '{node.name}'.", node=node.name)
        if node.param is not None:
            store[node.param] = g
            continue
        if node.vjp is None:
            continue
        for parent, parent_grad in zip(node.parents, node.vjp(g)):
            if parent_grad is None:
                continue
            current = grads[parent.index]
            grads[parent.index] = parent_grad if current is None else current + parent_grad

    return store


def finite_difference_check(
    loss_fn: Callable[[Tape], Node],
    params: Mapping[str, ParamTensor],
    h: float = FD_STEP,
    floor: float = FD_ABS_FLOOR,
) -> float:
    """Max relative error between ``backward`` and central differences.

    ``loss_fn`` must rebuild the loss on the tape it is given from the current
    values of ``params``.
    """

    tape = Tape()
    analytic = backward(tape, loss_fn(tape))
    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.values.reshape(-1)
        grad = analytic.get(name)
        grad_flat = np.zeros(flat.size) if grad is None else grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = loss_fn(Tape()).item()
            flat[i] = original - h
            f_minus = loss_fn(Tape()).item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = float(grad_flat[i])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
    return worst


# ===== Random streams =====


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


class Rng:
    """Seeded PCG64 stream. ``split(name)`` derives an independent child stream
    from (seed, path) only, so children do not depend on the parent's draw history."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()) -> None:
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *(_name_key(part) for part in self.path)]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def split(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (str(name),))

    def uniform(self, low: float = 0.0, high: float = 1.0, size: Any = None) -> Any:
        return self.generator.uniform(low, high, size)

    def normal(self, size: Any = None) -> Any:
        return self.generator.standard_normal(size)

    def integers(self, low: int, high: int | None = None, size: Any = None) -> Any:
        return self.generator.integers(low, high, size)

    def random(self) -> float:
        return float(self.generator.random())

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)`` in draw order."""

        if k > n:
            raise StructuralError(f"Cannot draw {k} distinct indices from {n}.")
        if 4 * k >= n:
            return self.generator.permutation(n)[:k]
        chosen: list[int] = []
        seen: set[int] = set()
        while len(chosen) < k:
            for idx in self.generator.integers(0, n, size=k - len(chosen)):
                value = int(idx)
                if value not in seen:
                    seen.add(value)
                    chosen.append(value)
        return np.asarray(chosen, dtype=np.int64)


# ===== Initialization =====


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(
    sizes: Sequence[int],
    rng: Rng,
    *,
    name: str,
    activations: Sequence[ActivationKind],
    scheme: str = "glorot_uniform",
) -> list[DenseLayer]:
    """Glorot-uniform weights and zero biases for a chain of dense layers."""

    if scheme != "glorot_uniform":
        raise StructuralError(f"Unknown initialization scheme '{scheme}'.")
    if len(sizes) < 2 or any(int(size) <= 0 for size in sizes):
        raise StructuralError(f"Layer sizes must be positive, got {list(sizes)}.")
    if len(activations) != len(sizes) - 1:
        raise StructuralError(
            f"Need {len(sizes) - 1} activations for sizes {list(sizes)}, got {len(activations)}."
        )

    layers: list[DenseLayer] = []
    for index, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layer_name = f"{name}.{index}"
        limit = glorot_limit(fan_in, fan_out)
        weights = rng.split(layer_name).uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(
            DenseLayer(
                name=layer_name,
                weights=ParamTensor(f"{layer_name}.weight", weights),
                bias=ParamTensor(f"{layer_name}.bias", np.zeros(fan_out)),
                activation=activations[index],
            )
        )
    return layers


# ===== Optimizers =====


@dataclass
class OptimizerState:
    kind: OptimizerName
    learning_rate: float
    rho: float = RMSPROP_RHO
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = OPTIMIZER_EPS
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("rmsprop", "adam"):
            raise StructuralError(f"Unknown optimizer '{self.kind}'.")
        if not self.learning_rate > 0:
            raise StructuralError(f"Learning rate must be positive, got {self.learning_rate}.")


def _checked_gradients(
    params: Mapping[str, ParamTensor], grads: Mapping[str, np.ndarray]
) -> dict[str, np.ndarray]:
    store = grads if isinstance(grads, GradientStore) else GradientStore(grads)
    return {name: store.require(name, tensor.shape) for name, tensor in params.items()}


def rmsprop_step(
    params: Mapping[str, ParamTensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> tuple[Mapping[str, ParamTensor], OptimizerState]:
    """``s <- rho s + (1 - rho) g^2``; ``p <- p - lr g / (sqrt(s) + eps)``."""

    checked = _checked_gradients(params, grads)
    for name, tensor in params.items():
        g = checked[name]
        s = state.square_avg.get(name)
        s = (1.0 - state.rho) * g * g if s is None else state.rho * s + (1.0 - state.rho) * g * g
        state.square_avg[name] = s
        tensor.values -= state.learning_rate * g / (np.sqrt(s) + state.eps)
    state.step += 1
    return params, state


def adam_step(
    params: Mapping[str, ParamTensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> tuple[Mapping[str, ParamTensor], OptimizerState]:
    checked = _checked_gradients(params, grads)
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, tensor in params.items():
        g = checked[name]
        m = state.first_moment.get(name, np.zeros_like(g))
        v = state.second_moment.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.values -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def optimizer_step(
    params: Mapping[str, ParamTensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> tuple[Mapping[str, ParamTensor], OptimizerState]:
    if state.kind == "adam":
        return adam_step(params, grads, state)
    return rmsprop_step(params, grads, state)


# ===== Checkpoint codec =====


class Record(NamedTuple):
    name: str
    shape: tuple[int, ...]
    values: np.ndarray


def records_from_params(params: Mapping[str, ParamTensor]) -> list[Record]:
    return [Record(name, tensor.shape, tensor.values) for name, tensor in params.items()]


def encode_records(records: Sequence[Record]) -> bytes:
    """Header ``magic | version u32 | count u32`` then, per record,
    ``name_len u32 | utf-8 name | ndim u32 | dims u32... | float64 LE values``."""

    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    for record in records:
        name = record.name.encode("utf-8")
        values = np.asarray(record.values, dtype="<f8").reshape(-1)
        expected = int(np.prod(record.shape, dtype=np.int64)) if record.shape else 1
        if values.size != expected:
            raise StructuralError(
                f"Record '{record.name}' has {values.size} values for shape {record.shape}."
            )
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack(f"<I{len(record.shape)}I", len(record.shape), *record.shape))
        chunks.append(values.tobytes())
    return b"".join(chunks)


def decode_records(payload: bytes) -> list[Record]:
    view = memoryview(payload)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise StructuralError("Not a DVQN checkpoint (bad magic).")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != CHECKPOINT_VERSION:
            raise StructuralError(f"Unsupported checkpoint version {version}.")
        offset = 12
        records: list[Record] = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, offset)
            offset += 4
            name = bytes(view[offset : offset + name_len]).decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", view, offset)
            offset += 4
            shape = tuple(struct.unpack_from(f"<{ndim}I", view, offset))
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            end = offset + 8 * size
            if end > len(view):
                raise StructuralError(f"Checkpoint truncated inside record '{name}'.")
            values = np.frombuffer(view[offset:end], dtype="<f8").astype(DTYPE).reshape(shape)
            offset = end
            records.append(Record(name, shape, values))
    except (struct.error, UnicodeDecodeError) as exc:
        raise StructuralError(f"Malformed checkpoint: {exc}") from exc
    if offset != len(view):
        raise StructuralError("Checkpoint has trailing bytes after the last record.")
    return records


def save_records(path: str | Path, records: Sequence[Record]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_records(records))
    logger.info("checkpoint_written path=%s records=%s", target, len(records))
    return target


def load_records(path: str | Path) -> list[Record]:
    source = Path(path)
    if not source.is_file():
        raise StructuralError(f"Checkpoint not found: {source}")
    return decode_records(source.read_bytes())
