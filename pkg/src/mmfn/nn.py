"""Differentiable numpy building blocks with hand-written backward passes.

Every block follows one protocol::

    out, cache = block.forward(*inputs)
    grads_wrt_inputs = block.backward(grad_out, cache)

``backward`` accumulates parameter gradients into ``Parameter.grad``. Caches are
returned rather than stored on the block, so a block can be applied several
times in one forward pass (the shared co-attention block relies on this).
Arrays may carry any number of leading batch axes; features live on the last
axis and "rows" on the second-to-last.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


# ---------------------------------------------------------------------------
# functional primitives
# ---------------------------------------------------------------------------


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilised by max subtraction."""
    x = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))


def layer_norm(
    x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalise each row to zero mean / unit variance, then scale and shift."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("layer_norm needs rows of nonzero width")
    if np.shape(scale) != (x.shape[-1],) or np.shape(shift) != (x.shape[-1],):
        raise ValueError(
            f"scale/shift must have length {x.shape[-1]}, "
            f"got {np.shape(scale)} and {np.shape(shift)}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


def mean_pool(x: np.ndarray) -> np.ndarray:
    """Average over rows (second-to-last axis)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim < 2 or x.shape[-2] == 0 or x.shape[-1] == 0:
        raise ValueError("mean_pool needs a non-empty matrix")
    return x.mean(axis=-2)


def mean_pool_backward(grad: np.ndarray, rows: int) -> np.ndarray:
    g = np.asarray(grad)[..., None, :] / rows
    return np.repeat(g, rows, axis=-2)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# parameters and the module protocol
# ---------------------------------------------------------------------------


class Parameter:
    __slots__ = ("grad", "value")

    def __init__(self, value: np.ndarray):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Parameter(shape={self.value.shape})"


class Module:
    """Base class: parameter discovery, train/eval switching, state dicts.

    Parameters are found by walking instance attributes in definition order,
    so naming is stable. Lists of modules are walked too. A module reached
    twice is only reported once.
    """

    training: bool = True
    buffer_names: tuple[str, ...] = ()

    def forward(self, *inputs):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError

    def __call__(self, *inputs):
        return self.forward(*inputs)[0]

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, attr in vars(self).items():
            if isinstance(attr, (Parameter, Module)):
                yield name, attr
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "", _seen=None) -> Iterator[tuple[str, Parameter]]:
        seen = set() if _seen is None else _seen
        for name, child in self._children():
            if id(child) in seen:
                continue
            seen.add(id(child))
            if isinstance(child, Parameter):
                yield prefix + name, child
            else:
                yield from child.named_parameters(f"{prefix}{name}.", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, copy=True)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.value.shape:
                raise ValueError(f"{name}: expected shape {p.value.shape}, got {value.shape}")
            p.value[...] = value
        for name in buffers:
            owner, attr = self._locate(name)
            getattr(owner, attr)[...] = np.asarray(state[name], dtype=DTYPE)

    def _locate(self, dotted: str) -> tuple[Module, str]:
        *path, attr = dotted.split(".")
        owner: object = self
        for part in path:
            owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
        return owner, attr


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Linear(Module):
    """Affine map ``x @ weight + bias`` with weight stored as (in_dim, out_dim).

    With ``bias=False`` the map is purely linear and has no bias parameter.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        if in_dim < 1 or out_dim < 1:
            raise ValueError("Linear dimensions must be positive")
        self.in_dim = in_dim
        self.out_dim = out_dim
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=(out_dim,))) if bias else None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Linear expected width {self.in_dim}, got {x.shape[-1]}")
        y = x @ self.weight.value
        return (y if self.bias is None else y + self.bias.value), x

    def backward(self, grad, x):
        flat_x = x.reshape(-1, self.in_dim)
        flat_g = grad.reshape(-1, self.out_dim)
        self.weight.grad += flat_x.T @ flat_g
        if self.bias is not None:
            self.bias.grad += flat_g.sum(axis=0)
        return grad @ self.weight.value.T


class ReLU(Module):
    # subgradient at 0 is 0
    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, grad, mask):
        return grad * mask


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.scale = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.dim:
            raise ValueError(f"LayerNorm expected width {self.dim}, got {x.shape[-1]}")
        mu = x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + self.eps)
        xhat = (x - mu) * inv_std
        return xhat * self.scale.value + self.shift.value, (xhat, inv_std)

    def backward(self, grad, cache):
        xhat, inv_std = cache
        self.scale.grad += (grad * xhat).reshape(-1, self.dim).sum(axis=0)
        self.shift.grad += grad.reshape(-1, self.dim).sum(axis=0)
        g = grad * self.scale.value
        return inv_std * (
            g
            - g.mean(axis=-1, keepdims=True)
            - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        )


class BatchNorm(Module):
    """Per-feature batch normalisation over a (batch, features) matrix."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.scale = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim, dtype=DTYPE)
        self.running_var = np.ones(dim, dtype=DTYPE)

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"BatchNorm expects (batch, {self.dim}), got {x.shape}")
        if self.training:
            n = x.shape[0]
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        return xhat * self.scale.value + self.shift.value, (xhat, inv_std, self.training)

    def backward(self, grad, cache):
        xhat, inv_std, batch_stats = cache
        self.scale.grad += (grad * xhat).sum(axis=0)
        self.shift.grad += grad.sum(axis=0)
        g = grad * self.scale.value
        if not batch_stats:
            return g * inv_std
        return inv_std * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0))


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, grad, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(grad, c)
        return grad


class ProjectionHead(Sequential):
    """Two fully connected layers with a ReLU between them."""

    def __init__(self, in_dim: int, rng: np.random.Generator, hidden: int = 256, out_dim: int = 16):
        super().__init__(Linear(in_dim, hidden, rng), ReLU(), Linear(hidden, out_dim, rng))
        self.in_dim = in_dim
        self.out_dim = out_dim


class FusionFFN(Sequential):
    """Linear -> BatchNorm -> ReLU."""

    def __init__(self, in_dim: int, rng: np.random.Generator, out_dim: int = 256):
        super().__init__(Linear(in_dim, out_dim, rng), BatchNorm(out_dim), ReLU())
        self.in_dim = in_dim
        self.out_dim = out_dim


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter_errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


def _as_tuple(x) -> tuple:
    return x if isinstance(x, tuple) else (x,)


def _sum_of_squares(out) -> tuple[float, object]:
    if isinstance(out, tuple):
        parts = [_sum_of_squares(o) for o in out]
        return sum(p[0] for p in parts), tuple(p[1] for p in parts)
    return float(np.sum(out * out)), 2.0 * out


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    # the floor keeps exactly-zero gradients (e.g. key biases under softmax
    # shift invariance) from comparing rounding noise against rounding noise
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(
    module: Module,
    inputs,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    loss: Callable | None = None,
    check_inputs: bool = False,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss`` maps the module output to ``(scalar, d_scalar/d_output)``; the
    default is the sum of squares. With ``check_inputs`` the gradients with
    respect to each input array are compared as well (reported as
    ``input[i]``). Errors are ``|a - n| / max(|a|, |n|, floor)`` per tensor.
    """
    loss = loss or _sum_of_squares
    inputs = tuple(np.array(x, dtype=DTYPE) for x in _as_tuple(inputs))

    def scalar() -> float:
        out, _ = module.forward(*inputs)
        return loss(out)[0]

    module.zero_grad()
    out, cache = module.forward(*inputs)
    _, dout = loss(out)
    dinputs = _as_tuple(module.backward(dout, cache))

    errors: dict[str, float] = {}
    targets: list[tuple[str, np.ndarray, np.ndarray]] = [
        (name, p.value, p.grad.copy()) for name, p in module.named_parameters()
    ]
    if check_inputs:
        targets += [(f"input[{i}]", x, np.asarray(g)) for i, (x, g) in enumerate(zip(inputs, dinputs))]

    for name, array, analytic in targets:
        numeric = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            orig = array[idx]
            array[idx] = orig + step
            up = scalar()
            array[idx] = orig - step
            down = scalar()
            array[idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        errors[name] = _rel_error(analytic, numeric, floor)

    worst = max(errors.values()) if errors else 0.0
    return GradCheckReport(max_rel_error=worst, per_parameter_errors=errors, tolerance=tolerance)


def concat_last(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts, axis=-1)


def split_last(x: np.ndarray, widths: Sequence[int]) -> list[np.ndarray]:
    return np.split(x, np.cumsum(widths)[:-1], axis=-1)
