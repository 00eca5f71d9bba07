"""Small numpy MLPs with hand-written reverse mode, Adam, and gradient checking.

Parameters of a whole model live in one flat float64 array (``ParamVector``);
named blocks are views into it, so an optimizer or a checkpoint can treat the
model as a single vector while layers address their own weights by name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DivergenceError(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden: tuple[int, ...] = ()
    output_dim: int = 1
    activation: str = "relu"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer sizes must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            out.append((f"W{i}", (a, b)))
            if self.bias:
                out.append((f"b{i}", (b,)))
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPSpec":
        return cls(d["input_dim"], tuple(d["hidden"]), d["output_dim"], d["activation"], d["bias"])


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(pre, post, g):
    return g * (pre > 0)


def _tanh_grad(pre, post, g):
    return g * (1.0 - post * post)


ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


class ParamVector:
    """Flat parameter array plus a name -> (offset, shape) layout."""

    def __init__(self, shapes: list[tuple[str, tuple[int, ...]]], data: np.ndarray | None = None):
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in shapes:
            if name in self.layout:
                raise ValueError(f"duplicate block {name}")
            self.layout[name] = (offset, tuple(shape))
            offset += int(np.prod(shape))
        self.size = offset
        if data is None:
            data = np.zeros(offset)
        elif data.shape != (offset,):
            raise ValueError(f"data length {data.shape} does not match layout size {offset}")
        self.data = data

    def __getitem__(self, name: str) -> np.ndarray:
        start, shape = self.layout[name]
        return self.data[start : start + int(np.prod(shape))].reshape(shape)

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.layout if n.startswith(prefix)]

    def block(self, prefix: str) -> slice:
        """Contiguous slice covering every block whose name starts with ``prefix``."""
        names = self.names(prefix)
        if not names:
            return slice(0, 0)
        starts = [self.layout[n][0] for n in names]
        ends = [self.layout[n][0] + int(np.prod(self.layout[n][1])) for n in names]
        lo, hi = min(starts), max(ends)
        if hi - lo != sum(e - s for s, e in zip(starts, ends)):
            raise ValueError(f"blocks under {prefix!r} are not contiguous")
        return slice(lo, hi)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.shapes(), np.zeros(self.size))

    def copy(self) -> "ParamVector":
        return ParamVector(self.shapes(), self.data.copy())

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, s) for n, (_, s) in self.layout.items()]


GradBuffer = ParamVector


def mlp_shapes(spec: MLPSpec, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}{n}", s) for n, s in spec.param_shapes()]


def init_mlp(spec: MLPSpec, params: ParamVector, prefix: str, rng: np.random.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    for i, fan_in in enumerate(spec.sizes[:-1]):
        bound = 1.0 / np.sqrt(fan_in)
        W = params[f"{prefix}W{i}"]
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        if spec.bias:
            b = params[f"{prefix}b{i}"]
            b[...] = rng.uniform(-bound, bound, size=b.shape)


def forward(spec: MLPSpec, params: ParamVector, x: np.ndarray, prefix: str = ""):
    """Evaluate the MLP on a batch ``(B, input_dim)``; returns (output, cache)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input (B, {spec.input_dim}), got {x.shape}")
    act, _ = ACTIVATIONS[spec.activation]
    cache = [x]
    h = x
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        z = h @ params[f"{prefix}W{i}"]
        if spec.bias:
            z = z + params[f"{prefix}b{i}"]
        if i < n_layers - 1:
            cache.append(z)
            h = act(z)
            cache.append(h)
        else:
            h = z
    return h, cache


def backward(
    spec: MLPSpec,
    params: ParamVector,
    cache: list,
    dout: np.ndarray,
    grads: ParamVector,
    prefix: str = "",
    input_grad: bool = False,
):
    """Accumulate d(sum dout * f(x))/d(params) into ``grads``; optionally return d/dx."""
    dout = np.asarray(dout, dtype=float)
    _, act_grad = ACTIVATIONS[spec.activation]
    n_layers = len(spec.sizes) - 1
    if dout.shape != (cache[0].shape[0], spec.output_dim):
        raise ValueError(f"cotangent shape {dout.shape} does not match output")
    g = dout
    for i in reversed(range(n_layers)):
        h_in = cache[2 * i]
        grads[f"{prefix}W{i}"][...] += h_in.T @ g
        if spec.bias:
            grads[f"{prefix}b{i}"][...] += g.sum(axis=0)
        if i == 0 and not input_grad:
            return None
        g = g @ params[f"{prefix}W{i}"].T
        if i > 0:
            g = act_grad(cache[2 * i - 1], cache[2 * i], g)
    return g


class Adam:
    """Adam restricted to a set of parameter slices; other entries never move."""

    def __init__(self, size: int, lr: float = 1e-3, slices=None, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.slices = [slice(0, size)] if slices is None else list(slices)
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        if params.shape != grads.shape:
            raise ValueError("params and grads differ in shape")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for sl in self.slices:
            g = grads[sl]
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient")
            m = self.m[sl]
            v = self.v[sl]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[sl] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: Adam, lr: float | None = None) -> None:
    if lr is not None:
        state.lr = lr
    state.step(params, grads)


def gradcheck(
    loss_fn,
    params: ParamVector,
    analytic: np.ndarray,
    coords: np.ndarray | None = None,
    num: int = 64,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    ``loss_fn()`` must read the current ``params.data``. Coordinates default to
    a random subset of size ``num``. The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if coords is None:
        coords = rng.choice(params.size, size=min(num, params.size), replace=False)
    worst = 0.0
    data = params.data
    for i in coords:
        old = data[i]
        data[i] = old + h
        fp = loss_fn()
        data[i] = old - h
        fm = loss_fn()
        data[i] = old
        numeric = (fp - fm) / (2 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
