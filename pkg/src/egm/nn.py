"""Layers, parameter containers and the Adam optimizer on top of :mod:`egm.autograd`."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, NumericalError

FORMAT_VERSION = 1


class Module:
    """Parameter container; discovers parameters from attributes in order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def check_gradients(self):
        """Raise :class:`NumericalError` naming the first block with a non-finite gradient."""
        for name, p in self.named_parameters():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError("non-finite gradient", stage=name)


def param(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def orthogonal(rng, shape, gain=1.0):
    """Orthogonal init for the trailing two axes of ``shape``."""
    *lead, rows, cols = shape
    out = np.empty(shape)
    flat = out.reshape(-1, rows, cols)
    for i in range(flat.shape[0]):
        a = rng.standard_normal((max(rows, cols), min(rows, cols)))
        q, r = np.linalg.qr(a)
        q *= np.sign(np.diag(r))
        flat[i] = q if rows >= cols else q.T
    return gain * out


class Linear(Module):
    def __init__(self, n_in, n_out, rng, gain=1.0):
        self.W = param(orthogonal(rng, (n_in, n_out), gain))
        self.b = param(np.zeros(n_out))

    def __call__(self, x):
        return x @ self.W + self.b


class MLP(Module):
    """Tanh multilayer perceptron; ``hidden=()`` gives a single linear map."""

    def __init__(self, n_in, hidden, n_out, rng, out_gain=1.0, hidden_gain=1.0):
        sizes = [n_in, *hidden, n_out]
        self.layers = [
            Linear(a, b, rng, gain=out_gain if i == len(sizes) - 2 else hidden_gain)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = layer(x).tanh()
        return self.layers[-1](x)


class StackedMLP(Module):
    """``M`` independent tanh MLPs evaluated with batched matmuls.

    Input ``(B, n_in)`` maps to output ``(M, B, n_out)``.
    """

    def __init__(self, count, n_in, hidden, n_out, rng, out_gain=1.0, hidden_gain=1.0):
        sizes = [n_in, *hidden, n_out]
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = out_gain if i == len(sizes) - 2 else hidden_gain
            self.weights.append(param(orthogonal(rng, (count, a, b), gain)))
            self.biases.append(param(np.zeros((count, 1, b))))
        self.count = count

    def named_parameters(self, prefix=""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}W{i}", w
            yield f"{prefix}b{i}", b

    def __call__(self, x):
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < n - 1:
                x = x.tanh()
        return x


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m.copy()
            out[f"v{i}"] = v.copy()
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = [np.array(state[f"m{i}"]) for i in range(len(self.params))]
        self.v = [np.array(state[f"v{i}"]) for i in range(len(self.params))]


def save_params(path, module, meta=None, **extra):
    """Write named parameter blocks plus a format version to an ``.npz`` archive."""
    arrays = {f"param/{k}": v for k, v in module.state_dict().items()}
    for group, state in extra.items():
        arrays.update({f"{group}/{k}": v for k, v in state.items()})
    arrays["format_version"] = np.array(FORMAT_VERSION)
    if meta is not None:
        import json

        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_archive(path):
    """Return ``(params, groups, meta)`` from an archive written by :func:`save_params`."""
    import json

    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format version {version}")
        params, groups = {}, {}
        for key in z.files:
            if "/" not in key:
                continue
            group, name = key.split("/", 1)
            target = params if group == "param" else groups.setdefault(group, {})
            target[name] = z[key]
        meta = json.loads(str(z["meta"])) if "meta" in z.files else {}
    return params, groups, meta
