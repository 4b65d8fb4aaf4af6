"""Reverse-mode automatic differentiation with exactly the layers the
encoder-decoder needs: strided padded convolution and its transpose, dense and
masked-dense layers, softmax with temperature, reparameterized sampling, KL
and max-margin losses, cosine scores, and a bias-corrected Adam step.

Everything computes in float64.  Tensors carry a leading batch dimension where
noted; single instances can be promoted by the callers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class Tensor:
    """A float64 array plus a gradient accumulator and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.shape != ():
                raise ValueError("backward() without a seed needs a scalar tensor")
            seed = np.ones(())
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unary(x: Tensor, out_data, grad_fn) -> Tensor:
    out = Tensor(out_data, parents=(x,))
    if x.requires_grad:
        out._backward = lambda g: x.accumulate(grad_fn(g))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    out._backward = backward
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.data * factor, lambda g: g * factor)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _unary(x, y, lambda g: g * y)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _unary(x, y, lambda g: g * (1.0 - y * y))


def identity(x: Tensor) -> Tensor:
    return as_tensor(x)


ACTIVATIONS = {"tanh": tanh, "identity": identity}


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(old))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.data.sum(axis=axis), lambda g: np.expand_dims(g, axis) * np.ones_like(x.data))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _unary(x, x.data.mean(), lambda g: np.full(x.data.shape, g / n))


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Concatenate (B, k_i) tensors along the last axis."""
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1), parents=tuple(parts))
    widths = [p.data.shape[-1] for p in parts]

    def backward(g):
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate(g[..., offset : offset + w])
            offset += w

    out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """(B, n) @ (n, m) + (m,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    data = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        data = data + bias.data
        parents.append(bias)
    out = Tensor(data, parents=tuple(parents))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=0) if g.ndim == 2 else g)

    out._backward = backward
    return out


def softmax_rows(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax(logits / temperature); temperature must be positive."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = as_tensor(logits)
    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot) / temperature

    return _unary(logits, y, grad_fn)


# ---------------------------------------------------------------------------
# convolution geometry

@dataclass(frozen=True)
class ConvSpec:
    """Non-overlapping convolution: stride equals the kernel, with zero padding
    on the bottom/right so the window grid tiles the padded input exactly.

    The default geometry covers a 32x24 input with 15x15 windows, giving a 3x2
    grid, 6 regions of unequal in-bounds shape and 40*6 = 240 output nodes.
    """

    in_rows: int = 32
    in_cols: int = 24
    channels: int = 40
    kernel_rows: int = 15
    kernel_cols: int = 15

    @property
    def grid(self) -> tuple[int, int]:
        return (
            math.ceil(self.in_rows / self.kernel_rows),
            math.ceil(self.in_cols / self.kernel_cols),
        )

    @property
    def padded(self) -> tuple[int, int]:
        gh, gw = self.grid
        return gh * self.kernel_rows, gw * self.kernel_cols

    @property
    def n_regions(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def nodes(self) -> int:
        return self.channels * self.n_regions

    def region_bounds(self, region: int) -> tuple[int, int, int, int]:
        """In-bounds (row0, row1, col0, col1) of one window, clipped to content."""
        gh, gw = self.grid
        gi, gj = divmod(region, gw)
        if not (0 <= gi < gh and 0 <= gj < gw):
            raise ValueError(f"region {region} out of range")
        r0, c0 = gi * self.kernel_rows, gj * self.kernel_cols
        return r0, min(r0 + self.kernel_rows, self.in_rows), c0, min(c0 + self.kernel_cols, self.in_cols)

    def region_shape(self, region: int) -> tuple[int, int]:
        r0, r1, c0, c1 = self.region_bounds(region)
        return (r1 - r0, c1 - c0)

    def node_channel(self, node: int) -> int:
        return node // self.n_regions

    def node_region(self, node: int) -> int:
        return node % self.n_regions


PAPER_CONV = ConvSpec()


def _check_conv_input(x: Tensor, spec: ConvSpec) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim == 2:
        x = reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 3 or x.data.shape[1:] != (spec.in_rows, spec.in_cols):
        raise ValueError(
            f"expected input (batch, {spec.in_rows}, {spec.in_cols}), got {x.data.shape}"
        )
    return x


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, spec: ConvSpec = PAPER_CONV) -> Tensor:
    """(B, H, W) -> (B, C, gh, gw) with stride = kernel over the padded input."""
    x = _check_conv_input(x, spec)
    kernels, bias = as_tensor(kernels), as_tensor(bias)
    kh, kw = spec.kernel_rows, spec.kernel_cols
    gh, gw = spec.grid
    ph, pw = spec.padded
    batch = x.data.shape[0]
    xp = np.zeros((batch, ph, pw))
    xp[:, : spec.in_rows, : spec.in_cols] = x.data
    out_data = np.empty((batch, spec.channels, gh, gw))
    for gi in range(gh):
        for gj in range(gw):
            patch = xp[:, gi * kh : (gi + 1) * kh, gj * kw : (gj + 1) * kw]
            out_data[:, :, gi, gj] = np.einsum("bhw,chw->bc", patch, kernels.data)
    out_data += bias.data[None, :, None, None]
    out = Tensor(out_data, parents=(x, kernels, bias))

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros((batch, ph, pw))
            for gi in range(gh):
                for gj in range(gw):
                    gxp[:, gi * kh : (gi + 1) * kh, gj * kw : (gj + 1) * kw] += np.einsum(
                        "bc,chw->bhw", g[:, :, gi, gj], kernels.data
                    )
            x.accumulate(gxp[:, : spec.in_rows, : spec.in_cols])
        if kernels.requires_grad:
            gk = np.zeros_like(kernels.data)
            for gi in range(gh):
                for gj in range(gw):
                    patch = xp[:, gi * kh : (gi + 1) * kh, gj * kw : (gj + 1) * kw]
                    gk += np.einsum("bc,bhw->chw", g[:, :, gi, gj], patch)
            kernels.accumulate(gk)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = backward
    return out


def conv2d_transpose(y: Tensor, kernels: Tensor, bias: Tensor, spec: ConvSpec = PAPER_CONV) -> Tensor:
    """Adjoint of conv2d: (B, C, gh, gw) -> (B, H, W), plus a scalar output bias."""
    y, kernels, bias = as_tensor(y), as_tensor(kernels), as_tensor(bias)
    gh, gw = spec.grid
    if y.data.ndim != 4 or y.data.shape[1:] != (spec.channels, gh, gw):
        raise ValueError(f"expected (batch, {spec.channels}, {gh}, {gw}), got {y.data.shape}")
    if bias.data.shape != ():
        raise ValueError("transpose conv bias must be a scalar")
    kh, kw = spec.kernel_rows, spec.kernel_cols
    ph, pw = spec.padded
    batch = y.data.shape[0]
    xp = np.zeros((batch, ph, pw))
    for gi in range(gh):
        for gj in range(gw):
            xp[:, gi * kh : (gi + 1) * kh, gj * kw : (gj + 1) * kw] += np.einsum(
                "bc,chw->bhw", y.data[:, :, gi, gj], kernels.data
            )
    out_data = xp[:, : spec.in_rows, : spec.in_cols] + bias.data
    out = Tensor(out_data, parents=(y, kernels, bias))

    def backward(g):
        gp = np.zeros((batch, ph, pw))
        gp[:, : spec.in_rows, : spec.in_cols] = g
        if y.requires_grad:
            gy = np.empty_like(y.data)
            for gi in range(gh):
                for gj in range(gw):
                    patch = gp[:, gi * kh : (gi + 1) * kh, gj * kw : (gj + 1) * kw]
                    gy[:, :, gi, gj] = np.einsum("bhw,chw->bc", patch, kernels.data)
            y.accumulate(gy)
        if kernels.requires_grad:
            gk = np.zeros_like(kernels.data)
            for gi in range(gh):
                for gj in range(gw):
                    patch = gp[:, gi * kh : (gi + 1) * kh, gj * kw : (gj + 1) * kw]
                    gk += np.einsum("bc,bhw->chw", y.data[:, :, gi, gj], patch)
            kernels.accumulate(gk)
        if bias.requires_grad:
            bias.accumulate(np.asarray(g.sum()))

    out._backward = backward
    return out


def flatten_nodes(y: Tensor, spec: ConvSpec = PAPER_CONV) -> Tensor:
    """(B, C, gh, gw) -> (B, nodes); node id = channel * n_regions + region."""
    return reshape(y, (y.data.shape[0], spec.nodes))


# ---------------------------------------------------------------------------
# masked dense layer

def masked_weights(weight: Tensor, factors: Tensor) -> Tensor:
    """Apply per-(node, latent-unit) mask factors to both the mean and the
    log-variance halves of a (nodes, 2K) weight matrix."""
    factors = as_tensor(factors)
    doubled = concat_rows([factors, factors])
    return mul(weight, doubled)


def mask_factors_soft(mask_logits: Tensor, temperature: float) -> Tensor:
    return softmax_rows(mask_logits, temperature)


def harden_mask(mask_logits: np.ndarray) -> np.ndarray:
    """Assign each node to its argmax latent unit; ties go to the lowest index.

    The induced per-unit node sets are pairwise disjoint and cover all nodes.
    """
    logits = np.asarray(mask_logits, dtype=np.float64)
    return np.argmax(logits, axis=1)


def one_hot_factors(assignment: np.ndarray, n_units: int) -> np.ndarray:
    factors = np.zeros((len(assignment), n_units))
    factors[np.arange(len(assignment)), assignment] = 1.0
    return factors


def masked_linear(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    mask_logits: Tensor | None,
    temperature: float,
    n_units: int,
    hard: bool = False,
) -> tuple[Tensor, Tensor]:
    """(B, nodes) -> (mu, logvar) of shape (B, K) through masked weights.

    With mask_logits None the mask factors are fixed at one (dense baseline);
    with hard=True the factors are the one-hot hardened assignment.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    nodes = weight.data.shape[0]
    if weight.data.shape[1] != 2 * n_units:
        raise ValueError(f"weight must be (nodes, {2 * n_units}), got {weight.data.shape}")
    if mask_logits is None:
        wm = weight
    elif hard:
        assignment = harden_mask(mask_logits.data)
        factors = Tensor(one_hot_factors(assignment, n_units))
        wm = masked_weights(weight, factors)
    else:
        wm = masked_weights(weight, mask_factors_soft(mask_logits, temperature))
    out = linear(x, wm, bias)
    mu = _unary(out, out.data[:, :n_units], lambda g, d=out.data.shape: _pad_cols(g, d, 0, n_units))
    logvar = _unary(out, out.data[:, n_units:], lambda g, d=out.data.shape: _pad_cols(g, d, n_units, 2 * n_units))
    return mu, logvar


def _pad_cols(g, full_shape, col0, col1):
    out = np.zeros(full_shape)
    out[:, col0:col1] = g
    return out


# ---------------------------------------------------------------------------
# sampling, losses, scores

def reparam_sample(mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """z = mu + exp(logvar / 2) * noise, differentiable in mu and logvar."""
    noise_t = Tensor(noise)
    if noise_t.data.shape != mu.data.shape:
        raise ValueError(f"noise shape {noise_t.data.shape} != mu shape {mu.data.shape}")
    return add(mu, mul(exp(scale(logvar, 0.5)), noise_t))


def kl_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-row KL(N(mu, exp(logvar)) || N(0, 1)): (B, K) -> (B,)."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    ev = np.exp(logvar.data)
    out_data = -0.5 * (1.0 + logvar.data - mu.data**2 - ev).sum(axis=-1)
    out = Tensor(out_data, parents=(mu, logvar))

    def backward(g):
        gexp = np.expand_dims(g, -1)
        if mu.requires_grad:
            mu.accumulate(gexp * mu.data)
        if logvar.requires_grad:
            logvar.accumulate(gexp * 0.5 * (ev - 1.0))

    out._backward = backward
    return out


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of (B, D) tensors -> (B,) in [-1, 1].

    Zero-norm rows score 0 and propagate no gradient; a warning is emitted.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    ok = (na > 0) & (nb > 0)
    if not ok.all():
        warnings.warn("cosine of a zero-norm vector defined as 0", RuntimeWarning, stacklevel=2)
    denom = np.where(ok, na * nb, 1.0)
    dots = (a.data * b.data).sum(axis=-1)
    s = np.where(ok, dots / denom, 0.0)
    out = Tensor(s, parents=(a, b))

    def backward(g):
        gm = np.expand_dims(g * ok, -1)
        if a.requires_grad:
            a.accumulate(gm * (b.data / np.expand_dims(denom, -1)
                               - np.expand_dims(s / np.where(na > 0, na, 1.0) ** 2, -1) * a.data))
        if b.requires_grad:
            b.accumulate(gm * (a.data / np.expand_dims(denom, -1)
                               - np.expand_dims(s / np.where(nb > 0, nb, 1.0) ** 2, -1) * b.data))

    out._backward = backward
    return out


def maxmargin_loss(score_correct: Tensor, scores_err: Tensor) -> Tensor:
    """max(0, 1 - score_correct + mean(scores_err)) per row.

    ``score_correct`` is (B,) and ``scores_err`` is (B, E); the hinge
    subgradient is zero whenever the margin is satisfied.
    """
    score_correct, scores_err = as_tensor(score_correct), as_tensor(scores_err)
    n_err = scores_err.data.shape[-1]
    t = 1.0 - score_correct.data + scores_err.data.sum(axis=-1) / n_err
    out_data = np.maximum(0.0, t)
    out = Tensor(out_data, parents=(score_correct, scores_err))
    active = (t > 0).astype(np.float64)

    def backward(g):
        ga = g * active
        if score_correct.requires_grad:
            score_correct.accumulate(-ga)
        if scores_err.requires_grad:
            scores_err.accumulate(np.expand_dims(ga / n_err, -1) * np.ones_like(scores_err.data))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# optimizer

def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over parallel lists of arrays.

    ``state`` is a dict with keys m, v (lists of arrays) and t (step count);
    pass an empty dict to initialize.  Returns (new_params, state).
    """
    if not state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p) if g is None else g
        state["m"][i] = beta1 * state["m"][i] + (1 - beta1) * g
        state["v"][i] = beta2 * state["v"][i] + (1 - beta2) * g * g
        m_hat = state["m"][i] / (1 - beta1**t)
        v_hat = state["v"][i] / (1 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return new_params, state


class Adam:
    """Tensor-facing wrapper around :func:`adam_step`."""

    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def step(self) -> None:
        arrays = [p.data for p in self.params]
        grads = [p.grad for p in self.params]
        updated, self.state = adam_step(
            arrays, grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )
        for p, new in zip(self.params, updated):
            p.data = new

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
