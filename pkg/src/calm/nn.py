"""Differentiable-computation core: MLPs with explicit reverse-mode passes,
the unit-sphere projection, Adam, and a finite-difference checking harness.

Scope is deliberately a closed zoo (fully connected stacks with relu/tanh
hidden units and an optional output squash) rather than a general tape:
every backward rule here is hand-derived and finite-difference checked.
`Mlp.double_backward` additionally propagates forward-mode tangents and
reverses through them, which is what the discriminator's gradient penalty
needs to differentiate an input-gradient norm with respect to parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ACTIVATIONS = ("relu", "tanh")
OUT_ACTIVATIONS = ("none", "tanh", "sigmoid")


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-a))
    if name == "none":
        return a
    raise ValueError(f"unknown activation {name!r}")


def _act_prime(name: str, a: np.ndarray, y: np.ndarray) -> np.ndarray:
    # y is the already-computed activation output; reuse it where possible
    if name == "relu":
        return (a > 0.0).astype(a.dtype)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "none":
        return np.ones_like(a)
    raise ValueError(f"unknown activation {name!r}")


def _act_second(name: str, a: np.ndarray, y: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.zeros_like(a)
    if name == "tanh":
        return -2.0 * y * (1.0 - y * y)
    if name == "sigmoid":
        return y * (1.0 - y) * (1.0 - 2.0 * y)
    if name == "none":
        return np.zeros_like(a)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    """widths runs input -> hidden... -> output, so it needs >= 2 entries."""

    widths: tuple[int, ...]
    activation: str = "relu"
    out_activation: str = "none"
    seed: int = 0
    final_gain: float | None = None  # override orthogonal gain on the last layer
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs an input and an output width")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive: {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.out_activation not in OUT_ACTIVATIONS:
            raise ValueError(f"out_activation must be one of {OUT_ACTIVATIONS}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class LatentHeadSpec:
    latent_dim: int
    widths: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ValueError("latent dim must be >= 2")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"head widths must be positive: {self.widths}")


def orthogonal_init(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    d = np.sign(np.diagonal(r)).copy()
    d[d == 0] = 1.0
    q = q * d
    if rows < cols:
        q = q.T
    return gain * q


class Mlp:
    """Fully connected stack with named flat-parameter segments.

    Parameters live in one flat vector `theta`; per-layer weight/bias views
    are materialized on access. All three passes (forward, backward,
    double_backward) share the cache produced by forward.
    """

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self.dtype = np.dtype(spec.dtype)
        self.segments: list[tuple[str, slice, tuple[int, ...]]] = []
        offset = 0
        for l in range(self.n_layers):
            rows, cols = spec.widths[l + 1], spec.widths[l]
            self.segments.append((f"W{l}", slice(offset, offset + rows * cols), (rows, cols)))
            offset += rows * cols
            self.segments.append((f"b{l}", slice(offset, offset + rows), (rows,)))
            offset += rows
        self.n_params = offset
        self.theta = self._init_theta()

    @property
    def n_layers(self) -> int:
        return len(self.spec.widths) - 1

    def _init_theta(self) -> np.ndarray:
        rng = np.random.default_rng(self.spec.seed)
        hidden_gain = np.sqrt(2.0) if self.spec.activation == "relu" else 1.0
        theta = np.zeros(self.n_params, dtype=self.dtype)
        for l in range(self.n_layers):
            last = l == self.n_layers - 1
            gain = hidden_gain
            if last:
                gain = self.spec.final_gain if self.spec.final_gain is not None else 1.0
            rows, cols = self.spec.widths[l + 1], self.spec.widths[l]
            w = orthogonal_init(rng, rows, cols, gain)
            name, sl, shape = self.segments[2 * l]
            theta[sl] = w.astype(self.dtype).ravel()
        return theta

    def weight(self, l: int, theta: np.ndarray | None = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        _, sl, shape = self.segments[2 * l]
        return theta[sl].reshape(shape)

    def bias(self, l: int, theta: np.ndarray | None = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        _, sl, shape = self.segments[2 * l + 1]
        return theta[sl].reshape(shape)

    def _layer_act(self, l: int) -> str:
        return self.spec.out_activation if l == self.n_layers - 1 else self.spec.activation

    def forward(self, x: np.ndarray, theta: np.ndarray | None = None):
        """Returns (y, cache). x: (B, in_dim)."""
        theta = self.theta if theta is None else theta
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.spec.in_dim:
            raise ValueError(f"input width {x.shape[1]} != spec {self.spec.in_dim}")
        xs = [x]          # layer inputs
        pre = []          # pre-activations
        post = []         # activation outputs
        h = x
        for l in range(self.n_layers):
            a = h @ self.weight(l, theta).T + self.bias(l, theta)
            y = _act(self._layer_act(l), a)
            pre.append(a)
            post.append(y)
            if l < self.n_layers - 1:
                xs.append(y)
            h = y
        cache = {"xs": xs, "pre": pre, "post": post, "theta": theta, "squeeze": squeeze}
        return (h[0] if squeeze else h), cache

    def backward(self, cache, dy: np.ndarray):
        """Returns (dx, dtheta) for upstream gradient dy on the output."""
        theta = cache["theta"]
        dy = np.atleast_2d(np.asarray(dy, dtype=self.dtype))
        dtheta = np.zeros(self.n_params, dtype=self.dtype)
        grad = dy
        for l in range(self.n_layers - 1, -1, -1):
            act = self._layer_act(l)
            da = grad * _act_prime(act, cache["pre"][l], cache["post"][l])
            _, wsl, wshape = self.segments[2 * l]
            _, bsl, _ = self.segments[2 * l + 1]
            dtheta[wsl] += (da.T @ cache["xs"][l]).ravel()
            dtheta[bsl] += da.sum(axis=0)
            grad = da @ self.weight(l, theta)
        dx = grad[0] if cache["squeeze"] else grad
        return dx, dtheta

    def input_grad(self, cache, dy: np.ndarray) -> np.ndarray:
        """Gradient with respect to the input only (skips parameter grads)."""
        theta = cache["theta"]
        dy = np.atleast_2d(np.asarray(dy, dtype=self.dtype))
        grad = dy
        for l in range(self.n_layers - 1, -1, -1):
            act = self._layer_act(l)
            da = grad * _act_prime(act, cache["pre"][l], cache["post"][l])
            grad = da @ self.weight(l, theta)
        return grad[0] if cache["squeeze"] else grad

    def double_backward(self, cache, v: np.ndarray, rbar: np.ndarray | float = 1.0):
        """Differentiate h = sum(rbar * (J_x f)(v)) with respect to parameters.

        Propagates the forward-mode tangent v alongside the cached primal,
        then reverses through both. Returns (Ry, dtheta, dv, dx) where Ry is
        the per-sample directional derivative of the output along v; dtheta,
        dv, dx are gradients of h. This is the piece that lets the gradient
        penalty (a norm of input gradients) be minimized by Adam: with
        v = stopgrad(input gradient) and rbar = 2/B, dtheta is exactly
        d/dtheta of mean ||grad_x f||^2.
        """
        theta = cache["theta"]
        v = np.atleast_2d(np.asarray(v, dtype=self.dtype))
        # forward tangent sweep
        tangents_in = [v]     # tangent of each layer input
        tangents_pre = []     # tangent of each pre-activation
        tv = v
        for l in range(self.n_layers):
            ta = tv @ self.weight(l, theta).T
            tangents_pre.append(ta)
            act = self._layer_act(l)
            tv = ta * _act_prime(act, cache["pre"][l], cache["post"][l])
            if l < self.n_layers - 1:
                tangents_in.append(tv)
        Ry = tv

        # reverse sweep over (primal, tangent) pairs
        rbar_arr = np.asarray(rbar, dtype=self.dtype)
        vbar = np.broadcast_to(rbar_arr, Ry.shape).astype(self.dtype)
        xbar = np.zeros_like(Ry)
        dtheta = np.zeros(self.n_params, dtype=self.dtype)
        for l in range(self.n_layers - 1, -1, -1):
            act = self._layer_act(l)
            sp = _act_prime(act, cache["pre"][l], cache["post"][l])
            spp = _act_second(act, cache["pre"][l], cache["post"][l])
            abar = xbar * sp + vbar * spp * tangents_pre[l]
            ta_bar = vbar * sp
            W = self.weight(l, theta)
            _, wsl, _ = self.segments[2 * l]
            _, bsl, _ = self.segments[2 * l + 1]
            dtheta[wsl] += (abar.T @ cache["xs"][l] + ta_bar.T @ tangents_in[l]).ravel()
            dtheta[bsl] += abar.sum(axis=0)
            xbar = abar @ W
            vbar = ta_bar @ W
        if cache["squeeze"]:
            return Ry[0], dtheta, vbar[0], xbar[0]
        return Ry, dtheta, vbar, xbar


# ---------------------------------------------------------------------------
# Unit-sphere utilities.

SPHERE_EPS = 1e-8


def project_sphere(v: np.ndarray) -> np.ndarray:
    """v / ||v|| along the last axis. Near-zero norm means the upstream
    encoder collapsed; refuse loudly instead of emitting garbage."""
    v = np.asarray(v)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < SPHERE_EPS):
        raise ValueError("project_sphere: input norm below 1e-8 (encoder collapse)")
    return v / norm


def project_sphere_backward(v: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Tangent-space Jacobian: dv = (dz - z (z . dz)) / ||v||."""
    v = np.asarray(v)
    dz = np.asarray(dz)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    z = v / norm
    radial = np.sum(z * dz, axis=-1, keepdims=True)
    return (dz - z * radial) / norm


def sample_sphere_uniform(d: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform draws on the unit sphere (Gaussian then normalize)."""
    if d < 2:
        raise ValueError("sphere dimension must be >= 2")
    shape = (d,) if n is None else (n, d)
    g = rng.standard_normal(shape)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Adam.

@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    name: str = ""

    @staticmethod
    def init(n_params: int, lr: float, name: str = "", dtype="float32") -> "AdamState":
        return AdamState(lr=lr, m=np.zeros(n_params, dtype=dtype),
                         v=np.zeros(n_params, dtype=dtype), name=name)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns new params, mutates state."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError(f"adam_step[{state.name}]: size mismatch "
                         f"{params.shape} vs {grad.shape} vs {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"adam_step[{state.name}]: non-finite gradient")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    return params - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# Finite-difference verification.

def grad_check(fn, x0: np.ndarray, rng: np.random.Generator,
               probes: int = 20, eps: float = 1e-4) -> dict:
    """Central-difference check of fn: x -> (scalar, grad) at random coords.

    Returns {'max_rel_error', 'probes': [(index, analytic, numeric, err)]}.
    Run in float64: call with x0.dtype == float64 and an fn built from
    float64 modules, otherwise FD noise swamps the comparison.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    _, grad = fn(x0)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x0.shape:
        raise ValueError(f"grad shape {grad.shape} != x shape {x0.shape}")
    idx = rng.choice(x0.size, size=min(probes, x0.size), replace=False)
    rows = []
    max_err = 0.0
    for i in idx:
        xp = x0.copy()
        xp.flat[i] += eps
        xm = x0.copy()
        xm.flat[i] -= eps
        fp, _ = fn(xp)
        fm, _ = fn(xm)
        numeric = (fp - fm) / (2 * eps)
        analytic = grad.flat[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        rows.append((int(i), float(analytic), float(numeric), float(err)))
        max_err = max(max_err, err)
    return {"max_rel_error": max_err, "probes": rows}


def mlp_loss_fn(mlp: Mlp, x: np.ndarray, weights: np.ndarray):
    """Adapter for grad_check over parameters: theta -> (sum(w*y), dtheta)."""
    def fn(theta):
        y, cache = mlp.forward(x, theta=theta.astype(mlp.dtype))
        _, dtheta = mlp.backward(cache, weights)
        return float(np.sum(np.atleast_2d(y) * weights)), dtheta.astype(np.float64)
    return fn


def mlp_input_fn(mlp: Mlp, x_shape: tuple, weights: np.ndarray):
    """Adapter for grad_check over inputs: x_flat -> (sum(w*y), dx_flat)."""
    def fn(x_flat):
        x = x_flat.reshape(x_shape).astype(mlp.dtype)
        y, cache = mlp.forward(x)
        dx, _ = mlp.backward(cache, weights)
        return float(np.sum(np.atleast_2d(y) * weights)), np.asarray(dx, dtype=np.float64).ravel()
    return fn
