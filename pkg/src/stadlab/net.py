"""Small feed-forward networks with analytic derivatives, plus optimizers.

Everything the training loops need is computed in closed form with numpy:
forward passes, full input Jacobians, Jacobian-vector products, input
gradients of scalar heads, and parameter gradients. Parameter gradients
cover two patterns:

- ``param_grad_forward``: d/dtheta of sum_i <f(x_i), a_i> (plain reverse
  accumulation), enough for every regression loss in the package;
- ``param_grad_input_grad``: d/dtheta of sum_i <grad_x f(x_i), u_i> for
  scalar heads (reverse accumulation through a forward-mode tangent pass),
  the second-order pattern required by losses that contain input gradients.

Checkpoint byte layout (version 1): one UTF-8 JSON header line terminated
by ``\\n``, then the flattened parameters as little-endian IEEE-754 float64
in layer order W0, b0, W1, b1, ... with C-order raveling of each matrix.
"""

import json
from typing import List, Optional, Tuple

import numpy as np

from ._rng import child_rng


class CorruptModel(RuntimeError):
    """Network parameters contain NaN or Inf."""


class ShapeError(ValueError):
    """Operation requires a different input/output dimensionality."""


# --- activations: value, first and second derivative ----------------------

def _tanh(z):
    return np.tanh(z)


def _tanh_d(z):
    return 1.0 - np.tanh(z) ** 2


def _tanh_dd(z):
    th = np.tanh(z)
    return -2.0 * th * (1.0 - th * th)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _silu(z):
    return z * _sigmoid(z)


def _silu_d(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _silu_dd(z):
    s = _sigmoid(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


_ACTIVATIONS = {
    "tanh": (_tanh, _tanh_d, _tanh_dd),
    "silu": (_silu, _silu_d, _silu_dd),
}

TIME_EMBEDDINGS = ("none", "append_log_t", "append_raw_t")


class FieldNet:
    """MLP mapping (x, t, context) to a vector field value or a scalar.

    The time coordinate, when enabled, is appended to the input as ``log t``
    (default) or raw ``t``; context coordinates are appended after it.

    Parameters
    ----------
    x_dim : int
        Dimension of the spatial input x.
    out_dim : int
        Output dimension; D for fields and scores, 1 for scalar heads.
    hidden : sequence of int
        Hidden layer widths.
    activation : {"tanh", "silu"}
    time_embedding : {"none", "append_log_t", "append_raw_t"}
    context_dim : int
        Number of conditioning coordinates (0 disables).
    seed : int
        Initialization seed. Weights are scaled-uniform fan-in,
        U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases start at zero.
    init_scale : float, optional
        Multiplier on the init range; 0 gives an exactly zero network.
    """

    def __init__(
        self,
        x_dim: int,
        out_dim: int,
        hidden,
        activation: str = "tanh",
        time_embedding: str = "append_log_t",
        context_dim: int = 0,
        seed: int = 0,
        init_scale: float = 1.0,
    ):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if time_embedding not in TIME_EMBEDDINGS:
            raise ValueError(f"unknown time embedding {time_embedding!r}")
        self.x_dim = int(x_dim)
        self.out_dim = int(out_dim)
        self.activation = activation
        self.time_embedding = time_embedding
        self.context_dim = int(context_dim)
        self.in_dim = self.x_dim + (0 if time_embedding == "none" else 1) + self.context_dim
        self.layer_dims = [self.in_dim] + [int(h) for h in hidden] + [self.out_dim]

        rng = child_rng(seed, "fieldnet-init")
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            bound = init_scale * np.sqrt(1.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self._params_ok = True

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> List[np.ndarray]:
        """Alternating [W0, b0, W1, b1, ...] views (not copies)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def zero_like_parameters(self) -> List[np.ndarray]:
        return [np.zeros_like(p) for p in self.parameters()]

    def mark_parameters_dirty(self):
        self._params_ok = False

    def _check_parameters(self):
        if not self._params_ok:
            for p in self.parameters():
                if not np.all(np.isfinite(p)):
                    raise CorruptModel("network parameters contain non-finite values")
            self._params_ok = True

    # -- input assembly -----------------------------------------------------

    def _assemble(self, x, t, c):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.shape[1] != self.x_dim:
            raise ShapeError(f"x has dim {X.shape[1]}, expected {self.x_dim}")
        cols = [X]
        if self.time_embedding != "none":
            if t is None:
                raise ShapeError("net expects a time input")
            tt = np.asarray(t, dtype=float) * np.ones(X.shape[0])
            if self.time_embedding == "append_log_t":
                if np.any(tt <= 0):
                    raise ValueError("log-time embedding needs t > 0")
                tt = np.log(tt)
            cols.append(tt[:, None])
        if self.context_dim > 0:
            if c is None:
                raise ShapeError("net expects a context input")
            C = np.asarray(c, dtype=float)
            if C.ndim == 1:
                C = np.broadcast_to(C, (X.shape[0], C.shape[0]))
            if C.shape[1] != self.context_dim:
                raise ShapeError(f"context has dim {C.shape[1]}, expected {self.context_dim}")
            cols.append(C)
        return np.concatenate(cols, axis=1), single

    def _pad_tangent(self, U, batch):
        """Embed an x-space tangent into the full input space (t, c fixed)."""
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = np.broadcast_to(U, (batch, U.shape[0]))
        if U.shape[1] != self.x_dim:
            raise ShapeError(f"tangent has dim {U.shape[1]}, expected {self.x_dim}")
        pad = self.in_dim - self.x_dim
        if pad == 0:
            return U
        return np.concatenate([U, np.zeros((U.shape[0], pad))], axis=1)

    # -- forward and derivatives --------------------------------------------

    def _layers(self, H0):
        """Forward pass caches: inputs h[l] to each layer and preacts a[l]."""
        act = _ACTIVATIONS[self.activation][0]
        h = [H0]
        a = []
        n_layers = len(self.weights)
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h[-1] @ W.T + b
            a.append(z)
            if l < n_layers - 1:
                h.append(act(z))
        return h, a

    def forward(self, x, t=None, c=None):
        """Evaluate the network; output shape follows the input batch shape."""
        self._check_parameters()
        H0, single = self._assemble(x, t, c)
        _, a = self._layers(H0)
        y = a[-1]
        if not np.all(np.isfinite(y)):
            raise CorruptModel("network produced non-finite output")
        return y[0] if single else y

    def jacobian(self, x, t=None, c=None):
        """Full d output / d x matrix, shape (..., out_dim, x_dim)."""
        self._check_parameters()
        H0, single = self._assemble(x, t, c)
        _, a = self._layers(H0)
        d_act = _ACTIVATIONS[self.activation][1]
        B = H0.shape[0]
        n_layers = len(self.weights)
        M = np.broadcast_to(self.weights[0][:, : self.x_dim], (B,) + self.weights[0][:, : self.x_dim].shape)
        if n_layers > 1:
            M = d_act(a[0])[:, :, None] * M
            for l in range(1, n_layers):
                M = np.matmul(self.weights[l][None], M)
                if l < n_layers - 1:
                    M = d_act(a[l])[:, :, None] * M
        return M[0] if single else M

    def jvp(self, x, t=None, c=None, tangent=None):
        """Jacobian-vector product d output / d x . tangent, without
        materializing the Jacobian."""
        self._check_parameters()
        H0, single = self._assemble(x, t, c)
        _, a = self._layers(H0)
        d_act = _ACTIVATIONS[self.activation][1]
        U = self._pad_tangent(tangent, H0.shape[0])
        d = U
        n_layers = len(self.weights)
        for l, W in enumerate(self.weights):
            d = d @ W.T
            if l < n_layers - 1:
                d = d_act(a[l]) * d
        return d[0] if single else d

    def input_gradient(self, x, t=None, c=None):
        """grad_x of a scalar head, by reverse accumulation."""
        if self.out_dim != 1:
            raise ShapeError("input_gradient needs a scalar-output network")
        self._check_parameters()
        H0, single = self._assemble(x, t, c)
        _, a = self._layers(H0)
        d_act = _ACTIVATIONS[self.activation][1]
        B = H0.shape[0]
        adj = np.broadcast_to(self.weights[-1][0], (B, self.layer_dims[-2]))
        for l in range(len(self.weights) - 2, -1, -1):
            adj = (adj * d_act(a[l])) @ self.weights[l]
        g = adj[:, : self.x_dim]
        return g[0] if single else g

    def value_and_input_gradient(self, x, t=None, c=None):
        """Scalar head value and its input gradient from one shared pass."""
        if self.out_dim != 1:
            raise ShapeError("value_and_input_gradient needs a scalar-output network")
        self._check_parameters()
        H0, single = self._assemble(x, t, c)
        _, a = self._layers(H0)
        d_act = _ACTIVATIONS[self.activation][1]
        B = H0.shape[0]
        adj = np.broadcast_to(self.weights[-1][0], (B, self.layer_dims[-2]))
        for l in range(len(self.weights) - 2, -1, -1):
            adj = (adj * d_act(a[l])) @ self.weights[l]
        val = a[-1][:, 0]
        g = adj[:, : self.x_dim]
        return (val[0], g[0]) if single else (val, g)


# --- parameter gradients ----------------------------------------------------

def param_grad_forward(net: FieldNet, x, t, c, adjoint) -> List[np.ndarray]:
    """Gradient wrt parameters of sum_i <net(x_i), adjoint_i>.

    ``adjoint`` has shape (B, out_dim). Returns gradients in the order of
    ``net.parameters()``.
    """
    H0, _ = net._assemble(x, t, c)
    h, a = net._layers(H0)
    d_act = _ACTIVATIONS[net.activation][1]
    A = np.asarray(adjoint, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.shape != a[-1].shape:
        raise ShapeError(f"adjoint shape {A.shape} does not match output {a[-1].shape}")
    gW = [np.zeros_like(W) for W in net.weights]
    gb = [np.zeros_like(b) for b in net.biases]
    adj = A
    for l in range(len(net.weights) - 1, -1, -1):
        gW[l] += adj.T @ h[l]
        gb[l] += adj.sum(axis=0)
        if l > 0:
            adj = (adj @ net.weights[l]) * d_act(a[l - 1])
    out = []
    for W, b in zip(gW, gb):
        out.extend([W, b])
    return out


def param_grad_input_grad(net: FieldNet, x, t, c, tangents) -> List[np.ndarray]:
    """Gradient wrt parameters of sum_i <grad_x net(x_i), u_i>, scalar head.

    Reverse accumulation through the forward-mode pass that computes the
    directional derivative <grad_x f, u>; this is the only second-order
    pattern the distillation objective needs, so no general tape is kept.
    """
    if net.out_dim != 1:
        raise ShapeError("param_grad_input_grad needs a scalar-output network")
    H0, _ = net._assemble(x, t, c)
    h, a = net._layers(H0)
    act_d, act_dd = _ACTIVATIONS[net.activation][1], _ACTIVATIONS[net.activation][2]
    B = H0.shape[0]
    U = net._pad_tangent(tangents, B)

    # forward tangent pass, caching hd[l] (tangent of layer input) and ad[l]
    n_layers = len(net.weights)
    hd = [U]
    ad = []
    for l, W in enumerate(net.weights):
        zd = hd[-1] @ W.T
        ad.append(zd)
        if l < n_layers - 1:
            hd.append(act_d(a[l]) * zd)

    gW = [np.zeros_like(W) for W in net.weights]
    gb = [np.zeros_like(b) for b in net.biases]

    # output layer: objective s = sum_i (hd[-1] @ W_out^T); no bias term
    gW[-1] += hd[-1].sum(axis=0)[None, :]
    adj_hd = np.broadcast_to(net.weights[-1][0], (B, net.layer_dims[-2]))
    adj_h = np.zeros((B, net.layer_dims[-2]))

    for l in range(n_layers - 2, -1, -1):
        sp = act_d(a[l])
        spp = act_dd(a[l])
        adj_ad = adj_hd * sp
        adj_a = adj_hd * spp * ad[l] + adj_h * sp
        gW[l] += adj_a.T @ h[l] + adj_ad.T @ hd[l]
        gb[l] += adj_a.sum(axis=0)
        adj_h = adj_a @ net.weights[l]
        adj_hd = adj_ad @ net.weights[l]

    out = []
    for W, b in zip(gW, gb):
        out.extend([W, b])
    return out


# --- optimizer ---------------------------------------------------------------

class Optimizer:
    """Adam / AdamW with gradient clipping and a learning-rate schedule.

    Schedules: ``constant`` holds lr_max; ``cosine`` anneals lr_max ->
    lr_min over total_steps; ``step_halving`` halves lr_max until it
    reaches lr_min, with halvings spread evenly over total_steps.
    """

    def __init__(
        self,
        kind: str = "adam",
        lr_max: float = 1e-3,
        lr_min: Optional[float] = None,
        schedule: str = "constant",
        total_steps: int = 1,
        clip_norm: Optional[float] = 1.0,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if schedule not in ("constant", "step_halving", "cosine"):
            raise ValueError(f"unknown schedule {schedule!r}")
        self.kind = kind
        self.lr_max = float(lr_max)
        self.lr_min = float(lr_min) if lr_min is not None else float(lr_max)
        self.schedule = schedule
        self.total_steps = max(1, int(total_steps))
        self.clip_norm = clip_norm
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m: Optional[List[np.ndarray]] = None
        self._v: Optional[List[np.ndarray]] = None

    def learning_rate(self, step: Optional[int] = None) -> float:
        k = self.step_count if step is None else step
        if self.schedule == "constant":
            return self.lr_max
        if self.schedule == "cosine":
            frac = min(1.0, k / self.total_steps)
            return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + np.cos(np.pi * frac))
        # step_halving
        n_halvings = max(1, int(np.ceil(np.log2(self.lr_max / self.lr_min)))) if self.lr_min < self.lr_max else 1
        interval = max(1, self.total_steps // (n_halvings + 1))
        return max(self.lr_min, self.lr_max * 0.5 ** (k // interval))

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> float:
        """One update, in place. Returns the global gradient norm."""
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        scale = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm:
            scale = self.clip_norm / (gnorm + 1e-12)
        lr = self.learning_rate()
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self._m, self._v):
            gs = g * scale
            m *= b1
            m += (1.0 - b1) * gs
            v *= b2
            v += (1.0 - b2) * gs * gs
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.kind == "adamw" and self.weight_decay > 0.0:
                p -= lr * self.weight_decay * p
            p -= lr * update
        return gnorm


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def flatten_params(net: FieldNet) -> np.ndarray:
    return np.concatenate([p.ravel() for p in net.parameters()])


def set_flat_params(net: FieldNet, flat: np.ndarray):
    flat = np.asarray(flat, dtype=float)
    expected = sum(p.size for p in net.parameters())
    if flat.size != expected:
        raise ShapeError(f"parameter vector has {flat.size} entries, expected {expected}")
    i = 0
    for p in net.parameters():
        p[...] = flat[i : i + p.size].reshape(p.shape)
        i += p.size
    net.mark_parameters_dirty()


def save_checkpoint(net: FieldNet, path, schedule_spec_id: Optional[str] = None, metadata: Optional[dict] = None):
    """Write a version-1 checkpoint: JSON header line + float64 block."""
    flat = flatten_params(net)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "schedule_spec_id": schedule_spec_id,
        "x_dim": net.x_dim,
        "out_dim": net.out_dim,
        "hidden": net.layer_dims[1:-1],
        "layer_dims": net.layer_dims,
        "activation": net.activation,
        "time_embedding": net.time_embedding,
        "context_dim": net.context_dim,
        "n_params": int(flat.size),
        "metadata": metadata or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> Tuple[FieldNet, dict]:
    """Read a checkpoint; returns the reconstructed net and its header."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    net = FieldNet(
        x_dim=header["x_dim"],
        out_dim=header["out_dim"],
        hidden=header["hidden"],
        activation=header["activation"],
        time_embedding=header["time_embedding"],
        context_dim=header["context_dim"],
        init_scale=0.0,
    )
    flat = np.frombuffer(blob, dtype="<f8")
    if flat.size != header["n_params"]:
        raise ShapeError(f"checkpoint block has {flat.size} floats, header says {header['n_params']}")
    set_flat_params(net, flat)
    return net, header
