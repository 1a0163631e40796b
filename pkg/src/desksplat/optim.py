"""Parameter updates: Adam with per-group learning rates, and the two fixed
small MLP shapes (mask head, affine head) with hand-written reverse mode.

Only these MLPs and the rasterizer tape are differentiable; there is no
general autodiff graph in this package.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .errors import ContractError


@dataclass
class AdamState:
    """Adam moments for one named parameter group (a list of arrays)."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    skipped: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def ensure_slots(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]


def adam_step(state: AdamState, params, grads, lr: Optional[float] = None):
    """One Adam update with bias correction; returns new parameter arrays.

    A non-finite gradient anywhere in the group skips the whole group's
    update (moments untouched), bumps ``state.skipped`` and emits a counted
    warning. Quaternion renormalization is up to the caller.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ContractError("adam_step: params/grads length mismatch")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ContractError("adam_step: params/grads shape mismatch")
    state.ensure_slots(params)
    if any(not np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        warnings.warn(
            f"adam_step: non-finite gradient, skipping update (total skipped={state.skipped})",
            RuntimeWarning,
        )
        return params
    if lr is None:
        lr = state.lr
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


# ---------------------------------------------------------------------------
# Small MLPs

HEADS = ("linear", "sigmoid", "affine")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[neg])
    out[neg] = ex / (1.0 + ex)
    return out


@dataclass
class SmallMlp:
    """Fully-connected net: ReLU on hidden layers, configurable head.

    heads:
      * ``sigmoid`` - per-row scalar/vector in (0,1) (transient mask).
      * ``affine``  - output dim 6 split into (alpha = 1 + raw[:3],
        beta = raw[3:]); with a zero-initialized last layer this emits the
        identity transform (alpha=1, beta=0) exactly at initialization.
      * ``linear``  - raw output.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    head: str = "linear"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ContractError(f"unknown mlp head {self.head!r}")
        for i in range(len(self.weights) - 1):
            if self.weights[i + 1].shape[1] != self.weights[i].shape[0]:
                raise ContractError("mlp layer dims do not chain")

    @property
    def layer_dims(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def create(cls, dims: List[int], head: str, rng: np.random.Generator,
               zero_last: bool = True) -> "SmallMlp":
        """He-initialized hidden layers; last layer zeroed by default so the
        sigmoid head starts at 0.5 and the affine head at identity."""
        ws, bs = [], []
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            last = i == len(dims) - 2
            if last and zero_last:
                w = np.zeros((dims[i + 1], fan_in))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(dims[i + 1], fan_in))
            ws.append(w)
            bs.append(np.zeros(dims[i + 1]))
        return cls(weights=ws, biases=bs, head=head)

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, flat: List[np.ndarray]) -> None:
        ws, bs = [], []
        it = iter(flat)
        for _ in range(len(self.biases)):
            ws.append(next(it))
            bs.append(next(it))
        self.weights, self.biases = ws, bs

    def forward(self, x: np.ndarray):
        """Forward pass; returns head output(s) without a tape."""
        out, _ = self.forward_backward(x)
        return out

    def forward_backward(self, x: np.ndarray):
        """Forward pass plus a tape closure.

        Returns ``(output, backward)`` where ``backward(d_out)`` yields a
        dict with ``weights``/``biases`` gradient lists and ``x`` for the
        input gradient. For the affine head ``output`` is ``(alpha, beta)``
        and ``d_out`` must be ``(d_alpha, d_beta)``.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
        if x.shape[1] != self.in_dim:
            raise ContractError(
                f"mlp input dim {x.shape[1]} != expected {self.in_dim}")
        acts = [x]
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if i < n_layers - 1:
                h = np.maximum(z, 0.0)
            else:
                h = z
            acts.append(h)
        z_last = acts[-1]

        if self.head == "sigmoid":
            out = _sigmoid(z_last)
        elif self.head == "affine":
            if self.out_dim != 6:
                raise ContractError("affine head requires output dim 6")
            out = (1.0 + z_last[:, :3], z_last[:, 3:].copy())
        else:
            out = z_last

        def backward(d_out):
            if self.head == "sigmoid":
                s = out
                dz = np.asarray(d_out, dtype=np.float64).reshape(s.shape) * s * (1.0 - s)
            elif self.head == "affine":
                d_alpha, d_beta = d_out
                dz = np.concatenate(
                    [np.asarray(d_alpha, dtype=np.float64),
                     np.asarray(d_beta, dtype=np.float64)], axis=1)
            else:
                dz = np.asarray(d_out, dtype=np.float64).reshape(z_last.shape)
            d_ws, d_bs = [None] * n_layers, [None] * n_layers
            for i in range(n_layers - 1, -1, -1):
                a_in = acts[i]
                d_ws[i] = dz.T @ a_in
                d_bs[i] = dz.sum(axis=0)
                dx = dz @ self.weights[i]
                if i > 0:
                    dx = dx * (acts[i] > 0.0)
                dz = dx
            return {"weights": d_ws, "biases": d_bs, "x": dz}

        if squeeze:
            if self.head == "affine":
                out = (out[0][0], out[1][0])
            else:
                out = out[0]
        return out, backward


def mlp_forward_backward(mlp: SmallMlp, x: np.ndarray):
    """Module-level alias mirroring the op name."""
    return mlp.forward_backward(x)


class MlpAdam:
    """Adam wrapper updating a SmallMlp in place."""

    def __init__(self, mlp: SmallMlp, lr: float):
        self.mlp = mlp
        self.state = AdamState(lr=lr)

    def step(self, d_weights, d_biases):
        params = []
        grads = []
        for w, b, dw, db in zip(self.mlp.weights, self.mlp.biases, d_weights, d_biases):
            params += [w, b]
            grads += [dw, db]
        new = adam_step(self.state, params, grads)
        ws, bs = [], []
        it = iter(new)
        for _ in self.mlp.weights:
            ws.append(next(it))
            bs.append(next(it))
        self.mlp.weights, self.mlp.biases = ws, bs
