"""Parameter storage and the layer set used by the BO/BTM/BSM architectures."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import autograd as ag
from .autograd import Tensor

MASK_VALUE = -1.0
INIT_SCALE = 0.05

_ACTIVATIONS = {
    "linear": lambda t: t,
    "sigmoid": ag.sigmoid,
    "tanh": ag.tanh,
    "gelu": ag.gelu,
}


class ParamStore:
    """Named trainable tensors plus their Adam moment buffers.

    Parameters are drawn from a seeded generator in creation order, so two
    stores built by the same code with the same seed are bit-identical.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def create(self, name: str, shape, init: str | float = "uniform") -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        shape = tuple(int(n) for n in shape)
        if any(n <= 0 for n in shape):
            raise ShapeError(f"{name}: non-positive size in {shape}")
        if init == "uniform":
            data = self._rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return sorted(self.params)

    def size(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reset_optimizer(self) -> None:
        self.m.clear()
        self.v.clear()
        self.step = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: self.params[name].data.copy() for name in self.names()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ShapeError(f"parameter sets differ: {sorted(missing)}")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self.params[name].shape:
                raise ShapeError(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name].data = value.copy()


# ------------------------------------------------------------------ layers


def dense(x, w, b, activation: str = "linear") -> Tensor:
    x = ag.as_tensor(x)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape} / bias {b.shape}")
    try:
        act = _ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    return act(ag.add(ag.matmul(x, w), b))


def padding_mask(x: np.ndarray, mask_value: float = MASK_VALUE) -> np.ndarray:
    """True for real timesteps, False where every feature equals ``mask_value``."""
    return ~np.all(x == mask_value, axis=-1)


def _lstm_direction(steps, mask, w_x, w_h, b, reverse, truncate, need_outputs):
    batch = mask.shape[0]
    u = w_h.shape[0]
    state = Tensor(np.zeros((batch, 2 * u)))
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    outputs = [None] * len(steps)
    zeros = None
    for n, t in enumerate(order):
        if truncate and n and n % truncate == 0:
            state = state.detach()
        active = mask[:, t]
        if not active.any():
            # fully padded step: state flows through untouched
            if need_outputs:
                zeros = zeros if zeros is not None else Tensor(np.zeros((batch, u)))
                outputs[t] = zeros
            continue
        new = lstm_cell(steps[t], state, w_x, w_h, b)
        if active.all():
            state = new
        else:
            state = ag.where(active[:, None], new, state)
        if need_outputs:
            h = ag.getitem(state, (slice(None), slice(0, u)))
            outputs[t] = h if active.all() else ag.where(active[:, None], h, 0.0)
    return state, outputs


def lstm_cell(x, state, w_x, w_h, b) -> Tensor:
    """Fused LSTM step: gates from ``x W_x + h W_h + b``, packed state ``[h, c]``.

    Gate order in the 4u axis: input, forget, candidate, output.
    """
    x, state = ag.as_tensor(x), ag.as_tensor(state)
    u = w_h.shape[0]
    h, c = state.data[:, :u], state.data[:, u:]
    z = x.data @ w_x.data + h @ w_h.data + b.data
    i = ag._sigmoid(z[:, :u])
    f = ag._sigmoid(z[:, u:2 * u])
    cand = np.tanh(z[:, 2 * u:3 * u])
    o = ag._sigmoid(z[:, 3 * u:])
    c_new = f * c + i * cand
    tc = np.tanh(c_new)
    out = np.concatenate([o * tc, c_new], axis=1)

    def backward(g):
        gh, gc = g[:, :u], g[:, u:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * cand * i * (1.0 - i),
            dc * c * f * (1.0 - f),
            dc * i * (1.0 - cand * cand),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        dstate = np.concatenate([dz @ w_h.data.T, dc * f], axis=1)
        return dz @ w_x.data.T, dstate, x.data.T @ dz, h.T @ dz, dz.sum(axis=0)

    return ag._make(out, (x, state, w_x, w_h, b), backward)


def bilstm(seq, mask: np.ndarray, forward_params, backward_params, *,
           truncate: int | None = None, return_sequences: bool = False):
    """Bidirectional LSTM over a (B, T, d) batch with a (B, T) boolean mask.

    ``seq`` may be a tensor or a list of T per-step (B, d) tensors (the
    output of a previous layer). Masked steps copy the state unchanged and
    emit zeros. Returns ``(final, outputs)`` where ``final`` is the (B, 2u)
    concatenation of both directions' last hidden state and ``outputs`` is a
    list of per-step (B, 2u) tensors when ``return_sequences`` is set.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ShapeError("empty sequence: a sample has no unmasked timestep")
    if isinstance(seq, (list, tuple)):
        steps = list(seq)
    else:
        seq = ag.as_tensor(seq)
        if seq.shape[:2] != mask.shape:
            raise ShapeError(f"bilstm: sequence {seq.shape} vs mask {mask.shape}")
        if seq.requires_grad:
            steps = [ag.getitem(seq, (slice(None), t, slice(None))) for t in range(seq.shape[1])]
        else:
            steps = [Tensor(seq.data[:, t, :]) for t in range(seq.shape[1])]
    u = forward_params[1].shape[0]
    fw_state, fw_out = _lstm_direction(steps, mask, *forward_params, False, truncate, return_sequences)
    bw_state, bw_out = _lstm_direction(steps, mask, *backward_params, True, truncate, return_sequences)
    final = ag.concat([
        ag.getitem(fw_state, (slice(None), slice(0, u))),
        ag.getitem(bw_state, (slice(None), slice(0, u))),
    ], axis=1)
    outputs = None
    if return_sequences:
        outputs = [ag.concat([a, b], axis=1) for a, b in zip(fw_out, bw_out)]
    return final, outputs


def bahdanau_attention(features, w, b, v) -> Tensor:
    """Additive attention weights over n features.

    ``score_i = v . tanh(f_i W + b)``; scalar features (B, n) are lifted to
    (B, n, 1). Returns softmax weights of shape (B, n).
    """
    f = ag.as_tensor(features)
    if f.ndim == 2:
        f = ag.reshape(f, f.shape + (1,))
    if f.shape[-1] != w.shape[0]:
        raise ShapeError(f"attention: feature width {f.shape[-1]} vs weights {w.shape}")
    hidden = ag.tanh(ag.add(ag.matmul(f, w), b))
    scores = ag.matmul(hidden, v)
    scores = ag.reshape(scores, scores.shape[:-1])
    return ag.softmax(scores, axis=-1)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    x = ag.as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ag.mul(x, keep)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = ag.mean(x, axis=-1, keepdims=True)
    xc = ag.sub(x, mu)
    var = ag.mean(ag.mul(xc, xc), axis=-1, keepdims=True)
    xhat = ag.div(xc, ag.sqrt(ag.add(var, eps)))
    return ag.add(ag.mul(xhat, gamma), beta)


def projection_block(x, params, *, training: bool = False, rng=None,
                     rate: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Dense -> GELU -> Dense -> Dropout -> LayerNorm.

    ``params`` is ``(w1, b1, w2, b2, gamma, beta)``.
    """
    w1, b1, w2, b2, gamma, beta = params
    h = ag.gelu(dense(x, w1, b1))
    h = dense(h, w2, b2)
    h = dropout(h, rate, rng, training)
    return layer_norm(h, gamma, beta, eps)


def bce_loss(p, y, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 labels ``y``."""
    p = ag.clip(p, eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    ll = ag.add(ag.mul(ag.log(p), y), ag.mul(ag.log(ag.sub(1.0, p)), 1.0 - y))
    return ag.mul(ag.mean(ll), -1.0)


# ------------------------------------------------------------ construction


def init_dense(store: ParamStore, name: str, n_in: int, n_out: int):
    return store.create(f"{name}.W", (n_in, n_out)), store.create(f"{name}.b", (n_out,))


def init_lstm(store: ParamStore, name: str, n_in: int, units: int):
    w_x = store.create(f"{name}.Wx", (n_in, 4 * units))
    w_h = store.create(f"{name}.Wh", (units, 4 * units))
    b = store.create(f"{name}.b", (4 * units,))
    b.data[units:2 * units] = 1.0  # forget-gate bias
    return w_x, w_h, b


def init_attention(store: ParamStore, name: str, n_in: int, hidden: int):
    return (store.create(f"{name}.W", (n_in, hidden)),
            store.create(f"{name}.b", (hidden,)),
            store.create(f"{name}.v", (hidden, 1)))


def init_projection(store: ParamStore, name: str, n_in: int, dim: int):
    w1, b1 = init_dense(store, f"{name}.dense1", n_in, dim)
    w2, b2 = init_dense(store, f"{name}.dense2", dim, dim)
    gamma = store.create(f"{name}.norm.gamma", (dim,), "ones")
    beta = store.create(f"{name}.norm.beta", (dim,), "zeros")
    return w1, b1, w2, b2, gamma, beta
