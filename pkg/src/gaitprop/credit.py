"""Credit assignment: BP, FA, TP and GAIT-prop (vanilla and normalized).

All algorithms read a :class:`~gaitprop.layers.ForwardCache` and return an
:class:`UpdateSet` holding *updates* (negative gradient direction, unit
learning rate). None of them touches the network parameters.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError, StaleCacheError
from .layers import activation_derivative
from .linalg import check_finite, l2_norm, orthogonal_init

ALGORITHMS = ("bp", "fa", "tp", "vgp", "gp")


@dataclass
class UpdateSet:
    updates: list
    algorithm: str
    step: int = 0

    def __len__(self):
        return len(self.updates)

    def __getitem__(self, l):
        return self.updates[l]

    def weights(self):
        return [u["W"] for u in self.updates]

    def scaled(self, c):
        return UpdateSet([{k: c * v for k, v in u.items()} for u in self.updates], self.algorithm, self.step)

    def check(self, net):
        for l, (u, layer) in enumerate(zip(self.updates, net.layers)):
            for name, p in layer.params().items():
                if u[name].shape != p.shape:
                    raise ShapeError(f"layer {l} update {name} has shape {u[name].shape}, expected {p.shape}")
                check_finite(u[name], f"update {name}", layer=l)
        return self


@dataclass
class FeedbackMatrices:
    """Fixed random feedback matrices for FA, one per layer.

    ``matrices[l]`` has the transposed shape of layer ``l``'s square weight
    matrix and replaces ``W_l^T`` when deltas leave layer ``l``. The first
    layer's matrix is never used but is kept for uniform indexing.
    """

    matrices: list
    seed: int

    @classmethod
    def for_network(cls, net, seed):
        mats = []
        for l, layer in enumerate(net.layers):
            n = layer.weight_matrix().shape[0]
            b = orthogonal_init(n, [int(seed), 7_000 + l], dtype=net.dtype)
            b.setflags(write=False)
            mats.append(b)
        return cls(mats, seed)

    def check(self, net):
        if len(self.matrices) != len(net.layers):
            raise ShapeError(f"{len(self.matrices)} feedback matrices for {len(net.layers)} layers")
        for l, (b, layer) in enumerate(zip(self.matrices, net.layers)):
            if b.shape != layer.weight_matrix().T.shape:
                raise ShapeError(f"feedback matrix {l} has shape {b.shape}, expected {layer.weight_matrix().T.shape}")


@dataclass
class TargetState:
    targets: list
    gammas: list
    distances: list
    mode: str
    eta: float = None
    gamma: float = None
    norm_power: int = 2


@dataclass
class OptimizerState:
    """Adam moments for every parameter, plus hyper-parameters."""

    m: list
    v: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_network(cls, net, **hypers):
        m = [{k: np.zeros_like(p) for k, p in layer.params().items()} for layer in net.layers]
        v = [{k: np.zeros_like(p) for k, p in layer.params().items()} for layer in net.layers]
        return cls(m, v, **hypers)


# ---------------------------------------------------------------------------
# loss and output target
# ---------------------------------------------------------------------------


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean categorical cross-entropy of softmax(logits) against one-hot labels."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return float(-(labels * log_p).sum(axis=-1).mean())


def one_hot(labels, n_classes, dtype=np.float64):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def output_target(a_L, labels, beta=1.0):
    """``a_L - beta * (softmax(a_L) - labels)``: one cross-entropy step away."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    a_L = np.asarray(a_L)
    labels = np.asarray(labels, dtype=a_L.dtype)
    if a_L.shape != labels.shape:
        raise ShapeError(f"output shape {a_L.shape} does not match labels {labels.shape}")
    return a_L - beta * (softmax(a_L) - labels)


# ---------------------------------------------------------------------------
# algorithms
# ---------------------------------------------------------------------------


def _check_cache(net, cache):
    if cache.version != net.version:
        raise StaleCacheError(
            f"forward cache is from parameter version {cache.version}, network is at {net.version}"
        )
    if len(cache) != len(net):
        raise ShapeError(f"cache depth {len(cache)} does not match network depth {len(net)}")


def _negated(grads):
    return {k: -g for k, g in grads.items()}


def _delta_backward(net, cache, labels, feedback, tag):
    _check_cache(net, cache)
    labels = np.asarray(labels, dtype=cache.logits.dtype)
    if labels.shape != cache.logits.shape:
        raise ShapeError(f"labels shape {labels.shape} does not match outputs {cache.logits.shape}")
    n = len(net)
    updates = [None] * n
    out = net.layers[-1]
    grad_full = out.embed(softmax(cache.logits) - labels, np.zeros_like(cache.a_full[-1]))
    for l in range(n - 1, -1, -1):
        layer = net.layers[l]
        delta = activation_derivative(cache.zs[l], layer.slope) * grad_full
        x = cache.layer_input(l)
        updates[l] = _negated(layer.weight_grads(delta, x))
        if l > 0:
            fb = None if feedback is None else feedback.matrices[l]
            grad_in = layer.backward_input(delta, fb)
            prev = net.layers[l - 1]
            grad_full = prev.embed(grad_in, np.zeros_like(cache.a_full[l - 1]))
    return UpdateSet(updates, tag).check(net)


def bp_backward(net, cache, labels):
    """Exact gradient of the mean cross-entropy, as an update (``-grad``).

    Auxiliary units get zero delta since they do not reach the loss.
    """
    return _delta_backward(net, cache, labels, None, "bp")


def fa_backward(net, cache, labels, feedback):
    """BP with the fixed matrices ``feedback`` in place of ``W^T``."""
    feedback.check(net)
    return _delta_backward(net, cache, labels, feedback, "fa")


def _full_target(net, cache, t_L):
    t_L = np.asarray(t_L, dtype=cache.a_full[-1].dtype)
    if t_L.shape == cache.a_full[-1].shape:
        return t_L
    if t_L.shape == cache.logits.shape:
        return net.layers[-1].embed(t_L, cache.a_full[-1])
    raise ShapeError(f"output target shape {t_L.shape} matches neither {cache.logits.shape} nor {cache.a_full[-1].shape}")


def _local_update(layer, z, a, t, x, lr):
    """Update from the layer-local quadratic loss ``0.5 ||a - t||^2``."""
    d = activation_derivative(z, layer.slope) * (a - t)
    grads = layer.weight_grads(d, x)
    return {k: -lr * g for k, g in grads.items()}


def tp_backward(net, cache, t_L, lr=1.0):
    """Target propagation through exact inverses, ``t_{l-1} = G_l(t_l)``."""
    _check_cache(net, cache)
    n = len(net)
    targets = [None] * n
    targets[-1] = _full_target(net, cache, t_L)
    updates = [None] * n
    for l in range(n - 1, -1, -1):
        layer = net.layers[l]
        x = cache.layer_input(l)
        updates[l] = _local_update(layer, cache.zs[l], cache.a_full[l], targets[l], x, lr)
        if l > 0:
            t_prev = net.invert_layer(l, targets[l], x)
            check_finite(t_prev, "propagated target", layer=l - 1)
            targets[l - 1] = net.layers[l - 1].embed(t_prev, cache.a_full[l - 1])
    return UpdateSet(updates, "tp").check(net)


def gp_backward(net, cache, t_L, mode="normalized", eta=None, gamma=None, norm_power=2, lr=1.0):
    """GAIT-prop backward pass.

    Walking from the output down, each layer is updated from its local
    quadratic loss, then a target for the layer below is obtained by
    inverting a small step from the activation towards the target,
    ``(I - eps) a + eps t`` with ``eps = gamma_l * D_l**2``. In vanilla mode
    ``gamma_l`` is the fixed ``gamma``; in normalized mode it is
    ``eta / ||a_l - t_l||**norm_power``, where the norm runs over the whole
    batch so a single factor applies per layer.

    Returns ``(UpdateSet, TargetState)``.
    """
    if mode == "vanilla":
        if gamma is None or not gamma > 0:
            raise ValueError("vanilla GP needs a fixed gamma > 0")
    elif mode == "normalized":
        if eta is None or not eta > 0:
            raise ValueError("normalized GP needs eta > 0")
        if norm_power not in (1, 2):
            raise ValueError("norm_power must be 1 or 2")
    else:
        raise ValueError(f"unknown GP mode {mode!r}")
    _check_cache(net, cache)
    n = len(net)
    targets = [None] * n
    targets[-1] = _full_target(net, cache, t_L)
    updates = [None] * n
    gammas = [0.0] * n
    distances = [0.0] * n
    for l in range(n - 1, -1, -1):
        layer = net.layers[l]
        x = cache.layer_input(l)
        z, a, t = cache.zs[l], cache.a_full[l], targets[l]
        updates[l] = _local_update(layer, z, a, t, x, lr)
        dist = l2_norm(a - t)
        distances[l] = dist
        if dist == 0.0:
            gamma_l = 0.0
        elif mode == "vanilla":
            gamma_l = float(gamma)
        else:
            gamma_l = eta / dist**norm_power
        if not np.isfinite(gamma_l):
            raise NumericalError(f"incremental factor is not finite (distance {dist:.3e})", layer=l)
        gammas[l] = gamma_l
        if l == 0:
            break
        prev = net.layers[l - 1]
        if gamma_l == 0.0:
            targets[l - 1] = np.array(cache.a_full[l - 1], copy=True)
            continue
        eps = gamma_l * activation_derivative(z, layer.slope) ** 2
        nudged = (1.0 - eps) * a + eps * t
        t_prev = net.invert_layer(l, nudged, x)
        check_finite(t_prev, "propagated target", layer=l - 1)
        targets[l - 1] = prev.embed(t_prev, cache.a_full[l - 1])
    state = TargetState(
        targets, gammas, distances, mode, eta=eta, gamma=gamma, norm_power=norm_power
    )
    return UpdateSet(updates, "gp" if mode == "normalized" else "vgp").check(net), state


# ---------------------------------------------------------------------------
# regularizer and optimizer
# ---------------------------------------------------------------------------


def orthogonality_update(W, kappa):
    """``-kappa (W W^T - I) W``, a descent step on ``1/4 ||W W^T - I||_F^2``."""
    W = np.asarray(W)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ShapeError(f"orthogonality regularizer needs a square matrix, got {W.shape}")
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    gram = W @ W.T
    gram[np.diag_indices_from(gram)] -= 1.0
    return -kappa * (gram @ W)


def ortho_residual(W):
    """``max |W W^T - I|``."""
    gram = W @ W.T
    gram[np.diag_indices_from(gram)] -= 1.0
    return float(np.abs(gram).max())


def with_orthogonality(net, updates, kappa):
    """Add the regularizer step for every layer's square weight matrix."""
    out = []
    for layer, u in zip(net.layers, updates.updates):
        reg = orthogonality_update(layer.weight_matrix(), kappa).reshape(u["W"].shape)
        out.append({"W": u["W"] + reg, "b": u["b"]})
    return UpdateSet(out, updates.algorithm, updates.step)


def adam_step(state, params, updates):
    """One bias-corrected Adam step with ``-update`` as the gradient.

    ``params`` is a list of ``{name: array}`` dicts (one per layer). Returns
    new parameter dicts; the moment accumulators in ``state`` advance in place.
    """
    if len(params) != len(updates) or len(params) != len(state.m):
        raise ShapeError("parameter, update and optimizer-state depths differ")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new = []
    for l, (p, u, m, v) in enumerate(zip(params, updates.updates, state.m, state.v)):
        layer_new = {}
        for name, value in p.items():
            g = -u[name]
            if g.shape != value.shape or m[name].shape != value.shape:
                raise ShapeError(f"layer {l} {name}: shape mismatch in adam_step")
            m[name] = state.beta1 * m[name] + (1.0 - state.beta1) * g
            v[name] = state.beta2 * v[name] + (1.0 - state.beta2) * g * g
            step = state.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + state.eps)
            layer_new[name] = check_finite(value - step, f"parameter {name}", layer=l)
        new.append(layer_new)
    return new
