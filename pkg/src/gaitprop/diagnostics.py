"""Correspondence diagnostics: update angles against BP, a finite-difference
gradient oracle and target-distance traces."""

from dataclasses import dataclass

import numpy as np

from .credit import UpdateSet, cross_entropy
from .errors import GaitPropError, UndefinedAngleError
from .linalg import l2_norm

MAX_FD_PARAMS = 100_000


@dataclass(frozen=True)
class AngleRecord:
    step: int
    layer: object  # int index, or "all" for the whole network
    algorithm: str
    angle: float  # degrees; nan when undefined (zero-norm update)

    @property
    def missing(self):
        return not np.isfinite(self.angle)


def update_angle(u, v):
    """Angle in degrees between two tensors treated as flat vectors."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"cannot compare updates of sizes {u.size} and {v.size}")
    nu, nv = l2_norm(u), l2_norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedAngleError("angle is undefined for a zero-norm update")
    # Equivalent to arccos of the cosine, but well conditioned near 0 and 180
    # degrees where arccos loses about half the significant digits.
    uh, vh = u / nu, v / nv
    return float(np.degrees(2.0 * np.arctan2(l2_norm(uh - vh), l2_norm(uh + vh))))


def _flat(update, include_bias):
    if include_bias:
        return np.concatenate([update["W"].ravel(), update["b"].ravel()])
    return update["W"].ravel()


def _angle_or_nan(u, v):
    try:
        return update_angle(u, v)
    except UndefinedAngleError:
        return float("nan")


def angle_report(alg_updates, ref_updates, step, include_bias=False):
    """One :class:`AngleRecord` per layer plus one for the whole network.

    Zero-norm updates give records with a ``nan`` angle (missing) rather
    than an error, so a run keeps logging.
    """
    if len(alg_updates) != len(ref_updates):
        raise ValueError("update sets have different depths")
    records = []
    flat_a, flat_r = [], []
    for l, (ua, ur) in enumerate(zip(alg_updates.updates, ref_updates.updates)):
        fa, fr = _flat(ua, include_bias), _flat(ur, include_bias)
        flat_a.append(fa)
        flat_r.append(fr)
        records.append(AngleRecord(step, l, alg_updates.algorithm, _angle_or_nan(fa, fr)))
    whole = _angle_or_nan(np.concatenate(flat_a), np.concatenate(flat_r))
    records.append(AngleRecord(step, "all", alg_updates.algorithm, whole))
    return records


def finite_difference_grads(net, inputs, labels, step_size=1e-6):
    """Central-difference gradient of the mean cross-entropy, as an update.

    Perturbs every parameter in turn, so it is restricted to networks with
    at most ``MAX_FD_PARAMS`` parameters. The network is restored exactly.
    """
    total = net.param_count()
    if total > MAX_FD_PARAMS:
        raise GaitPropError(f"refusing finite differences over {total} parameters (limit {MAX_FD_PARAMS})")
    labels = np.asarray(labels, dtype=np.float64)

    def loss():
        return cross_entropy(net.forward(inputs).logits, labels)

    updates = []
    for layer in net.layers:
        layer_up = {}
        for name, p in layer.params().items():
            g = np.zeros_like(p, dtype=np.float64)
            flat_p = p.reshape(-1)
            flat_g = g.reshape(-1)
            for i in range(flat_p.size):
                orig = flat_p[i]
                flat_p[i] = orig + step_size
                up = loss()
                flat_p[i] = orig - step_size
                down = loss()
                flat_p[i] = orig
                flat_g[i] = (up - down) / (2.0 * step_size)
            layer_up[name] = -g
        updates.append(layer_up)
    return UpdateSet(updates, "fd")


def target_distance_trace(state):
    """Per-layer ``||a_l - t_l||`` (whole batch) recorded by a GP backward pass."""
    return list(state.distances)


def scaled_distances(state):
    """Per-layer ``gamma_l * ||a_l - t_l||**norm_power``; equals eta in normalized mode."""
    return [g * d**state.norm_power for g, d in zip(state.gammas, state.distances)]
