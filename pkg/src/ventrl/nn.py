"""Dense ReLU networks with hand-written gradients, plus the optimizer and
loss primitives the learners and evaluators share.

Arrays follow numpy conventions: a batch is ``(B, features)``. Any weight
may carry leading ensemble axes, ``(E, in, out)``; the same code path then
evaluates E independent networks at once via broadcasting ``matmul``.

Networks are float32 by default. Every operation preserves the dtype it is
given, so gradient checks can run the identical code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
TANH_EPS = 1e-6


class DimensionError(ValueError):
    """Raised when array shapes do not compose."""


def _t(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out broadcast leading axes (shared input fed to an ensemble).
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


@dataclass
class MlpCache:
    inputs: list
    masks: list


@dataclass
class Mlp:
    """ReLU hidden layers, identity output. ``weights[l]`` is ``(..., in, out)``."""

    weights: list
    biases: list

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, ensemble: int | None = None,
             dtype=np.float32) -> "Mlp":
        lead = () if ensemble is None else (ensemble,)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, lead + (fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(lead + (fan_out,), dtype=dtype))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[-2]] + [w.shape[-1] for w in self.weights]

    @property
    def ensemble(self) -> int | None:
        return self.weights[0].shape[0] if self.weights[0].ndim == 3 else None

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "Mlp":
        return Mlp([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def _check_input(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.weights[0].shape[-2]:
            raise DimensionError(
                f"input width {x.shape[-1]} != first layer width {self.weights[0].shape[-2]}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        h = x
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b[..., None, :]
            if l < last:
                h = np.maximum(h, 0)
        return h

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
        self._check_input(x)
        inputs, masks = [], []
        h = x
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b[..., None, :]
            if l < last:
                masks.append(z > 0)
                h = np.maximum(z, 0, out=z)
            else:
                h = z
        return h, MlpCache(inputs, masks)

    def backward(self, cache: MlpCache, grad_out: np.ndarray, need_input: bool = True) -> tuple[list, np.ndarray]:
        """Reverse pass. Returns ``(param_grads, input_grad)``; param grads are
        ordered like :meth:`params`. ``input_grad`` is None unless ``need_input``."""
        n = len(self.weights)
        d = grad_out
        gw, gb = [None] * n, [None] * n
        grad_in = None
        for l in reversed(range(n)):
            w = self.weights[l]
            gw[l] = _reduce_to(_t(cache.inputs[l]) @ d, w.shape)
            gb[l] = _reduce_to(d.sum(axis=-2), self.biases[l].shape)
            if l > 0:
                d = (d @ _t(w)) * cache.masks[l - 1]
            elif need_input:
                grad_in = _reduce_to(d @ _t(w), cache.inputs[0].shape)
        grads = []
        for a, b in zip(gw, gb):
            grads += [a, b]
        return grads, grad_in

    def input_grad(self, cache: MlpCache, seed: np.ndarray) -> tuple[np.ndarray, list]:
        """Gradient of ``sum(seed * out)`` w.r.t. the input, per ensemble member.

        Also returns the per-layer output-side deltas needed to differentiate
        that input gradient again w.r.t. the weights.
        """
        n = len(self.weights)
        deltas = [None] * n
        d = seed
        e = None
        for l in reversed(range(n)):
            deltas[l] = d
            e = d @ _t(self.weights[l])
            if l > 0:
                d = e * cache.masks[l - 1]
        return e, deltas

    def input_grad_backward(self, cache: MlpCache, deltas: list, upstream: np.ndarray) -> list:
        """Weight gradients of ``sum(upstream * input_grad)``.

        ReLU masks are locally constant, so the input gradient is multilinear
        in the weights and biases drop out; bias grads are returned as zeros.
        """
        n = len(self.weights)
        grads = []
        ebar = upstream
        for l in range(n):
            w = self.weights[l]
            gw = _reduce_to(_t(ebar) @ deltas[l], w.shape)
            grads += [gw, np.zeros_like(self.biases[l])]
            if l < n - 1:
                ebar = (ebar @ w) * cache.masks[l]
        return grads


def mlp_forward(params: Mlp, x: np.ndarray) -> np.ndarray:
    return params.forward(x)


def mlp_backward(params: Mlp, x: np.ndarray, upstream_grad: np.ndarray) -> tuple[list, np.ndarray]:
    out, cache = params.forward_cache(x)
    if upstream_grad.shape != out.shape:
        raise DimensionError(f"upstream grad {upstream_grad.shape} != output {out.shape}")
    return params.backward(cache, upstream_grad)


# --- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    m: list
    v: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: list, lr: float, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params: list, grads: list) -> list:
    """In-place Adam update with bias correction. Rejects non-finite grads."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; Adam update rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


def grad_norm(grads: list) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_grad_norm(grads: list, max_norm: float, per_member: bool = False) -> list:
    """Rescale so the global L2 norm is at most ``max_norm``.

    With ``per_member`` every ensemble member (leading axis) is clipped on its
    own, as if each were a separate network.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    if not per_member:
        norm = grad_norm(grads)
        if norm <= max_norm:
            return list(grads)
        scale = max_norm / (norm + 1e-12)
        return [g * np.asarray(scale, dtype=g.dtype) for g in grads]
    sq = sum(np.sum(np.square(g, dtype=np.float64).reshape(g.shape[0], -1), axis=1) for g in grads)
    norms = np.sqrt(sq)
    scale = np.where(norms > max_norm, max_norm / (norms + 1e-12), 1.0)
    return [g * scale.reshape((-1,) + (1,) * (g.ndim - 1)).astype(g.dtype) for g in grads]


def polyak_update(target: list, online: list, coeff: float) -> list:
    if not 0.0 < coeff <= 1.0:
        raise ValueError("Polyak coefficient must lie in (0, 1]")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise DimensionError(f"target {t.shape} vs online {o.shape}")
        t *= 1.0 - coeff
        t += coeff * o
    return target


# --- probability utilities ---------------------------------------------------


def logsumexp_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.size == 0:
        raise ValueError("logsumexp of an empty matrix")
    mx = m.max(axis=-1, keepdims=True)
    return (mx + np.log(np.exp(m - mx).sum(axis=-1, keepdims=True)))[..., 0]


def logsumexp_softmax(m: np.ndarray, overwrite: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Row logsumexp and softmax from a single exponentiation.

    Shifted values are floored at -80 before ``exp``: the dropped mass is
    below 1e-34 per entry, and float32 denormals (which are very slow) are
    never produced. With ``overwrite`` the softmax is written into ``m``.
    """
    mx = m.max(axis=-1, keepdims=True)
    e = np.subtract(m, mx, out=m if overwrite else None)
    np.maximum(e, -80.0, out=e)
    np.exp(e, out=e)
    s = e.sum(axis=-1, keepdims=True)
    e /= s
    return (mx + np.log(s))[..., 0], e


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    return logits - logsumexp_rows(logits)[..., None]


def normal_log_prob(x, mean, log_std):
    z = (x - mean) * np.exp(-log_std)
    return -0.5 * z * z - log_std - 0.5 * LOG_2PI


@dataclass
class GaussianHead:
    mean: np.ndarray
    log_std: np.ndarray
    log_std_min: float = -20.0
    log_std_max: float = 2.0

    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, self.log_std_min, self.log_std_max)

    def std(self) -> np.ndarray:
        return np.exp(self.clamped_log_std())


def tanh_gaussian_log_prob(head: GaussianHead, raw_sample: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squash a pre-tanh sample and return ``(tanh(u), log_prob)``.

    The log-density is the Gaussian density of ``u`` corrected by the tanh
    Jacobian, summed over the last axis.
    """
    u = np.asarray(raw_sample)
    squashed = np.tanh(u)
    lp = normal_log_prob(u, head.mean, head.clamped_log_std())
    lp = lp - np.log(1.0 - squashed * squashed + TANH_EPS)
    return squashed, lp.sum(axis=-1)


# --- losses ------------------------------------------------------------------


def expectile_weight(diff: np.ndarray, tau: float) -> np.ndarray:
    return np.abs(tau - (diff < 0).astype(diff.dtype))


def expectile_loss(diff: np.ndarray, tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise ValueError("expectile tau must lie in (0, 1)")
    diff = np.asarray(diff)
    return float(np.mean(expectile_weight(diff, tau) * diff.astype(np.float64) ** 2))


def expectile_loss_grad(diff: np.ndarray, tau: float) -> np.ndarray:
    diff = np.asarray(diff)
    return 2.0 * expectile_weight(diff, tau) * diff / diff.size


def quantile_midpoints(n: int, dtype=np.float32) -> np.ndarray:
    return ((np.arange(n) + 0.5) / n).astype(dtype)


def _quantile_terms(pred, target, taus, kappa):
    # u[b, i, j] = target_j - pred_i
    u = target[:, None, :] - pred[:, :, None]
    weight = np.abs(taus[None, :, None] - (u < 0))
    return u, weight


def quantile_huber_loss(pred_quantiles: np.ndarray, target_samples: np.ndarray,
                        taus: np.ndarray, kappa: float = 1.0) -> float:
    """Quantile-Huber objective averaged over every (quantile, target) pair."""
    u, weight = _quantile_terms(pred_quantiles, target_samples, taus, kappa)
    au = np.abs(u)
    huber = np.where(au <= kappa, 0.5 * u * u, kappa * (au - 0.5 * kappa))
    return float(np.mean(weight * huber / kappa, dtype=np.float64))


def quantile_huber_loss_grad(pred_quantiles: np.ndarray, target_samples: np.ndarray,
                             taus: np.ndarray, kappa: float = 1.0) -> np.ndarray:
    u, weight = _quantile_terms(pred_quantiles, target_samples, taus, kappa)
    dhuber = np.clip(u, -kappa, kappa)
    # d/dpred = -d/du
    g = -(weight * dhuber / kappa).sum(axis=2) / u.size
    return g.astype(pred_quantiles.dtype)
