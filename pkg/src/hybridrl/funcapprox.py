"""Function classes, the hybrid square-loss regression, and conjugate gradient."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyBatch, NonFiniteIterate, NonFiniteLoss

# ---------------------------------------------------------------------------
# feature maps


class OneHotFeatures:
    """Indicator features over a finite state-action grid."""

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = n_states
        self.n_actions = n_actions
        self.dim = n_states * n_actions

    def __call__(self, states, actions) -> np.ndarray:
        idx = np.asarray(states) * self.n_actions + np.asarray(actions)
        out = np.zeros((idx.size, self.dim))
        out[np.arange(idx.size), idx.ravel()] = 1.0
        return out


class ObsActionFeatures:
    """Concatenates an observation vector with a transformed action.

    ``action_transform`` defaults to a row-wise softmax, which is how the
    continuous comblock turns a real action into latent-action probabilities.
    """

    def __init__(self, obs_dim: int, action_dim: int, action_transform: str = "softmax"):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.action_transform = action_transform
        self.dim = obs_dim + action_dim

    def __call__(self, states, actions) -> np.ndarray:
        obs = np.asarray(states, dtype=float).reshape(-1, self.obs_dim)
        act = np.asarray(actions, dtype=float).reshape(-1, self.action_dim)
        if self.action_transform == "softmax":
            act = softmax(act)
        return np.concatenate([obs, act], axis=1)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# multilayer perceptron with manual backprop


class Mlp:
    """Fully connected tanh network whose parameters live in one flat vector."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 out_scale: float = 1.0, params: np.ndarray | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        self.shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes.append((fan_in, fan_out))
        self.n_params = sum(i * o + o for i, o in self.shapes)
        if params is not None:
            params = np.asarray(params, dtype=float)
            if params.shape != (self.n_params,):
                raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
            self.params = params.copy()
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            chunks = []
            for k, (i, o) in enumerate(self.shapes):
                w = rng.normal(size=(i, o)) / np.sqrt(i)
                if k == len(self.shapes) - 1:
                    w *= out_scale
                chunks += [w.ravel(), np.zeros(o)]
            self.params = np.concatenate(chunks)

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, params=self.params)

    def layers(self, params: np.ndarray | None = None):
        p = self.params if params is None else params
        out, pos = [], 0
        for i, o in self.shapes:
            W = p[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = p[pos:pos + o]
            pos += o
            out.append((W, b))
        return out

    def forward(self, x: np.ndarray, params: np.ndarray | None = None):
        acts = [np.asarray(x, dtype=float)]
        layers = self.layers(params)
        h = acts[0]
        for k, (W, b) in enumerate(layers):
            h = h @ W + b
            if k < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def jvp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Directional derivative of the outputs along parameter direction ``v``."""
        h = np.asarray(x, dtype=float)
        dh = np.zeros_like(h)
        layers = self.layers()
        tangents = self.layers(v)
        for k, ((W, b), (dW, db)) in enumerate(zip(layers, tangents)):
            z = h @ W + b
            dz = dh @ W + h @ dW + db
            if k < len(layers) - 1:
                h = np.tanh(z)
                dh = (1.0 - h ** 2) * dz
            else:
                h, dh = z, dz
        return dh

    def _backprop(self, acts, dout):
        """Yield (layer index, input activation, upstream grad) from the top."""
        layers = self.layers()
        delta = dout
        for k in range(len(layers) - 1, -1, -1):
            yield k, acts[k], delta
            if k > 0:
                delta = (delta @ layers[k][0].T) * (1.0 - acts[k] ** 2)

    def backward(self, acts, dout: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(dout * output)`` with respect to the flat parameters."""
        grads = [None] * len(self.shapes)
        for k, a_in, delta in self._backprop(acts, dout):
            grads[k] = np.concatenate([(a_in.T @ delta).ravel(), delta.sum(0)])
        return np.concatenate(grads)

    def per_sample_grads(self, acts, dout: np.ndarray) -> np.ndarray:
        """Row ``i`` is the gradient of ``dout[i] . output[i]``; shape (n, n_params)."""
        n = dout.shape[0]
        grads = [None] * len(self.shapes)
        for k, a_in, delta in self._backprop(acts, dout):
            gw = (a_in[:, :, None] * delta[:, None, :]).reshape(n, -1)
            grads[k] = np.concatenate([gw, delta], axis=1)
        return np.concatenate(grads, axis=1)


def mlp_gradient(net: Mlp, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of the mean squared error ``mean_i ||net(x_i) - y_i||^2``."""
    out, acts = net.forward(inputs)
    targets = np.asarray(targets, dtype=float).reshape(out.shape)
    return net.backward(acts, 2.0 * (out - targets) / out.shape[0])


class Adam:
    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# fitted functions


class _Fitted:
    features: Callable
    clip: tuple[float, float] | None

    def _clip(self, values: np.ndarray) -> np.ndarray:
        if self.clip is None:
            return values
        return np.clip(values, *self.clip)

    def __call__(self, states, actions) -> np.ndarray:
        return self.predict(states, actions)


class ZeroFn(_Fitted):
    """The all-zero function (initial iterate and terminal value)."""

    clip = None

    def predict(self, states, actions) -> np.ndarray:
        return np.zeros(np.shape(actions)[0] if np.ndim(actions) else 1)


class LinearFn(_Fitted):
    def __init__(self, weights, features, clip=None):
        self.weights = np.asarray(weights, dtype=float)
        self.features = features
        self.clip = clip

    def predict(self, states, actions) -> np.ndarray:
        return self._clip(self.features(states, actions) @ self.weights)

    def to_dict(self) -> dict:
        return {"class": "linear", "shape": [int(self.weights.size)], "weights": self.weights.tolist()}


class MlpFn(_Fitted):
    def __init__(self, net: Mlp, features, clip=None):
        self.net = net
        self.features = features
        self.clip = clip

    def predict(self, states, actions) -> np.ndarray:
        return self._clip(self.net(self.features(states, actions))[:, 0])

    def to_dict(self) -> dict:
        return {"class": "mlp", "shape": list(self.net.sizes), "weights": self.net.params.tolist()}


def function_to_json(fn) -> str:
    return json.dumps(fn.to_dict())


def function_from_json(text: str, features, clip=None):
    doc = json.loads(text)
    if doc["class"] == "linear":
        return LinearFn(np.array(doc["weights"]), features, clip)
    if doc["class"] == "mlp":
        return MlpFn(Mlp(doc["shape"], params=np.array(doc["weights"])), features, clip)
    raise ValueError(f"unknown function class {doc['class']!r}")


# ---------------------------------------------------------------------------
# function classes and the hybrid regression


@dataclass
class LinearClass:
    features: Callable
    ridge: float = 1e-8
    clip: tuple[float, float] | None = None

    def zero(self) -> LinearFn:
        return LinearFn(np.zeros(self.features.dim), self.features, self.clip)


@dataclass
class MlpClass:
    features: Callable
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    clip: tuple[float, float] | None = None
    out_scale: float = 0.1
    seed: int = 0

    def zero(self, rng: np.random.Generator | None = None) -> MlpFn:
        """Freshly initialised network with a zero output layer."""
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        net = Mlp((self.features.dim, *self.hidden, 1), rng, out_scale=0.0)
        return MlpFn(net, self.features, self.clip)


@dataclass
class HybridBatch:
    """Offline TD rows and online Monte-Carlo rows for one regression solve.

    Offline regression targets are ``rewards + gamma * next_values`` where
    ``next_values`` holds the frozen previous iterate evaluated at
    ``(s', pi(s'))``.
    """

    off_states: np.ndarray | None = None
    off_actions: np.ndarray | None = None
    off_rewards: np.ndarray | None = None
    off_next_values: np.ndarray | None = None
    on_states: np.ndarray | None = None
    on_actions: np.ndarray | None = None
    on_targets: np.ndarray | None = None
    lam: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lam must be finite and non-negative")

    @property
    def n_off(self) -> int:
        return 0 if self.off_rewards is None else len(self.off_rewards)

    @property
    def n_on(self) -> int:
        return 0 if self.on_targets is None else len(self.on_targets)

    def off_targets(self, gamma: float) -> np.ndarray:
        nv = 0.0 if self.off_next_values is None else self.off_next_values
        return np.asarray(self.off_rewards, dtype=float) + gamma * nv

    def losses(self, f, gamma: float) -> dict:
        """Unweighted mean square losses of ``f`` on each row set."""
        out = {"offline_td_loss": float("nan"), "online_mc_loss": float("nan")}
        if self.n_off:
            out["offline_td_loss"] = float(np.mean((f(self.off_states, self.off_actions) - self.off_targets(gamma)) ** 2))
        if self.n_on:
            out["online_mc_loss"] = float(np.mean((f(self.on_states, self.on_actions) - self.on_targets) ** 2))
        return out


def _row_weights(batch: HybridBatch):
    w_off = np.full(batch.n_off, 1.0 / batch.n_off) if batch.n_off else np.zeros(0)
    w_on = np.full(batch.n_on, batch.lam / batch.n_on) if batch.n_on else np.zeros(0)
    return w_off, w_on


def solve_hybrid_regression(batch: HybridBatch, fclass, gamma: float, init=None,
                            rng: np.random.Generator | None = None):
    """Minimise ``mean_off (f - r - gamma f_prev')^2 + lam * mean_on (f - y)^2``.

    Linear classes are solved in closed form from ridge-regularised normal
    equations; MLP classes run Adam from ``init`` (or a fresh network).
    """
    if batch.n_off == 0 and batch.n_on == 0:
        raise EmptyBatch("both offline and online row sets are empty")
    if isinstance(fclass, LinearClass):
        return _solve_linear(batch, fclass, gamma)
    if isinstance(fclass, MlpClass):
        return _solve_mlp(batch, fclass, gamma, init, rng)
    raise TypeError(f"unsupported function class {type(fclass).__name__}")


def _design(batch: HybridBatch, features, gamma: float):
    parts_x, parts_y = [], []
    if batch.n_off:
        parts_x.append(features(batch.off_states, batch.off_actions))
        parts_y.append(batch.off_targets(gamma))
    if batch.n_on:
        parts_x.append(features(batch.on_states, batch.on_actions))
        parts_y.append(np.asarray(batch.on_targets, dtype=float))
    w_off, w_on = _row_weights(batch)
    return np.concatenate(parts_x), np.concatenate(parts_y), np.concatenate([w_off, w_on])


def _solve_linear(batch: HybridBatch, fclass: LinearClass, gamma: float) -> LinearFn:
    X, y, w = _design(batch, fclass.features, gamma)
    gram = (X * w[:, None]).T @ X + fclass.ridge * np.eye(X.shape[1])
    rhs = (X * w[:, None]).T @ y
    weights = np.linalg.solve(gram, rhs)
    if not np.all(np.isfinite(weights)):
        raise NonFiniteLoss("linear regression produced non-finite weights")
    return LinearFn(weights, fclass.features, fclass.clip)


def _solve_mlp(batch: HybridBatch, fclass: MlpClass, gamma: float, init, rng) -> MlpFn:
    rng = rng if rng is not None else np.random.default_rng(fclass.seed)
    fn = init if init is not None else fclass.zero(rng)
    net = fn.net.copy()
    X, y, w = _design(batch, fclass.features, gamma)
    n_off = batch.n_off
    off_idx = np.arange(n_off)
    on_idx = np.arange(n_off, len(y))
    opt = Adam(net.n_params, lr=fclass.lr)
    bs = fclass.batch_size
    steps_per_epoch = max(1, int(np.ceil(max(len(off_idx), len(on_idx)) / bs)))
    w_on_scale = batch.lam
    for _ in range(fclass.epochs):
        for _ in range(steps_per_epoch):
            rows, scale = [], []
            if len(off_idx):
                pick = off_idx[rng.integers(0, len(off_idx), size=min(bs, len(off_idx)))]
                rows.append(pick)
                scale.append(np.full(len(pick), 1.0 / len(pick)))
            if len(on_idx) and w_on_scale > 0:
                pick = on_idx[rng.integers(0, len(on_idx), size=min(bs, len(on_idx)))]
                rows.append(pick)
                scale.append(np.full(len(pick), w_on_scale / len(pick)))
            rows = np.concatenate(rows)
            scale = np.concatenate(scale)
            out, acts = net.forward(X[rows])
            resid = out[:, 0] - y[rows]
            grad = net.backward(acts, (2.0 * scale * resid)[:, None])
            if not np.all(np.isfinite(grad)):
                raise NonFiniteLoss("non-finite gradient during MLP regression")
            opt.step(net.params, grad)
    pred = net(X)[:, 0]
    loss = float(np.sum(w * (pred - y) ** 2))
    if not np.isfinite(loss):
        raise NonFiniteLoss("MLP regression loss diverged")
    return MlpFn(net, fclass.features, fclass.clip)


def expected_value(f, policy, states, rng: np.random.Generator | None = None,
                   n_samples: int = 32) -> np.ndarray:
    """``E_{a ~ pi(s)} f(s, a)`` per state.

    Exact for policies over at most 64 discrete actions (exposing
    ``probs``), otherwise a Monte-Carlo average of ``n_samples`` draws.
    """
    states = np.asarray(states)
    n = states.shape[0]
    n_actions = getattr(policy, "n_actions", None)
    if hasattr(policy, "probs") and n_actions is not None and n_actions <= 64:
        probs = policy.probs(states)
        rep = np.repeat(states, n_actions, axis=0)
        acts = np.tile(np.arange(n_actions), n)
        vals = f(rep, acts).reshape(n, n_actions)
        return np.sum(probs * vals, axis=1)
    if rng is None:
        raise ValueError("Monte-Carlo expectation needs an rng")
    rep = np.repeat(states, n_samples, axis=0)
    acts = policy.sample(rep, rng)
    return f(rep, acts).reshape(n, n_samples).mean(axis=1)


# ---------------------------------------------------------------------------
# conjugate gradient


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    energy_trace: list = field(default_factory=list)


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       damping: float = 0.0, max_iters: int = 100, tol: float = 1e-10) -> CGResult:
    """Solve ``(A + damping I) x = b`` for symmetric PSD ``A`` given ``v -> A v``.

    Stops when ``||r|| <= tol ||b||``.  ``energy_trace[k]`` is ``b^T x_k``;
    for CG iterates ``||x_k - x*||_A^2 = b^T x* - b^T x_k``, so a
    nondecreasing trace is a monotone A-norm error.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CGResult(x, 0, 0.0, True)

    def op(v):
        return matvec(v) + damping * v

    r = b.copy()
    p = r.copy()
    rho = float(r @ r)
    energies = [0.0]  # b^T x_k, increasing toward b^T x*
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        Ap = op(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            raise NonFiniteIterate(f"breakdown at iteration {it}: p^T A p = {pAp}")
        alpha = rho / pAp
        x += alpha * p
        r -= alpha * Ap
        energies.append(energies[-1] + alpha * rho)
        rho_new = float(r @ r)
        if not np.isfinite(rho_new):
            raise NonFiniteIterate(f"non-finite residual at iteration {it}")
        if np.sqrt(rho_new) <= tol * b_norm:
            converged = True
            rho = rho_new
            break
        p = r + (rho_new / rho) * p
        rho = rho_new
    return CGResult(x, it, float(np.sqrt(rho)), converged, energies)
