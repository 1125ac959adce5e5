"""Few-shot MLP for sample-poor years: backprop, meta-training and adaptation.

Parameters live in one flat vector per model so that a whole meta-batch of
subtasks can be carried as a ``(T, P)`` array and every layer operation runs
as a batched matmul. The second-order meta-gradient is exact: the inner-loop
Jacobian is applied through Hessian-vector products computed with the
R-operator on the network.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from dynlsm.data_model import N_FEATURES, TaskPool, YearTask
from dynlsm.errors import DataError, DivergenceError, InvalidInputError

SCHEMA = "dynlsm.mlp/1"
DEFAULT_SIZES = (N_FEATURES, 32, 32, 2)


# --- parameter layout ------------------------------------------------------


def n_params(sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


def unpack(theta: np.ndarray, sizes: Sequence[int]):
    """Views ``[(W, b), ...]`` into a ``(T, P)`` parameter array."""
    layers, k = [], 0
    T = theta.shape[0]
    for i, o in zip(sizes[:-1], sizes[1:]):
        W = theta[:, k : k + i * o].reshape(T, i, o)
        k += i * o
        b = theta[:, k : k + o]
        k += o
        layers.append((W, b))
    return layers


def init_params(sizes: Sequence[int] = DEFAULT_SIZES, seed=0) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros((1, n_params(sizes)))
    for W, _ in unpack(theta, sizes):
        fan_in, fan_out = W.shape[1:]
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-lim, lim, W.shape)
    return theta[0]


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def softplus_inv(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def sigmoid(x: float) -> float:
    return float(0.5 * (1.0 + np.tanh(0.5 * x)))


# --- network ---------------------------------------------------------------


def _forward(layers, X):
    acts = [X]
    for W, b in layers[:-1]:
        acts.append(np.tanh(acts[-1] @ W + b[:, None, :]))
    W, b = layers[-1]
    logits = acts[-1] @ W + b[:, None, :]
    shifted = logits - logits.max(axis=2, keepdims=True)
    expz = np.exp(shifted)
    prob = expz / expz.sum(axis=2, keepdims=True)
    log_prob = shifted - np.log(expz.sum(axis=2, keepdims=True))
    return acts, prob, log_prob


def _onehot(y, n_classes):
    return (y[..., None] == np.arange(n_classes)).astype(np.float64)


def predict_batched(theta, sizes, X) -> np.ndarray:
    """Class probabilities ``(T, B, C)`` for standardized inputs ``(T, B, d)``."""
    _, prob, _ = _forward(unpack(theta, sizes), X)
    return prob


def loss_grad_hvp(theta, sizes, X, y, V=None):
    """Mean cross-entropy per task, its gradient and optionally ``H @ V``.

    ``theta`` is ``(T, P)``, ``X`` is ``(T, B, d)``, ``y`` is ``(T, B)`` with
    integer classes. Returns ``(loss (T,), grad (T, P), hv (T, P) or None)``.
    """
    layers = unpack(theta, sizes)
    T, B = y.shape
    acts, prob, log_prob = _forward(layers, X)
    Y = _onehot(y, sizes[-1])
    loss = -(Y * log_prob).sum(axis=(1, 2)) / B

    grad = np.empty_like(theta)
    glayers = unpack(grad, sizes)
    delta = (prob - Y) / B
    deltas = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        gW, gb = glayers[l]
        deltas[l] = delta
        gW[...] = np.swapaxes(acts[l], 1, 2) @ delta
        gb[...] = delta.sum(axis=1)
        if l > 0:
            delta = (delta @ np.swapaxes(W, 1, 2)) * (1.0 - acts[l] ** 2)
    if V is None:
        return loss, grad, None

    vlayers = unpack(V, sizes)
    # R-forward: directional derivatives of activations and logits
    racts = [np.zeros_like(X)]
    for l, ((W, _), (VW, Vb)) in enumerate(zip(layers, vlayers)):
        rz = racts[l] @ W + acts[l] @ VW + Vb[:, None, :]
        if l < len(layers) - 1:
            racts.append((1.0 - acts[l + 1] ** 2) * rz)
        else:
            rlogits = rz
    rprob = prob * (rlogits - (prob * rlogits).sum(axis=2, keepdims=True))

    hv = np.empty_like(theta)
    hlayers = unpack(hv, sizes)
    rdelta = rprob / B
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        VW, _ = vlayers[l]
        hW, hb = hlayers[l]
        d = deltas[l]
        hW[...] = np.swapaxes(racts[l], 1, 2) @ d + np.swapaxes(acts[l], 1, 2) @ rdelta
        hb[...] = rdelta.sum(axis=1)
        if l > 0:
            back = d @ np.swapaxes(W, 1, 2)
            rdelta = (rdelta @ np.swapaxes(W, 1, 2) + d @ np.swapaxes(VW, 1, 2)) * (
                1.0 - acts[l] ** 2
            ) - back * 2.0 * acts[l] * racts[l]
    return loss, grad, hv


def forward(params: np.ndarray, x: np.ndarray, sizes: Sequence[int] = DEFAULT_SIZES) -> np.ndarray:
    """Landslide (class 1) probability for standardized input rows."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite network input")
    single = x.ndim == 1
    X = x[None, None, :] if single else x[None, :, :]
    p = predict_batched(np.asarray(params)[None, :], sizes, X)[0, :, 1]
    return float(p[0]) if single else p


def loss_and_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray, sizes: Sequence[int] = DEFAULT_SIZES):
    """Mean cross-entropy on a standardized batch and its exact gradient."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise DataError("empty batch")
    loss, grad, _ = loss_grad_hvp(np.asarray(params)[None, :], sizes, X[None], y[None])
    return float(loss[0]), grad[0]


# --- standardization -------------------------------------------------------


def fit_standardizer(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


# --- state -----------------------------------------------------------------


@dataclass(frozen=True)
class MetaConfig:
    hidden: tuple[int, ...] = (32, 32)
    iterations: int = 3000
    inner_steps: int = 5
    inner_batch: int = 16
    meta_batch: int = 16
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    learn_inner_lr: bool = True
    first_order: bool = False
    optimizer: str = "sgd"  # "sgd" or "adam"
    seed: int = 0

    def sizes(self, n_in: int = N_FEATURES) -> tuple[int, ...]:
        return (n_in, *self.hidden, 2)


@dataclass(frozen=True)
class MetaState:
    """Meta-learned initialization, inner learning rate and input scaling."""

    params: np.ndarray
    rho: float  # inner_lr = softplus(rho)
    sizes: tuple[int, ...]
    mean: np.ndarray
    std: np.ndarray
    outer_lr: float = 0.001
    task_weights: tuple[float, ...] | None = None
    loss_trace: tuple[float, ...] = ()
    config: MetaConfig = field(default_factory=MetaConfig)

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64)
        if params.shape != (n_params(self.sizes),):
            raise InvalidInputError("parameter vector does not match architecture")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "mean", np.array(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.array(self.std, dtype=np.float64))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def inner_lr(self) -> float:
        return softplus(self.rho)

    @classmethod
    def initial(cls, config: MetaConfig, mean, std, seed=None) -> "MetaState":
        sizes = config.sizes(len(mean))
        return cls(
            init_params(sizes, config.seed if seed is None else seed),
            softplus_inv(config.inner_lr),
            sizes,
            mean,
            std,
            config.outer_lr,
            config=config,
        )

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return forward(self.params, self.standardize(X if X.ndim == 2 else X[None]), self.sizes)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "kind": "meta_state",
            "sizes": list(self.sizes),
            "params": self.params.tolist(),
            "rho": self.rho,
            "inner_lr": self.inner_lr,
            "outer_lr": self.outer_lr,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "task_weights": None if self.task_weights is None else list(self.task_weights),
            "loss_trace": list(self.loss_trace),
            "config": asdict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "MetaState":
        if d.get("schema") != SCHEMA or d.get("kind") != "meta_state":
            raise DataError("not a serialized meta state")
        cfg = dict(d["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        return cls(
            np.asarray(d["params"]),
            float(d["rho"]),
            tuple(d["sizes"]),
            np.asarray(d["mean"]),
            np.asarray(d["std"]),
            float(d["outer_lr"]),
            None if d["task_weights"] is None else tuple(d["task_weights"]),
            tuple(d["loss_trace"]),
            MetaConfig(**cfg),
        )


@dataclass(frozen=True)
class AdaptedModel:
    """Per-year predictor obtained from a meta state by a few gradient steps."""

    params: np.ndarray
    sizes: tuple[int, ...]
    mean: np.ndarray
    std: np.ndarray
    year: int | None
    n_updates: int
    micro_updates: int = 0
    inner_lr: float = 0.01

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "mean", np.array(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.array(self.std, dtype=np.float64))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        X = X if X.ndim == 2 else X[None]
        return forward(self.params, (X - self.mean) / self.std, self.sizes)

    __call__ = predict_proba

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "kind": "adapted",
            "sizes": list(self.sizes),
            "params": self.params.tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "year": self.year,
            "n_updates": self.n_updates,
            "micro_updates": self.micro_updates,
            "inner_lr": self.inner_lr,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptedModel":
        if d.get("schema") != SCHEMA or d.get("kind") != "adapted":
            raise DataError("not a serialized adapted model")
        return cls(
            np.asarray(d["params"]),
            tuple(d["sizes"]),
            np.asarray(d["mean"]),
            np.asarray(d["std"]),
            d["year"],
            int(d["n_updates"]),
            int(d["micro_updates"]),
            float(d["inner_lr"]),
        )


# --- inner loop ------------------------------------------------------------


def _step_rows(k: int, n: int, batch: int) -> np.ndarray:
    if n <= batch:
        return np.arange(n)
    return (k * batch + np.arange(batch)) % n


def inner_loop(theta, alpha, sizes, Xs, ys, steps, batch):
    """Run ``steps`` updates ``theta <- theta - alpha * grad`` per task.

    Returns the list of visited parameters ``[theta_0, ..., theta_steps]``
    together with the row indices used at each step.
    """
    thetas = [theta]
    rows_used = []
    for k in range(steps):
        rows = _step_rows(k, ys.shape[1], batch)
        _, g, _ = loss_grad_hvp(thetas[-1], sizes, Xs[:, rows], ys[:, rows])
        thetas.append(thetas[-1] - alpha * g)
        rows_used.append(rows)
    return thetas, rows_used


def inner_update(state: MetaState, support_X, support_y, steps: int = 5, batch: int = 16, alpha=None) -> np.ndarray:
    """Adapted parameters after ``steps`` inner updates on a support set.

    ``support_X`` is already standardized.
    """
    Xs = np.asarray(support_X, dtype=np.float64)[None]
    ys = np.asarray(support_y, dtype=np.int64)[None]
    if ys.size == 0:
        raise DataError("empty support set")
    a = state.inner_lr if alpha is None else float(alpha)
    thetas, _ = inner_loop(np.array(state.params)[None], a, state.sizes, Xs, ys, steps, batch)
    return thetas[-1][0]


def meta_gradient(theta, rho, sizes, Xs, ys, Xq, yq, steps, batch, weights, first_order=False):
    """Meta-loss ``sum_i w_i L_i(theta_i')`` and its gradient.

    ``theta`` is the shared ``(P,)`` initialization; the support/query arrays
    carry a leading task axis. Returns ``(meta_loss, query_losses, d_theta,
    d_rho)``.
    """
    T = Xs.shape[0]
    alpha = softplus(rho)
    thetas, rows_used = inner_loop(np.repeat(theta[None], T, axis=0), alpha, sizes, Xs, ys, steps, batch)
    q_loss, v, _ = loss_grad_hvp(thetas[-1], sizes, Xq, yq)
    d_alpha = np.zeros(T)
    for k in range(steps - 1, -1, -1):
        rows = rows_used[k]
        need_hv = not first_order
        _, g, hv = loss_grad_hvp(thetas[k], sizes, Xs[:, rows], ys[:, rows], v if need_hv else None)
        d_alpha -= (g * v).sum(axis=1)
        if need_hv:
            v = v - alpha * hv
    w = np.asarray(weights, dtype=np.float64)
    meta_loss = float((w * q_loss).sum())
    d_theta = (w[:, None] * v).sum(axis=0)
    d_rho = float((w * d_alpha).sum()) * sigmoid(rho)
    return meta_loss, q_loss, d_theta, d_rho


def _stack_tasks(tasks: Sequence[YearTask], state: MetaState):
    Xs = np.stack([state.standardize(t.X("support")) for t in tasks])
    ys = np.stack([t.y("support") for t in tasks])
    Xq = np.stack([state.standardize(t.X("query")) for t in tasks])
    yq = np.stack([t.y("query") for t in tasks])
    return Xs, ys, Xq, yq


def pool_standardizer(pool: TaskPool):
    X = np.concatenate([t.X() for t in pool.train_tasks])
    return fit_standardizer(X)


def meta_train(pool: TaskPool, config: MetaConfig = MetaConfig(), state: MetaState | None = None, weights=None) -> MetaState:
    """Two-loop meta-training over the training subtasks of ``pool``.

    Each outer iteration draws a meta-batch of subtasks, adapts a copy of the
    shared initialization on every support set, and takes one step on the
    weighted sum of the resulting query losses with respect to the
    initialization and, when enabled, the inner learning rate.
    """
    tasks = list(pool.train_tasks)
    if not tasks:
        raise DataError("meta-training needs at least one training subtask")
    shapes = {(len(t.support), len(t.query)) for t in tasks}
    if len(shapes) != 1:
        raise DataError("all meta subtasks must share one support/query shape")
    if state is None:
        mean, std = pool_standardizer(pool)
        state = MetaState.initial(config, mean, std)
    stacked = _stack_tasks(tasks, state)
    task_w = np.ones(len(tasks)) if weights is None else np.asarray(weights, dtype=np.float64)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    theta = np.array(state.params)
    rho = state.rho
    m_batch = min(config.meta_batch, len(tasks))
    adam = {"m": np.zeros(theta.size + 1), "v": np.zeros(theta.size + 1), "t": 0}
    trace = []
    for it in range(config.iterations):
        pick = np.sort(rng.choice(len(tasks), size=m_batch, replace=False))
        Xs, ys, Xq, yq = (a[pick] for a in stacked)
        meta_loss, _, d_theta, d_rho = meta_gradient(
            theta, rho, state.sizes, Xs, ys, Xq, yq, config.inner_steps, config.inner_batch, task_w[pick], config.first_order
        )
        if not (math.isfinite(meta_loss) and np.all(np.isfinite(d_theta)) and math.isfinite(d_rho)):
            raise DivergenceError(f"meta-training diverged at iteration {it}: meta loss {meta_loss}")
        trace.append(meta_loss)
        if not config.learn_inner_lr:
            d_rho = 0.0
        if config.optimizer == "adam":
            g = np.append(d_theta, d_rho)
            step = _adam_step(adam, g, config.outer_lr)
            theta = theta - step[:-1]
            rho = rho - float(step[-1])
        else:
            theta = theta - config.outer_lr * d_theta
            rho = rho - config.outer_lr * d_rho
    return replace(
        state,
        params=theta,
        rho=float(rho),
        outer_lr=config.outer_lr,
        task_weights=None if weights is None else tuple(float(w) for w in task_w),
        loss_trace=state.loss_trace + tuple(trace),
        config=config,
    )


def _adam_step(s, g, lr, b1=0.9, b2=0.999, eps=1e-8):
    s["t"] += 1
    s["m"] = b1 * s["m"] + (1 - b1) * g
    s["v"] = b2 * s["v"] + (1 - b2) * g * g
    mhat = s["m"] / (1 - b1 ** s["t"])
    vhat = s["v"] / (1 - b2 ** s["t"])
    return lr * mhat / (np.sqrt(vhat) + eps)


def query_accuracy(state: MetaState, tasks: Sequence[YearTask], steps=None, batch=None) -> float:
    """Mean query accuracy after inner-loop adaptation on each support set."""
    if not tasks:
        return math.nan
    cfg = state.config
    steps = cfg.inner_steps if steps is None else steps
    batch = cfg.inner_batch if batch is None else batch
    Xs, ys, Xq, yq = _stack_tasks(tasks, state)
    thetas, _ = inner_loop(np.repeat(state.params[None], len(tasks), axis=0), state.inner_lr, state.sizes, Xs, ys, steps, batch)
    prob = predict_batched(thetas[-1], state.sizes, Xq)
    return float(((prob[:, :, 1] >= 0.5) == yq).mean())


# --- few-shot adaptation ----------------------------------------------------


def adapt(state: MetaState, task: YearTask, steps: int = 5, batch_size: int | None = 8, seed=0, which: str = "all") -> AdaptedModel:
    """Fine-tune the meta state on a year's samples.

    Every sample of the task takes part. Each of the ``steps`` updates is one
    shuffled pass over the samples in mini-batches of ``batch_size`` (one
    full-batch step when ``batch_size`` is None), so the number of parameter
    changes is ``steps * ceil(n / batch_size)``.
    """
    X = task.X(which)
    y = task.y(which)
    if y.size == 0 or y.min() == y.max():
        raise DataError(f"year {task.year}: adaptation needs samples of both classes")
    theta, micro = _finetune(state.params, state.sizes, state.standardize(X), y, state.inner_lr, steps, batch_size, seed)
    return AdaptedModel(theta, state.sizes, state.mean, state.std, task.year, steps, micro, state.inner_lr)


def _finetune(params, sizes, Xn, y, lr, steps, batch_size, seed):
    n = y.size
    b = n if batch_size is None else int(batch_size)
    rng = np.random.default_rng(seed)
    theta = np.array(params)[None]
    micro = 0
    for _ in range(steps):
        order = rng.permutation(n)
        for s in range(0, n, b):
            rows = order[s : s + b]
            _, g, _ = loss_grad_hvp(theta, sizes, Xn[None, rows], y[None, rows])
            theta = theta - lr * g
            micro += 1
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("adaptation produced non-finite parameters")
    return theta[0], micro


def train_from_scratch(X, y, sizes=DEFAULT_SIZES, steps=5, batch_size=8, lr=0.01, seed=0, mean=None, std=None) -> AdaptedModel:
    """Plain MLP trained with the same update schedule as :func:`adapt`."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if mean is None:
        mean, std = fit_standardizer(X)
    theta, micro = _finetune(init_params(sizes, seed), sizes, (X - mean) / std, y, lr, steps, batch_size, seed)
    return AdaptedModel(theta, sizes, mean, std, None, steps, micro, lr)
