"""Small feed-forward survival network trained on a pairwise ranking loss.

The network maps covariates to a positive predicted time (softplus head).
The loss combines a one-sided squared error on individual samples with a
squared error on pairwise time differences that are under-predicted:

    loss = alpha1 * L1 + alpha2 * L2 + mu * sum(W ** 2)

    L1 = sum_i I1(i) (pred_i - obs_i)^2 / n,
         I1(i) = censored_i or pred_i < obs_i
    L2 = sum_{i != j} I2(i, j) [(obs_j - obs_i) - (pred_j - pred_i)]^2 / n,
         I2(i, j) = obs_j - obs_i > pred_j - pred_i

Weight decay applies to weight matrices only, not to biases. Everything is
plain numpy with hand-written backpropagation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .data import RecurrentDataset

RISK_TRANSFORM = "risk = -predicted_time"


class TrainingError(FloatingPointError):
    """Raised when the loss or its gradient stops being finite."""


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# (f, f') pairs evaluated on the pre-activation
ACTIVATIONS = {
    "softplus": (_softplus, _sigmoid),
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "relu": (lambda a: np.maximum(a, 0.0), lambda a: (a > 0).astype(float)),
}


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "softplus"
    alpha1: float = 1.0
    alpha2: float = 1.0
    mu: float = 1e-4
    learning_rate: float = 0.01
    epochs: int = 500
    batch: int | None = None  # None means full batch
    tol: float = 1e-9

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("layer_sizes needs an input and an output size, all >= 1")
        if sizes[-1] != 1:
            raise ValueError("the output layer must have size 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.alpha1 <= 0 or self.alpha2 < 0 or self.mu < 0:
            raise ValueError("need alpha1 > 0, alpha2 >= 0 and mu >= 0")
        if self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError("need learning_rate > 0 and epochs >= 0")
        if self.batch is not None and self.batch < 2:
            raise ValueError("batch must be >= 2 or None")

    @classmethod
    def default(cls, p: int, **changes) -> "NetworkSpec":
        """Two hidden layers of width min(p, 32)."""
        h = min(int(p), 32)
        return cls(layer_sizes=(int(p), h, h, 1), **changes)

    def replace(self, **changes) -> "NetworkSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class SurvSample:
    covariates: np.ndarray
    observed_time: float
    censored: int

    def __post_init__(self):
        if not self.observed_time > 0:
            raise ValueError("observed_time must be > 0")
        if self.censored not in (0, 1):
            raise ValueError("censored must be 0 or 1")


def to_samples(data: RecurrentDataset, mode: str = "gap") -> list[SurvSample]:
    """Turn recurrent events into single-outcome samples.

    ``gap``: one sample per inter-event interval with the gap time as target;
    the interval after the last event is censored (dropped when empty).
    ``first``: one sample per subject, time to the first event or censoring.
    """
    out = []
    for s in data.subjects:
        if mode == "first":
            if s.n_events:
                out.append(SurvSample(s.covariates, s.event_times[0], 0))
            else:
                out.append(SurvSample(s.covariates, s.censoring_time, 1))
        elif mode == "gap":
            prev = 0.0
            for t in s.event_times:
                out.append(SurvSample(s.covariates, t - prev, 0))
                prev = t
            if s.censoring_time > prev:
                out.append(SurvSample(s.covariates, s.censoring_time - prev, 1))
        else:
            raise ValueError("mode must be 'gap' or 'first'")
    return out


def _arrays(samples: list[SurvSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.vstack([s.covariates for s in samples])
    y = np.array([s.observed_time for s in samples], dtype=float)
    c = np.array([s.censored for s in samples], dtype=bool)
    return X, y, c


@dataclass(eq=False)
class Network:
    """Weights ``W[l]`` of shape (in, out) and biases ``b[l]``."""

    layer_sizes: tuple[int, ...]
    activation: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    history: list[float] = field(default_factory=list)

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "Network":
        sz = spec.layer_sizes
        return cls(
            sz,
            spec.activation,
            [np.zeros((a, b)) for a, b in zip(sz, sz[1:])],
            [np.zeros(b) for b in sz[1:]],
        )

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator, output_bias: float = 0.0) -> "Network":
        """Normal draws scaled by 1/sqrt(fan_in); zero hidden biases."""
        net = cls.zeros(spec)
        for W in net.weights:
            W[:] = rng.standard_normal(W.shape) / np.sqrt(W.shape[0])
        net.biases[-1][:] = output_bias
        return net

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def with_flat(self, theta: np.ndarray) -> "Network":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters")
        Ws, bs, i = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(theta[i : i + W.size].reshape(W.shape).copy())
            i += W.size
            bs.append(theta[i : i + b.size].copy())
            i += b.size
        return Network(self.layer_sizes, self.activation, Ws, bs, list(self.history))

    def _forward(self, X: np.ndarray):
        f, _ = ACTIVATIONS[self.activation]
        acts, pre = [X], []
        h = X
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W + b
            pre.append(a)
            h = _softplus(a) if l == last else f(a)
            acts.append(h)
        return acts, pre

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"expected {self.layer_sizes[0]} covariates, got {X.shape[1]}")
        return self._forward(X)[0][-1][:, 0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "layer_sizes": list(self.layer_sizes),
                "activation": self.activation,
                "weights": [W.ravel().tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases],
                "risk_transform": RISK_TRANSFORM,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Network":
        d = json.loads(text)
        sz = tuple(d["layer_sizes"])
        Ws = [np.array(w, dtype=float).reshape(a, b) for w, a, b in zip(d["weights"], sz, sz[1:])]
        bs = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(sz, d["activation"], Ws, bs)


def forward(net: Network, covariates) -> float:
    """Predicted time for one covariate vector."""
    x = np.asarray(covariates, dtype=float).ravel()
    return float(net.predict(x[None, :])[0])


def _loss_terms(pred, obs, cens, spec: NetworkSpec):
    """(data loss, dloss/dpred) without the weight penalty."""
    n = pred.shape[0]
    r = pred - obs
    on = cens | (pred < obs)
    l1 = float(np.sum(r[on] ** 2)) / n
    g = spec.alpha1 * 2.0 * np.where(on, r, 0.0) / n
    l2 = 0.0
    if spec.alpha2:
        # D[i, j] = (obs_j - obs_i) - (pred_j - pred_i) = r_i - r_j
        D = r[:, None] - r[None, :]
        M = D > 0
        l2 = float(np.sum(D[M] ** 2)) / n
        G = np.where(M, 2.0 * D, 0.0) / n
        g = g + spec.alpha2 * (G.sum(axis=1) - G.sum(axis=0))
    return spec.alpha1 * l1 + spec.alpha2 * l2, g


def rank_loss(predictions, samples: list[SurvSample], spec: NetworkSpec, net: Network | None = None) -> float:
    """Composite loss for given predictions; the weight penalty needs ``net``."""
    pred = np.asarray(predictions, dtype=float).ravel()
    if pred.shape[0] != len(samples):
        raise ValueError("predictions and samples must align")
    _, y, c = _arrays(samples)
    loss, _ = _loss_terms(pred, y, c, spec)
    if net is not None:
        loss += spec.mu * sum(float(np.sum(W**2)) for W in net.weights)
    return loss


def loss_and_grad(net: Network, X, obs, cens, spec: NetworkSpec) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Loss and its gradient with respect to every weight matrix and bias."""
    acts, pre = net._forward(X)
    pred = acts[-1][:, 0]
    loss, g = _loss_terms(pred, obs, cens, spec)
    loss += spec.mu * sum(float(np.sum(W**2)) for W in net.weights)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss (max |pred| = {np.max(np.abs(pred)):.3g})")
    _, df = ACTIVATIONS[net.activation]
    L = len(net.weights)
    gW = [None] * L
    gb = [None] * L
    delta = (g * _sigmoid(pre[-1][:, 0]))[:, None]
    for l in range(L - 1, -1, -1):
        gW[l] = acts[l].T @ delta + 2.0 * spec.mu * net.weights[l]
        gb[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ net.weights[l].T) * df(pre[l - 1])
    return loss, gW, gb


def _loss_only(net: Network, X, obs, cens, spec: NetworkSpec) -> float:
    pred = net._forward(X)[0][-1][:, 0]
    loss, _ = _loss_terms(pred, obs, cens, spec)
    return loss + spec.mu * sum(float(np.sum(W**2)) for W in net.weights)


def _descend(net, X, y, c, spec, lr, max_halvings=40):
    """One backtracking gradient step on (X, y, c); returns (net, loss, lr).

    The rate shrinks on rejected steps and regrows by 10% per accepted step,
    never beyond ``spec.learning_rate``.
    """
    loss, gW, gb = loss_and_grad(net, X, y, c, spec)
    for _ in range(max_halvings):
        cand = Network(
            net.layer_sizes,
            net.activation,
            [W - lr * d for W, d in zip(net.weights, gW)],
            [b - lr * d for b, d in zip(net.biases, gb)],
            net.history,
        )
        new = _loss_only(cand, X, y, c, spec)
        if np.isfinite(new) and new <= loss:
            return cand, new, min(lr * 1.1, spec.learning_rate)
        lr *= 0.5
    return net, loss, lr


def train(samples: list[SurvSample], spec: NetworkSpec, rng: np.random.Generator) -> Network:
    """Gradient descent with backtracking on the learning rate.

    In full-batch mode a step is only taken when it does not increase the
    training loss, so ``net.history`` is non-increasing. Mini-batches form
    pairs within the batch only and the recorded epoch loss is the mean
    batch loss. Training stops after ``spec.epochs`` or
    when the relative loss change drops below ``spec.tol``.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples")
    X, y, c = _arrays(samples)
    if X.shape[1] != spec.layer_sizes[0]:
        raise ValueError(f"expected {spec.layer_sizes[0]} covariates, got {X.shape[1]}")
    # start the head near the mean observed time
    m = float(np.mean(y))
    net = Network.init(spec, rng, output_bias=m + np.log(-np.expm1(-m)))
    n = X.shape[0]
    lr = spec.learning_rate
    full = spec.batch is None or spec.batch >= n
    net.history = [_loss_only(net, X, y, c, spec)] if full else []
    for _ in range(spec.epochs):
        if full:
            net, loss, lr = _descend(net, X, y, c, spec, lr)
        else:
            # the epoch loss is the mean batch loss; a full pass would cost O(n^2)
            order = rng.permutation(n)
            losses = []
            for lo in range(0, n, spec.batch):
                idx = order[lo : lo + spec.batch]
                if idx.shape[0] < 2:
                    continue
                net, bl, lr = _descend(net, X[idx], y[idx], c[idx], spec, lr)
                losses.append(bl)
            loss = float(np.mean(losses))
        if not np.isfinite(loss):
            raise TrainingError("training loss became non-finite")
        prev = net.history[-1] if net.history else None
        net.history.append(loss)
        if prev is not None and abs(prev - loss) <= spec.tol * max(abs(prev), 1e-300):
            break
    return net


def predict_risk(net: Network, data: RecurrentDataset) -> np.ndarray:
    """One score per subject: the negated predicted time, so shorter means riskier."""
    return -net.predict(data.X)
