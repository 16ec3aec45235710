"""Three-layer softmax classifier trained with momentum SGD and early stopping.

Network: ``p = softmax(W2 sigmoid(W1 x + b1) + b2)``.  The hidden weights start
uniform on ``+-sqrt(6 / (n_in + n_hidden))``; the output layer starts at zero.
The loss is the mean cross-entropy with no weight decay.
"""

import json
import struct
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DivergedError, FormatError, ParameterError
from .tensor_core import Rng, derive_seed, sigmoid
from .validation import check_batch, check_labels

_MC_MAGIC = b"VXMC"
_MC_VERSION = 1


class MlpParams(NamedTuple):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def input_dim(self):
        return self.W1.shape[1]

    @property
    def hidden_dim(self):
        return self.W1.shape[0]

    @property
    def n_classes(self):
        return self.W2.shape[0]

    def copy(self):
        return MlpParams(*(a.copy() for a in self))


class FitConfig(NamedTuple):
    learning_rate: float = 0.01
    mu: float = 0.9
    batch_size: int = 32
    max_epochs: int = 200
    seed: int = 0
    eval_every: int = 1

    def validate(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.mu < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.mu}")
        if self.batch_size < 1 or self.eval_every < 1 or self.max_epochs < 0:
            raise ParameterError("batch_size and eval_every must be >= 1, max_epochs >= 0")
        return self


def init_network(input_dim, hidden_dim, classes, seed):
    if min(input_dim, hidden_dim, classes) < 1:
        raise ParameterError("network dimensions must be >= 1")
    if classes not in (2, 3):
        raise ParameterError(f"classes must be 2 or 3, got {classes}")
    r = np.sqrt(6.0 / (input_dim + hidden_dim))
    W1 = Rng(seed).uniform(-r, r, hidden_dim * input_dim).reshape(hidden_dim, input_dim)
    return MlpParams(W1, np.zeros(hidden_dim),
                     np.zeros((classes, hidden_dim)), np.zeros(classes))


def _logits(net, X):
    A = sigmoid(X @ net.W1.T + net.b1)
    return A, A @ net.W2.T + net.b2


def softmax(Z):
    Z = Z - Z.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


def forward(net, X):
    """Class probabilities for one vector or a batch of rows."""
    single = np.ndim(X) == 1
    X = check_batch(X, net.input_dim)
    P = softmax(_logits(net, X)[1])
    return P[0] if single else P


def cross_entropy(net, X, y):
    X = check_batch(X, net.input_dim)
    y = check_labels(y, net.n_classes, X.shape[0])
    Z = _logits(net, X)[1]
    return float(np.mean(logsumexp(Z, axis=1) - Z[np.arange(len(y)), y]))


def gradient(net, X, y):
    """Gradient of :func:`cross_entropy` as an :class:`MlpParams`."""
    X = check_batch(X, net.input_dim)
    y = check_labels(y, net.n_classes, X.shape[0])
    N = X.shape[0]
    A, Z = _logits(net, X)
    D = softmax(Z)
    D[np.arange(N), y] -= 1.0
    D /= N
    dA = D @ net.W2
    dZ1 = dA * A * (1.0 - A)
    return MlpParams(dZ1.T @ X, dZ1.sum(axis=0), D.T @ A, D.sum(axis=0))


def zero_velocity(net):
    return MlpParams(*(np.zeros_like(a) for a in net))


def sgd_momentum_step(net, grads, velocity, lr, mu):
    """``v <- mu v - lr g``; ``theta <- theta + v``.  Returns ``(net, velocity)``."""
    new_v = MlpParams(*(mu * v - lr * g for v, g in zip(velocity, grads)))
    return MlpParams(*(p + v for p, v in zip(net, new_v))), new_v


def misclassification(net, X, y):
    pred = np.argmax(forward(net, check_batch(X, net.input_dim)), axis=1)
    return float(np.mean(pred != np.asarray(y)))


def train_with_early_stopping(net, train, val, cfg, val_error=None, keep_snapshots=False):
    """Momentum SGD from ``net``, keeping the lowest-validation-error snapshot.

    ``train`` and ``val`` are ``(X, y)`` pairs.  Validation error (fraction
    misclassified) is evaluated every ``cfg.eval_every`` epochs; ties keep the
    earliest epoch.  ``val_error(net, epoch)`` replaces the built-in evaluator
    when given.  Returns ``(best_net, history)``; ``history`` has one dict per
    evaluation plus ``best_epoch`` (0 means the initial network was kept).
    """
    cfg = FitConfig(*cfg).validate()
    X, y = train
    X = check_batch(X, net.input_dim)
    y = check_labels(y, net.n_classes, X.shape[0])
    Xv, yv = val
    Xv = check_batch(Xv, net.input_dim, "X_val")
    yv = check_labels(yv, net.n_classes, Xv.shape[0])
    if val_error is None:
        def val_error(candidate, epoch):
            return misclassification(candidate, Xv, yv)

    best, best_err, best_epoch = net.copy(), np.inf, 0
    velocity = zero_velocity(net)
    records = []
    snapshots = {}
    N = X.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        order = Rng(derive_seed(cfg.seed, "mlp-shuffle", epoch)).permutation(N)
        for batch, start in enumerate(range(0, N, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            g = gradient(net, X[idx], y[idx])
            if not all(np.all(np.isfinite(a)) for a in g):
                raise DivergedError(epoch, batch)
            net, velocity = sgd_momentum_step(net, g, velocity, cfg.learning_rate, cfg.mu)
        cost = cross_entropy(net, X, y)
        if not np.isfinite(cost):
            raise DivergedError(epoch, value=cost)
        if epoch % cfg.eval_every:
            continue
        err = float(val_error(net, epoch))
        records.append({"epoch": epoch, "train_cost": cost, "val_error": err})
        if keep_snapshots:
            snapshots[epoch] = net.copy()
        if err < best_err:
            best, best_err, best_epoch = net.copy(), err, epoch
    history = {"records": records, "best_epoch": best_epoch}
    if keep_snapshots:
        history["snapshots"] = snapshots
    return best, history


def evaluate(net, X, y):
    """Accuracy and confusion matrix (rows = true class, columns = predicted)."""
    X = check_batch(X, net.input_dim)
    y = check_labels(y, net.n_classes, X.shape[0])
    # np.argmax returns the first maximum, so ties go to the lowest class index
    pred = np.argmax(forward(net, X), axis=1)
    C = net.n_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return {"accuracy": float(np.trace(confusion)) / len(y),
            "confusion_matrix": confusion.tolist()}


def format_accuracy(accuracy):
    """``0.894736... -> '89.47%'``."""
    return f"{100.0 * accuracy:.2f}%"


def dump_params(net):
    """VXMC: magic, u32 version, u32 input_dim, u32 hidden_dim, u32 classes,
    then f64 LE ``W1, b1, W2, b2``."""
    head = _MC_MAGIC + struct.pack("<IIII", _MC_VERSION, net.input_dim,
                                   net.hidden_dim, net.n_classes)
    return head + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in net)


def parse_params(raw):
    if raw[:4] != _MC_MAGIC:
        raise FormatError("not a VXMC checkpoint: bad magic", 0)
    if len(raw) < 20:
        raise FormatError("truncated VXMC header", len(raw))
    version, n_in, n_hid, C = struct.unpack_from("<IIII", raw, 4)
    if version != _MC_VERSION:
        raise FormatError(f"unsupported VXMC version {version}", 4)
    sizes = [n_hid * n_in, n_hid, C * n_hid, C]
    expected = 20 + 8 * sum(sizes)
    if len(raw) != expected:
        raise FormatError(f"VXMC payload is {len(raw)} bytes, expected {expected}",
                          min(len(raw), expected))
    body = np.frombuffer(raw, dtype="<f8", offset=20).astype(np.float64)
    parts = np.split(body, np.cumsum(sizes)[:-1])
    return MlpParams(parts[0].reshape(n_hid, n_in).copy(), parts[1].copy(),
                     parts[2].reshape(C, n_hid).copy(), parts[3].copy())


def save_params(net, path):
    with open(path, "wb") as fh:
        fh.write(dump_params(net))


def load_params(path):
    with open(path, "rb") as fh:
        return parse_params(fh.read())


def metrics_json(task, metrics, history):
    """Canonical UTF-8 JSON report ``{task, accuracy, confusion_matrix, history}``."""
    report = {"task": task, "accuracy": metrics["accuracy"],
              "confusion_matrix": metrics["confusion_matrix"], "history": history}
    return json.dumps(report, indent=2, sort_keys=True)


class MlpClassifier(ClassifierMixin, BaseEstimator):
    """sklearn-style front end for the softmax network.

    Labels are mapped through ``classes_`` (sorted unique training labels),
    so any two or three distinct labels work.  Pass ``X_val``/``y_val`` to
    ``fit`` for early stopping; otherwise a ``validation_fraction`` of the
    training rows is held out deterministically.
    """

    def __init__(self, hidden=800, learning_rate=0.01, momentum=0.9, batch_size=32,
                 max_epochs=200, eval_every=1, seed=0, validation_fraction=0.15):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.eval_every = eval_every
        self.seed = seed
        self.validation_fraction = validation_fraction

    def _fit_config(self):
        return FitConfig(self.learning_rate, self.momentum, self.batch_size,
                         self.max_epochs, derive_seed(self.seed, "mlp-train"),
                         self.eval_every).validate()

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_batch(X)
        y = np.asarray(y)
        if X_val is None:
            n_val = max(1, int(round(self.validation_fraction * len(y))))
            order = Rng(derive_seed(self.seed, "mlp-holdout")).permutation(len(y))
            X_val, y_val = X[order[:n_val]], y[order[:n_val]]
            X, y = X[order[n_val:]], y[order[n_val:]]
        self.classes_ = np.unique(np.concatenate([y, np.asarray(y_val)]))
        if len(self.classes_) not in (2, 3):
            raise ParameterError(f"expected 2 or 3 classes, got {len(self.classes_)}")
        enc = np.searchsorted(self.classes_, y)
        enc_val = np.searchsorted(self.classes_, np.asarray(y_val))
        start = init_network(X.shape[1], self.hidden, len(self.classes_),
                             derive_seed(self.seed, "mlp-init"))
        self.net_, self.history_ = train_with_early_stopping(
            start, (X, enc), (X_val, enc_val), self._fit_config())
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return forward(self.net_, check_batch(X, self.n_features_in_))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def evaluate(self, X, y):
        check_is_fitted(self, "net_")
        return evaluate(self.net_, X, np.searchsorted(self.classes_, np.asarray(y)))
