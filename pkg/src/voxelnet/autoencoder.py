"""Sparse tied-weight autoencoder used to learn convolution filters.

The encoder is ``h = sigmoid(W x + b)`` and the decoder ``x_hat = W.T h + b_star``
(identity output).  Training minimises

    cost = mean_i 0.5 * ||x_hat_i - x_i||^2
           + beta * sum_j KL(s || s_hat_j)
           + lambda * sum_{i,j} W_ij^2

with plain minibatch gradient descent.  ``s_hat`` is the mean hidden activation
over the batch being evaluated, and its gradient flows back through every
example of that batch.
"""

import io
import struct
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionError, DivergedError, FormatError, ParameterError
from .tensor_core import Rng, derive_seed, sigmoid
from .validation import check_batch

KL_EPS = 1e-6

_AE_MAGIC = b"VXAE"
_AE_VERSION = 1


class AutoencoderParams(NamedTuple):
    """Tied-weight parameters: ``W`` is ``(p, n)``, decoder weights are ``W.T``."""

    W: np.ndarray
    b: np.ndarray
    b_star: np.ndarray

    @property
    def n_inputs(self):
        return self.W.shape[1]

    @property
    def n_hidden(self):
        return self.W.shape[0]

    def copy(self):
        return AutoencoderParams(self.W.copy(), self.b.copy(), self.b_star.copy())


class SparsityConfig(NamedTuple):
    s: float = 0.05
    beta: float = 3.0
    lam: float = 3e-3

    def validate(self):
        if not 0.0 < self.s < 1.0:
            raise ParameterError(f"sparsity target must lie in (0, 1), got {self.s}")
        if self.beta < 0 or self.lam < 0:
            raise ParameterError("beta and lambda must be non-negative")
        return self


def init_params(n_inputs, n_hidden, seed, init_scale=1.0):
    """W uniform on +-init_scale*sqrt(6/(n+p)), zero biases."""
    if n_inputs < 1 or n_hidden < 1:
        raise ParameterError("autoencoder dimensions must be >= 1")
    r = init_scale * np.sqrt(6.0 / (n_inputs + n_hidden))
    W = Rng(seed).uniform(-r, r, n_hidden * n_inputs).reshape(n_hidden, n_inputs)
    return AutoencoderParams(W, np.zeros(n_hidden), np.zeros(n_inputs))


def encode(params, X):
    """Hidden activations; ``X`` may be one vector or a batch of rows."""
    single = np.ndim(X) == 1
    X = check_batch(X, params.n_inputs)
    H = sigmoid(X @ params.W.T + params.b)
    return H[0] if single else H


def decode(params, H):
    single = np.ndim(H) == 1
    H = check_batch(H, params.n_hidden, "H")
    Xh = H @ params.W + params.b_star
    return Xh[0] if single else Xh


def reconstruction_cost(params, X):
    X = check_batch(X, params.n_inputs)
    E = decode(params, encode(params, X)) - X
    return 0.5 * float(np.sum(E * E)) / X.shape[0]


def mean_activations(params, X):
    return encode(params, check_batch(X, params.n_inputs)).mean(axis=0)


def kl_penalty(s, s_hat):
    """Sum of Bernoulli KL divergences ``KL(s || s_hat_j)``.

    ``s_hat`` is clamped into ``[KL_EPS, 1 - KL_EPS]`` so the value stays finite.
    """
    if not 0.0 < s < 1.0:
        raise ParameterError(f"sparsity target must lie in (0, 1), got {s}")
    q = np.clip(np.asarray(s_hat, dtype=np.float64), KL_EPS, 1.0 - KL_EPS)
    return float(np.sum(s * np.log(s / q) + (1.0 - s) * np.log((1.0 - s) / (1.0 - q))))


def total_cost(params, X, cfg):
    cfg = SparsityConfig(*cfg).validate()
    X = check_batch(X, params.n_inputs)
    H = encode(params, X)
    E = H @ params.W + params.b_star - X
    J = 0.5 * float(np.sum(E * E)) / X.shape[0]
    return J + cfg.beta * kl_penalty(cfg.s, H.mean(axis=0)) + cfg.lam * float(np.sum(params.W**2))


def cost_gradient(params, X, cfg):
    """Analytic gradient of :func:`total_cost`.

    Returns ``AutoencoderParams(dW, db, db_star)``.  ``dW`` sums the encoder
    path, the tied decoder path and the weight-decay term.
    """
    cfg = SparsityConfig(*cfg).validate()
    X = check_batch(X, params.n_inputs)
    N = X.shape[0]
    W = params.W
    H = sigmoid(X @ W.T + params.b)
    E = (H @ W + params.b_star - X) / N

    dW = H.T @ E
    db_star = E.sum(axis=0)
    dH = E @ W.T
    if cfg.beta:
        s_hat = H.mean(axis=0)
        inside = (s_hat >= KL_EPS) & (s_hat <= 1.0 - KL_EPS)
        q = np.clip(s_hat, KL_EPS, 1.0 - KL_EPS)
        dkl = np.where(inside, -cfg.s / q + (1.0 - cfg.s) / (1.0 - q), 0.0)
        dH = dH + cfg.beta * dkl / N
    dZ = dH * H * (1.0 - H)
    dW += dZ.T @ X + 2.0 * cfg.lam * W
    return AutoencoderParams(dW, dZ.sum(axis=0), db_star)


def train_autoencoder(params, X, cfg, batch_size, learning_rate, epochs, seed, X_val=None):
    """Minibatch gradient descent from ``params``; returns ``(params, history)``.

    The training rows are reshuffled every epoch with a seed derived from
    ``(seed, epoch)``.  ``history`` holds one dict per epoch with the total
    training cost and, when ``X_val`` is given, the validation reconstruction
    cost.
    """
    cfg = SparsityConfig(*cfg).validate()
    X = check_batch(X, params.n_inputs)
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if not learning_rate > 0:
        raise ParameterError(f"learning_rate must be positive, got {learning_rate}")
    W, b, b_star = (a.copy() for a in params)
    history = []
    # blow-ups are reported as DivergedError below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, epochs + 1):
            _ae_epoch(W, b, b_star, X, cfg, batch_size, learning_rate, seed, epoch)
            current = AutoencoderParams(W, b, b_star)
            cost = total_cost(current, X, cfg)
            if not np.isfinite(cost):
                raise DivergedError(epoch, value=cost)
            record = {"epoch": epoch, "train_cost": cost}
            if X_val is not None:
                record["val_reconstruction"] = reconstruction_cost(current, X_val)
            history.append(record)
    return AutoencoderParams(W, b, b_star), history


def _ae_epoch(W, b, b_star, X, cfg, batch_size, learning_rate, seed, epoch):
    """One shuffled pass of in-place gradient steps."""
    order = Rng(derive_seed(seed, "ae-shuffle", epoch)).permutation(X.shape[0])
    for batch, start in enumerate(range(0, X.shape[0], batch_size)):
        g = cost_gradient(AutoencoderParams(W, b, b_star),
                          X[order[start:start + batch_size]], cfg)
        if not (np.all(np.isfinite(g.W)) and np.all(np.isfinite(g.b))):
            raise DivergedError(epoch, batch)
        W -= learning_rate * g.W
        b -= learning_rate * g.b
        b_star -= learning_rate * g.b_star


def extract_bases(params, patch_shape):
    """Rows of ``W`` reshaped to ``patch_shape``, paired with their hidden biases."""
    patch_shape = tuple(int(a) for a in patch_shape)
    if int(np.prod(patch_shape)) != params.n_inputs:
        raise DimensionError(
            f"patch shape {patch_shape} holds {int(np.prod(patch_shape))} voxels, "
            f"autoencoder input size is {params.n_inputs}"
        )
    return [(params.W[j].reshape(patch_shape).copy(), float(params.b[j]))
            for j in range(params.n_hidden)]


def save_params(params, path):
    """Write a VXAE checkpoint: magic, u32 version, u32 n, u32 p, then f64 LE
    ``W`` (row-major), ``b``, ``b_star``."""
    with open(path, "wb") as fh:
        fh.write(dump_params(params))


def dump_params(params):
    buf = io.BytesIO()
    buf.write(_AE_MAGIC)
    buf.write(struct.pack("<III", _AE_VERSION, params.n_inputs, params.n_hidden))
    for arr in params:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def load_params(path):
    with open(path, "rb") as fh:
        return parse_params(fh.read())


def parse_params(raw):
    if raw[:4] != _AE_MAGIC:
        raise FormatError("not a VXAE checkpoint: bad magic", 0)
    if len(raw) < 16:
        raise FormatError("truncated VXAE header", len(raw))
    version, n, p = struct.unpack_from("<III", raw, 4)
    if version != _AE_VERSION:
        raise FormatError(f"unsupported VXAE version {version}", 4)
    expected = 16 + 8 * (p * n + p + n)
    if len(raw) != expected:
        raise FormatError(f"VXAE payload is {len(raw)} bytes, expected {expected}",
                          min(len(raw), expected))
    body = np.frombuffer(raw, dtype="<f8", offset=16).astype(np.float64)
    W = body[: p * n].reshape(p, n).copy()
    b = body[p * n: p * n + p].copy()
    b_star = body[p * n + p:].copy()
    return AutoencoderParams(W, b, b_star)


class SparseAutoencoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns the tied weights, ``transform`` encodes.

    Parameters
    ----------
    n_hidden : int
        Number of hidden units (bases).
    sparsity_target, beta, weight_decay : float
        ``s``, ``beta`` and ``lambda`` of the training cost.
    batch_size, learning_rate, epochs : minibatch gradient descent settings.
    seed : int
        Drives weight initialisation and per-epoch shuffling.
    init_scale : float
        Multiplier on the ``sqrt(6 / (n + p))`` initialisation bound.
    """

    def __init__(self, n_hidden=150, sparsity_target=0.05, beta=3.0, weight_decay=3e-3,
                 batch_size=100, learning_rate=0.01, epochs=50, seed=0, init_scale=1.0):
        self.n_hidden = n_hidden
        self.sparsity_target = sparsity_target
        self.beta = beta
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed
        self.init_scale = init_scale

    @property
    def sparsity_config(self):
        return SparsityConfig(self.sparsity_target, self.beta, self.weight_decay)

    def fit(self, X, y=None, X_val=None):
        X = check_batch(X)
        self.sparsity_config.validate()
        start = init_params(X.shape[1], self.n_hidden,
                            derive_seed(self.seed, "ae-init"), self.init_scale)
        self.params_, self.history_ = train_autoencoder(
            start, X, self.sparsity_config, self.batch_size, self.learning_rate,
            self.epochs, self.seed, X_val=X_val,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return encode(self.params_, check_batch(X, self.n_features_in_))

    def reconstruct(self, X):
        return decode(self.params_, self.transform(X))

    def score(self, X, y=None):
        """Negative reconstruction cost (higher is better)."""
        check_is_fitted(self, "params_")
        return -reconstruction_cost(self.params_, X)

    def bases(self, patch_shape):
        check_is_fitted(self, "params_")
        return extract_bases(self.params_, patch_shape)

    @classmethod
    def from_params(cls, params, **kwargs):
        est = cls(n_hidden=params.n_hidden, **kwargs)
        est.params_ = params
        est.history_ = []
        est.n_features_in_ = params.n_inputs
        return est
