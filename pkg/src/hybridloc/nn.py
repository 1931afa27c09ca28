"""Residual-learning networks and the estimators built on top of them.

A small fully-connected network (ReLU hidden layers, sigmoid or linear
output) is trained to predict the equation-error vector of the linearized
localization system directly from the measurement vector.  The predicted
residual either supplies the weighting matrix for a single weighted solve
(NN-WLS), is subtracted before an ordinary least-squares solve (NN-LS), or
is bypassed entirely by a network that regresses the state itself
(black box).  Scatterer variants mirror the user-equipment ones on the
4-dimensional single-receiver system.

Everything here is plain numpy: forward pass, backpropagation, and the
ADAM optimizer are written out explicitly so the training path has no
external dependencies and stays deterministic for a given seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .errors import DimensionMismatchError, NumericalError
from .geometry import measurement_dim, scatterer_measurement, ue_measurement
from .noise import (
    build_q,
    build_qs,
    draw_dominant_bias,
    draw_dominant_bias_scatterer,
    sample_gaussian,
    sample_structured,
    sample_structured_scatterer,
)
from .scenario import Scenario, sample_scatterer_state, sample_ue_state
from .scatterer_wls import build_scatterer_system
from .ue_wls import build_system, solve_linear

_MODEL_FORMAT_VERSION = 1


@dataclass
class MlpConfig:
    """Topology and training hyperparameters for one network.

    ``lr_schedule`` and ``loss_weighting`` are opt-in refinements of the
    plain recipe: "cosine" anneals the learning rate toward lr/100 over the
    run, and "raw" weights each output component of the MSE by its
    normalizer span squared, which makes the training loss equal (up to a
    constant) to the MSE in physical units instead of normalized ones.
    Both default to the plain behavior.
    """

    layer_widths: tuple = (22, 32, 32, 22)
    output_activation: str = "sigmoid"  # "sigmoid" or "linear"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    lr_schedule: str = "constant"  # "constant" or "cosine"
    loss_weighting: str = "normalized"  # "normalized" or "raw"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise DimensionMismatchError("need at least input and output layers")
        if any(w < 1 for w in self.layer_widths):
            raise DimensionMismatchError("layer widths must be positive")
        if self.output_activation not in ("sigmoid", "linear"):
            raise NumericalError(
                f"unknown output activation {self.output_activation!r}"
            )
        if self.lr_schedule not in ("constant", "cosine"):
            raise NumericalError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.loss_weighting not in ("normalized", "raw"):
            raise NumericalError(
                f"unknown loss weighting {self.loss_weighting!r}"
            )

    def replace(self, **kw) -> "MlpConfig":
        return dc_replace(self, **kw)


class Normalizer:
    """Per-component min-max scaling into [0, 1], fitted on training data.

    Constant components get unit span so the round trip stays exact.
    """

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = np.asarray(lo, dtype=float)
        span = np.asarray(hi, dtype=float) - self.lo
        self.span = np.where(span > 0.0, span, 1.0)

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalizer":
        return cls(data.min(axis=0), data.max(axis=0))

    def transform(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, dtype=float) - self.lo) / self.span

    def inverse(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) * self.span + self.lo


@dataclass
class Dataset:
    """Aligned measurement / residual-label / true-state arrays."""

    m: np.ndarray  # (n, dim) measurement vectors
    e: np.ndarray  # (n, dim) equation-error labels
    x: np.ndarray  # (n, state_dim) true states
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.m.shape[0] != self.e.shape[0] or self.m.shape[0] != self.x.shape[0]:
            raise DimensionMismatchError("dataset arrays must share sample count")
        if self.m.shape != self.e.shape:
            raise DimensionMismatchError("labels must match measurement dimension")

    def __len__(self) -> int:
        return self.m.shape[0]

    def subset(self, sl: slice) -> "Dataset":
        return Dataset(self.m[sl], self.e[sl], self.x[sl], dict(self.metadata))


class Mlp:
    """Fully-connected network with ReLU hidden layers.

    ``weights[k]`` has shape (fan_out, fan_in); forward maps rows of a
    (batch, fan_in) matrix.  Normalizers for inputs and targets travel with
    the model so callers deal only in physical units.
    """

    def __init__(self, config: MlpConfig, weights, biases,
                 in_norm: Normalizer, out_norm: Normalizer):
        self.config = config
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.in_norm = in_norm
        self.out_norm = out_norm

    @classmethod
    def initialize(cls, config: MlpConfig, in_norm: Normalizer,
                   out_norm: Normalizer) -> "Mlp":
        rng = np.random.default_rng(config.seed)
        weights, biases = [], []
        widths = config.layer_widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(config, weights, biases, in_norm, out_norm)

    def _forward(self, z: np.ndarray):
        """Forward pass in normalized units, caching layer activations."""
        acts = [z]
        h = z
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w.T + b
            if k < last:
                h = np.maximum(pre, 0.0)
            elif self.config.output_activation == "sigmoid":
                h = 1.0 / (1.0 + np.exp(-pre))
            else:
                h = pre
            acts.append(h)
        return acts

    def loss_and_gradients(self, z: np.ndarray, t: np.ndarray, weights=None):
        """(Optionally component-weighted) MSE and gradients on a batch.

        ``weights`` is a per-output-component vector; ``None`` means the
        plain unweighted mean of squares.
        """
        acts = self._forward(z)
        out = acts[-1]
        diff = out - t
        if weights is None:
            loss = float(np.mean(diff**2))
            grad = 2.0 * diff / diff.size
        else:
            loss = float(np.mean(weights * diff**2))
            grad = 2.0 * weights * diff / diff.size
        if self.config.output_activation == "sigmoid":
            grad = grad * out * (1.0 - out)
        grads_w, grads_b = [], []
        for k in range(len(self.weights) - 1, -1, -1):
            grads_w.append(grad.T @ acts[k])
            grads_b.append(grad.sum(axis=0))
            if k > 0:
                grad = (grad @ self.weights[k]) * (acts[k] > 0.0)
        grads_w.reverse()
        grads_b.reverse()
        return loss, grads_w, grads_b

    def predict(self, m: np.ndarray) -> np.ndarray:
        """Physical-unit prediction for one vector or a batch."""
        m = np.asarray(m, dtype=float)
        single = m.ndim == 1
        z = self.in_norm.transform(np.atleast_2d(m))
        out = self._forward(z)[-1]
        pred = self.out_norm.inverse(out)
        return pred[0] if single else pred

    def copy_weights(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]


class _Adam:
    def __init__(self, shapes, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _train_on(config: MlpConfig, m_tr, y_tr, m_va, y_va) -> Mlp:
    """Shared minibatch-ADAM loop; inputs/targets in physical units."""
    m_tr = np.asarray(m_tr, dtype=float)
    y_tr = np.asarray(y_tr, dtype=float)
    if config.layer_widths[0] != m_tr.shape[1]:
        raise DimensionMismatchError(
            f"input width {config.layer_widths[0]} does not match data "
            f"dimension {m_tr.shape[1]}"
        )
    if config.layer_widths[-1] != y_tr.shape[1]:
        raise DimensionMismatchError(
            f"output width {config.layer_widths[-1]} does not match label "
            f"dimension {y_tr.shape[1]}"
        )
    in_norm = Normalizer.fit(m_tr)
    out_norm = Normalizer.fit(y_tr)
    net = Mlp.initialize(config, in_norm, out_norm)
    z_tr = in_norm.transform(m_tr)
    t_tr = out_norm.transform(y_tr)
    z_va = in_norm.transform(m_va)
    t_va = out_norm.transform(y_va)
    params = net.weights + net.biases
    adam = _Adam([p.shape for p in params], config.lr, config.beta1,
                 config.beta2, config.eps_adam)
    rng = np.random.default_rng([config.seed, 0x5E5])

    weights = None
    if config.loss_weighting == "raw":
        weights = out_norm.span**2
        weights = weights / weights.mean()

    def val_loss():
        # Snapshot selection always uses the plain normalized MSE.
        return float(np.mean((net._forward(z_va)[-1] - t_va) ** 2))

    best = (val_loss(), *net.copy_weights())
    n = z_tr.shape[0]
    for epoch in range(config.epochs):
        if config.lr_schedule == "cosine":
            floor = 1e-2 * config.lr
            adam.lr = floor + 0.5 * (config.lr - floor) * (
                1.0 + np.cos(np.pi * epoch / config.epochs)
            )
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, gw, gb = net.loss_and_gradients(z_tr[idx], t_tr[idx], weights)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"training diverged at epoch {epoch}: loss={loss}"
                )
            adam.step(params, gw + gb)
        current = val_loss()
        if current < best[0]:
            best = (current, *net.copy_weights())
    net.weights, net.biases = best[1], best[2]
    return net


def train(config: MlpConfig, train_set: Dataset, val_set: Dataset) -> Mlp:
    """Train a residual network, returning the best-validation snapshot."""
    return _train_on(config, train_set.m, train_set.e, val_set.m, val_set.e)


def train_blackbox(config: MlpConfig, train_set: Dataset, val_set: Dataset) -> Mlp:
    """Train a direct state-regression network (linear output head)."""
    cfg = config.replace(
        layer_widths=tuple(config.layer_widths[:-1]) + (train_set.x.shape[1],),
        output_activation="linear",
    )
    return _train_on(cfg, train_set.m, train_set.x, val_set.m, val_set.x)


def make_dataset(sc: Scenario, n_samples: int, rng, dominant_bias=None) -> Dataset:
    """Synthesize (measurement, equation-error, state) training samples.

    User states are drawn uniformly in the scenario boxes; each sample gets
    an independent noise draw.  Structured noise re-uses one dominant-bias
    vector for the whole dataset, mimicking a fixed systematic offset, with
    the small fluctuation resampled per sample.  Passing ``dominant_bias``
    pins that offset instead of drawing it, which lets several datasets at
    different noise levels share one scaled bias pattern.
    """
    rrhs = sc.selected_rrhs()
    n_a = rrhs.shape[0]
    dim = measurement_dim(n_a)
    cfg = sc.noise
    q = build_q(n_a, cfg)
    dominant = None
    if cfg.mode == "structured":
        if dominant_bias is not None:
            dominant = np.asarray(dominant_bias, dtype=float)
            if dominant.shape != (dim,):
                raise DimensionMismatchError(
                    f"dominant bias must have {dim} entries, got {dominant.shape}"
                )
        else:
            dominant = draw_dominant_bias(n_a, cfg, rng)

    m_all = np.empty((n_samples, dim))
    e_all = np.empty((n_samples, dim))
    x_all = np.empty((n_samples, 6))
    for i in range(n_samples):
        x = sample_ue_state(sc, rng)
        m_true = ue_measurement(x, rrhs)
        if cfg.mode == "structured":
            m = sample_structured(m_true, cfg, dominant, rng)
        else:
            m = sample_gaussian(m_true, q, rng)
        h, g = build_system(m, rrhs)
        m_all[i] = m
        e_all[i] = h - g @ x
        x_all[i] = x
    meta = {
        "kind": "ue",
        "n_a": n_a,
        "noise": {"delta_d": cfg.delta_d, "delta_a": cfg.delta_a,
                  "mode": cfg.mode, "ratio": cfg.ratio},
    }
    if dominant is not None:
        meta["dominant_bias"] = dominant.tolist()
    return Dataset(m_all, e_all, x_all, meta)


def make_scatterer_dataset(sc: Scenario, n_samples: int, rng) -> Dataset:
    """Scatterer analogue of make_dataset on the 4-dimensional system.

    The observing receiver and the differencing reference are fixed by the
    scenario; the user state is held at its true value (labels describe
    measurement error, not user error).
    """
    b_n = sc.rrhs[sc.scatterer_rrh]
    b_1 = sc.rrhs[0]
    ue = sc.ue_true
    cfg = sc.noise
    qs = build_qs(cfg)
    dominant = None
    if cfg.mode == "structured":
        dominant = draw_dominant_bias_scatterer(cfg, rng)

    m_all = np.empty((n_samples, 4))
    e_all = np.empty((n_samples, 4))
    x_all = np.empty((n_samples, 4))
    for i in range(n_samples):
        xs = sample_scatterer_state(sc, rng)
        ms_true = scatterer_measurement(xs, ue, b_n, b_1)
        if cfg.mode == "structured":
            ms = sample_structured_scatterer(ms_true, cfg, dominant, rng)
        else:
            ms = sample_gaussian(ms_true, qs, rng)
        h, g, t = build_scatterer_system(ms, b_n, b_1, ue)
        m_all[i] = ms
        e_all[i] = h - (g @ t) @ xs
        x_all[i] = xs
    meta = {
        "kind": "scatterer",
        "rrh": int(sc.scatterer_rrh),
        "noise": {"delta_d": cfg.delta_d, "delta_a": cfg.delta_a,
                  "mode": cfg.mode, "ratio": cfg.ratio},
    }
    if dominant is not None:
        meta["dominant_bias"] = dominant.tolist()
    return Dataset(m_all, e_all, x_all, meta)


def residual_weight(e_hat: np.ndarray, eps: float) -> np.ndarray:
    """Weighting matrix from a predicted residual: inverse of êêᵀ + εI."""
    if eps <= 0.0:
        raise NumericalError("ridge parameter must be positive")
    e_hat = np.asarray(e_hat, dtype=float)
    dim = e_hat.shape[0]
    return np.linalg.inv(np.outer(e_hat, e_hat) + eps * np.eye(dim))


def nn_wls_estimate(net: Mlp, m, rrhs, eps: float = 0.1):
    """Single weighted solve with the learned residual covariance."""
    m = np.asarray(m, dtype=float)
    e_hat = net.predict(m)
    h, g = build_system(m, np.asarray(rrhs, dtype=float))
    w = residual_weight(e_hat, eps)
    x, _ = solve_linear(h, g, w)
    return x


def nn_ls_estimate(net: Mlp, m, rrhs):
    """Ordinary least squares after subtracting the predicted residual."""
    m = np.asarray(m, dtype=float)
    e_hat = net.predict(m)
    h, g = build_system(m, np.asarray(rrhs, dtype=float))
    x, _ = solve_linear(h - e_hat, g, np.eye(h.shape[0]))
    return x


def blackbox_estimate(net_bb: Mlp, m):
    """Direct state regression; no geometric model involved."""
    return net_bb.predict(np.asarray(m, dtype=float))


def nn_wls_scatterer(net_s: Mlp, ms, b_n, b_1, ue, eps: float = 0.1):
    """Scatterer state from one receiver with the learned weighting."""
    ms = np.asarray(ms, dtype=float)
    e_hat = net_s.predict(ms)
    h, g, t = build_scatterer_system(ms, b_n, b_1, ue)
    w = residual_weight(e_hat, eps)
    xs, _ = solve_linear(h, g @ t, w)
    return xs


def save_model(net: Mlp, path) -> None:
    """Persist a model as a flat .npz archive (weights + normalizers)."""
    payload = {
        "format_version": np.array(_MODEL_FORMAT_VERSION),
        "layer_widths": np.array(net.config.layer_widths),
        "output_activation": np.array(net.config.output_activation),
        "seed": np.array(net.config.seed),
        "in_lo": net.in_norm.lo,
        "in_span": net.in_norm.span,
        "out_lo": net.out_norm.lo,
        "out_span": net.out_norm.span,
    }
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        payload[f"w{k}"] = w
        payload[f"b{k}"] = b
    np.savez(path, **payload)


def load_model(path) -> Mlp:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != _MODEL_FORMAT_VERSION:
            raise NumericalError(f"unsupported model format {version}")
        widths = tuple(int(w) for w in data["layer_widths"])
        config = MlpConfig(
            layer_widths=widths,
            output_activation=str(data["output_activation"]),
            seed=int(data["seed"]),
        )
        n_layers = len(widths) - 1
        weights = [data[f"w{k}"] for k in range(n_layers)]
        biases = [data[f"b{k}"] for k in range(n_layers)]
        in_norm = Normalizer(data["in_lo"], data["in_lo"] + data["in_span"])
        out_norm = Normalizer(data["out_lo"], data["out_lo"] + data["out_span"])
    return Mlp(config, weights, biases, in_norm, out_norm)


def save_dataset(ds: Dataset, path) -> None:
    """Persist a dataset as .npz; metadata rides along as sorted JSON."""
    np.savez(
        path,
        format_version=np.array(_MODEL_FORMAT_VERSION),
        m=ds.m,
        e=ds.e,
        x=ds.x,
        metadata=np.array(json.dumps(ds.metadata, sort_keys=True)),
    )


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != _MODEL_FORMAT_VERSION:
            raise NumericalError(f"unsupported dataset format {version}")
        return Dataset(
            data["m"], data["e"], data["x"], json.loads(str(data["metadata"]))
        )
