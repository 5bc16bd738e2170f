"""Feature-driven mobility models: softmax-output linear and multi-layer
networks, the training recipe (ADADELTA, dropout, input noise), the KL
evaluation metric, and the leave-one-out protocol.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from .mobility import OdMatrix, normalize_rows

HIDDEN_WIDTH = 100
KL_EPS = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3000
    batch_size: int = 10
    dropout_p: float = 0.5
    input_noise_sigma: float = 0.05
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.input_noise_sigma < 0 or self.adadelta_rho <= 0 or self.adadelta_eps <= 0:
            raise ValueError("noise/ADADELTA hyperparameters must be positive")


@dataclass
class MlpModel:
    """Stack of affine layers: rectified-linear hidden activations, softmax
    head. `layers[i] = (W, b)` with W shaped (fan_in, fan_out)."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]


@dataclass(frozen=True)
class MobilityDistribution:
    values: np.ndarray
    self_index: int | None = None

    def __post_init__(self):
        if abs(float(self.values.sum()) - 1.0) > 1e-9:
            raise ValueError("distribution does not sum to 1")
        if (self.values < 0).any():
            raise ValueError("negative probability")
        if self.self_index is not None and self.values[self.self_index] != 0.0:
            raise ValueError("self component must be 0")


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


def fit_standardizer(x: np.ndarray) -> FeatureStats:
    """Per-component mean and population standard deviation of the training
    fold. Held-out rows must never enter here."""
    return FeatureStats(mean=x.mean(axis=0), std=x.std(axis=0))


def standardize(x: np.ndarray, stats: FeatureStats) -> np.ndarray:
    """(x - mu) / sigma per component; constant components map to 0."""
    safe = np.where(stats.std > 0, stats.std, 1.0)
    out = (x - stats.mean) / safe
    return np.where(stats.std > 0, out, 0.0)


def new_model(input_dim: int, output_dim: int, depth: int,
              rng: np.random.Generator, hidden_width: int = HIDDEN_WIDTH) -> MlpModel:
    """Glorot-uniform initialization, bound sqrt(6 / (fan_in + fan_out))."""
    if not 1 <= depth <= 4:
        raise ValueError("depth must be in 1..4")
    dims = [input_dim] + [hidden_width] * (depth - 1) + [output_dim]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return MlpModel(layers)


def _softmax_masked(logits: np.ndarray, self_indices: np.ndarray | None) -> np.ndarray:
    """Row softmax with the self component excluded (probability forced to 0
    and the rest renormalized, i.e. softmax over the remaining logits)."""
    z = logits.copy()
    if self_indices is not None:
        if (self_indices >= 0).all():
            z[np.arange(z.shape[0]), self_indices] = -np.inf
        else:
            rows = np.flatnonzero(self_indices >= 0)
            z[rows, self_indices[rows]] = -np.inf
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_batch(model: MlpModel, x: np.ndarray,
                   dropout_masks: list[np.ndarray] | None = None,
                   self_indices: np.ndarray | None = None):
    """Returns (probabilities, cache) where cache holds the pre/post
    activations needed for backprop."""
    a = x
    pre, post = [], [x]
    for li, (w, b) in enumerate(model.layers[:-1]):
        z = a @ w + b
        h = np.maximum(z, 0.0)
        if dropout_masks is not None:
            h = h * dropout_masks[li]
        pre.append(z)
        post.append(h)
        a = h
    w, b = model.layers[-1]
    logits = a @ w + b
    q = _softmax_masked(logits, self_indices)
    return q, (pre, post)


def forward(model: MlpModel, x: np.ndarray, self_index: int | None = None,
            dropout_rng: np.random.Generator | None = None,
            dropout_p: float = 0.5) -> MobilityDistribution:
    """Single-vector forward pass. Passing `dropout_rng` runs train mode with
    inverted dropout on the hidden activations; eval mode leaves them
    untouched.
    """
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"feature dimension {x.shape[-1]} != model input {model.input_dim}")
    xb = x[None, :]
    masks = None
    if dropout_rng is not None and dropout_p > 0 and model.depth > 1:
        masks = [(dropout_rng.random((1, w.shape[1])) >= dropout_p) / (1.0 - dropout_p)
                 for w, _ in model.layers[:-1]]
    sidx = None if self_index is None else np.array([self_index])
    q, _ = _forward_batch(model, xb, masks, sidx)
    return MobilityDistribution(values=q[0], self_index=self_index)


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> float:
    """Sum of p_j * ln(p_j / q_j) in nats, over eps-smoothed, renormalized
    vectors. Components with p_j = 0 contribute nothing."""
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    ps = (p + eps) / (p + eps).sum()
    qs = (q + eps) / (q + eps).sum()
    terms = np.where(ps > 0, ps * np.log(ps / qs), 0.0)
    return float(terms.sum())


def _mean_kl_loss(model: MlpModel, x: np.ndarray, p: np.ndarray,
                  self_indices: np.ndarray | None) -> float:
    """Clean (no dropout, no noise) mean KL(p_i || model(x_i)) on a set."""
    q, _ = _forward_batch(model, x, None, self_indices)
    total = 0.0
    for i in range(x.shape[0]):
        total += kl_divergence(p[i], q[i])
    return total / x.shape[0]


def _backward(model: MlpModel, cache, q: np.ndarray, p: np.ndarray,
              dropout_masks: list[np.ndarray] | None,
              out_grads: list[tuple[np.ndarray, np.ndarray]] | None = None):
    """Gradients of mean KL(p || q) w.r.t. every weight and bias. When
    `out_grads` views are given, gradients are written into them in place."""
    pre, post = cache
    batch = q.shape[0]
    grads: list = [None] * model.depth if out_grads is None else out_grads
    delta = (q - p) / batch
    for li in range(model.depth - 1, -1, -1):
        w, _ = model.layers[li]
        if out_grads is None:
            grads[li] = (post[li].T @ delta, delta.sum(axis=0))
        else:
            gw, gb = grads[li]
            np.matmul(post[li].T, delta, out=gw)
            delta.sum(axis=0, out=gb)
        if li > 0:
            delta = delta @ w.T
            if dropout_masks is not None:
                delta = delta * dropout_masks[li - 1]
            delta = delta * (pre[li - 1] > 0)
    return grads


def _flatten_layers(layers) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Copy layers into one contiguous parameter vector; returns the flat
    buffer plus per-layer (W, b) views into it."""
    total = sum(w.size + b.size for w, b in layers)
    flat = np.empty(total)
    views, off = [], 0
    for w, b in layers:
        wv = flat[off:off + w.size].reshape(w.shape)
        wv[:] = w
        off += w.size
        bv = flat[off:off + b.size]
        bv[:] = b
        off += b.size
        views.append((wv, bv))
    return flat, views


try:  # optional accelerator; the numpy path below is bit-identical
    from numba import njit as _njit

    @_njit(cache=True)
    def _adadelta_kernel(params, grad, eg2, edx2, rho, eps):  # pragma: no cover
        for i in range(params.size):
            g = grad[i]
            eg2[i] = rho * eg2[i] + (1.0 - rho) * (g * g)
            dx = np.sqrt((edx2[i] + eps) / (eg2[i] + eps)) * g
            edx2[i] = rho * edx2[i] + (1.0 - rho) * (dx * dx)
            params[i] -= dx
except ImportError:  # pragma: no cover
    _adadelta_kernel = None


class _Adadelta:
    """ADADELTA accumulators over one flat parameter vector (decaying
    gradient and update second moments; no global learning rate). All update
    arithmetic runs in place on preallocated scratch buffers."""

    def __init__(self, n_params: int, rho: float, eps: float):
        self.rho, self.eps = rho, eps
        self.eg2 = np.zeros(n_params)
        self.edx2 = np.zeros(n_params)
        self._dx = np.empty(n_params)
        self._tmp = np.empty(n_params)

    def step(self, params: np.ndarray, grad: np.ndarray):
        rho, eps = self.rho, self.eps
        if _adadelta_kernel is not None:
            _adadelta_kernel(params, grad, self.eg2, self.edx2, rho, eps)
            return
        eg2, edx2, dx, tmp = self.eg2, self.edx2, self._dx, self._tmp
        eg2 *= rho
        np.multiply(grad, grad, out=tmp)
        tmp *= 1.0 - rho
        eg2 += tmp
        np.add(edx2, eps, out=dx)
        np.add(eg2, eps, out=tmp)
        dx /= tmp
        np.sqrt(dx, out=dx)
        dx *= grad
        edx2 *= rho
        np.multiply(dx, dx, out=tmp)
        tmp *= 1.0 - rho
        edx2 += tmp
        params -= dx


@dataclass
class TrainResult:
    model: MlpModel
    initial_loss: float
    final_loss: float


def train(config: TrainConfig, x: np.ndarray, p: np.ndarray,
          self_indices: np.ndarray | None = None, depth: int = 1,
          output_dim: int | None = None, hidden_width: int = HIDDEN_WIDTH) -> TrainResult:
    """Minimize mean KL(p_i || model(x_i)) with per-epoch shuffling, fresh
    Gaussian input noise each presentation, inverted dropout on hidden
    layers, and ADADELTA updates. Deterministic given config.seed.

    `x` must already be standardized with training-fold statistics.
    """
    if x.shape[0] != p.shape[0] or x.shape[0] < 2:
        raise ValueError("need at least 2 aligned training rows")
    output_dim = output_dim if output_dim is not None else p.shape[1]
    rng = np.random.default_rng(config.seed)
    init = new_model(x.shape[1], output_dim, depth, rng, hidden_width)
    params, views = _flatten_layers(init.layers)
    model = MlpModel(views)
    grad_buf, grad_views = _flatten_layers(init.layers)
    opt = _Adadelta(params.size, config.adadelta_rho, config.adadelta_eps)
    use_dropout = config.dropout_p > 0 and depth > 1

    initial_loss = _mean_kl_loss(model, x, p, self_indices)
    n = x.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        # one draw per epoch covers every presentation; sliced per batch
        noise = config.input_noise_sigma * rng.standard_normal((n, x.shape[1]))
        epoch_masks = None
        if use_dropout:
            epoch_masks = [(rng.random((n, w.shape[1])) >= config.dropout_p)
                           / (1.0 - config.dropout_p) for w, _ in model.layers[:-1]]
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = x[idx] + noise[start:start + config.batch_size]
            masks = None
            if use_dropout:
                masks = [em[start:start + config.batch_size] for em in epoch_masks]
            sidx = None if self_indices is None else self_indices[idx]
            q, cache = _forward_batch(model, xb, masks, sidx)
            _backward(model, cache, q, p[idx], masks, out_grads=grad_views)
            opt.step(params, grad_buf)
        if not np.isfinite(params).all():
            raise RuntimeError(f"non-finite parameters after epoch {epoch}")

    final_loss = _mean_kl_loss(model, x, p, self_indices)
    if not np.isfinite(final_loss):
        raise RuntimeError("non-finite training loss after final epoch")
    return TrainResult(model=model, initial_loss=initial_loss, final_loss=final_loss)


# ---------------------------------------------------------------------------
# Leave-one-out protocol

@dataclass
class FoldResult:
    neighborhood_id: str
    kl: float
    model: MlpModel
    stats: FeatureStats


@dataclass
class LoocvResult:
    task: str
    depth: int
    folds: list[FoldResult]

    @property
    def mean_kl(self) -> float:
        return float(np.mean([f.kl for f in self.folds]))

    @property
    def kls(self) -> list[float]:
        return [f.kl for f in self.folds]


def fold_seed(master_seed: int, fold: int) -> int:
    """Independent per-fold seed derived from the master seed."""
    ss = np.random.SeedSequence([master_seed, fold])
    return int(ss.generate_state(1)[0])


def loocv(features: np.ndarray, neighborhood_ids: tuple[str, ...], od: OdMatrix,
          task: str, config: TrainConfig, depth: int,
          reverse_kl: bool = False,
          fold_hook: Callable[..., None] | None = None) -> LoocvResult:
    """For each neighborhood: standardize on the other N-1, train on them,
    predict the held-out row, and score KL against its true normalized row.
    Task `from` evaluates the transposed matrix. The reported KL follows the
    printed-formula direction KL(prediction || truth); `reverse_kl` exposes
    the opposite direction for sensitivity checks.
    """
    if task not in ("to", "from"):
        raise ValueError(f"unknown task {task!r}")
    n = features.shape[0]
    if n < 3:
        raise ValueError("need at least 3 neighborhoods")
    matrix = od if task == od.direction else od.transposed()
    targets = normalize_rows(matrix)

    folds = []
    for i in range(n):
        train_idx = np.array([j for j in range(n) if j != i])
        stats = fit_standardizer(features[train_idx])
        x_train = standardize(features[train_idx], stats)
        fold_config = TrainConfig(**{**asdict(config), "seed": fold_seed(config.seed, i)})
        result = train(fold_config, x_train, targets[train_idx],
                       self_indices=train_idx, depth=depth, output_dim=n)
        if fold_hook is not None:
            fold_hook(fold=i, train_indices=train_idx, stats=stats, model=result.model)
        x_held = standardize(features[i], stats)
        pred = forward(result.model, x_held, self_index=i).values
        kl = kl_divergence(targets[i], pred) if reverse_kl else kl_divergence(pred, targets[i])
        folds.append(FoldResult(neighborhood_id=neighborhood_ids[i], kl=kl,
                                model=result.model, stats=stats))
    return LoocvResult(task=task, depth=depth, folds=folds)


def what_if(model: MlpModel, stats: FeatureStats, features: np.ndarray,
            self_index: int | None = None,
            n_count_features: int | None = None) -> MobilityDistribution:
    """Standardize an edited profile with the stored fold statistics and run
    an eval-mode forward pass. Count features (all but the trailing centroid
    coordinates by default) must be nonnegative.
    """
    n_count = n_count_features if n_count_features is not None else len(features) - 2
    if (features[:n_count] < 0).any():
        raise ValueError("negative category counts in edited profile")
    return forward(model, standardize(features, stats), self_index=self_index)


# ---------------------------------------------------------------------------
# Model artifact persistence

def model_to_dict(model: MlpModel, stats: FeatureStats | None = None,
                  config: TrainConfig | None = None) -> dict:
    d = {
        "layers": [{"shape": list(w.shape), "w": w.ravel().tolist(), "b": b.tolist()}
                   for w, b in model.layers],
    }
    if stats is not None:
        d["stats"] = {"mean": stats.mean.tolist(), "std": stats.std.tolist()}
    if config is not None:
        d["config"] = asdict(config)
    return d


def model_from_dict(d: dict) -> tuple[MlpModel, FeatureStats | None]:
    layers = [(np.array(l["w"], dtype=np.float64).reshape(l["shape"]),
               np.array(l["b"], dtype=np.float64)) for l in d["layers"]]
    stats = None
    if "stats" in d:
        stats = FeatureStats(mean=np.array(d["stats"]["mean"]),
                             std=np.array(d["stats"]["std"]))
    return MlpModel(layers), stats


def save_model(model: MlpModel, path: str | Path, stats: FeatureStats | None = None,
               config: TrainConfig | None = None):
    Path(path).write_text(json.dumps(model_to_dict(model, stats, config)))


def load_model(path: str | Path) -> tuple[MlpModel, FeatureStats | None]:
    return model_from_dict(json.loads(Path(path).read_text()))
