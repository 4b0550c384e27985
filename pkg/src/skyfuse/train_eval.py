"""Mini-batch training, top-k evaluation, confusion matrices and the
adjacent-cluster error statistic."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .net import model as M
from .net.model import NetworkConfig, NetworkParams
from .scene import Dataset
from .sphere import ClusterModel, nearest_two_batch

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd_momentum", "adam")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, what: str = "loss"):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 0.05
    seed: int = 0
    use_photometric: bool = True
    use_heatmap: bool = True
    use_coords: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not (self.use_photometric or self.use_heatmap or self.use_coords):
            raise ValueError("at least one branch must be enabled")

    def apply_ablation(self, cfg: NetworkConfig) -> NetworkConfig:
        return replace(
            cfg,
            use_photometric=self.use_photometric,
            use_heatmap=self.use_heatmap,
            use_coords=self.use_coords,
        )


# -- optimizers ----------------------------------------------------------------


def sgd_step(params: NetworkParams, grads: dict, state: dict, config: TrainConfig) -> dict:
    """Plain or heavy-ball SGD, in place. The weight decay is already in ``grads``."""
    lr = config.learning_rate
    for name, p in params.items():
        g = grads[name]
        if config.optimizer == "sgd_momentum":
            buf = state.setdefault(name, np.zeros_like(p))
            buf *= config.momentum
            buf += g
            g = buf
        p -= lr * g
    if hasattr(params, "touch"):
        params.touch()
    return state


def adam_step(params: NetworkParams, grads: dict, state: dict, config: TrainConfig) -> dict:
    """Bias-corrected Adam, in place."""
    t = state.get("t", 0) + 1
    state["t"] = t
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    lr = config.learning_rate
    for name, p in params.items():
        g = grads[name]
        m = state.setdefault(("m", name), np.zeros_like(p))
        v = state.setdefault(("v", name), np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    if hasattr(params, "touch"):
        params.touch()
    return state


def optimizer_step(params, grads, state, config: TrainConfig) -> dict:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    if config.optimizer == "adam":
        return adam_step(params, grads, state, config)
    return sgd_step(params, grads, state, config)


# -- inputs ----------------------------------------------------------------------


def pool_images(images: np.ndarray, out_px: int) -> np.ndarray:
    """Block-average (N, P, P) images down to (N, out_px, out_px)."""
    n, px, _ = images.shape
    if px == out_px:
        return images
    if px % out_px:
        raise M.ConfigError(f"dataset image_px {px} is not a multiple of net image_px {out_px}")
    f = px // out_px
    return images.reshape(n, out_px, f, out_px, f).mean(axis=(2, 4))


@dataclass
class Inputs:
    images: np.ndarray
    heatmaps: np.ndarray
    coords: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return self.images[idx], self.heatmaps[idx], self.coords[idx], self.labels[idx]


def check_compatible(cfg: NetworkConfig, ds: Dataset) -> None:
    if ds.k != cfg.k:
        raise M.ConfigError(f"dataset k={ds.k} but network k={cfg.k}")
    if ds.render.heat_px != cfg.heat_px:
        raise M.ConfigError(f"dataset heat_px={ds.render.heat_px} but network heat_px={cfg.heat_px}")
    if ds.render.n_stars != cfg.n_stars:
        raise M.ConfigError(f"dataset n_stars={ds.render.n_stars} but network n_stars={cfg.n_stars}")
    if ds.camera.image_px % cfg.image_px:
        raise M.ConfigError(
            f"dataset image_px={ds.camera.image_px} is not a multiple of network image_px={cfg.image_px}"
        )


def prepare_inputs(ds: Dataset, cfg: NetworkConfig, dtype=np.float32) -> Inputs:
    check_compatible(cfg, ds)
    return Inputs(
        pool_images(ds.images.astype(dtype), cfg.image_px).astype(dtype),
        ds.heatmaps.astype(dtype),
        ds.coords.astype(dtype),
        ds.labels.astype(np.int64),
    )


def network_config_for(ds: Dataset, **overrides) -> NetworkConfig:
    """Default network shaped to a dataset's k, heatmap size and star count."""
    base = dict(k=ds.k, heat_px=ds.render.heat_px, n_stars=ds.render.n_stars)
    base.update(overrides)
    return NetworkConfig(**base)


# -- metrics ---------------------------------------------------------------------


@dataclass
class EvalReport:
    top: dict[int, float]
    confusion: np.ndarray
    per_class: np.ndarray
    n: int
    mean_loss: float = float("nan")
    regularizer: float = float("nan")
    adjacency_error_fraction: float = 0.0
    errors_total: int = 0
    adjacent_errors: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def top1(self) -> float:
        return self.top[1]

    @property
    def top3(self) -> float:
        return self.top[3]

    @property
    def top5(self) -> float:
        return self.top[5]

    def lines(self) -> list[str]:
        out = [f"n={self.n}", f"k={len(self.per_class)}"]
        out += [f"top{k}={v!r}" for k, v in sorted(self.top.items())]
        out += [
            f"mean_loss={self.mean_loss!r}",
            f"regularizer={self.regularizer!r}",
            f"adjacency_error_fraction={self.adjacency_error_fraction!r}",
            f"errors_total={self.errors_total}",
            f"adjacent_errors={self.adjacent_errors}",
            "per_class=" + ",".join(str(int(c)) for c in self.per_class),
        ]
        out += [f"{k}={v}" for k, v in self.extra.items()]
        return out

    def confusion_text(self) -> str:
        return "\n".join(" ".join(str(int(c)) for c in row) for row in self.confusion) + "\n"


def ranked_classes(probs: np.ndarray) -> np.ndarray:
    """Classes by descending probability; equal probabilities keep index order."""
    return np.argsort(-probs, axis=1, kind="stable")


def evaluate_probabilities(
    probs: np.ndarray, labels: np.ndarray, k_list=(1, 3, 5), num_classes: int | None = None
) -> EvalReport:
    """Top-k accuracies and confusion matrix (rows = truth) from class scores.

    For ``k >= K`` every sample counts as a hit.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, kk = probs.shape
    if n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    num_classes = num_classes or kk
    order = ranked_classes(probs)
    rank_of_truth = np.argmax(order == labels[:, None], axis=1)
    top = {int(k): int(np.sum(rank_of_truth < k)) / n for k in sorted(set(k_list))}
    pred = order[:, 0]
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    per_class = np.bincount(labels, minlength=num_classes)
    return EvalReport(top=top, confusion=confusion, per_class=per_class, n=n)


def adjacency_from_predictions(
    pred: np.ndarray, labels: np.ndarray, boresights: np.ndarray, model: ClusterModel
) -> tuple[float, int, int]:
    """(fraction, adjacent_errors, errors_total) over misclassified samples.

    A miss is adjacent when the predicted class is the second-nearest
    centroid of the true boresight. No misses gives a fraction of 0.
    """
    wrong = np.asarray(pred) != np.asarray(labels)
    total = int(wrong.sum())
    if total == 0:
        return 0.0, 0, 0
    second = nearest_two_batch(model, np.asarray(boresights)[wrong])[:, 1]
    adjacent = int(np.sum(second == np.asarray(pred)[wrong]))
    return adjacent / total, adjacent, total


def evaluate(
    params: NetworkParams,
    cfg: NetworkConfig,
    dataset: Dataset,
    k_list=(1, 3, 5),
    cluster_model: ClusterModel | None = None,
    inputs: Inputs | None = None,
    lam: float = 0.0,
) -> EvalReport:
    inputs = inputs if inputs is not None else prepare_inputs(dataset, cfg, M.params_dtype(params))
    probs, logits = _predict(params, cfg, inputs)
    report = evaluate_probabilities(probs, inputs.labels, k_list, cfg.k)
    report.mean_loss = float(np.mean(M.cross_entropy(logits.astype(np.float64), inputs.labels)))
    report.regularizer = M.regularizer(params, cfg)
    if cluster_model is not None:
        pred = ranked_classes(probs)[:, 0]
        frac, adj, total = adjacency_from_predictions(
            pred, inputs.labels, dataset.boresights(), cluster_model
        )
        report.adjacency_error_fraction = frac
        report.adjacent_errors = adj
        report.errors_total = total
    return report


def adjacency_error_fraction(
    params, cfg: NetworkConfig, dataset: Dataset, cluster_model: ClusterModel
) -> tuple[float, int]:
    report = evaluate(params, cfg, dataset, (1,), cluster_model)
    return report.adjacency_error_fraction, report.errors_total


def _predict(params, cfg, inputs: Inputs, batch_size: int = 250):
    probs, logits = [], []
    for i in range(0, len(inputs), batch_size):
        sl = slice(i, i + batch_size)
        p, lg, _ = M.forward(params, cfg, inputs.images[sl], inputs.heatmaps[sl], inputs.coords[sl])
        probs.append(p)
        logits.append(lg)
    return np.concatenate(probs), np.concatenate(logits)


# -- training --------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float  # mean cross-entropy over the epoch's batches
    val_loss: float
    val_top1: float
    train_reg: float  # sum of squared trainable parameters at epoch end


@dataclass
class TrainResult:
    params: NetworkParams
    cfg: NetworkConfig
    history: list[EpochRecord]
    best_epoch: int


def history_text(history: list[EpochRecord]) -> str:
    lines = ["epoch,train_loss,val_loss,val_top1,train_reg"]
    lines += [
        f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.val_top1!r},{h.train_reg!r}" for h in history
    ]
    return "\n".join(lines) + "\n"


def train(
    train_set: Dataset,
    val_set: Dataset,
    config: TrainConfig = TrainConfig(),
    net_config: NetworkConfig | None = None,
    init: NetworkParams | None = None,
    train_inputs: Inputs | None = None,
    val_inputs: Inputs | None = None,
) -> TrainResult:
    """Train with shuffled mini-batches; keep the parameters with the best
    validation top-1 (latest epoch wins ties). Deterministic for a seed."""
    if train_set.k != val_set.k:
        raise M.ConfigError("train and val datasets disagree on k")
    cfg = config.apply_ablation(net_config or network_config_for(train_set))
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else M.init_params(cfg, rng, dtype)
    if set(params) != set(M.param_shapes(cfg)):
        raise M.ConfigError("initial parameters do not match the network config")
    tr = train_inputs if train_inputs is not None else prepare_inputs(train_set, cfg, dtype)
    va = val_inputs if val_inputs is not None else prepare_inputs(val_set, cfg, dtype)

    state: dict = {}
    history: list[EpochRecord] = []
    best = (-1.0, None, 0)
    n = len(tr)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        ce_sum, batches = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            img, hm, s, y = tr.take(idx)
            _, _, trace = M.forward(params, cfg, img, hm, s)
            ce = float(np.mean(M.cross_entropy(trace.logits, y)))
            if not math.isfinite(ce):
                raise TrainingDiverged(epoch, b)
            grads = M.backward(trace, y, params, config.lam)
            try:
                optimizer_step(params, grads, state, config)
            except FloatingPointError:
                raise TrainingDiverged(epoch, b, "gradient") from None
            ce_sum += ce
            batches += 1

        report = evaluate(params, cfg, val_set, (1,), inputs=va)
        rec = EpochRecord(
            epoch,
            ce_sum / batches,
            report.mean_loss,
            report.top1,
            M.regularizer(params, cfg),
        )
        if not math.isfinite(rec.val_loss):
            raise TrainingDiverged(epoch, batches - 1, "validation loss")
        history.append(rec)
        log.info(
            "epoch %d train_ce %.4f val_ce %.4f val_top1 %.4f reg %.2f",
            epoch, rec.train_loss, rec.val_loss, rec.val_top1, rec.train_reg,
        )
        if rec.val_top1 >= best[0]:
            best = (rec.val_top1, params.copy(), epoch)

    return TrainResult(best[1], cfg, history, best[2])
