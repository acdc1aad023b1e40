"""Joint training of selection and classifier, evaluation, and synthetic data.

The loss couples a class-weighted binary cross entropy on the change
probability with an entropy penalty on the soft selection matrix, so the
selector is optimized end to end with the classifier.  Evaluation always
runs with the hardened (exact) band selection.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from . import selection as sel
from . import tensor as T
from .graph import NumericalError
from .hsi import HsiCube, LabelMask, PatchSet, pad_cube_reflect
from .network import EcdbsModel
from .selection import TemperatureSchedule
from .tensor import Tape, Tensor

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    """Trade-off and class weights of the joint loss."""

    alpha: float = 0.1
    weight_changed: float = 5.0
    weight_unchanged: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.weight_changed <= 0 or self.weight_unchanged <= 0:
            raise ValueError("class weights must be positive")


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    tau_start: float = 1.0
    tau_end: float = 0.01

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau_start, self.tau_end, self.epochs)


# ---------------------------------------------------------------------------
# loss terms


def weighted_bce(y_hat: Tensor, y: int, cfg: LossConfig) -> Tensor:
    """Class-weighted binary cross entropy on a scalar change probability.

    The probability is clamped to [1e-7, 1-1e-7]; outside the clamp the
    gradient is zero.
    """
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    raw = float(y_hat.data)
    p = min(max(raw, PROB_CLAMP), 1.0 - PROB_CLAMP)
    inside = PROB_CLAMP < raw < 1.0 - PROB_CLAMP
    if y == 1:
        value = -cfg.weight_changed * np.log(p)
        slope = -cfg.weight_changed / p if inside else 0.0
    else:
        value = -cfg.weight_unchanged * np.log(1.0 - p)
        slope = cfg.weight_unchanged / (1.0 - p) if inside else 0.0

    def backward_fn(g):
        return (np.asarray(g * slope, dtype=y_hat.dtype).reshape(y_hat.shape),)

    return T.record(
        "weighted_bce", (y_hat,), np.asarray(value, dtype=y_hat.dtype), backward_fn
    )


def selection_entropy(e: Tensor) -> Tensor:
    """Mean row entropy of the selection matrix; 0*log 0 counts as 0."""
    p = e.data
    rows = p.shape[0]
    mask = p > 0
    logs = np.zeros_like(p)
    logs[mask] = np.log(p[mask])
    value = -(p * logs).sum() / rows

    def backward_fn(g):
        grad = np.zeros_like(p)
        grad[mask] = -(logs[mask] + 1.0) * (g / rows)
        return (grad,)

    return T.record("selection_entropy", (e,), np.asarray(value, dtype=p.dtype), backward_fn)


def total_loss(l_c: Tensor, l_e: Tensor, alpha: float) -> Tensor:
    """L = L_C + alpha * L_E."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return T.add(l_c, T.scale(l_e, alpha))


def batch_mean(losses) -> Tensor:
    losses = list(losses)
    acc = losses[0]
    for item in losses[1:]:
        acc = T.add(acc, item)
    return T.scale(acc, 1.0 / len(losses))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected adaptive-moment updates, applied in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self._v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def add(self, other: "ConfusionMatrix"):
        self.tp += other.tp
        self.tn += other.tn
        self.fp += other.fp
        self.fn += other.fn

    @classmethod
    def from_pairs(cls, truth, predicted):
        truth = np.asarray(truth).astype(np.int64)
        predicted = np.asarray(predicted).astype(np.int64)
        if truth.shape != predicted.shape:
            raise ValueError(f"label shapes disagree: {truth.shape} vs {predicted.shape}")
        return cls(
            tp=int(((truth == 1) & (predicted == 1)).sum()),
            tn=int(((truth == 0) & (predicted == 0)).sum()),
            fp=int(((truth == 0) & (predicted == 1)).sum()),
            fn=int(((truth == 1) & (predicted == 0)).sum()),
        )


@dataclass
class MetricsReport:
    oa: float
    kappa: float
    f1: float
    precision: float
    recall: float
    degenerate: bool = False


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Overall accuracy, chance-corrected agreement and F1 from raw counts.

    Zero-denominator precision/recall follow the 0/0 := 0 convention and
    set the degenerate flag.
    """
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp, tn, fp, fn = float(cm.tp), float(cm.tn), float(cm.fp), float(cm.fn)
    oa = (tp + tn) / total
    p_c = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (total * total)
    degenerate = False
    if 1.0 - p_c != 0.0:
        kappa = (oa - p_c) / (1.0 - p_c)
    else:
        kappa = 0.0
        degenerate = True
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        degenerate = True
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        degenerate = True
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(oa, kappa, f1, precision, recall, degenerate)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    tau: float
    train_loss: float
    val_oa: float
    val_kappa: float
    weights: np.ndarray
    selected: list


@dataclass
class TrainResult:
    log: list
    best_epoch: int
    best_kappa: float
    best_state: dict
    final_state: dict
    diverged: bool = False
    last_good_state: dict = field(default_factory=dict)


def snapshot_state(model: EcdbsModel) -> dict:
    state = {name: t.data.copy() for name, t in model.parameters().items()}
    state["state.band_weights"] = model.band_weights.copy()
    return state


def restore_state(model: EcdbsModel, state: dict) -> None:
    for name, t in model.parameters().items():
        t.data = state[name].copy()
    model.band_weights = state["state.band_weights"].copy()


def train(model: EcdbsModel, train_set: PatchSet, val_set: PatchSet,
          train_cfg: TrainConfig, loss_cfg: LossConfig) -> TrainResult:
    """Seeded mini-batch training with temperature annealing.

    Each batch shares one selection matrix built from the batch-averaged
    band weights.  Per epoch the dataset-mean weights, the hardened picks
    and validation metrics are logged.  A non-finite loss aborts training
    with the last completed epoch's state.
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("training split is empty")
    classes = set(int(v) for v in train_set.labels)
    if classes != {0, 1}:
        raise ValueError(f"training split needs both classes, found {sorted(classes)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(train_cfg.seed), 0x5871]))
    schedule = train_cfg.schedule()
    adam = Adam(
        model.parameters().values(),
        lr=train_cfg.learning_rate,
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        eps=train_cfg.adam_eps,
    )
    log = []
    best_epoch, best_kappa, best_state = -1, -np.inf, snapshot_state(model)
    last_good = snapshot_state(model)
    diverged = False

    for epoch in range(train_cfg.epochs):
        tau = schedule.temperature_at(epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        weight_sum = np.zeros(model.bands, dtype=np.float64)
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            with Tape() as tape:
                xs = [model.patch_tensor(train_set.patch(i)) for i in batch]
                ws = [model.band_weight_forward(x) for x in xs]
                w_bar = sel.batch_average(ws)
                e = sel.intra_cluster_softmax(w_bar, model.assignment, tau)
                losses = []
                for x, i in zip(xs, batch):
                    probs, _ = model.classify(x, e)
                    y_hat = T.element(probs, 1)
                    losses.append(weighted_bce(y_hat, int(train_set.labels[i]), loss_cfg))
                l_c = batch_mean(losses)
                l_e = selection_entropy(e)
                loss = total_loss(l_c, l_e, loss_cfg.alpha)
                if not np.isfinite(loss.item()):
                    diverged = True
                    break
                model.zero_grad()
                tape.backward(loss)
            adam.step()
            loss_sum += loss.item() * batch.size
            weight_sum += w_bar.data.astype(np.float64) * batch.size
        if diverged:
            break
        epoch_weights = weight_sum / n
        model.band_weights = epoch_weights
        _, selected = model.hardened_selection()
        if len(val_set):
            val_report, _, _ = evaluate(model, val_set)
            val_oa, val_kappa = val_report.oa, val_report.kappa
        else:
            val_oa = val_kappa = float("nan")
        log.append(
            EpochRecord(
                epoch=epoch,
                tau=tau,
                train_loss=loss_sum / n,
                val_oa=val_oa,
                val_kappa=val_kappa,
                weights=epoch_weights.copy(),
                selected=selected,
            )
        )
        last_good = snapshot_state(model)
        # ties go to the later epoch: the selection is further annealed there
        if np.isfinite(val_kappa) and val_kappa >= best_kappa:
            best_epoch, best_kappa, best_state = epoch, val_kappa, snapshot_state(model)
    if best_epoch < 0:  # no usable validation signal: keep the last state
        best_epoch = len(log) - 1
        best_kappa = float("nan")
        best_state = last_good
    return TrainResult(
        log=log,
        best_epoch=best_epoch,
        best_kappa=best_kappa,
        best_state=best_state,
        final_state=snapshot_state(model) if not diverged else last_good,
        diverged=diverged,
        last_good_state=last_good,
    )


# ---------------------------------------------------------------------------
# evaluation


def _predict_indices(model, patches, indices, out):
    for i in indices:
        probs = model.infer(patches.patch(i))
        out[i] = int(np.argmax(probs))


def predict_patchset(model: EcdbsModel, patches: PatchSet, workers: int = 1) -> np.ndarray:
    """Hardened-selection class predictions for every patch, 0/1 per entry."""
    n = len(patches)
    out = np.zeros(n, dtype=np.int64)
    indices = np.arange(n)
    if workers <= 1 or n < 2 * workers:
        _predict_indices(model, patches, indices, out)
        return out
    shards = np.array_split(indices, workers)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_predict_indices, model, patches, shard, out) for shard in shards]
        for fut in futures:
            fut.result()
    return out


def evaluate(model: EcdbsModel, test_set: PatchSet, workers: int = 1):
    """Metrics over a labeled patch set; returns (report, confusion, predictions)."""
    if len(test_set) == 0:
        raise ValueError("evaluation split is empty")
    predictions = predict_patchset(model, test_set, workers)
    cm = ConfusionMatrix.from_pairs(test_set.labels, predictions)
    return metrics(cm), cm, predictions


def predict_full(model: EcdbsModel, cube: HsiCube, workers: int = 1) -> np.ndarray:
    """Change/no-change decision for every pixel of the difference image."""
    s = model.patch_size
    padded = pad_cube_reflect(cube, s)
    h, w = cube.height, cube.width
    out = np.zeros((h, w), dtype=np.uint8)

    def run_rows(rows):
        for r in rows:
            for c in range(w):
                probs = model.infer(padded[:, r : r + s, c : c + s])
                out[r, c] = int(np.argmax(probs))

    rows = np.arange(h)
    if workers <= 1 or h < 2 * workers:
        run_rows(rows)
        return out
    shards = np.array_split(rows, workers)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_rows, shard) for shard in shards]
        for fut in futures:
            fut.result()
    return out


# ---------------------------------------------------------------------------
# synthetic bitemporal scenes


def _smooth_field(rng, height, width, cell=8):
    coarse = rng.normal(size=(height // cell + 2, width // cell + 2))
    ri = np.arange(height) / cell
    ci = np.arange(width) / cell
    r0 = ri.astype(np.int64)
    c0 = ci.astype(np.int64)
    fr = (ri - r0)[:, None]
    fc = (ci - c0)[None, :]
    tl = coarse[np.ix_(r0, c0)]
    tr = coarse[np.ix_(r0, c0 + 1)]
    bl = coarse[np.ix_(r0 + 1, c0)]
    br = coarse[np.ix_(r0 + 1, c0 + 1)]
    return (
        tl * (1 - fr) * (1 - fc)
        + tr * (1 - fr) * fc
        + bl * fr * (1 - fc)
        + br * fr * fc
    )


def synth_generate(
    seed,
    bands=32,
    height=64,
    width=64,
    informative_bands=None,
    change_fraction=0.15,
    noise_sigma=0.05,
    offset_low=0.4,
    offset_high=0.6,
    group_size=4,
):
    """Deterministic bitemporal scene with planted rectangular changes.

    The first acquisition is a stack of smooth fields, correlated within
    contiguous band groups.  The second adds a per-band offset on the
    informative bands inside the planted change rectangles, plus i.i.d.
    noise everywhere.  Returns (t1, t2, labels, informative band list).
    """
    if informative_bands is None:
        count = max(1, bands // 4)
        informative_bands = [int(b) for b in np.linspace(0, bands, count, endpoint=False)]
    informative = sorted(set(int(b) for b in informative_bands))
    if not informative:
        raise ValueError("informative band set must not be empty")
    if informative[0] < 0 or informative[-1] >= bands:
        raise ValueError(f"informative bands must lie in [0,{bands})")
    if not 0.0 <= change_fraction < 0.5:
        raise ValueError(f"change fraction must be in [0,0.5), got {change_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E6E]))

    t1 = np.empty((bands, height, width), dtype=np.float64)
    group_count = (bands + group_size - 1) // group_size
    for g in range(group_count):
        base = _smooth_field(rng, height, width)
        for b in range(g * group_size, min((g + 1) * group_size, bands)):
            gain = rng.uniform(0.8, 1.2)
            t1[b] = gain * base + 0.15 * _smooth_field(rng, height, width)

    mask = np.zeros((height, width), dtype=np.uint8)
    target = int(round(change_fraction * height * width))
    guard = 0
    while mask.sum() < target and guard < 1000:
        rh = int(rng.integers(6, 17))
        rw = int(rng.integers(6, 17))
        r0 = int(rng.integers(0, height - rh + 1))
        c0 = int(rng.integers(0, width - rw + 1))
        mask[r0 : r0 + rh, c0 : c0 + rw] = 1
        guard += 1

    delta = np.zeros_like(t1)
    for b in informative:
        delta[b] = rng.uniform(offset_low, offset_high) * mask
    t2 = t1 + delta
    if noise_sigma > 0:
        t2 = t2 + rng.normal(0.0, noise_sigma, size=t2.shape)
    return HsiCube(t1), HsiCube(t2), LabelMask(mask), informative


__all__ = [
    "Adam",
    "ConfusionMatrix",
    "EpochRecord",
    "LossConfig",
    "MetricsReport",
    "NumericalError",
    "TrainConfig",
    "TrainResult",
    "batch_mean",
    "evaluate",
    "metrics",
    "predict_full",
    "predict_patchset",
    "restore_state",
    "selection_entropy",
    "snapshot_state",
    "synth_generate",
    "total_loss",
    "train",
    "weighted_bce",
]
