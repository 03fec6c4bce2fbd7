"""Adam training loop, cross-entropy loss, and the evaluation metric suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import batch_iterator
from .errors import DivergenceError, ShapeError
from .model import Model, ModelConfig, build_model, model_forward, trainable_parameters
from .tensor import Tape, Tensor, _emit, backward as tape_backward


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 40
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class, max-shifted.

    ``logits`` is (N,1,1,K); ``labels`` are integer ids in [0, K). The
    gradient with respect to the logits is (softmax - onehot) / N.
    """
    n, h, w, k = logits.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"logits must be (N,1,1,K), got {tuple(logits.shape)}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.reshape(n, k)
    zmax = z.max(axis=1, keepdims=True)
    log_norm = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    out = np.array(loss).reshape(1, 1, 1, 1)

    def back(g):
        probs = np.exp(z - log_norm[:, None])
        probs[np.arange(n), labels] -= 1.0
        return ((g.reshape(-1)[0] / n) * probs.reshape(n, 1, 1, k),)

    return _emit("softmax_cross_entropy", (logits,), out, back)


def softmax_probabilities(logits: Tensor) -> np.ndarray:
    """Row-stochastic (N, K) probabilities from (N,1,1,K) logits."""
    n, _, _, k = logits.shape
    z = logits.data.reshape(n, k)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def adam_step(params, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place, over named parameters.

    ``params`` is an ordered (name, tensor) sequence and ``grads`` maps
    exactly those names to same-shaped arrays.
    """
    names = [name for name, _ in params]
    if set(names) != set(grads):
        raise ShapeError(f"gradients cover {sorted(grads)} but trainable "
                         f"parameters are {sorted(names)}")
    state.t += 1
    t = state.t
    for name, tensor in params:
        g = np.asarray(grads[name])
        if g.shape != tensor.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} {tensor.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + epsilon)
    return state


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class EpochCurve:
    records: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.train_acc!r},"
                         f"{r.val_loss!r},{r.val_acc!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SplitData:
    """Preprocessed tensors of one train/test split."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def _forward_dataset(model: Model, x: np.ndarray, y: np.ndarray,
                     batch_size: int = 64):
    """Untracked loss and prediction sweep, in fixed order."""
    total_loss = 0.0
    preds = np.empty(len(y), dtype=np.int64)
    for start in range(0, len(y), batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        logits = model_forward(model, Tensor(xb))
        total_loss += softmax_cross_entropy(logits, yb).item() * len(yb)
        preds[start:start + len(yb)] = np.argmax(
            logits.data.reshape(len(yb), -1), axis=1)
    return total_loss / len(y), preds


def train(model: Model, data: SplitData, cfg: TrainConfig):
    """Run the full optimization schedule; returns (model, EpochCurve).

    Each epoch consumes a fresh seeded shuffle of the training set, and
    the held-out test split is scored after every epoch for the curve.
    A non-finite loss aborts with epoch/batch context.
    """
    state = AdamState()
    curve = EpochCurve()
    n_train = len(data.train_y)
    for epoch in range(1, cfg.max_epochs + 1):
        loss_sum = 0.0
        correct = 0
        for batch_no, batch in enumerate(
                batch_iterator(np.arange(n_train), cfg.batch_size,
                               cfg.seed, epoch)):
            xb = data.train_x[batch]
            yb = data.train_y[batch]
            tape = Tape()
            model.watch_trainable(tape)
            logits = model_forward(model, Tensor(xb))
            loss = softmax_cross_entropy(logits, yb)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, "
                                      f"batch {batch_no}")
            loss_sum += loss_value * len(yb)
            correct += int(np.sum(np.argmax(
                logits.data.reshape(len(yb), -1), axis=1) == yb))
            trainable = trainable_parameters(model)
            if trainable:
                grad_map = tape_backward(tape, loss)
                grads = {}
                for name, tensor in trainable:
                    g = grad_map.get(tensor.node_id)
                    grads[name] = (g.data if g is not None
                                   else np.zeros_like(tensor.data))
                adam_step(trainable, grads, state, cfg.learning_rate,
                          cfg.beta1, cfg.beta2, cfg.epsilon)
        val_loss, val_preds = _forward_dataset(model, data.test_x, data.test_y)
        curve.records.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n_train,
            train_acc=correct / n_train,
            val_loss=val_loss,
            val_acc=float(np.mean(val_preds == data.test_y)),
        ))
    return model, curve


@dataclass(frozen=True)
class MetricsReport:
    class_names: tuple
    confusion: np.ndarray          # rows = true class, columns = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    top1_error_percent: float
    zero_division: tuple           # e.g. ("precision:class02",)

    def to_csv(self) -> str:
        lines = ["class,precision,recall,f1"]
        for i, name in enumerate(self.class_names):
            lines.append(f"{name},{float(self.precision[i])!r},"
                         f"{float(self.recall[i])!r},{float(self.f1[i])!r}")
        lines.append(f"accuracy,{self.accuracy!r}")
        lines.append(f"top1_error,{self.top1_error_percent!r}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        return "\n".join(",".join(str(v) for v in row)
                         for row in self.confusion) + "\n"

    def to_text(self) -> str:
        lines = [f"accuracy: {self.accuracy:.4f}   "
                 f"top-1 error: {self.top1_error_percent:.2f}%",
                 f"macro precision/recall/f1: {self.macro_precision:.4f} / "
                 f"{self.macro_recall:.4f} / {self.macro_f1:.4f}",
                 "per-class:"]
        for i, name in enumerate(self.class_names):
            lines.append(f"  {name}: precision {self.precision[i]:.4f}  "
                         f"recall {self.recall[i]:.4f}  f1 {self.f1[i]:.4f}")
        if self.zero_division:
            lines.append("zero-denominator metrics reported as 0: "
                         + ", ".join(self.zero_division))
        return "\n".join(lines) + "\n"


def metrics_from_predictions(y_true, y_pred, class_names) -> MetricsReport:
    """Confusion matrix and derived metrics; 0/0 ratios become 0, flagged."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    k = len(class_names)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1
    tp = np.diag(confusion).astype(np.float64)
    pred_totals = confusion.sum(axis=0).astype(np.float64)
    true_totals = confusion.sum(axis=1).astype(np.float64)

    flagged = []
    precision = np.zeros(k)
    recall = np.zeros(k)
    f1 = np.zeros(k)
    for i in range(k):
        if pred_totals[i] > 0:
            precision[i] = tp[i] / pred_totals[i]
        else:
            flagged.append(f"precision:{class_names[i]}")
        if true_totals[i] > 0:
            recall[i] = tp[i] / true_totals[i]
        else:
            flagged.append(f"recall:{class_names[i]}")
        if precision[i] + recall[i] > 0:
            f1[i] = 2.0 * precision[i] * recall[i] / (precision[i] + recall[i])

    accuracy = float(tp.sum() / len(y_true))
    return MetricsReport(
        class_names=tuple(class_names),
        confusion=confusion,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        accuracy=accuracy,
        top1_error_percent=100.0 - 100.0 * accuracy,
        zero_division=tuple(flagged),
    )


def evaluate(model: Model, x: np.ndarray, y: np.ndarray) -> MetricsReport:
    """Score a sample set; argmax ties resolve to the lowest class index."""
    if len(y) < 1:
        raise ValueError("evaluate needs at least one sample")
    _, preds = _forward_dataset(model, x, np.asarray(y, dtype=np.int64))
    return metrics_from_predictions(y, preds, model.class_names)


@dataclass(frozen=True)
class AblationRow:
    seed: int
    accuracy_with_attention: float
    accuracy_without_attention: float


@dataclass(frozen=True)
class AblationResult:
    rows: tuple

    @property
    def mean_with(self) -> float:
        return float(np.mean([r.accuracy_with_attention for r in self.rows]))

    @property
    def mean_without(self) -> float:
        return float(np.mean([r.accuracy_without_attention for r in self.rows]))

    @property
    def mean_difference(self) -> float:
        return self.mean_with - self.mean_without


def ablation_run(data: SplitData, model_cfg: ModelConfig, cfg: TrainConfig,
                 seeds) -> AblationResult:
    """Paired with/without-attention training over each seed.

    Both runs of a pair share the seed, so they see identical initial
    backbone/head weights and identical batch orders; only the attention
    parameters differ.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    class_names = [f"class{i:02d}" for i in range(model_cfg.num_classes)]
    rows = []
    for seed in seeds:
        accs = {}
        for use_fab in (True, False):
            m = build_model(replace(model_cfg, use_fab=use_fab), seed,
                            class_names=class_names)
            m, _ = train(m, data, replace(cfg, seed=seed))
            accs[use_fab] = evaluate(m, data.test_x, data.test_y).accuracy
        rows.append(AblationRow(seed, accs[True], accs[False]))
    return AblationResult(rows=tuple(rows))
