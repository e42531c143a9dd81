"""Training loop, metrics, data splits and the four-rung ablation ladder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from mmgraph import tensor as tn
from mmgraph.embeddings import Episode
from mmgraph.model import (
    VARIANTS,
    EpisodeFeatures,
    ModelConfig,
    ModelParams,
    forward,
    init_params,
)
from mmgraph.optim import AdamState, LrSchedule, adam_step, lr_at

log = logging.getLogger(__name__)

cross_entropy = tn.cross_entropy


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    base_lr: float = 1e-4
    warmup: int = 5
    seed: int = 7
    variant: str = "full"
    val_fraction: float = 0.2
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.warmup < 0:
            raise ValueError("need epochs >= 1 and warmup >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    @property
    def schedule(self) -> LrSchedule:
        # runs shorter than the warm-up skip straight to the cosine phase
        return LrSchedule(self.base_lr, min(self.warmup, self.epochs - 1), self.epochs)


@dataclass
class Metrics:
    confusion: np.ndarray  # rows: true class, columns: predicted class
    loss: float | None = None

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def precision(self) -> np.ndarray:
        predicted = self.confusion.sum(axis=0)
        tp = np.diag(self.confusion).astype(np.float64)
        return np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)

    @property
    def recall(self) -> np.ndarray:
        actual = self.confusion.sum(axis=1)
        tp = np.diag(self.confusion).astype(np.float64)
        return np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)

    @property
    def f1(self) -> np.ndarray:
        p, r = self.precision, self.recall
        s = p + r
        return np.divide(2 * p * r, s, out=np.zeros_like(s), where=s > 0)

    @property
    def class_accuracy(self) -> np.ndarray:
        # per-class accuracy is the class's hit rate, i.e. its recall
        return self.recall

    def macro(self, name: str) -> float:
        return float(np.mean(getattr(self, name)))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_accuracy": self.macro("class_accuracy"),
            "macro_precision": self.macro("precision"),
            "macro_recall": self.macro("recall"),
            "macro_f1": self.macro("f1"),
            "per_class": {
                "accuracy": self.class_accuracy.tolist(),
                "precision": self.precision.tolist(),
                "recall": self.recall.tolist(),
                "f1": self.f1.tolist(),
            },
            "confusion": self.confusion.astype(int).tolist(),
            "loss": self.loss,
            "count": self.total,
        }


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return m


def metrics_from_predictions(y_true, y_pred, k: int, loss: float | None = None) -> Metrics:
    return Metrics(confusion_matrix(y_true, y_pred, k), loss)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    step_lrs: list[float]
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    val_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    best_epoch: int
    train_metrics: Metrics
    val_metrics: Metrics
    train_idx: list[int]
    val_idx: list[int]

    def history_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.history]


def stratified_split(labels, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Per class, hold out round(fraction * count) shuffled indices (at least one)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep, held = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        rng.shuffle(idx)
        n_held = max(1, int(round(fraction * len(idx))))
        if n_held >= len(idx):
            raise ValueError(f"class {k} has too few episodes ({len(idx)}) to split")
        held.extend(idx[:n_held].tolist())
        keep.extend(idx[n_held:].tolist())
    return sorted(keep), sorted(held)


def _features(dataset) -> list[EpisodeFeatures]:
    return [d if isinstance(d, EpisodeFeatures) else EpisodeFeatures.of(d) for d in dataset]


def _check_dims(params: ModelParams, feats: list[EpisodeFeatures]) -> None:
    for f in feats:
        if f.frames.shape[1] != params.d_v or f.text.shape[0] != params.d_t:
            raise ValueError(f"episode dims (d_V={f.frames.shape[1]}, d_T={f.text.shape[0]}) do not match "
                             f"model (d_V={params.d_v}, d_T={params.d_t})")
        if not 0 <= f.label < params.num_classes:
            raise ValueError(f"label {f.label} outside model's {params.num_classes} classes")


def evaluate(params: ModelParams, dataset, variant: str | None = None, batch_size: int = 32) -> Metrics:
    feats = _features(dataset)
    if not feats:
        raise ValueError("cannot evaluate an empty dataset")
    _check_dims(params, feats)
    variant = variant or params.variant
    preds, losses = [], []
    for s in range(0, len(feats), batch_size):
        batch = feats[s:s + batch_size]
        logits = forward(batch, params, variant).logits
        labels = [f.label for f in batch]
        losses.append(cross_entropy(logits, labels).item() * len(batch))
        preds.extend(np.argmax(logits.data, axis=1).tolist())
    y = [f.label for f in feats]
    return metrics_from_predictions(y, preds, params.num_classes, float(sum(losses) / len(feats)))


def train(dataset, cfg: TrainConfig, num_classes: int | None = None,
          split: tuple[list[int], list[int]] | None = None) -> TrainResult:
    """Minibatch Adam on cross-entropy; returns the best-validation-accuracy parameters."""
    feats = _features(dataset)
    if not feats:
        raise ValueError("empty dataset")
    labels = [f.label for f in feats]
    k = num_classes or (max(labels) + 1)
    train_idx, val_idx = split or stratified_split(labels, cfg.val_fraction, cfg.seed)
    if not train_idx or not val_idx:
        raise ValueError("empty train or validation split")
    train_feats = [feats[i] for i in train_idx]
    val_feats = [feats[i] for i in val_idx]

    d_v, d_t = feats[0].frames.shape[1], feats[0].text.shape[0]
    params = init_params(d_v, d_t, k, cfg.model, cfg.variant, seed=cfg.seed)
    _check_dims(params, feats)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed + 1)
    schedule = cfg.schedule
    best = params.copy()
    best_acc, best_epoch = -1.0, -1
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch)
        order = rng.permutation(len(train_feats))
        step_lrs, losses, hits = [], [], 0
        for s in range(0, len(order), cfg.batch_size):
            batch = [train_feats[i] for i in order[s:s + cfg.batch_size]]
            tn.zero_grads(params.tensors.values())
            logits = forward(batch, params).logits
            loss = cross_entropy(logits, [f.label for f in batch])
            loss.backward()
            adam_step(params.tensors, {n: t.grad for n, t in params.items()}, state, lr)
            step_lrs.append(lr)
            losses.append(loss.item() * len(batch))
            hits += int((np.argmax(logits.data, axis=1) == [f.label for f in batch]).sum())
        val = evaluate(params, val_feats)
        rec = EpochRecord(epoch, lr, step_lrs, sum(losses) / len(train_feats), hits / len(train_feats),
                          val.accuracy, val.loss)
        history.append(rec)
        log.info("epoch %d lr %.3g loss %.4f train %.3f val %.3f", epoch, lr, rec.train_loss,
                 rec.train_accuracy, rec.val_accuracy)
        if val.accuracy > best_acc:
            best_acc, best_epoch = val.accuracy, epoch
            best = params.copy()
    return TrainResult(best, history, best_epoch, evaluate(best, train_feats), evaluate(best, val_feats),
                       train_idx, val_idx)


# ablation ------------------------------------------------------------------------

ABLATION_LABELS = {
    "visual_only": "Visual baseline (frames + objects)",
    "plus_text": "+ Text (late fusion)",
    "static_graph": "+ Static graph reasoning",
    "full": "Full model (dynamic topology)",
}


@dataclass
class AblationRow:
    variant: str
    accuracy: float
    f1: float
    per_seed_accuracy: list[float]
    per_seed_f1: list[float]


def ablate(dataset, cfg: TrainConfig, seeds=(7,), num_classes: int | None = None) -> list[AblationRow]:
    """Train every variant on identical splits per seed; mean validation accuracy and macro-F1."""
    feats = _features(dataset)
    labels = [f.label for f in feats]
    rows = []
    for variant in VARIANTS:
        accs, f1s = [], []
        for seed in seeds:
            run_cfg = TrainConfig(**{**asdict(cfg), "model": cfg.model, "variant": variant, "seed": seed})
            split = stratified_split(labels, cfg.val_fraction, seed)
            res = train(feats, run_cfg, num_classes, split)
            accs.append(res.val_metrics.accuracy)
            f1s.append(res.val_metrics.macro("f1"))
            log.info("ablate %s seed %d: val acc %.3f", variant, seed, accs[-1])
        rows.append(AblationRow(variant, float(np.mean(accs)), float(np.mean(f1s)), accs, f1s))
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    width = max(len(v) for v in ABLATION_LABELS.values())
    lines = [f"{'Variant':<{width}}  Accuracy / F1 (%)", "-" * (width + 20)]
    for r in rows:
        lines.append(f"{ABLATION_LABELS[r.variant]:<{width}}  {100 * r.accuracy:5.1f} / {100 * r.f1:5.1f}")
    return "\n".join(lines) + "\n"


# generalisation splits ----------------------------------------------------------


def split_few_shot(dataset: list[Episode], shots: int, seed: int) -> tuple[list[Episode], list[Episode]]:
    """``shots`` support episodes per class; the rest of each class is the query set."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    labels = np.array([ep.class_id for ep in dataset])
    rng = np.random.default_rng(seed)
    support, query = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        if shots >= len(idx):
            raise ValueError(f"class {k} has {len(idx)} episodes; {shots}-shot leaves no query")
        rng.shuffle(idx)
        support.extend(idx[:shots].tolist())
        query.extend(idx[shots:].tolist())
    return [dataset[i] for i in sorted(support)], [dataset[i] for i in sorted(query)]


def split_unseen(dataset: list[Episode], held_out, seed: int = 0,
                 eval_fraction: float = 0.2) -> tuple[list[Episode], list[Episode]]:
    """Train on seen classes only; evaluate on a held-back slice of seen classes plus every held-out episode."""
    held = set(int(c) for c in held_out)
    classes = {ep.class_id for ep in dataset}
    if not held or not held < classes:
        raise ValueError("held-out classes must be a non-empty proper subset of the dataset's classes")
    seen_idx = [i for i, ep in enumerate(dataset) if ep.class_id not in held]
    keep, back = stratified_split([dataset[i].class_id for i in seen_idx], eval_fraction, seed)
    train_set = [dataset[seen_idx[i]] for i in keep]
    eval_idx = sorted([seen_idx[i] for i in back] + [i for i, ep in enumerate(dataset) if ep.class_id in held])
    return train_set, [dataset[i] for i in eval_idx]
