"""Training loop, precision/recall evaluation and the branch-ablation runner."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from fddf.disentangle import BRANCHES, prepare_branch_inputs
from fddf.errors import ConfigurationError, DegenerateDataError, DivergenceError, NonFiniteError
from fddf.model import FddfModel, FusionWeights, ModelConfig
from fddf.nn import functional as F
from fddf.nn.optim import SGD
from fddf.nn.tensor import no_grad, precision
from fddf.synth import DatasetManifest, PatternKind, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    precision: int = 32
    weight_decay: float = 0.0
    max_grad_norm: float | None = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.precision not in (32, 64):
            raise ConfigurationError(f"precision must be 32 or 64, got {self.precision}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigurationError(f"max_grad_norm must be positive or None, got {self.max_grad_norm}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class PreparedData:
    """Branch inputs for a whole manifest, stacked per branch."""

    inputs: dict[str, np.ndarray]
    labels: np.ndarray
    paths: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx, branches: Iterable[str], dtype=np.float32) -> dict[str, np.ndarray]:
        return {b: self.inputs[b][idx].astype(dtype, copy=False) for b in branches}


def prepare_data(manifest: DatasetManifest) -> PreparedData:
    per_image = [prepare_branch_inputs(img) for img in manifest.load_images()]
    inputs = {b: np.stack([getattr(x, b) for x in per_image]) if per_image else np.empty((0,)) for b in BRANCHES}
    return PreparedData(inputs, manifest.labels(), [str(manifest.image_path(e)) for e in manifest.entries])


def _as_data(data) -> PreparedData:
    return data if isinstance(data, PreparedData) else prepare_data(data)


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def train(model: FddfModel, data, config: TrainConfig) -> tuple[FddfModel, History]:
    """Minimize cross-entropy with momentum SGD for a fixed epoch budget.

    ``data`` is a :class:`DatasetManifest` or :class:`PreparedData`. The
    per-epoch shuffle is drawn from ``config.seed``; history records the
    epoch-mean loss and the running train accuracy.
    """
    data = _as_data(data)
    n = len(data)
    if n == 0:
        raise DegenerateDataError("cannot train on an empty dataset")
    if len(np.unique(data.labels)) < 2:
        raise DegenerateDataError("training data contains a single class")

    if model.parameters()[0].dtype != config.dtype:
        model.astype(config.dtype)
    rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    history = History()
    model.train()
    with precision(config.precision):
        opt = SGD(
            model.parameters(), config.learning_rate, config.momentum, config.weight_decay, config.max_grad_norm
        )
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            total_loss = 0.0
            correct = 0
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start : start + config.batch_size]
                batch = data.take(idx, model.branches, config.dtype)
                labels = data.labels[idx]
                try:
                    logits, _ = model(batch)
                    loss = F.cross_entropy(logits, labels)
                    loss.backward()
                except NonFiniteError as exc:
                    raise DivergenceError(epoch, b, str(exc)) from exc
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(epoch, b, "loss is not finite")
                opt.step()
                total_loss += value * len(idx)
                correct += int((logits.data.argmax(axis=1) == labels).sum())
            history.loss.append(total_loss / n)
            history.accuracy.append(correct / n)
            log.info("epoch %d loss %.4f acc %.3f", epoch, history.loss[-1], history.accuracy[-1])
    return model, history


@dataclass
class Metrics:
    """Detection quality with ``recaptured`` as the positive class.

    ``confusion[t, p]`` counts samples of true class ``t`` predicted as ``p``.
    """

    precision: float
    recall: float
    accuracy: float
    confusion: np.ndarray
    mean_fusion_weights: dict[str, float]
    precision_undefined: bool = False

    @classmethod
    def from_predictions(cls, labels, predicted, weights: np.ndarray | None = None, branches=BRANCHES) -> "Metrics":
        labels = np.asarray(labels, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        confusion = np.zeros((2, 2), dtype=np.int64)
        np.add.at(confusion, (labels, predicted), 1)
        if weights is None or len(weights) == 0:
            mean_w = {b: float("nan") for b in branches}
        else:
            mean_w = dict(zip(branches, np.asarray(weights, dtype=np.float64).mean(axis=0).tolist()))
        return cls.from_confusion(confusion, mean_w)

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, mean_fusion_weights=None) -> "Metrics":
        tn, fp, fn, tp = (int(v) for v in np.asarray(confusion).reshape(-1))
        total = tn + fp + fn + tp
        undefined = tp + fp == 0
        return cls(
            precision=0.0 if undefined else tp / (tp + fp),
            recall=0.0 if tp + fn == 0 else tp / (tp + fn),
            accuracy=(tp + tn) / total if total else 0.0,
            confusion=np.asarray(confusion, dtype=np.int64),
            mean_fusion_weights=dict(mean_fusion_weights or {}),
            precision_undefined=undefined,
        )

    def records(self, row: str = "model") -> list[str]:
        """Machine-readable ``row<TAB>metric<TAB>value`` lines."""
        (tn, fp), (fn, tp) = self.confusion.tolist()
        items = [
            ("precision", f"{self.precision:.6f}"),
            ("recall", f"{self.recall:.6f}"),
            ("accuracy", f"{self.accuracy:.6f}"),
            ("precision_undefined", str(int(self.precision_undefined))),
            ("tn", str(tn)),
            ("fp", str(fp)),
            ("fn", str(fn)),
            ("tp", str(tp)),
        ]
        items += [(f"weight_{b}", f"{w:.6f}") for b, w in self.mean_fusion_weights.items()]
        return [f"{row}\t{k}\t{v}" for k, v in items]


def predict(model: FddfModel, data, batch_size: int = 32) -> tuple[np.ndarray, FusionWeights]:
    """``p_recaptured`` per sample and the fusion weights, in eval mode."""
    data = _as_data(data)
    was_training = model.training
    model.eval()
    dtype = model.parameters()[0].dtype
    probs, weights = [], []
    try:
        with no_grad():
            for start in range(0, len(data), batch_size):
                idx = np.arange(start, min(start + batch_size, len(data)))
                p, w = model.predict_proba(data.take(idx, model.branches, dtype))
                probs.append(p[:, 1])
                weights.append(w.values)
    finally:
        model.train(was_training)
    if not probs:
        return np.empty(0), FusionWeights(model.branches, np.empty((0, len(model.branches))))
    return np.concatenate(probs), FusionWeights(model.branches, np.concatenate(weights))


def evaluate(model: FddfModel, data, threshold: float = 0.5) -> Metrics:
    data = _as_data(data)
    if len(data) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    p, weights = predict(model, data)
    return Metrics.from_predictions(data.labels, (p >= threshold).astype(np.int64), weights.values, model.branches)


@dataclass(frozen=True)
class AblationSpec:
    dropped: frozenset = frozenset()

    def __post_init__(self):
        dropped = frozenset(PatternKind.parse(p) for p in self.dropped)
        if len(dropped) >= len(BRANCHES):
            raise ConfigurationError("an ablation must keep at least one branch")
        object.__setattr__(self, "dropped", dropped)

    @property
    def branches(self) -> tuple[str, ...]:
        return tuple(b for b in BRANCHES if PatternKind(b) not in self.dropped)

    @property
    def name(self) -> str:
        if not self.dropped:
            return "all"
        return "without_" + "+".join(p.value for p in PatternKind if p in self.dropped)


LEAVE_ONE_OUT = (AblationSpec(),) + tuple(AblationSpec(frozenset({p})) for p in PatternKind)


@dataclass
class AblationRow:
    spec: AblationSpec
    metrics: Metrics
    history: History
    model: FddfModel

    @property
    def name(self) -> str:
        return self.spec.name


def run_ablation(
    base_config: TrainConfig,
    train_data,
    test_data,
    specs: Sequence[AblationSpec] = LEAVE_ONE_OUT,
    model_config: ModelConfig | None = None,
) -> list[AblationRow]:
    """Retrain one model per spec from the same seed and evaluate each.

    The full-model row is always present (prepended if the specs omit it).
    """
    model_config = model_config or ModelConfig()
    train_data, test_data = _as_data(train_data), _as_data(test_data)
    specs = list(specs)
    if not any(not s.dropped for s in specs):
        specs.insert(0, AblationSpec())
    rows = []
    for spec in specs:
        cfg = ModelConfig(model_config.backbone, spec.branches, model_config.se_reduction)
        model = FddfModel(cfg, seed=base_config.seed)
        model, history = train(model, train_data, base_config)
        rows.append(AblationRow(spec, evaluate(model, test_data), history, model))
        log.info("ablation %s: acc %.3f", spec.name, rows[-1].metrics.accuracy)
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'components':<22}{'precision':>10}{'recall':>10}{'accuracy':>10}"]
    for r in rows:
        m = r.metrics
        flag = "*" if m.precision_undefined else " "
        lines.append(f"{r.name:<22}{m.precision:>9.3f}{flag}{m.recall:>10.3f}{m.accuracy:>10.3f}")
    return "\n".join(lines)
