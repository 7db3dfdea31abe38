"""
Per-trial class-likelihood model.

logit_k = z_k . max(w_k, 0), p = softmax(logits). Trained with full-batch
Adam on cross-entropy; the epoch count comes from k-fold validation.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from featling.ruledsl import FeatureMatrix

logger = logging.getLogger(__name__)

Matrices = Sequence[Union[FeatureMatrix, np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 200
    folds: Optional[int] = None  # None: 2 if k / #classes < 4 else 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TrialModel:
    classes: Tuple[str, ...]
    weights: List[np.ndarray]
    trained_epochs: int = 0
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            'classes': list(self.classes),
            'weights': [[float(x) for x in w] for w in self.weights],
            'trained_epochs': self.trained_epochs,
            'config': dict(self.config),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TrialModel':
        return cls(
            classes=tuple(data['classes']),
            weights=[np.asarray(w, dtype=float) for w in data['weights']],
            trained_epochs=int(data['trained_epochs']),
            config=dict(data.get('config', {})),
        )


def _as_arrays(matrices: Matrices) -> List[np.ndarray]:
    arrays = []
    for m in matrices:
        values = m.values if isinstance(m, FeatureMatrix) else np.asarray(m, dtype=float)
        arrays.append(np.atleast_2d(values) if values.ndim < 2 else values)
    return arrays


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def compute_logits(weights: Sequence[np.ndarray], matrices: Matrices) -> np.ndarray:
    arrays = _as_arrays(matrices)
    if len(arrays) != len(weights):
        raise ValueError(f"{len(weights)} weight vectors for {len(arrays)} class matrices")
    columns = []
    for k, (w, z) in enumerate(zip(weights, arrays)):
        if z.shape[1] != len(w):
            raise ValueError(f"Class {k}: {z.shape[1]} features but {len(w)} weights")
        columns.append(z @ np.maximum(w, 0.0))
    return np.column_stack(columns)


def forward(model: TrialModel, features: Matrices) -> np.ndarray:
    """
    Class probabilities.

    Args:
        model: trained trial model
        features: per class, a z_k vector (one row) or an N x R_k matrix

    Returns:
        Probability vector, or N x C matrix for matrix input
    """
    single = all(np.ndim(f.values if isinstance(f, FeatureMatrix) else f) == 1 for f in features)
    probs = softmax(compute_logits(model.weights, features))
    return probs[0] if single else probs


def predict_no_tuning(matrices: Matrices) -> np.ndarray:
    """Logit is the plain count of satisfied rules per class (forward with all-ones weights)."""
    arrays = _as_arrays(matrices)
    return softmax(compute_logits([np.ones(z.shape[1]) for z in arrays], arrays))


def loss_and_gradient(weights: Sequence[np.ndarray], matrices: Matrices,
                      labels: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Mean cross-entropy and its gradient per w_k (zero where w_k <= 0)."""
    arrays = _as_arrays(matrices)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("Empty batch")

    logits = compute_logits(weights, arrays)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())

    delta = np.exp(log_p)
    delta[rows, labels] -= 1.0
    delta /= n
    grads = [(z.T @ delta[:, k]) * (w > 0) for k, (w, z) in enumerate(zip(weights, arrays))]
    return loss, grads


def initial_weights(matrices: Matrices) -> List[np.ndarray]:
    """1/R_k per weight: training starts from normalized rule counting."""
    return [np.full(z.shape[1], 1.0 / z.shape[1]) for z in _as_arrays(matrices)]


def _adam(weights: List[np.ndarray], arrays: List[np.ndarray], labels: np.ndarray, epochs: int,
          cfg: TrainConfig, val: Optional[Tuple[List[np.ndarray], np.ndarray]] = None
          ) -> Tuple[List[np.ndarray], List[float], List[float]]:
    """Full-batch Adam. Returns (weights, train losses before each step, validation loss after each step)."""
    w = [x.copy() for x in weights]
    m = [np.zeros_like(x) for x in w]
    v = [np.zeros_like(x) for x in w]
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    train_losses, val_losses = [], []

    for t in range(1, epochs + 1):
        loss, grads = loss_and_gradient(w, arrays, labels)
        train_losses.append(loss)
        for k, g in enumerate(grads):
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            m_hat = m[k] / (1 - b1 ** t)
            v_hat = v[k] / (1 - b2 ** t)
            w[k] = w[k] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if val is not None:
            val_losses.append(loss_and_gradient(w, val[0], val[1])[0])
    return w, train_losses, val_losses


def choose_folds(n: int, num_classes: int) -> int:
    return 2 if n / num_classes < 4 else 4


def assign_folds(labels: np.ndarray, num_classes: int, folds: int, seed: int) -> Optional[np.ndarray]:
    """Stratified round-robin fold ids, or None when some fold's complement would miss a class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold_of = np.zeros(len(labels), dtype=np.int64)
    offset = 0
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            return None
        for i, idx in enumerate(rng.permutation(members)):
            fold_of[idx] = (offset + i) % folds
        offset += len(members)
    if len(labels) < folds:
        return None
    return fold_of


def select_epoch(arrays: List[np.ndarray], labels: np.ndarray, num_classes: int, cfg: TrainConfig) -> int:
    folds = cfg.folds or choose_folds(len(labels), num_classes)
    fold_of = assign_folds(labels, num_classes, folds, cfg.seed)
    if fold_of is None:
        logger.warning(f"Cannot build {folds} stratified folds from {len(labels)} samples, "
                       f"using {cfg.max_epochs} epochs")
        return cfg.max_epochs

    curves = []
    for f in range(folds):
        train_mask = fold_of != f
        train = [z[train_mask] for z in arrays]
        val = [z[~train_mask] for z in arrays]
        _, _, val_losses = _adam(initial_weights(train), train, labels[train_mask], cfg.max_epochs, cfg,
                                 val=(val, labels[~train_mask]))
        curves.append(val_losses)
    mean_curve = np.mean(np.array(curves), axis=0)
    best = int(np.argmin(mean_curve)) + 1
    logger.debug(f"{folds}-fold validation picked epoch {best} (loss {mean_curve[best - 1]:.4f})")
    return best


def train_trial(matrices: Matrices, labels: np.ndarray, cfg: TrainConfig = TrainConfig(),
                classes: Optional[Sequence[str]] = None) -> TrialModel:
    """
    Fit one trial's weights.

    Args:
        matrices: per-class feature matrices over the k-shot rows
        labels: class positions of the k-shot rows
        cfg: optimizer and epoch-selection settings
        classes: class labels (default: the matrices' class labels)

    Returns:
        TrialModel trained for the validation-selected epoch count
    """
    arrays = _as_arrays(matrices)
    labels = np.asarray(labels, dtype=np.int64)
    if classes is None:
        classes = [m.class_label for m in matrices]
    num_classes = len(arrays)
    missing = [c for c in range(num_classes) if not np.any(labels == c)]
    if missing:
        raise ValueError(f"No training sample for class position(s) {missing}")

    epochs = select_epoch(arrays, labels, num_classes, cfg)
    weights, losses = fit_weights(arrays, labels, epochs, cfg)
    logger.info(f"Trained {epochs} epoch(s): loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return TrialModel(classes=tuple(classes), weights=weights, trained_epochs=epochs, config=cfg.to_dict())


def fit_weights(matrices: Matrices, labels: np.ndarray, epochs: int,
                cfg: TrainConfig = TrainConfig()) -> Tuple[List[np.ndarray], List[float]]:
    """Fit on all rows from the initial weights; losses run from before the first epoch to after the last."""
    arrays = _as_arrays(matrices)
    labels = np.asarray(labels, dtype=np.int64)
    weights, losses, _ = _adam(initial_weights(arrays), arrays, labels, epochs, cfg)
    return weights, losses + [loss_and_gradient(weights, arrays, labels)[0]]


def untrained_model(matrices: Matrices, classes: Sequence[str]) -> TrialModel:
    """All-ones weights: the counting model used when tuning is ablated."""
    arrays = _as_arrays(matrices)
    return TrialModel(classes=tuple(classes), weights=[np.ones(z.shape[1]) for z in arrays],
                      trained_epochs=0, config={})


def predict_proba(model: TrialModel, matrices: Matrices) -> np.ndarray:
    return softmax(compute_logits(model.weights, matrices))
