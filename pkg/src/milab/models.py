"""ConvK classifiers, supervised training and knowledge distillation."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import Dataset, holdout_split
from .tensor import Tape, Tensor, no_grad
from .tensor import functional as F
from .tensor.core import NumericError, ShapeError, relu
from .tensor.nn import Conv2d, Linear, Module
from .tensor.optim import make_optimizer
from .tensor.random import rng as make_rng

log = logging.getLogger(__name__)

FEATURE_DIM = 128


class TrainingDiverged(NumericError):
    def __init__(self, what: str, iteration: int, value: float):
        super().__init__(f"{what} diverged at iteration {iteration}: loss={value}")
        self.iteration = iteration


def parse_arch(arch_tag: str) -> int:
    m = re.fullmatch(r"Conv(\d+)", arch_tag)
    if not m or int(m.group(1)) < 1:
        raise ValueError(f"unknown architecture {arch_tag!r}; expected ConvK with K >= 1")
    return int(m.group(1))


class Classifier(Module):
    """ConvK feature net, a 128-d penultimate layer, and a bias-folded head.

    Block i is conv3x3(16 * 2**i channels, pad 1) + relu + 2x2 max-pool. Pooling
    is skipped once the feature map is a single pixel, which lets Conv5 run on
    28x28 inputs. The head is stored as one matrix W [K, d+1] whose last column
    is the bias, so ``logits = [p; 1] @ W.T`` is the forward pass itself.
    """

    def __init__(self, arch_tag: str, n_classes: int, image_shape=(1, 28, 28), seed: int = 0,
                 feature_dim: int = FEATURE_DIM):
        super().__init__()
        depth = parse_arch(arch_tag)
        self.arch_tag = arch_tag
        self.n_classes = n_classes
        self.image_shape = tuple(image_shape)
        self.seed = seed
        self.feature_dim = feature_dim
        r = make_rng(seed, "classifier-init", arch_tag)
        c, h, w = self.image_shape
        self._pool = []
        for i in range(depth):
            width = 16 * 2**i
            setattr(self, f"conv{i}", Conv2d(c, width, 3, r, stride=1, pad=1))
            c = width
            pool = min(h, w) >= 2
            self._pool.append(pool)
            if pool:
                h, w = h // 2, w // 2
        self.depth = depth
        self.fc = Linear(c * h * w, feature_dim, r)
        bound = 1.0 / math.sqrt(feature_dim)
        self.head = Tensor(r.uniform(-bound, bound, size=(n_classes, feature_dim + 1)), requires_grad=True)

    def features(self, x) -> Tensor:
        """Penultimate activations p, shape [N, d]."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"{self.arch_tag}: expected input [N, {self.image_shape}], got {x.shape}")
        h = F.nchw_to_nhwc(x)
        for i in range(self.depth):
            h = relu(getattr(self, f"conv{i}")(h))
            if self._pool[i]:
                h = F.max_pool2d(h, 2)
        return relu(self.fc(h.reshape(h.shape[0], -1)))

    def penultimate(self, x) -> Tensor:
        """[p; 1], shape [N, d+1]."""
        return F.append_ones(self.features(x))

    @property
    def head_weights(self) -> Tensor:
        return self.head

    def logits_from_penultimate(self, p_tilde: Tensor) -> Tensor:
        return p_tilde @ self.head.T

    def forward(self, x) -> Tensor:
        return self.logits_from_penultimate(self.penultimate(x))

    def config(self) -> dict:
        return {
            "kind": "classifier",
            "arch_tag": self.arch_tag,
            "n_classes": self.n_classes,
            "image_shape": list(self.image_shape),
            "seed": self.seed,
            "feature_dim": self.feature_dim,
        }


def build_classifier(config: dict) -> Classifier:
    return Classifier(
        config["arch_tag"], config["n_classes"], tuple(config["image_shape"]), config["seed"],
        config.get("feature_dim", FEATURE_DIM),
    )


def save_classifier(path, model: Classifier, extra: dict | None = None):
    meta = {"model": model.config(), **(extra or {})}
    return checkpoint.save(path, model.state_dict(), meta)


def load_classifier(path) -> tuple[Classifier, dict]:
    state, header = checkpoint.load(path)
    model = build_classifier(header["model"])
    model.load_state_dict(state)
    return model, header


def predict_logits(model: Classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    with no_grad():
        out = [model(Tensor(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def predict_penultimate(model: Classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    with no_grad():
        out = [model.penultimate(Tensor(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.feature_dim + 1))


def accuracy(model: Classifier, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict_logits(model, dataset.images).argmax(1) == dataset.labels))


# ---------------------------------------------------------------------------
# supervised training
# ---------------------------------------------------------------------------


@dataclass
class TrainHyper:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 0.0
    holdout_fraction: float = 0.2


@dataclass
class TrainResult:
    model: Classifier
    trace: list[dict] = field(default_factory=list)

    @property
    def holdout_accuracy(self) -> float:
        return self.trace[-1]["holdout_acc"] if self.trace else float("nan")


def _opt_kwargs(hyper) -> dict:
    return {"weight_decay": hyper.weight_decay} if hyper.optimizer == "sgd" else {}


def train_classifier(dataset: Dataset, arch_tag: str, hyper: TrainHyper, seed: int) -> TrainResult:
    """Cross-entropy training on dense labels 0..K-1 with a seeded holdout."""
    labels = dataset.labels
    k = len(dataset.class_set)
    if set(np.unique(labels)) - set(range(k)):
        raise ValueError(f"labels must be dense in 0..{k - 1}")
    train, hold = holdout_split(dataset, hyper.holdout_fraction, seed)
    model = Classifier(arch_tag, k, dataset.image_shape, seed)
    opt = make_optimizer(hyper.optimizer, model.parameters(), hyper.lr, **_opt_kwargs(hyper))
    r = make_rng(seed, "train-order", arch_tag)
    params = model.parameters()
    result = TrainResult(model)
    it = 0
    for epoch in range(hyper.epochs):
        order = r.permutation(len(train))
        losses, correct = [], 0
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            x, y = Tensor(train.images[idx]), train.labels[idx]
            with Tape() as tape:
                logits = model(x)
                loss = F.cross_entropy(logits, y)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"train_classifier({arch_tag})", it, value)
            opt.step(tape.gradient(loss, params))
            losses.append(value)
            correct += int((logits.data.argmax(1) == y).sum())
            it += 1
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "train_acc": correct / len(train),
            "holdout_acc": accuracy(model, hold),
        }
        log.info("%s epoch %d: %s", arch_tag, epoch, row)
        result.trace.append(row)
    return result


# ---------------------------------------------------------------------------
# knowledge distillation
# ---------------------------------------------------------------------------


@dataclass
class DistillConfig:
    temperature: float = 1.0
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    holdout_fraction: float = 0.2
    shift: int = 0  # max random translation (pixels) of each query batch; 0 queries the images as they are
    schedule: str = "constant"  # or "cosine": lr decays to 0 over the run

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("distillation temperature must be positive")
        if self.shift < 0:
            raise ValueError("shift must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")


@dataclass
class DistillResult:
    model: Classifier
    initial_kl: float
    final_kl: float
    trace: list[dict] = field(default_factory=list)


def _log_softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def kl_to_teacher(teacher_logits: np.ndarray, student_logits: np.ndarray, temperature: float = 1.0) -> float:
    """Mean KL(softmax(t/T) || softmax(s/T)) in nats."""
    lt = _log_softmax_np(teacher_logits / temperature)
    ls = _log_softmax_np(student_logits / temperature)
    return float(np.mean(np.sum(np.exp(lt) * (lt - ls), axis=1)))


def random_shift(images: np.ndarray, max_shift: int, r) -> np.ndarray:
    """Translate each image by up to max_shift pixels per axis, padding with the background value."""
    if max_shift == 0:
        return images
    n, c, h, w = images.shape
    m = max_shift
    padded = np.pad(images, ((0, 0), (0, 0), (m, m), (m, m)), constant_values=float(images.min()))
    dy, dx = r.integers(0, 2 * m + 1, size=(2, n))
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def distill(teacher: Classifier, public: Dataset, student_arch: str, cfg: DistillConfig, seed: int) -> DistillResult:
    """Train a student on public images to match the teacher's softened outputs.

    There is no label term: public classes lie outside the teacher's label space.
    With ``cfg.shift`` > 0 every batch is randomly translated and the teacher
    is queried on the shifted images, which widens the query set.
    """
    if len(public) == 0:
        raise ValueError("public dataset is empty")
    train, hold = holdout_split(public, cfg.holdout_fraction, seed)
    student = Classifier(student_arch, teacher.n_classes, public.image_shape, seed)
    if student.n_classes != teacher.n_classes:
        raise ShapeError("student and teacher output dims differ")
    tau = cfg.temperature
    teacher_train = predict_logits(teacher, train.images)
    teacher_hold = predict_logits(teacher, hold.images)
    soft_targets = np.exp(_log_softmax_np(teacher_train / tau))
    target_entropy = np.sum(soft_targets * _log_softmax_np(teacher_train / tau), axis=1)

    initial = kl_to_teacher(teacher_hold, predict_logits(student, hold.images), tau)
    result = DistillResult(student, initial, initial)
    opt = make_optimizer(cfg.optimizer, student.parameters(), cfg.lr)
    params = student.parameters()
    r = make_rng(seed, "distill-order", student_arch)
    r_shift = make_rng(seed, "distill-shift", student_arch)
    total_steps = cfg.epochs * -(-len(train) // cfg.batch_size)
    it = 0
    for epoch in range(cfg.epochs):
        order = r.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, q, q_ent = train.images[idx], soft_targets[idx], target_entropy[idx]
            if cfg.shift:
                x = random_shift(x, cfg.shift, r_shift)
                lt = _log_softmax_np(predict_logits(teacher, x) / tau)
                q = np.exp(lt)
                q_ent = np.sum(q * lt, axis=1)
            with Tape() as tape:
                ls = F.log_softmax(student(Tensor(x)) * (1.0 / tau))
                # KL = sum q log q - sum q log s; the first term is constant
                loss = (q_ent - (ls * q).sum(axis=1)).mean()
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"distill({student_arch})", it, value)
            if cfg.schedule == "cosine":
                opt.lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * it / total_steps))
            opt.step(tape.gradient(loss, params))
            losses.append(value)
            it += 1
        hold_kl = kl_to_teacher(teacher_hold, predict_logits(student, hold.images), tau)
        result.trace.append({"epoch": epoch, "train_kl": float(np.mean(losses)), "holdout_kl": hold_kl})
        result.final_kl = hold_kl
        log.info("distill %s epoch %d: train_kl=%.4f holdout_kl=%.4f", student_arch, epoch, np.mean(losses), hold_kl)
    return result
