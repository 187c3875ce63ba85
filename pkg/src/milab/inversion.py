"""Latent-space model inversion: identity losses, p_reg estimation and the optimization loop.

Every identity loss works on a batch of candidate images and returns one loss
per row. Row i is attacked toward class ``k[i]``; rows are independent, so the
total objective is the plain sum over rows.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .data import Dataset
from .gan import Discriminator, Generator, prior_loss
from .models import Classifier, predict_penultimate
from .tensor import Tape, Tensor, no_grad
from .tensor import functional as F
from .tensor.core import NumericError, ShapeError, as_tensor, clip, exp
from .tensor.optim import make_optimizer
from .tensor.random import rng as make_rng

log = logging.getLogger(__name__)

FIXED = "fixed"
SAMPLED = "sampled"
DEFAULT_PREG_SAMPLES = 5000


class InversionDiverged(NumericError):
    def __init__(self, iteration: int, breakdown: dict):
        parts = ", ".join(f"{k}={v}" for k, v in breakdown.items())
        super().__init__(f"inversion loss became non-finite at iteration {iteration}: {parts}")
        self.iteration = iteration
        self.breakdown = breakdown


# ---------------------------------------------------------------------------
# latent distributions
# ---------------------------------------------------------------------------


@dataclass
class PointEstimate:
    """A set of candidate latent codes, one per row."""

    z0: np.ndarray  # [n, n_z]

    def __post_init__(self):
        z = np.asarray(self.z0.data if isinstance(self.z0, Tensor) else self.z0, dtype=np.float64)
        if z.ndim != 2:
            raise ShapeError(f"point estimate needs a [n, n_z] matrix, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("point estimate rows must be finite")

    @property
    def n_rows(self) -> int:
        return self.z0.shape[0]


@dataclass
class DiagonalGaussian:
    """N(mu, diag(exp(log_sigma))^2). ``mu`` may be [n_z] or a batch [B, n_z]."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        if np.shape(self.mu) != np.shape(self.log_sigma):
            raise ShapeError(f"mu {np.shape(self.mu)} and log_sigma {np.shape(self.log_sigma)} differ")
        if len(np.shape(self.mu)) not in (1, 2):
            raise ShapeError(f"Gaussian parameters must be [n_z] or [B, n_z], got {np.shape(self.mu)}")

    @property
    def n_rows(self) -> int:
        return 1 if len(np.shape(self.mu)) == 1 else np.shape(self.mu)[0]


LatentDistribution = Union[PointEstimate, DiagonalGaussian]


def _cycle(t: Tensor, n: int) -> Tensor:
    rows = t.shape[0]
    if rows == n:
        return t
    return t[np.arange(n) % rows]


def sample_latent(dist: LatentDistribution, n: int, clip_z: bool = False, seed: int = 0, eps=None) -> Tensor:
    """n latent codes [n, n_z].

    Point estimates return their rows cycled. Gaussians return mu + sigma * eps
    (row i from distribution i mod B), differentiable w.r.t. the parameters if
    they are tensors that require grad. ``eps`` overrides the seeded noise.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if isinstance(dist, PointEstimate):
        z = _cycle(as_tensor(dist.z0), n)
    else:
        mu, ls = as_tensor(dist.mu), as_tensor(dist.log_sigma)
        if mu.ndim == 1:
            mu, ls = mu.reshape(1, -1), ls.reshape(1, -1)
        if eps is None:
            eps = make_rng(seed, "sample-latent").normal(size=(n, mu.shape[1]))
        z = _cycle(mu, n) + _cycle(exp(ls), n) * eps
    return clip(z, -1.0, 1.0) if clip_z else z


def initial_latent(kind: str, n_rows: int, n_z: int, clip_z: bool, seed: int) -> LatentDistribution:
    """Point estimates start at N(0, I) draws (clipped if asked); Gaussians at mu = 0, sigma = 1."""
    if kind == "point":
        z = make_rng(seed, "latent-init").normal(size=(n_rows, n_z))
        return PointEstimate(np.clip(z, -1.0, 1.0) if clip_z else z)
    if kind == "gaussian":
        return DiagonalGaussian(np.zeros((n_rows, n_z)), np.zeros((n_rows, n_z)))
    raise ValueError(f"unknown latent kind {kind!r}; expected 'point' or 'gaussian'")


# ---------------------------------------------------------------------------
# p_reg
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PregEstimator:
    """Mean and population std of [p; 1] over public images."""

    mu: np.ndarray
    sigma: np.ndarray
    mode: str = SAMPLED
    n_public_used: int = 0

    def __post_init__(self):
        if self.mode not in (FIXED, SAMPLED):
            raise ValueError(f"unknown p_reg mode {self.mode!r}")
        if np.shape(self.mu) != np.shape(self.sigma) or np.ndim(self.mu) != 1:
            raise ShapeError("mu and sigma must be vectors of equal length")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("sigma must be non-negative")

    @property
    def dim(self) -> int:
        return len(self.mu)

    def with_mode(self, mode: str) -> "PregEstimator":
        return PregEstimator(self.mu, self.sigma, mode, self.n_public_used)

    def draw(self, n: int, r: np.random.Generator) -> np.ndarray:
        """n anchors [n, d+1]: mu itself (fixed) or independent N(mu, sigma^2) draws (sampled)."""
        if self.mode == FIXED:
            return np.tile(self.mu, (n, 1))
        return self.mu + self.sigma * r.normal(size=(n, self.dim))


def estimate_preg(model: Classifier, public: Dataset, n: int | None = None, seed: int = 0,
                  mode: str = SAMPLED) -> PregEstimator:
    """Estimate p_reg statistics from ``n`` public images drawn without replacement.

    ``n = None`` uses 5000 images, or the whole public set if it is smaller.
    """
    if n is None:
        n = min(DEFAULT_PREG_SAMPLES, len(public))
    if n < 2:
        raise ValueError(f"need at least 2 public images to estimate p_reg, got {n}")
    if n > len(public):
        raise ValueError(f"asked for {n} public images but the public set has {len(public)}")
    if n == len(public):
        idx = np.arange(n)
    else:
        idx = np.sort(make_rng(seed, "preg-subset").choice(len(public), size=n, replace=False))
    feats = predict_penultimate(model, public.images[idx])
    mu = feats.mean(axis=0)
    sigma = np.sqrt(((feats - mu) ** 2).mean(axis=0))
    # the bias slot is exactly constant
    mu[-1], sigma[-1] = 1.0, 0.0
    return PregEstimator(mu, sigma, mode, n)


# ---------------------------------------------------------------------------
# identity losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CE:
    """Cross-entropy identity loss."""


@dataclass(frozen=True)
class Logit:
    """Negative logit of the target class plus a feature anchor term."""

    preg: PregEstimator
    lambda_reg: float = 1.0

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")


def _default_gammas(spec, n_aug: int):
    gt = spec.gamma_t if spec.gamma_t is not None else 1.0 / (n_aug + 1)
    ga = spec.gamma_aug if spec.gamma_aug is not None else (1.0 / (n_aug + 1) if n_aug else 0.0)
    if gt <= 0:
        raise ValueError("gamma_t must be positive")
    if ga < 0:
        raise ValueError("gamma_aug must be non-negative")
    if n_aug == 0 and ga > 0:
        raise ValueError("gamma_aug > 0 needs at least one augmented model")
    object.__setattr__(spec, "gamma_t", float(gt))
    object.__setattr__(spec, "gamma_aug", float(ga))


@dataclass(frozen=True)
class Aug:
    """Weighted sum of a base loss over the target and augmented models.

    With a Logit base each augmented model is anchored to its own p_reg, given
    in ``aug_pregs`` in the same order as ``aug_models``.
    """

    base: Union[CE, Logit]
    aug_models: tuple = ()
    gamma_t: float | None = None
    gamma_aug: float | None = None
    aug_pregs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "aug_models", tuple(self.aug_models))
        object.__setattr__(self, "aug_pregs", tuple(self.aug_pregs))
        _default_gammas(self, len(self.aug_models))
        if isinstance(self.base, Logit) and len(self.aug_pregs) != len(self.aug_models):
            raise ValueError("a Logit base needs one p_reg estimator per augmented model")


@dataclass(frozen=True)
class LOMMA:
    """Logit terms over all models with one anchor term on the target's features."""

    preg: PregEstimator
    aug_models: tuple = ()
    lambda_reg: float = 1.0
    gamma_t: float | None = None
    gamma_aug: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "aug_models", tuple(self.aug_models))
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        _default_gammas(self, len(self.aug_models))


IdentityLossSpec = Union[CE, Logit, Aug, LOMMA]


def _classes(k, n: int) -> np.ndarray:
    k = np.asarray(k, dtype=np.int64)
    return np.full(n, int(k)) if k.ndim == 0 else k


def _check_classes(model: Classifier, k: np.ndarray):
    if k.size and (k.min() < 0 or k.max() >= model.n_classes):
        raise ValueError(f"target class out of range for a {model.n_classes}-class model")


def _ce_rows(model: Classifier, p_tilde: Tensor, k: np.ndarray) -> Tensor:
    logits = model.logits_from_penultimate(p_tilde)
    return -(F.log_softmax(logits) * F.one_hot(k, model.n_classes)).sum(axis=1)


def _neg_logit_rows(model: Classifier, p_tilde: Tensor, k: np.ndarray) -> Tensor:
    w_k = model.head_weights[k]  # [N, d+1]
    return -(p_tilde * w_k).sum(axis=1)


def _anchor_rows(p_tilde: Tensor, p_reg) -> Tensor:
    p_reg = np.asarray(p_reg, dtype=np.float64)
    if p_reg.shape[-1] != p_tilde.shape[-1]:
        raise ShapeError(f"p_reg has dim {p_reg.shape[-1]}, features have dim {p_tilde.shape[-1]}")
    diff = p_tilde - p_reg
    return (diff * diff).sum(axis=1)


def identity_loss_ce(model: Classifier, x, k) -> Tensor:
    """-log softmax_k(W [p; 1]) per row."""
    p_tilde = model.penultimate(x)
    k = _classes(k, p_tilde.shape[0])
    _check_classes(model, k)
    return _ce_rows(model, p_tilde, k)


def identity_loss_logit(model: Classifier, x, k, lambda_reg: float, p_reg) -> Tensor:
    """-[p; 1]^T w_k + lambda_reg * ||[p; 1] - p_reg||^2 per row.

    ``p_reg`` is one anchor [d+1] shared by all rows or one per row [N, d+1].
    """
    p_tilde = model.penultimate(x)
    k = _classes(k, p_tilde.shape[0])
    _check_classes(model, k)
    out = _neg_logit_rows(model, p_tilde, k)
    if lambda_reg:
        out = out + lambda_reg * _anchor_rows(p_tilde, p_reg)
    return out


def _spec_models(spec) -> list[Classifier]:
    return list(spec.aug_models)


def evaluate_identity(spec: IdentityLossSpec, target: Classifier, x, k, anchors: dict | None = None):
    """Per-row identity loss and a per-model breakdown (numpy, per row).

    ``anchors`` maps "target" / "aug0" / "aug1" ... to p_reg arrays. Missing
    entries fall back to the estimator mean.
    """
    anchors = anchors or {}
    x = x if isinstance(x, Tensor) else Tensor(x)
    k = _classes(k, x.shape[0])
    _check_classes(target, k)
    breakdown = {}

    if isinstance(spec, CE):
        total = _ce_rows(target, target.penultimate(x), k)
        breakdown["target"] = total.data
        return total, breakdown

    if isinstance(spec, Logit):
        p_t = target.penultimate(x)
        term = _neg_logit_rows(target, p_t, k)
        breakdown["target"] = term.data
        total = term
        if spec.lambda_reg:
            reg = _anchor_rows(p_t, anchors.get("target", spec.preg.mu))
            breakdown["reg"] = reg.data
            total = total + spec.lambda_reg * reg
        return total, breakdown

    models = [target] + _spec_models(spec)
    for m in models[1:]:
        if m.n_classes != target.n_classes:
            raise ShapeError("augmented models must share the target's class count")
    names = ["target"] + [f"aug{i}" for i in range(len(models) - 1)]
    weights = [spec.gamma_t] + [spec.gamma_aug] * (len(models) - 1)

    if isinstance(spec, Aug):
        total = None
        for i, (name, m, w) in enumerate(zip(names, models, weights)):
            if isinstance(spec.base, CE):
                term = _ce_rows(m, m.penultimate(x), k)
            else:
                preg = spec.base.preg if i == 0 else spec.aug_pregs[i - 1]
                term = identity_loss_logit(m, x, k, spec.base.lambda_reg, anchors.get(name, preg.mu))
            breakdown[name] = term.data
            total = w * term if total is None else total + w * term
        return total, breakdown

    if isinstance(spec, LOMMA):
        p_t = target.penultimate(x)
        total = None
        for i, (name, m, w) in enumerate(zip(names, models, weights)):
            term = _neg_logit_rows(m, p_t if i == 0 else m.penultimate(x), k)
            breakdown[name] = term.data
            total = w * term if total is None else total + w * term
        if spec.lambda_reg:
            reg = _anchor_rows(p_t, anchors.get("target", spec.preg.mu))
            breakdown["reg"] = reg.data
            total = total + spec.lambda_reg * reg
        return total, breakdown

    raise TypeError(f"not an identity loss spec: {spec!r}")


def identity_loss_aug(spec: Union[Aug, LOMMA], target: Classifier, x, k, anchors: dict | None = None) -> Tensor:
    if not isinstance(spec, (Aug, LOMMA)):
        raise TypeError("identity_loss_aug takes an Aug or LOMMA spec")
    return evaluate_identity(spec, target, x, k, anchors)[0]


def draw_anchors(spec: IdentityLossSpec, n_rows: int, r: np.random.Generator) -> dict:
    """One p_reg per row for every model that carries an anchor term."""
    out = {}
    if isinstance(spec, (Logit, LOMMA)):
        out["target"] = spec.preg.draw(n_rows, r)
    elif isinstance(spec, Aug) and isinstance(spec.base, Logit):
        out["target"] = spec.base.preg.draw(n_rows, r)
        for i, preg in enumerate(spec.aug_pregs):
            out[f"aug{i}"] = preg.draw(n_rows, r)
    return out


# ---------------------------------------------------------------------------
# the inversion loop
# ---------------------------------------------------------------------------


@dataclass
class InversionConfig:
    iterations: int = 2400
    optimizer: str = "sgd"
    lr: float = 0.02
    momentum: float = 0.0
    lambda_prior: float = 100.0
    loss_scale: float = 1.0  # multiplies the identity loss; 100 gives the x100 variant of the objective
    clip_z: bool = True
    restarts: int = 5
    latent: str = "gaussian"  # "point" (GMI) or "gaussian" (KEDMI)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.lambda_prior < 0:
            raise ValueError("lambda_prior must be non-negative")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.latent not in ("point", "gaussian"):
            raise ValueError(f"unknown latent kind {self.latent!r}")


@dataclass
class InversionResult:
    images: np.ndarray  # [B, C, H, W], row = restart * n_classes + class position
    classes: np.ndarray
    restarts: np.ndarray
    final_identity: np.ndarray
    latent: LatentDistribution
    trace: list[dict] = field(default_factory=list)

    def best_rows(self) -> dict[int, int]:
        """Row index of the restart with lowest final identity loss, per class."""
        best = {}
        for row, (k, loss) in enumerate(zip(self.classes, self.final_identity)):
            k = int(k)
            if k not in best or loss < self.final_identity[best[k]]:
                best[k] = row
        return best

    def write_trace_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fields = list(self.trace[0]) if self.trace else ["iteration", "identity_loss", "prior_loss"]
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for row in self.trace:
                w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
        tmp.replace(path)
        return path


def _params(dist: LatentDistribution) -> list[Tensor]:
    if isinstance(dist, PointEstimate):
        return [Tensor(np.array(dist.z0, dtype=np.float64), requires_grad=True)]
    mu = np.array(dist.mu, dtype=np.float64)
    ls = np.array(dist.log_sigma, dtype=np.float64)
    return [Tensor(np.atleast_2d(mu), requires_grad=True), Tensor(np.atleast_2d(ls), requires_grad=True)]


def inversion_objective(spec, target, gen, disc, z: Tensor, k, anchors, cfg: InversionConfig):
    """Per-row (identity, prior) terms and the scalar total that gets minimized."""
    x = gen(z)
    ident, breakdown = evaluate_identity(spec, target, x, k, anchors)
    prior = prior_loss(disc, x)
    total = (cfg.loss_scale * ident + cfg.lambda_prior * prior).sum()
    return total, ident, prior, breakdown


def invert(target: Classifier, gen: Generator, disc: Discriminator, spec: IdentityLossSpec,
           cfg: InversionConfig, classes: Sequence[int], dist0: LatentDistribution | None = None) -> InversionResult:
    """Minimize identity + prior loss over latent codes for each class and restart.

    Rows are laid out restart-major: row = r * len(classes) + i targets
    ``classes[i]`` in restart r. Each row is its own inversion run with its own
    p_reg draw; since the rows do not interact, summing their losses is the
    same as running them separately.
    """
    classes = np.asarray(classes, dtype=np.int64)
    if classes.ndim != 1 or classes.size == 0:
        raise ValueError("classes must be a nonempty list of class ids")
    _check_classes(target, classes)
    n_rows = cfg.restarts * classes.size
    row_class = np.tile(classes, cfg.restarts)
    row_restart = np.repeat(np.arange(cfg.restarts), classes.size)
    if dist0 is None:
        dist0 = initial_latent(cfg.latent, n_rows, gen.n_z, cfg.clip_z, cfg.seed)
    if dist0.n_rows != n_rows:
        raise ShapeError(f"initial latent has {dist0.n_rows} rows, need {n_rows}")
    gaussian = isinstance(dist0, DiagonalGaussian)

    anchors = draw_anchors(spec, n_rows, make_rng(cfg.seed, "preg-draw"))
    noise = make_rng(cfg.seed, "latent-noise")
    params = _params(dist0)
    kw = {"momentum": cfg.momentum} if cfg.optimizer == "sgd" else {}
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, **kw)
    trace = []

    for it in range(cfg.iterations):
        with Tape() as tape:
            if gaussian:
                eps = noise.normal(size=params[0].shape)
                z = params[0] + exp(params[1]) * eps
            else:
                z = params[0]
            total, ident, prior, breakdown = inversion_objective(spec, target, gen, disc, z, row_class,
                                                                 anchors, cfg)
        row = {"iteration": it, "identity_loss": float(ident.data.mean()),
               "prior_loss": float(prior.data.mean()), "total_loss": total.item() / n_rows}
        row.update({f"loss_{name}": float(v.mean()) for name, v in breakdown.items()})
        if not all(np.isfinite(v) for v in row.values()):
            raise InversionDiverged(it, {k: v for k, v in row.items() if k != "iteration"})
        trace.append(row)
        opt.step(tape.gradient(total, params))
        if not gaussian and cfg.clip_z:
            params[0].data = np.clip(params[0].data, -1.0, 1.0)
        if it % 200 == 0:
            log.debug("invert it %d: %s", it, row)

    if gaussian:
        final = DiagonalGaussian(params[0].data.copy(), params[1].data.copy())
        eps = make_rng(cfg.seed, "final-sample").normal(size=params[0].shape)
    else:
        final = PointEstimate(params[0].data.copy())
        eps = None
    with no_grad():
        z = sample_latent(final, n_rows, cfg.clip_z, eps=eps)
        x = gen(z)
        ident, _ = evaluate_identity(spec, target, x, row_class, anchors)
    return InversionResult(x.data, row_class, row_restart, ident.data.copy(), final, trace)
