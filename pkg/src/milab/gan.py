"""GAN prior: a small DCGAN-style generator/discriminator and the two prior losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import Dataset
from .models import TrainingDiverged
from .tensor import Tape, Tensor, no_grad
from .tensor import functional as F
from .tensor.core import ShapeError, clip, leaky_relu, log, relu, sigmoid, tanh
from .tensor.nn import Conv2d, ConvTranspose2d, Linear, Module
from .tensor.optim import Adam
from .tensor.random import rng as make_rng

log_ = logging.getLogger(__name__)

CRITIC = "critic"
PROBABILISTIC = "probabilistic"
PROB_EPS = 1e-6


class Generator(Module):
    """z -> linear -> 7x7 (for 28x28) -> two stride-2 transposed convs -> tanh."""

    def __init__(self, n_z: int = 64, image_shape=(1, 28, 28), width: int = 32, seed: int = 0):
        super().__init__()
        c, h, w = image_shape
        if h % 4 or w % 4:
            raise ShapeError(f"generator needs image sides divisible by 4, got {image_shape}")
        self.n_z, self.image_shape, self.width, self.seed = n_z, tuple(image_shape), width, seed
        self._base = (h // 4, w // 4)
        r = make_rng(seed, "generator-init")
        self.fc = Linear(n_z, 2 * width * self._base[0] * self._base[1], r)
        self.up1 = ConvTranspose2d(2 * width, width, 4, r, stride=2, pad=1)
        self.up2 = ConvTranspose2d(width, c, 4, r, stride=2, pad=1)

    def forward(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.n_z:
            raise ShapeError(f"generator expects [N, {self.n_z}] latents, got {z.shape}")
        h = relu(self.fc(z)).reshape(z.shape[0], self._base[0], self._base[1], 2 * self.width)
        h = relu(self.up1(h))
        return F.nhwc_to_nchw(tanh(self.up2(h)))

    def config(self) -> dict:
        return {"kind": "generator", "n_z": self.n_z, "image_shape": list(self.image_shape),
                "width": self.width, "seed": self.seed}


class Discriminator(Module):
    """Two stride-2 convs and a linear score.

    ``score`` is the raw output. In probabilistic mode D(x) = sigmoid(score),
    clamped to [eps, 1 - eps] wherever a probability is consumed.
    """

    def __init__(self, mode: str = CRITIC, image_shape=(1, 28, 28), width: int = 32, seed: int = 0):
        super().__init__()
        if mode not in (CRITIC, PROBABILISTIC):
            raise ValueError(f"unknown discriminator mode {mode!r}")
        c, h, w = image_shape
        self.mode, self.image_shape, self.width, self.seed = mode, tuple(image_shape), width, seed
        r = make_rng(seed, "discriminator-init", mode)
        self.conv1 = Conv2d(c, width, 4, r, stride=2, pad=1)
        self.conv2 = Conv2d(width, 2 * width, 4, r, stride=2, pad=1)
        self.fc = Linear(2 * width * (h // 4) * (w // 4), 1, r)

    def score(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = leaky_relu(self.conv1(F.nchw_to_nhwc(x)), 0.2)
        h = leaky_relu(self.conv2(h), 0.2)
        return self.fc(h.reshape(h.shape[0], -1)).reshape(x.shape[0])

    def forward(self, x) -> Tensor:
        """D(x): raw critic score, or the clamped probability."""
        s = self.score(x)
        if self.mode == CRITIC:
            return s
        return clip(sigmoid(s), PROB_EPS, 1.0 - PROB_EPS)

    def config(self) -> dict:
        return {"kind": "discriminator", "mode": self.mode, "image_shape": list(self.image_shape),
                "width": self.width, "seed": self.seed}


def prior_loss(disc: Discriminator, image) -> Tensor:
    """Per-image prior loss: -D(x) for a critic, -log D(x) for a probabilistic D."""
    d = disc(image)
    return -d if disc.mode == CRITIC else -log(d)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class GanHyper:
    iterations: int = 1500  # generator updates
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    n_critic: int = 5  # critic mode only
    gp_weight: float = 10.0
    width: int = 32


@dataclass
class GanResult:
    generator: Generator
    discriminator: Discriminator
    trace: list[dict] = field(default_factory=list)


def _gradient_penalty(disc: Discriminator, real: np.ndarray, fake: np.ndarray, r) -> Tensor:
    eps = r.uniform(size=(real.shape[0], 1, 1, 1))
    x_hat = Tensor(eps * real + (1 - eps) * fake, requires_grad=True)
    with Tape() as inner:
        s = disc.score(x_hat).sum()
    (g,) = inner.gradient(s, [x_hat], create_graph=True)
    norm = F.l2_norm(g.reshape(g.shape[0], -1), eps=1e-12)
    return ((norm - 1.0) ** 2).mean()


def train_gan(public: Dataset, n_z: int, mode: str, hyper: GanHyper, seed: int) -> GanResult:
    """WGAN-GP in critic mode, non-saturating GAN loss in probabilistic mode."""
    if len(public) == 0:
        raise ValueError("public dataset is empty")
    shape = public.image_shape
    gen = Generator(n_z, shape, hyper.width, seed)
    disc = Discriminator(mode, shape, hyper.width, seed)
    g_params, d_params = gen.parameters(), disc.parameters()
    opt_g = Adam(g_params, hyper.lr, hyper.beta1, hyper.beta2)
    opt_d = Adam(d_params, hyper.lr, hyper.beta1, hyper.beta2)
    r = make_rng(seed, "gan-train", mode)
    result = GanResult(gen, disc)
    n = len(public)
    d_steps = hyper.n_critic if mode == CRITIC else 1
    bs = hyper.batch_size

    for it in range(hyper.iterations):
        for _ in range(d_steps):
            real = public.images[r.integers(0, n, size=bs)]
            z = Tensor(r.normal(size=(bs, n_z)))
            with no_grad():
                fake = gen(z).data
            with Tape() as tape:
                s_real, s_fake = disc.score(real), disc.score(fake)
                if mode == CRITIC:
                    w_dist = s_real.mean() - s_fake.mean()
                    gp = _gradient_penalty(disc, real, fake, r)
                    d_loss = -w_dist + hyper.gp_weight * gp
                else:
                    d_loss = F.softplus(-s_real).mean() + F.softplus(s_fake).mean()
            d_val = d_loss.item()
            if not np.isfinite(d_val):
                raise TrainingDiverged(f"train_gan({mode}) discriminator", it, d_val)
            opt_d.step(tape.gradient(d_loss, d_params))

        z = Tensor(r.normal(size=(bs, n_z)))
        with Tape() as tape:
            s = disc.score(gen(z))
            g_loss = -s.mean() if mode == CRITIC else F.softplus(-s).mean()
        g_val = g_loss.item()
        if not np.isfinite(g_val):
            raise TrainingDiverged(f"train_gan({mode}) generator", it, g_val)
        opt_g.step(tape.gradient(g_loss, g_params))

        row = {"iteration": it, "d_loss": d_val, "g_loss": g_val}
        if mode == PROBABILISTIC:
            row["d_fake"] = float(np.mean(1.0 / (1.0 + np.exp(-s.data))))
        result.trace.append(row)
        if it % 100 == 0:
            log_.info("gan %s it %d: %s", mode, it, row)
    return result


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def build_module(config: dict) -> Module:
    if config["kind"] == "generator":
        return Generator(config["n_z"], tuple(config["image_shape"]), config["width"], config["seed"])
    if config["kind"] == "discriminator":
        return Discriminator(config["mode"], tuple(config["image_shape"]), config["width"], config["seed"])
    raise ValueError(f"not a GAN component: {config['kind']!r}")


def save_module(path, module, extra: dict | None = None):
    return checkpoint.save(path, module.state_dict(), {"model": module.config(), **(extra or {})})


def load_module(path):
    state, header = checkpoint.load(path)
    module = build_module(header["model"])
    module.load_state_dict(state)
    return module, header


def sample_images(gen: Generator, n: int, seed: int) -> np.ndarray:
    z = make_rng(seed, "gan-samples").normal(size=(n, gen.n_z))
    with no_grad():
        return gen(Tensor(z)).data
