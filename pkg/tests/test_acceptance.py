"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The MNIST criteria (6, 7, 8) run the reduced-scale pipeline in
configs/mnist_acceptance.yaml for master seeds 0, 1 and 2 in both attack
modes. Stage outputs go to $MILAB_ACCEPTANCE_OUT (default
~/.cache/milab/acceptance) and are reused on reruns through the stage cache;
delete that directory to force a fresh run.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from _oracles import (aug_scalar, ce_scalar, checked_max_error, logit_scalar, lomma_scalar, primitive_cases,
                      softmax_ce_direct)
from _report import record
from milab import config as cfgmod
from milab.data import Dataset
from milab.inversion import (CE, LOMMA, Aug, DiagonalGaussian, Logit, PointEstimate, PregEstimator, draw_anchors,
                             estimate_preg, evaluate_identity, identity_loss_ce, sample_latent)
from milab.evaluation import knn_dist
from milab.models import Classifier, DistillConfig, distill, load_classifier, predict_logits, predict_penultimate
from milab.pipeline import Pipeline
from milab.tensor import Tensor, rng

ROOT = Path(__file__).resolve().parents[1]
MNIST_CONFIG = ROOT / "configs" / "mnist_acceptance.yaml"
SEEDS = (0, 1, 2)
ATTACKS = ("kedmi", "gmi")
# self-distillation is the long-training case: a same-architecture student on
# randomly shifted public queries, lr decayed to zero
SELF_DISTILL = DistillConfig(temperature=1.0, epochs=128, batch_size=64, lr=2e-3, shift=2, schedule="cosine")


def _preg(d, seed):
    r = rng(seed)
    return PregEstimator(np.append(r.normal(size=d), 1.0), np.append(np.abs(r.normal(size=d)), 0.0))


# --- 1. gradient integrity ------------------------------------------------


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    worst, redrawn = {}, 0
    for name, build in primitive_cases().items():
        worst[name], n = checked_max_error(build, rng(1, "primitive", name), 100)
        redrawn += n

    shape = (1, 6, 6)
    target = Classifier("Conv2", 3, shape, seed=1, feature_dim=8)
    augs = (Classifier("Conv1", 3, shape, seed=2, feature_dim=8), Classifier("Conv3", 3, shape, seed=3, feature_dim=8))
    pt, pa = _preg(8, 1), (_preg(8, 2), _preg(8, 3))
    specs = {"CE": CE(), "Logit": Logit(pt, 0.5), "Aug(CE)": Aug(CE(), augs),
             "Aug(Logit)": Aug(Logit(pt, 0.5), augs, aug_pregs=pa), "LOMMA": LOMMA(pt, augs, 0.5)}
    for name, spec in specs.items():
        def build(r, spec=spec):
            x = r.uniform(-1, 1, size=(1,) + shape)
            k = int(r.integers(0, 3))
            anchors = draw_anchors(spec, 1, r)
            return (lambda a: evaluate_identity(spec, target, a, [k], anchors)[0].sum()), [Tensor(x)]
        worst[name], n = checked_max_error(build, rng(1, "identity", name), 100)
        redrawn += n
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    record("1", ok, f"{len(worst)} ops x 100 instances, max rel err {worst[top]:.2e} ({top}), "
                    f"{redrawn} kink redraws, {elapsed:.0f}s")
    assert ok


# --- 2. loss-formula oracles ----------------------------------------------


def test_criterion_2_loss_oracles():
    t0 = time.perf_counter()
    shape = (1, 8, 8)
    n = 1000
    target = Classifier("Conv2", 5, shape, seed=4, feature_dim=10)
    augs = (Classifier("Conv1", 5, shape, seed=5, feature_dim=10), Classifier("Conv4", 5, shape, seed=6, feature_dim=10))
    r = rng(2, "loss-oracles")
    x = r.uniform(-1, 1, size=(n,) + shape)
    k = r.integers(0, 5, size=n)
    feats = [predict_penultimate(m, x) for m in (target, *augs)]
    Ws = [m.head_weights.data for m in (target, *augs)]
    logits = predict_logits(target, x)
    pt, pa = _preg(10, 7), (_preg(10, 8), _preg(10, 9))
    anchors = {"target": pt.draw(n, r), "aug0": pa[0].draw(n, r), "aug1": pa[1].draw(n, r)}
    lam, gt, ga = 0.73, 0.6, 0.25
    names = ("target", "aug0", "aug1")

    ce = identity_loss_ce(target, x, k).data
    logit = evaluate_identity(Logit(pt, lam), target, x, k, anchors)[0].data
    aug_ce = evaluate_identity(Aug(CE(), augs, gt, ga), target, x, k)[0].data
    aug_logit = evaluate_identity(Aug(Logit(pt, lam), augs, gt, ga, pa), target, x, k, anchors)[0].data
    lomma = evaluate_identity(LOMMA(pt, augs, lam, gt, ga), target, x, k, anchors)[0].data

    err = {"CE vs softmax-CE": 0.0, "CE decomposition": 0.0, "Logit": 0.0, "Aug(CE)": 0.0, "Aug(Logit)": 0.0,
           "LOMMA": 0.0}
    for i in range(n):
        ki = int(k[i])
        err["CE vs softmax-CE"] = max(err["CE vs softmax-CE"], abs(ce[i] - softmax_ce_direct(logits[i], ki)))
        err["CE decomposition"] = max(err["CE decomposition"], abs(ce[i] - ce_scalar(feats[0][i], Ws[0], ki)))
        err["Logit"] = max(err["Logit"], abs(logit[i] - logit_scalar(feats[0][i], Ws[0], ki, lam, anchors["target"][i])))
        ce_terms = [ce_scalar(f[i], W, ki) for f, W in zip(feats, Ws)]
        err["Aug(CE)"] = max(err["Aug(CE)"], abs(aug_ce[i] - aug_scalar(ce_terms, gt, ga)))
        lg = [logit_scalar(f[i], W, ki, lam, anchors[nm][i]) for f, W, nm in zip(feats, Ws, names)]
        err["Aug(Logit)"] = max(err["Aug(Logit)"], abs(aug_logit[i] - aug_scalar(lg, gt, ga)))
        want = lomma_scalar([f[i] for f in feats], Ws, ki, lam, anchors["target"][i], gt, ga)
        err["LOMMA"] = max(err["LOMMA"], abs(lomma[i] - want))
    elapsed = time.perf_counter() - t0
    ok = max(err.values()) <= 1e-10 and elapsed < 60
    record("2", ok, f"{n} cases each, max abs err " + ", ".join(f"{k} {v:.1e}" for k, v in err.items())
           + f", {elapsed:.0f}s")
    assert ok


# --- 3. reduction identities ----------------------------------------------


_X1 = np.zeros((1, 1, 8, 8))


class _FixedFeatures(Classifier):
    def __init__(self, p_tilde, head):
        head = np.asarray(head, dtype=float)
        super().__init__("Conv1", head.shape[0], (1, 8, 8), feature_dim=head.shape[1] - 1)
        self.head.data = head
        self._p = np.atleast_2d(np.asarray(p_tilde, dtype=float))

    def penultimate(self, x):
        return Tensor(self._p)


def test_criterion_3_reduction_identities():
    shape = (1, 8, 8)
    target = Classifier("Conv3", 4, shape, seed=10, feature_dim=12)
    r = rng(3, "reductions")
    x = r.uniform(-1, 1, size=(50,) + shape)
    k = r.integers(0, 4, size=50)
    pt = _preg(12, 11)
    anchors = {"target": pt.draw(50, r)}
    checks = {}
    ce = identity_loss_ce(target, x, k).data
    logit = evaluate_identity(Logit(pt, 0.4), target, x, k, anchors)[0].data
    checks["Aug(CE), no aug models -> CE"] = np.array_equal(
        evaluate_identity(Aug(CE(), (), gamma_t=1.0), target, x, k)[0].data, ce)
    checks["Aug(Logit), no aug models -> Logit"] = np.array_equal(
        evaluate_identity(Aug(Logit(pt, 0.4), (), gamma_t=1.0), target, x, k, anchors)[0].data, logit)
    checks["LOMMA, no aug models -> Logit"] = np.array_equal(
        evaluate_identity(LOMMA(pt, (), 0.4), target, x, k, anchors)[0].data, logit)
    p = predict_penultimate(target, x)
    pure = -(p * target.head_weights.data[k]).sum(axis=1)
    checks["lambda_reg = 0 -> pure logit"] = np.array_equal(
        evaluate_identity(LOMMA(pt, (), 0.0), target, x, k, anchors)[0].data, pure)
    p0 = np.array([0.5, -1.0, 2.0, 1.0])
    head = np.array([[0.0] * 4, [1.5, 0.5, -0.25, 2.0]])
    on_anchor = evaluate_identity(Logit(PregEstimator(p0, np.zeros(4)), 3.0), _FixedFeatures(p0, head), _X1, [1],
                                  {"target": p0[None]})[0].item()
    checks["p = p_reg -> -p.w_k"] = on_anchor == -float(p0 @ head[1])
    zero = evaluate_identity(Logit(PregEstimator(p0, np.zeros(4)), 3.0), _FixedFeatures(p0, np.zeros((2, 4))),
                             _X1, [1], {"target": p0[None]})[0].item()
    checks["p = p_reg, w_k = 0 -> 0"] = zero == 0.0
    toy = _FixedFeatures([1.0, 0.0, 1.0], [[0, 0, 0], [2.0, 1.0, 0.5]])
    checks["toy -2.5"] = evaluate_identity(Logit(PregEstimator(np.zeros(3), np.zeros(3)), 0.0), toy, _X1, [1])[0].item() == -2.5
    checks["toy -1.5"] = evaluate_identity(Logit(PregEstimator(np.zeros(3), np.zeros(3)), 1.0), toy, _X1, [1],
                                           {"target": np.array([[0.0, 0.0, 1.0]])})[0].item() == -1.5
    failed = [name for name, good in checks.items() if not good]
    record("3", not failed, f"{len(checks)} exact identities" + (f", failed: {failed}" if failed else ""))
    assert not failed


# --- 4. p_reg estimator ---------------------------------------------------


class _PixelFeatures(Classifier):
    def __init__(self, n_pixels):
        super().__init__("Conv1", 2, (1, 1, n_pixels), feature_dim=n_pixels)

    def features(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return x.reshape(x.shape[0], -1) * 4.0


def test_criterion_4_preg_estimator():
    checks = {}
    two = Dataset(np.array([[[[0.25, -0.5]]], [[[0.75, 0.5]]]]), np.array([0, 1]))
    est = estimate_preg(_PixelFeatures(2), two)
    # features 1 and 3, then -2 and 2
    checks["two-sample mean"] = est.mu.tolist() == [2.0, 0.0, 1.0]
    checks["two-sample population variance"] = (est.sigma ** 2).tolist() == [1.0, 4.0, 0.0]
    const = Dataset(np.full((5, 1, 1, 3), -0.2), np.zeros(5, int))
    est = estimate_preg(_PixelFeatures(3), const, mode="sampled")
    checks["sigma = 0 sampled draw is mu"] = np.array_equal(est.draw(100, rng(0)), np.tile(est.mu, (100, 1)))
    big = Dataset(rng(4).uniform(-1, 1, size=(6000, 1, 1, 2)), np.zeros(6000, int))
    checks["default N = 5000"] = estimate_preg(_PixelFeatures(2), big).n_public_used == 5000
    small = Dataset(big.images[:300], big.labels[:300])
    checks["N = |public| when smaller"] = estimate_preg(_PixelFeatures(2), small).n_public_used == 300
    failed = [name for name, good in checks.items() if not good]
    record("4", not failed, ", ".join(checks) + (f"; failed: {failed}" if failed else ""))
    assert not failed


# --- 5. KNN oracle and z-clipping -----------------------------------------


def test_criterion_5_knn_and_clipping():
    shape = (1, 8, 8)
    model = Classifier("Conv5", 3, shape, seed=12, feature_dim=16)
    r = rng(5, "knn")
    worst = 0.0
    for _ in range(20):
        recons = r.uniform(-1, 1, size=(10,) + shape)
        private = Dataset(r.uniform(-1, 1, size=(10,) + shape), np.zeros(10, int))
        fq = predict_penultimate(model, recons)[:, :-1]
        fr = predict_penultimate(model, private.images)[:, :-1]
        brute = np.mean([min(math.sqrt(sum((a - b) ** 2 for a, b in zip(q, p))) for p in fr) for q in fq])
        worst = max(worst, abs(knn_dist(recons, private, model, 0) - brute))
    dist = DiagonalGaussian(r.normal(size=4) * 2, r.normal(size=4))
    z = sample_latent(dist, 1_000_000, clip_z=True, seed=1).data
    zp = sample_latent(PointEstimate(r.normal(size=(1000, 4)) * 3), 1_000_000, clip_z=True).data
    bound = max(np.abs(z).max(), np.abs(zp).max())
    ok = worst <= 1e-9 and bound <= 1.0
    record("5", ok, f"KNN vs all-pairs max err {worst:.1e} over 20 10x10 instances; "
                    f"max |z| {bound} over 1e6 Gaussian + 1e6 point draws")
    assert ok


# --- MNIST runs for 6, 7, 8 -----------------------------------------------


def _acceptance_root() -> Path:
    return Path(os.environ.get("MILAB_ACCEPTANCE_OUT", Path.home() / ".cache" / "milab" / "acceptance"))


@pytest.fixture(scope="module")
def mnist_runs():
    root = _acceptance_root()
    runs, t0 = {}, time.perf_counter()
    for seed in SEEDS:
        for attack in ATTACKS:
            cfg = cfgmod.load(MNIST_CONFIG, [("seed", seed), ("attack", attack), ("out", str(root / f"seed{seed}"))])
            pipe = Pipeline(cfg, single_worker=True)
            rows = pipe.full_experiment()
            runs[seed, attack] = (pipe, {r["variant"]: r for r in rows})
    wall = time.perf_counter() - t0
    stage_time = 0.0
    for seed in SEEDS:
        path = root / f"seed{seed}" / "timings.json"
        stage_time += sum(json.loads(path.read_text()).values())
    return runs, wall, stage_time


def _mean(runs, attack, variant, key):
    return float(np.mean([runs[s, attack][1][variant][key] for s in SEEDS]))


def test_criterion_6_mnist_direction(mnist_runs):
    runs, wall, stage_time = mnist_runs
    need = {"kedmi": 15.0, "gmi": 20.0}
    parts, ok = [], True
    for attack in ATTACKS:
        base, lomma = _mean(runs, attack, "baseline", "top1_mean"), _mean(runs, attack, "+ LOMMA", "top1_mean")
        kb, kl = _mean(runs, attack, "baseline", "knn_dist"), _mean(runs, attack, "+ LOMMA", "knn_dist")
        good = lomma >= base + need[attack] and kl < kb
        ok &= good
        lom, ma = _mean(runs, attack, "+ LOM", "top1_mean"), _mean(runs, attack, "+ MA", "top1_mean")
        order = lomma >= max(lom, ma) >= min(lom, ma) >= base
        parts.append(f"{attack}: top-1 {base:.1f} -> {lomma:.1f} (need +{need[attack]:.0f}), "
                     f"KNN {kb:.2f} -> {kl:.2f}; LOM {lom:.1f} MA {ma:.1f} ordering {'holds' if order else 'broken'}")
    record("6", ok, "; ".join(parts) + f"; stage time {stage_time / 60:.1f} min (this session {wall / 60:.1f} min)")
    assert ok


def test_criterion_7_overfitting(mnist_runs):
    runs, _, _ = mnist_runs
    parts, ok = [], True
    for attack in ATTACKS:
        base = _mean(runs, attack, "baseline", "overfit_fraction")
        lomma = _mean(runs, attack, "+ LOMMA", "overfit_fraction")
        good = base > 0 and lomma < base
        ok &= good
        parts.append(f"{attack}: baseline {base:.3f} -> LOMMA {lomma:.3f}")
    record("7", ok, "mean low-high fraction over seeds " + "; ".join(parts))
    assert ok


def test_criterion_8_distillation(mnist_runs):
    runs, _, _ = mnist_runs
    ratios = []
    for seed in SEEDS:
        pipe = runs[seed, "kedmi"][0]
        for entry in json.loads((pipe.out / "models" / "distill.json").read_text()):
            ratios.append((seed, entry["arch"], entry["final_kl"] / entry["initial_kl"]))
    pipe = runs[0, "kedmi"][0]
    teacher, _ = load_classifier(pipe.model_path("target"))
    _, public = pipe.split()
    self_kl = distill(teacher, public, teacher.arch_tag, SELF_DISTILL, seed=0).final_kl
    worst = max(r for _, _, r in ratios)
    ok = worst <= 0.5 and self_kl < 0.05
    record("8", ok, f"worst final/initial KL {worst:.3f} over {len(ratios)} augmented models; "
                    f"self-distillation ({teacher.arch_tag}, {SELF_DISTILL.epochs} epochs) KL {self_kl:.4f} nats")
    assert ok


# --- 9. determinism -------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    overrides = [("data.source", "synth"), ("data.synth", {"n_classes": 6, "n_per_class": 40, "image_size": 16}),
                 ("data.private_classes", [0, 1, 2]), ("data.public_classes", [3, 4, 5]),
                 ("target.epochs", 2), ("eval.epochs", 2), ("augment.epochs", 2),
                 ("gan.iterations", 10), ("gan.width", 8), ("gan.n_z", 16),
                 ("inversion.iterations", 20), ("inversion.restarts", 2), ("inversion.lambda_reg", 0.01)]
    manifests = []
    for name in ("a", "b"):
        cfg = cfgmod.load(None, overrides + [("out", str(tmp_path / name)), ("seed", 3)])
        for attack in ATTACKS:
            Pipeline(cfgmod.set_path(cfg, "attack", attack), single_worker=True).full_experiment()
        manifests.append((tmp_path / name / "manifest.json").read_bytes())
    n_files = len(json.loads(manifests[0])["files"])
    ok = manifests[0] == manifests[1]
    record("9", ok, f"two single-worker full experiments (both modes, {n_files} files): manifests "
                    f"{'bitwise identical' if ok else 'differ'}")
    assert ok
