"""Experiment stages with atomic outputs, a content-hash manifest and config-keyed caching.

Layout under the output directory::

    models/target.ck  models/eval.ck  models/aug<i>_<arch>.ck   (+ *_trace.json)
    gan/<mode>/generator.ck  gan/<mode>/discriminator.ck  gan/<mode>/trace.csv
    invert/<attack>/<variant>/{recons.npy, meta.json, trace.csv}
    reports/<attack>/<variant>.json, <variant>_samples.csv, <variant>_overfit.{json,csv}
    images/<attack>/<variant>/*.pgm
    reports/<attack>/comparison.{csv,md}

``manifest.json`` lists every file with its sha256 and the stage that wrote
it. Wall-clock times live in ``timings.json`` so the manifest itself is a pure
function of the config and seed.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .data import Dataset, SplitSpec, export_mnist_subset, load_idx, split_disjoint, synth_blobs
from .evaluation import build_report, overfit_analysis, write_pgm, write_table_csv
from .gan import CRITIC, PROBABILISTIC, GanHyper, load_module, save_module, train_gan
from .inversion import (CE, LOMMA, Aug, DiagonalGaussian, InversionConfig, Logit, estimate_preg, invert)
from .models import DistillConfig, TrainHyper, distill, load_classifier, save_classifier, train_classifier
from .tensor import Tensor, no_grad
from .tensor.random import derive_seed
from .tensor.random import rng as make_rng

log = logging.getLogger(__name__)

STAGES = ("train-target", "train-eval", "distill", "train-gan", "invert", "evaluate", "analyze-overfit")
META_FILES = ("manifest.json", "timings.json")
VARIANT_LABELS = {"baseline": "baseline", "lom": "+ LOM", "ma": "+ MA", "lomma": "+ LOMMA"}


class MissingArtifact(FileNotFoundError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"stage '{stage}' needs {path}, which does not exist; run the upstream stage first")
        self.stage = stage
        self.path = str(path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _latent_array(dist) -> np.ndarray:
    """[1, B, n_z] for point estimates, [2, B, n_z] (mu, log sigma) for Gaussians."""
    if isinstance(dist, DiagonalGaussian):
        return np.stack([np.atleast_2d(dist.mu), np.atleast_2d(dist.log_sigma)])
    return np.asarray(dist.z0)[None]


def save_npy(path, array: np.ndarray) -> Path:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    return atomic_write(path, buf.getvalue())


@contextlib.contextmanager
def worker_limit(single_worker: bool):
    """Pin BLAS to one thread in single-worker mode so results are bitwise repeatable."""
    if not single_worker:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


@dataclass
class StageResult:
    stage: str
    cached: bool
    outputs: list


def _gan_mode(attack: str) -> str:
    return PROBABILISTIC if attack == "kedmi" else CRITIC


def _latent_kind(attack: str) -> str:
    return "gaussian" if attack == "kedmi" else "point"


def _train_hyper(section: dict) -> TrainHyper:
    return TrainHyper(section["epochs"], section["batch_size"], section["lr"], section["optimizer"],
                      section["weight_decay"], section["holdout_fraction"])


def _limit_per_class(dataset: Dataset, limit: int | None, seed: int) -> Dataset:
    if limit is None:
        return dataset
    r = make_rng(seed, "max-per-class")
    keep = []
    for c in sorted(np.unique(dataset.labels)):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) > limit:
            idx = np.sort(r.choice(idx, size=limit, replace=False))
        keep.append(idx)
    return dataset.subset(np.sort(np.concatenate(keep)))


class Pipeline:
    def __init__(self, config: dict, single_worker: bool = False):
        self.config = cfgmod.validate(config)
        self.out = Path(config["out"])
        self.seed = int(config["seed"])
        self.single_worker = single_worker
        self._split = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def load_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"files": {}, "stages": {}}

    def _rel(self, path: Path) -> str:
        return Path(path).relative_to(self.out).as_posix()

    def stage_seed(self, *path) -> int:
        return derive_seed(self.seed, *path)

    def _record(self, stage_id: str, key: str, seed: int, inputs: dict, outputs: list, wall: float):
        manifest = self.load_manifest()
        old = manifest["stages"].get(stage_id, {}).get("outputs", [])
        for rel in old:
            manifest["files"].pop(rel, None)
        rels = sorted(self._rel(p) for p in outputs)
        for rel in rels:
            manifest["files"][rel] = {"sha256": sha256_file(self.out / rel), "stage": stage_id}
        manifest["stages"][stage_id] = {"key": key, "seed": seed, "inputs": inputs, "outputs": rels}
        write_json(self.manifest_path, manifest)
        timings_path = self.out / "timings.json"
        timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
        timings[stage_id] = round(wall, 3)
        write_json(timings_path, timings)

    def _cached(self, stage_id: str, key: str) -> bool:
        entry = self.load_manifest()["stages"].get(stage_id)
        if not entry or entry["key"] != key:
            return False
        files = self.load_manifest()["files"]
        for rel in entry["outputs"]:
            path = self.out / rel
            if not path.exists() or sha256_file(path) != files.get(rel, {}).get("sha256"):
                return False
        return True

    def _require(self, stage: str, paths) -> dict:
        inputs = {}
        for p in paths:
            if not Path(p).exists():
                raise MissingArtifact(stage, p)
            inputs[self._rel(p)] = sha256_file(p)
        return inputs

    def _run(self, stage_id: str, subtree, seed: int, required: list, extra_key, body) -> StageResult:
        stage = stage_id.split(":")[0]
        inputs = self._require(stage, required)
        key = cfgmod.canonical_hash({"stage": stage_id, "config": subtree, "inputs": inputs, "seed": seed,
                                     "extra": extra_key, "version": __version__})
        if self._cached(stage_id, key):
            log.warning("%s: cached (config hash %s), skipping", stage_id, key[:12])
            outputs = self.load_manifest()["stages"][stage_id]["outputs"]
            return StageResult(stage_id, True, outputs)
        t0 = time.perf_counter()
        with worker_limit(self.single_worker):
            outputs = body()
        self._record(stage_id, key, seed, inputs, outputs, time.perf_counter() - t0)
        log.info("%s: done in %.1fs", stage_id, time.perf_counter() - t0)
        return StageResult(stage_id, False, sorted(self._rel(p) for p in outputs))

    # -- data --------------------------------------------------------------

    def split(self) -> tuple[Dataset, Dataset]:
        if self._split is None:
            d = self.config["data"]
            if d["source"] == "synth":
                s = d["synth"]
                full = synth_blobs(s["n_classes"], s["n_per_class"], s["image_size"], self.stage_seed("data"))
            elif d["source"] == "mnist-subset":
                cache = Path(os.path.expanduser(d["cache_dir"]))
                images, labels = cache / "mnist5k-images-idx3-ubyte", cache / "mnist5k-labels-idx1-ubyte"
                if not (images.exists() and labels.exists()):
                    export_mnist_subset(cache)
                full = load_idx(images, labels)
            else:
                if not d["images"] or not d["labels"]:
                    raise cfgmod.ConfigError("data.images", "idx source needs images and labels paths")
                full = load_idx(d["images"], d["labels"])
            full = _limit_per_class(full, d["max_per_class"], self.stage_seed("data"))
            private, public, _ = split_disjoint(full, SplitSpec(d["private_classes"], d["public_classes"]))
            self._split = (private, public)
        return self._split

    def data_hash(self) -> str:
        private, public = self.split()
        return private.content_hash() + public.content_hash()

    # -- paths -------------------------------------------------------------

    def model_path(self, name: str) -> Path:
        return self.out / "models" / f"{name}.ck"

    def aug_paths(self) -> list[Path]:
        return [self.model_path(f"aug{i}_{a}") for i, a in enumerate(self.config["augment"]["archs"])]

    def gan_dir(self, attack: str | None = None) -> Path:
        return self.out / "gan" / _gan_mode(attack or self.config["attack"])

    def invert_dir(self, variant: str, attack: str | None = None) -> Path:
        return self.out / "invert" / (attack or self.config["attack"]) / variant

    def report_dir(self, attack: str | None = None) -> Path:
        return self.out / "reports" / (attack or self.config["attack"])

    # -- stages ------------------------------------------------------------

    def run_stage(self, stage: str, variant: str | None = None) -> StageResult:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        variant = variant or self.config["variant"]
        if variant not in cfgmod.VARIANTS:
            raise cfgmod.ConfigError("variant", f"must be one of {list(cfgmod.VARIANTS)}")
        return getattr(self, "_stage_" + stage.replace("-", "_"))(variant)

    def _train_model(self, stage: str, section_name: str, file_name: str) -> StageResult:
        section = self.config[section_name]
        seed = self.stage_seed(stage)
        path = self.model_path(file_name)

        def body():
            private, _ = self.split()
            res = train_classifier(private, section["arch"], _train_hyper(section), seed)
            save_classifier(path, res.model, {"role": section_name, "holdout_accuracy": res.holdout_accuracy})
            trace = write_json(path.with_name(file_name + "_trace.json"), res.trace)
            return [path, trace]

        return self._run(stage, section, seed, [], self.data_hash(), body)

    def _stage_train_target(self, variant):
        return self._train_model("train-target", "target", "target")

    def _stage_train_eval(self, variant):
        return self._train_model("train-eval", "eval", "eval")

    def _stage_distill(self, variant):
        section = self.config["augment"]
        seed = self.stage_seed("distill")
        teacher_path = self.model_path("target")

        def body():
            _, public = self.split()
            teacher, _ = load_classifier(teacher_path)
            cfg = DistillConfig(section["temperature"], section["epochs"], section["batch_size"], section["lr"],
                                section["optimizer"], section["holdout_fraction"], section["shift"],
                                section["schedule"])
            outputs, summary = [], []
            for i, (arch, path) in enumerate(zip(section["archs"], self.aug_paths())):
                res = distill(teacher, public, arch, cfg, derive_seed(seed, i))
                save_classifier(path, res.model, {"role": "augmented", "initial_kl": res.initial_kl,
                                                  "final_kl": res.final_kl})
                summary.append({"arch": arch, "initial_kl": res.initial_kl, "final_kl": res.final_kl,
                                "trace": res.trace})
                outputs.append(path)
            outputs.append(write_json(self.out / "models" / "distill.json", summary))
            return outputs

        return self._run("distill", section, seed, [teacher_path], self.data_hash(), body)

    def _stage_train_gan(self, variant):
        section = self.config["gan"]
        mode = _gan_mode(self.config["attack"])
        seed = self.stage_seed("train-gan", mode)
        gdir = self.gan_dir()

        def body():
            _, public = self.split()
            hyper = GanHyper(section["iterations"], section["batch_size"], section["lr"], section["beta1"],
                             section["beta2"], section["n_critic"], section["gp_weight"], section["width"])
            res = train_gan(public, section["n_z"], mode, hyper, seed)
            g = save_module(gdir / "generator.ck", res.generator)
            d = save_module(gdir / "discriminator.ck", res.discriminator)
            cols = {k: [row[k] for row in res.trace] for k in (res.trace[0] if res.trace else [])}
            gdir.mkdir(parents=True, exist_ok=True)
            t = write_table_csv(gdir / "trace.csv", cols) if cols else write_table_csv(gdir / "trace.csv",
                                                                                        {"iteration": []})
            return [g, d, t]

        # public images only: the GAN never sees private data
        _, public = self.split()
        return self._run(f"train-gan:{mode}", section, seed, [], public.content_hash(), body)

    def _identity_spec(self, variant: str, target, public, seed: int):
        inv = self.config["inversion"]
        if variant == "baseline":
            return CE(), None
        preg = estimate_preg(target, public, inv["preg_samples"], derive_seed(seed, "preg"), inv["preg_mode"])
        augs = [load_classifier(p)[0] for p in self.aug_paths()]
        if variant == "lom":
            return Logit(preg, inv["lambda_reg"]), preg
        if variant == "ma":
            return Aug(CE(), augs), preg
        return LOMMA(preg, augs, inv["lambda_reg"]), preg

    def _stage_invert(self, variant):
        inv = self.config["inversion"]
        attack = self.config["attack"]
        # same seed for every variant: identical initial latents make the comparison paired
        seed = self.stage_seed("invert", attack)
        gdir, idir = self.gan_dir(), self.invert_dir(variant)
        required = [self.model_path("target"), gdir / "generator.ck", gdir / "discriminator.ck"]
        if variant in ("ma", "lomma"):
            required += self.aug_paths()

        def body():
            private, public = self.split()
            target, _ = load_classifier(self.model_path("target"))
            gen, _ = load_module(gdir / "generator.ck")
            disc, _ = load_module(gdir / "discriminator.ck")
            spec, preg = self._identity_spec(variant, target, public, seed)
            classes = inv["classes"] if inv["classes"] is not None else sorted(private.class_set)
            lambda_prior = inv["lambda_prior"]
            if lambda_prior is None:
                lambda_prior = cfgmod.DEFAULT_LAMBDA_PRIOR[attack]
            cfg = InversionConfig(inv["iterations"], inv["optimizer"], inv["lr"], inv["momentum"],
                                  lambda_prior, inv["loss_scale"], inv["clip_z"], inv["restarts"],
                                  _latent_kind(attack), seed)
            res = invert(target, gen, disc, spec, cfg, classes)
            meta = {
                "attack": attack, "variant": variant, "classes": res.classes.tolist(),
                "restarts": res.restarts.tolist(), "final_identity": res.final_identity.tolist(),
                "best_rows": {str(k): v for k, v in res.best_rows().items()},
                "preg_samples": preg.n_public_used if preg else None,
                "preg_mode": preg.mode if preg else None,
            }
            return [save_npy(idir / "recons.npy", res.images), write_json(idir / "meta.json", meta),
                    save_npy(idir / "latent.npy", _latent_array(res.latent)),
                    res.write_trace_csv(idir / "trace.csv")]

        subtree = {"inversion": inv, "augment": self.config["augment"]["archs"], "variant": variant,
                   "gan": self.config["gan"]}
        return self._run(f"invert:{attack}:{variant}", subtree, seed, required, self.data_hash(), body)

    def _load_inversion(self, variant: str):
        idir = self.invert_dir(variant)
        meta = json.loads((idir / "meta.json").read_text())
        return np.load(idir / "recons.npy", allow_pickle=False), meta

    def _stage_evaluate(self, variant):
        attack = self.config["attack"]
        idir, rdir = self.invert_dir(variant), self.report_dir()
        required = [idir / "recons.npy", idir / "meta.json", self.model_path("eval")]
        seed = self.stage_seed("evaluate")

        def body():
            private, _ = self.split()
            recons, meta = self._load_inversion(variant)
            eval_model, _ = load_classifier(self.model_path("eval"))
            seeds = {"master": self.seed, "invert": self.stage_seed("invert", attack)}
            # the output location does not change any result, so it stays out of the hash
            content = {k: v for k, v in self.config.items() if k != "out"}
            report, rows = build_report(variant, recons, meta["classes"], meta["restarts"], private, eval_model,
                                        cfgmod.canonical_hash(content), seeds)
            outputs = [atomic_write(rdir / f"{variant}.json", (report.to_json() + "\n").encode()),
                       write_table_csv(rdir / f"{variant}_samples.csv", rows)]
            if self.config["evaluation"]["dump_images"]:
                img_dir = self.out / "images" / attack / variant
                img_dir.mkdir(parents=True, exist_ok=True)
                for stale in img_dir.glob("*.pgm"):
                    stale.unlink()
                for i, (img, k, r) in enumerate(zip(recons, meta["classes"], meta["restarts"])):
                    outputs.append(write_pgm(img_dir / f"class{k}_restart{r}.pgm", img))
            return outputs

        rdir.mkdir(parents=True, exist_ok=True)
        return self._run(f"evaluate:{attack}:{variant}", self.config["evaluation"], seed, required,
                         self.data_hash(), body)

    def _stage_analyze_overfit(self, variant):
        attack = self.config["attack"]
        ev = self.config["evaluation"]
        rdir = self.report_dir()
        base_dir = self.invert_dir("baseline")
        idir = self.invert_dir(variant)
        required = [idir / "recons.npy", idir / "latent.npy", self.model_path("target"), self.model_path("eval"),
                    self.gan_dir() / "generator.ck"]
        for path in (base_dir / "recons.npy", base_dir / "latent.npy"):
            if path not in required:
                required.append(path)
        seed = self.stage_seed("analyze-overfit")

        def body():
            target, _ = load_classifier(self.model_path("target"))
            eval_model, _ = load_classifier(self.model_path("eval"))
            gen, _ = load_module(self.gan_dir() / "generator.ck")
            tau_low, tau_high = ev["tau_low"], ev["tau_high"]
            source = "config"
            if tau_low is None or tau_high is None:
                # thresholds come from the baseline run so every variant is cut the same way
                base_x, base_k = self._overfit_samples("baseline", gen, seed)
                ref = overfit_analysis(base_x, base_k, target, eval_model, tau_low, tau_high)
                tau_low, tau_high, source = ref.tau_low, ref.tau_high, "baseline defaults"
            x, k = self._overfit_samples(variant, gen, seed)
            res = overfit_analysis(x, k, target, eval_model, tau_low, tau_high)
            summary = {"variant": variant, "tau_low": res.tau_low, "tau_high": res.tau_high,
                       "thresholds_from": source, "fraction_low_high": res.fraction_low_high,
                       "n_samples": int(len(k)), "model_a": "target", "model_b": "eval"}
            pairs = {"target": k.tolist(), "loss_a": res.loss_a, "loss_b": res.loss_b}
            return [write_json(rdir / f"{variant}_overfit.json", summary),
                    write_table_csv(rdir / f"{variant}_overfit.csv", pairs)]

        rdir.mkdir(parents=True, exist_ok=True)
        return self._run(f"analyze-overfit:{attack}:{variant}", ev, seed, required, None, body)

    def _overfit_samples(self, variant: str, gen, seed: int):
        """Images and classes for the overfit analysis.

        Point latents give one image per run. A Gaussian latent is a learned
        distribution, so ``overfit_draws`` images are drawn from each one. The
        noise depends only on the seed, so every variant sees the same draws.
        """
        recons, meta = self._load_inversion(variant)
        classes = np.asarray(meta["classes"], dtype=np.int64)
        latent = np.load(self.invert_dir(variant) / "latent.npy", allow_pickle=False)
        draws = self.config["evaluation"]["overfit_draws"]
        if latent.shape[0] == 1 or draws == 1:
            return recons, classes
        mu, log_sigma = latent
        z = mu + np.exp(log_sigma) * make_rng(seed, "overfit-draws").normal(size=(draws,) + mu.shape)
        if self.config["inversion"]["clip_z"]:
            z = np.clip(z, -1.0, 1.0)
        with no_grad():
            images = [gen(Tensor(zi)).data for zi in z]
        return np.concatenate(images), np.tile(classes, draws)

    # -- whole experiment --------------------------------------------------

    def full_experiment(self, variants=cfgmod.VARIANTS) -> list[dict]:
        """All stages for every variant against shared upstream models, then the comparison table."""
        if "baseline" not in variants:
            raise ValueError("the comparison table needs the baseline variant")
        variants = ["baseline"] + [v for v in variants if v != "baseline"]
        for stage in ("train-target", "train-eval", "distill", "train-gan"):
            self.run_stage(stage)
        for v in variants:
            self.run_stage("invert", v)
            self.run_stage("evaluate", v)
        for v in variants:
            self.run_stage("analyze-overfit", v)
        return self.write_comparison(variants)

    def comparison_rows(self, variants) -> list[dict]:
        rdir = self.report_dir()
        rows, base = [], None
        for v in variants:
            rep = json.loads((rdir / f"{v}.json").read_text())
            of = json.loads((rdir / f"{v}_overfit.json").read_text())
            if v == "baseline":
                base = rep["top1_mean"]
            rows.append({
                "variant": VARIANT_LABELS[v],
                "top1_mean": rep["top1_mean"], "top1_std": rep["top1_std"],
                "top5_mean": rep["top5_mean"],
                "improvement": None if v == "baseline" else rep["top1_mean"] - base,
                "knn_dist": rep["knn_dist"],
                "overfit_fraction": of["fraction_low_high"],
            })
        return rows

    def write_comparison(self, variants) -> list[dict]:
        rows = self.comparison_rows(variants)
        rdir = self.report_dir()
        cols = {k: ["" if r[k] is None else r[k] for r in rows] for k in rows[0]}
        csv_path = write_table_csv(rdir / "comparison.csv", cols)
        md_path = atomic_write(rdir / "comparison.md", format_table(rows).encode())
        stage_id = f"comparison:{self.config['attack']}"
        key = cfgmod.canonical_hash({"rows": rows})
        self._record(stage_id, key, self.seed, {}, [csv_path, md_path], 0.0)
        return rows


def format_table(rows: list[dict]) -> str:
    lines = ["| Method | Attack Acc top-1 | Imp. | top-5 | KNN Dist | Overfit frac |",
             "|---|---|---|---|---|---|"]
    for r in rows:
        imp = "" if r["improvement"] is None else f"{r['improvement']:+.2f}"
        lines.append(f"| {r['variant']} | {r['top1_mean']:.2f} ± {r['top1_std']:.2f} | {imp} | "
                     f"{r['top5_mean']:.2f} | {r['knn_dist']:.2f} | {r['overfit_fraction']:.3f} |")
    return "\n".join(lines) + "\n"
