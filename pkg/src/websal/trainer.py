"""Alternating critic/generator training of both stages, checkpointing and resume."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .losses import (LossReport, LossWeights, NonFiniteLossError, TERMS, discriminator_adv_loss,
                     generator_adv_loss, l2_pixel_loss, total_loss, tv_loss)
from .networks import NetworkConfig, build_params, discriminator_forward, generate, make_pyramid
from .optim import make_optimizer
from .params import ParamStore, load_checkpoint, save_checkpoint
from .tensor import Tensor, add, no_grad
from .imageops import OutlinePyramid

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "epoch") + TERMS + ("total", "d_loss")
DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    n_critic: int = 1
    clip_value: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    blur_sigma: float | None = None
    seed: int = 0
    data: str = "synthetic:4"
    train_count: int | None = None
    checkpoint_dir: str = "checkpoints"
    log_path: str | None = None
    optimizer: str = "adam"
    dtype: str = "float32"
    stagewise: bool = False
    two_stage: bool = True
    keep_checkpoints: bool = False
    figures: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        self.validate()

    def validate(self) -> None:
        if not (self.lr_g > 0 and self.lr_d > 0):
            raise ValueError(f"learning rates must be > 0, got lr_g={self.lr_g}, lr_d={self.lr_d}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.n_critic < 0:
            raise ValueError(f"n_critic must be >= 0, got {self.n_critic}")
        if self.clip_value <= 0:
            raise ValueError(f"clip_value must be > 0, got {self.clip_value}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["weights"] = self.weights.to_dict()
        d["network"] = self.network.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())

    @property
    def resolved_log_path(self) -> Path:
        return Path(self.log_path) if self.log_path else Path(self.checkpoint_dir) / "loss_log.csv"


def _stack_pyramids(pyrs: list[OutlinePyramid]) -> OutlinePyramid:
    levels = [Tensor(np.concatenate([p.levels[i].data for p in pyrs])) for i in range(len(pyrs[0].levels))]
    return OutlinePyramid(levels, pyrs[0].sigma)


def _grad_norms(params: ParamStore) -> dict[str, float]:
    return {k: float(np.sqrt(np.sum(np.asarray(t.grad, dtype=np.float64) ** 2)))
            for k, t in params.unique() if t.grad is not None}


def clip_weights(params: ParamStore, value: float, prefix: str = "disc.") -> None:
    for _, t in params.unique(prefix):
        np.clip(t.data, -value, value, out=t.data)


def effective_weights(cfg: TrainConfig, epoch: int) -> LossWeights:
    w = cfg.weights
    if not cfg.two_stage or (cfg.stagewise and epoch < cfg.epochs // 2):
        return dataclasses.replace(w, lambda3=0.0, lambda4=0.0)
    return w


class Trainer:
    """Owns parameters, optimizers and the step loop for one run."""

    def __init__(self, cfg: TrainConfig, samples: list | None = None):
        self.cfg = cfg
        self.dtype = DTYPES[cfg.dtype]
        all_samples = samples if samples is not None else data_mod.resolve_dataset(cfg.data, cfg.blur_sigma, cfg.seed)
        if cfg.train_count is not None and cfg.train_count < len(all_samples):
            split = data_mod.split_dataset(all_samples, cfg.train_count, cfg.seed)
            self.samples = data_mod.select(all_samples, split.train)
            self.test_samples = data_mod.select(all_samples, split.test)
        else:
            self.samples, self.test_samples = list(all_samples), []
        self.params = build_params(cfg.seed, cfg.network, self.dtype)
        self.gen_params = self.params.unique("stage")
        self.disc_params = self.params.unique("disc.")
        self.opt_g = make_optimizer(cfg.optimizer, self.gen_params, cfg.lr_g)
        self.opt_d = make_optimizer(cfg.optimizer, self.disc_params, cfg.lr_d)
        self.epoch = 0
        self.step = 0
        self._pyramids = {s.id: make_pyramid(Tensor(s.image.data.astype(self.dtype)), cfg.network)
                          for s in self.samples}
        self.ckpt_dir = Path(cfg.checkpoint_dir)

    # -- checkpoints ------------------------------------------------------
    def save(self, path=None) -> Path:
        path = Path(path) if path else self.ckpt_dir / "latest.npz"
        meta = {"config": self.cfg.to_dict(), "network": self.cfg.network.to_dict(),
                "sigma": self.cfg.network.sigma, "epoch": self.epoch, "step": self.step}
        return save_checkpoint(path, self.params,
                               {"g": self.opt_g.state_dict(), "d": self.opt_d.state_dict()}, meta)

    def restore(self, path) -> None:
        store, optim, meta = load_checkpoint(path, self.dtype)
        if store.names() != self.params.names():
            raise ValueError(f"{path}: parameter layout does not match the configured network")
        for name, t in self.params.unique():
            t.data[...] = store[name].data
        for name, st in self.params.buffers.items():
            src = store.buffers[name]
            st.running_mean[...] = src.running_mean
            st.running_var[...] = src.running_var
        self.opt_g.load_state_dict(optim.get("g", {}))
        self.opt_d.load_state_dict(optim.get("d", {}))
        self.epoch, self.step = int(meta["epoch"]), int(meta["step"])

    # -- one step ---------------------------------------------------------
    def _d_score(self, m: Tensor) -> Tensor:
        mode = "probability" if self.cfg.weights.gan_mode == "standard" else "critic"
        return discriminator_forward(self.params, m, mode, self.cfg.network)

    def train_step(self, batch: data_mod.Batch, weights: LossWeights) -> LossReport:
        cfg = self.cfg
        gan = cfg.weights.gan_mode
        x = Tensor(batch.images.data.astype(self.dtype))
        s = Tensor(batch.saliency.data.astype(self.dtype))
        pyr = _stack_pyramids([self._pyramids[i] for i in batch.ids])
        coarse, fine = generate(self.params, x, cfg.network, pyr, mode="train", two_stage=cfg.two_stage)
        final = fine if fine is not None else coarse

        d_value = 0.0
        fakes = [coarse.detach()] + ([fine.detach()] if fine is not None else [])
        for _ in range(cfg.n_critic):
            d_real = self._d_score(s)
            d_loss = None
            for f in fakes:
                term = discriminator_adv_loss(d_real, self._d_score(f), gan)
                d_loss = term if d_loss is None else add(d_loss, term)
            d_value = d_loss.item()
            if not math.isfinite(d_value):
                self._abort({"d_loss": d_value})
            d_loss.backward()
            self.opt_d.step()
            if gan == "wgan-clip":
                clip_weights(self.params, cfg.clip_value)

        terms = {"l1": l2_pixel_loss(coarse, s), "l2_g": generator_adv_loss(self._d_score(coarse), gan)}
        if fine is not None:
            terms["l3"] = l2_pixel_loss(fine, s)
            terms["l4_g"] = generator_adv_loss(self._d_score(fine), gan)
        else:
            zero = Tensor(np.zeros((1, 1, 1, 1), dtype=self.dtype))
            terms["l3"], terms["l4_g"] = zero, zero
        terms["tv"] = tv_loss(final, weights.alpha)
        values = {k: t.item() for k, t in terms.items()}
        try:
            total = total_loss(terms, weights)
        except NonFiniteLossError:
            self._abort(values)
        total.backward()
        # the generator step must not move the critic
        for _, t in self.disc_params:
            t.zero_grad()
        self.opt_g.step()
        return LossReport.from_terms(values, weights, d_value)

    def _abort(self, values: dict) -> None:
        dump = {"step": self.step, "epoch": self.epoch, "terms": values, "grad_norms": _grad_norms(self.params)}
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        path = self.ckpt_dir / "nonfinite_dump.json"
        path.write_text(json.dumps(dump, indent=2, default=str))
        raise TrainingAborted(f"non-finite loss at step {self.step}: {values} (diagnostics in {path})")

    # -- loop ---------------------------------------------------------------
    def run(self, progress=None) -> Path:
        cfg = self.cfg
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        data_mod.write_manifest(self.samples + self.test_samples, self.ckpt_dir / "manifest.json")
        (self.ckpt_dir / "config.json").write_text(cfg.to_json() + "\n")
        log_path = cfg.resolved_log_path
        log_path.parent.mkdir(parents=True, exist_ok=True)
        _truncate_log(log_path, self.step)
        latest = self.ckpt_dir / "latest.npz"
        while self.epoch < cfg.epochs:
            weights = effective_weights(cfg, self.epoch)
            t0 = time.perf_counter()
            with open(log_path, "a", newline="") as fh:
                writer = csv.writer(fh)
                for batch in data_mod.batch_iter(self.samples, cfg.batch_size, cfg.seed, self.epoch):
                    self.step += 1
                    rep = self.train_step(batch, weights)
                    writer.writerow([self.step, self.epoch] + [repr(float(getattr(rep, k)))
                                                             for k in LOG_HEADER[2:]])
            self.epoch += 1
            latest = self.save()
            if cfg.keep_checkpoints:
                self.save(self.ckpt_dir / f"epoch_{self.epoch:03d}.npz")
            log.info("epoch %d/%d done in %.1fs (step %d, total %.5f)", self.epoch, cfg.epochs,
                     time.perf_counter() - t0, self.step, rep.total)
            if progress is not None:
                progress(self.epoch, rep)
        if cfg.figures:
            from .report import plot_loss_curve
            plot_loss_curve(log_path, self.ckpt_dir / "loss_curve.png")
        return latest


def _truncate_log(path: Path, step: int) -> None:
    """Keep the header and rows up to ``step`` (resume rewrites everything after it)."""
    rows = []
    if path.exists() and step > 0:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            rows = [r for r in reader if r and int(r[0]) <= step]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        writer.writerows(rows)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def train(cfg: TrainConfig, resume_from=None, samples=None, progress=None) -> Path:
    """Train per ``cfg``; returns the path of the final checkpoint."""
    trainer = Trainer(cfg, samples)
    if resume_from is not None:
        trainer.restore(resume_from)
    return trainer.run(progress)


def load_model(path) -> tuple[ParamStore, NetworkConfig, dict]:
    params, _, meta = load_checkpoint(path)
    return params, NetworkConfig.from_dict(meta["network"]), meta
