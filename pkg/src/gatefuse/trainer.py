"""Training loop: deterministic replay, append-only metrics, resumable
checkpoints, and abort-on-NaN.

A run is a pure function of (config, seed, data files): parameter
trajectories and the metrics log are bit-identical across reruns, and a run
resumed from step k reproduces steps k+1.. of the uninterrupted run exactly.
Checkpoints carry parameters, optimizer moments, every touched RNG substream,
and all counters.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .config import RunConfig, config_from_dict, config_to_dict
from .curriculum import (CurriculumSchedule, PairedBatch, build_schedule,
                         image_samples_in, materialize, plan_epoch_steps, tau_for_step)
from .data import (DataSplit, load_caption_dataset, load_split,
                   load_text_corpus, load_tokenizer, make_split, save_split, text_batch)
from .errors import DataFormatError, InvalidArgument, NumericError
from .formats import read_checkpoint, read_embeddings, write_checkpoint
from .model import DualStreamModel
from .objectives import project_temperature_clamps, total_loss
from .optim import AdamW, LrSchedule, clip_grad_norm
from .rng import RngPool

log = logging.getLogger(__name__)

METRICS_HEADER = "step,epoch,modality,ntp,aux,total,lambda,lr,tau\n"


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _thread_count() -> int:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if os.environ.get(var):
            return int(os.environ[var])
    return os.cpu_count() or 1


def _fmt(x: float) -> str:
    return repr(float(x))


class Trainer:
    """Drives one run end to end inside `out_dir`."""

    def __init__(self, cfg: RunConfig, out_dir: str):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        T.set_default_dtype(np.float64 if cfg.training.precision == "f64" else np.float32)

        self.rng = RngPool(cfg.training.seed)
        tokenizer = load_tokenizer(cfg.data.vocab)
        self.tokenizer = tokenizer

        if cfg.data.text_corpus is None:
            raise DataFormatError("config data.text_corpus is required for training")
        # Every strategy has image-caption epochs, so both datasets are required.
        if cfg.data.captions is None or cfg.data.embeddings is None:
            raise DataFormatError(
                f"strategy {cfg.training.strategy!r} needs data.captions and "
                "data.embeddings in the config")
        self.text_seqs = load_text_corpus(cfg.data.text_corpus, tokenizer,
                                          cfg.model.max_seq_len)
        embeddings = read_embeddings(cfg.data.embeddings)
        if embeddings.shape[1] != cfg.model.image_embedding_dim:
            raise DataFormatError(
                f"embeddings dim {embeddings.shape[1]} != configured "
                f"image_embedding_dim {cfg.model.image_embedding_dim}")
        self.captions = load_caption_dataset(cfg.data.captions, embeddings, tokenizer,
                                             cfg.model.max_seq_len)

        self.text_split = self._split("text", len(self.text_seqs))
        self.caption_split = self._split("captions", len(self.captions.token_seqs))

        self.schedule = build_schedule(
            cfg.training.strategy, cfg.training.epochs_per_modality,
            n_text=len(self.text_split.train), n_image=len(self.caption_split.train),
            batch_size=cfg.training.batch_size, start_modality=cfg.training.start_modality)
        warmup = max(1, int(round(cfg.training.warmup_fraction * self.schedule.total_steps)))
        self.lr_schedule = LrSchedule(peak_lr=cfg.training.learning_rate,
                                      warmup_steps=warmup,
                                      total_steps=self.schedule.total_steps)

        self.model = DualStreamModel(cfg.model, self.rng)
        self.optimizer = AdamW(self.model.params, beta1=cfg.training.beta1,
                               beta2=cfg.training.beta2, eps=cfg.training.adam_eps,
                               weight_decay=cfg.training.weight_decay)

        # Counters; a resume overwrites these from the checkpoint manifest.
        self.global_step = 0
        self.image_step = 0
        self.epoch_index = 0
        self.step_in_epoch = 0
        self.image_step_in_epoch = 0
        self.image_consumed = 0
        self.last_checkpoint: str | None = None

    # -- pieces ---------------------------------------------------------------

    def _split(self, name: str, n: int) -> DataSplit:
        path = self.out_dir / f"split_{name}.txt"
        if path.exists():
            split = load_split(str(path))
            if len(split.train) + len(split.validation) + len(split.test) != n:
                raise DataFormatError(f"persisted split {path} does not cover {n} samples")
            return split
        split = make_split(n, name, self.cfg.training.seed,
                           self.cfg.data.validation_fraction, self.cfg.data.test_fraction)
        save_split(str(path), split)
        return split

    def manifest(self) -> dict:
        fingerprints = {}
        for key in ("text_corpus", "captions", "embeddings", "vocab"):
            path = getattr(self.cfg.data, key)
            if path:
                fingerprints[key] = _file_sha256(path)
        return {
            "config": config_to_dict(self.cfg),
            "seed": self.cfg.training.seed,
            "package_version": __version__,
            "numpy_version": np.__version__,
            "threads": _thread_count(),
            "fingerprints": fingerprints,
            "schedule": {"strategy": self.schedule.strategy,
                         "total_steps": self.schedule.total_steps,
                         "total_image_steps": self.schedule.total_image_steps,
                         "warmup_steps": self.lr_schedule.warmup_steps},
            "counters": {"global_step": self.global_step,
                         "image_step": self.image_step,
                         "epoch_index": self.epoch_index,
                         "step_in_epoch": self.step_in_epoch,
                         "image_step_in_epoch": self.image_step_in_epoch,
                         "image_consumed": self.image_consumed,
                         "adam_t": self.optimizer.t},
            "rng": self.rng.state(),
        }

    def save_checkpoint(self, path: str | None = None) -> str:
        path = path or str(self.out_dir / f"checkpoint_step{self.global_step:08d}.gfck")
        blocks: dict[str, np.ndarray] = {}
        for name, p in self.model.params.items():
            blocks[name] = p.data
        for name, m in self.optimizer.m.items():
            blocks[f"opt.m.{name}"] = m
        for name, v in self.optimizer.v.items():
            blocks[f"opt.v.{name}"] = v
        write_checkpoint(path, self.manifest(), blocks)
        self.last_checkpoint = path
        log.info("checkpoint written: %s", path)
        return path

    def load_checkpoint(self, path: str) -> None:
        manifest, blocks = read_checkpoint(path)
        if manifest["config"] != config_to_dict(self.cfg):
            raise DataFormatError(
                "checkpoint config does not match the provided config; "
                "resume with the run's original config")
        for name, p in self.model.params.items():
            if name not in blocks:
                raise DataFormatError(f"checkpoint lacks parameter block {name}")
            if blocks[name].shape != p.data.shape:
                raise DataFormatError(f"checkpoint block {name} has shape "
                                      f"{blocks[name].shape}, expected {p.data.shape}")
            p.data[...] = blocks[name]
            self.optimizer.m[name][...] = blocks[f"opt.m.{name}"]
            self.optimizer.v[name][...] = blocks[f"opt.v.{name}"]
        counters = manifest["counters"]
        self.global_step = counters["global_step"]
        self.image_step = counters["image_step"]
        self.epoch_index = counters["epoch_index"]
        self.step_in_epoch = counters["step_in_epoch"]
        self.image_step_in_epoch = counters["image_step_in_epoch"]
        self.image_consumed = counters["image_consumed"]
        self.optimizer.t = counters["adam_t"]
        self.rng.set_state(manifest["rng"])
        self.last_checkpoint = path

    # -- the loop ---------------------------------------------------------------

    def train(self, resume_from: str | None = None) -> str:
        """Run (or continue) the schedule; returns the final checkpoint path."""
        if resume_from:
            self.load_checkpoint(resume_from)
        with open(self.out_dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(self.manifest(), f, sort_keys=True, indent=1)
            f.write("\n")
        tr = self.cfg.training
        metrics_path = self.out_dir / "metrics.csv"
        new_file = not metrics_path.exists()
        metrics = open(metrics_path, "a", encoding="utf-8")
        if new_file:
            metrics.write(METRICS_HEADER)
            metrics.flush()

        try:
            done = self._hit_cap()
            while self.epoch_index < len(self.schedule.epochs) and not done:
                plan = self.schedule.epochs[self.epoch_index]
                specs = plan_epoch_steps(
                    plan, self.rng, self.text_split.train, self.caption_split.train,
                    tr.batch_size,
                    image_consumed=self.image_consumed if plan.kind == "uniform" else 0)
                if self.step_in_epoch == 0:
                    self.image_step_in_epoch = 0
                for spec in specs[self.step_in_epoch:]:
                    self._one_step(spec, plan, metrics)
                    if self._hit_cap():
                        done = True
                        break
                if not done:
                    self.epoch_index += 1
                    self.step_in_epoch = 0
            final = self.save_checkpoint(str(self.out_dir / "checkpoint_final.gfck"))
        finally:
            metrics.close()
        return final

    def _hit_cap(self) -> bool:
        cap = self.cfg.training.max_steps
        return cap is not None and self.global_step >= cap

    def _one_step(self, spec, plan, metrics) -> None:
        tr = self.cfg.training
        tau = tau_for_step(tr, self.schedule, plan, self.image_step,
                           self.image_step_in_epoch)
        with T.train_mode():
            if spec.kind == "paired":
                pair: PairedBatch = materialize(spec, self.text_seqs, self.captions)
                trace_t = self.model.forward(pair.text)
                rep_t = total_loss(self.model, trace_t, pair.text, tr.lambda_aux)
                trace_i = self.model.forward(pair.image, tau=tau)
                rep_i = total_loss(self.model, trace_i, pair.image, tr.lambda_aux)
                loss = T.add(rep_t.total, rep_i.total)
                ntp = float(rep_t.ntp.data) + float(rep_i.ntp.data)
                aux = float(rep_i.aux.data) if rep_i.aux is not None else 0.0
                total = float(loss.data)
                modality = "paired"
            else:
                batch = materialize(spec, self.text_seqs, self.captions)
                trace = self.model.forward(batch, tau=tau if spec.kind != "text" else None)
                rep = total_loss(self.model, trace, batch, tr.lambda_aux)
                loss = rep.total
                ntp, aux, total = rep.row()
                modality = {"text": "text", "image": "image", "mixed": "mixed"}[spec.kind]

        if not np.isfinite(loss.data):
            raise NumericError(
                f"non-finite loss at step {self.global_step + 1}; last good "
                f"checkpoint: {self.last_checkpoint or 'none written yet'}")
        self.optimizer.zero_grad()
        loss.backward()
        clip_grad_norm(self.model.params, tr.grad_clip)
        lr = self.lr_schedule.lr_at(min(self.global_step + 1, self.schedule.total_steps))
        self.optimizer.step(lr)
        project_temperature_clamps(self.model.params)

        self.global_step += 1
        self.step_in_epoch += 1
        consumed = image_samples_in(spec)
        self.image_consumed += consumed
        if spec.kind != "text":
            self.image_step += 1
            self.image_step_in_epoch += 1

        if self.global_step % tr.log_interval == 0:
            metrics.write(f"{self.global_step},{self.epoch_index},{modality},"
                          f"{_fmt(ntp)},{_fmt(aux)},{_fmt(total)},{_fmt(tr.lambda_aux)},"
                          f"{_fmt(lr)},{_fmt(tau)}\n")
            metrics.flush()
        if self.global_step % tr.checkpoint_interval == 0:
            self.save_checkpoint()
            self._validation_row()

    def _validation_row(self) -> None:
        """Validation NTP at checkpoint boundaries; RNG-free (eval mode)."""
        rows = []
        B = self.cfg.training.batch_size
        with T.inference_mode():
            for name, split, make in (
                    ("text", self.text_split,
                     lambda idx: text_batch([self.text_seqs[i] for i in idx])),
                    ("captions", self.caption_split,
                     lambda idx: self.captions.batch(idx))):
                if len(split.validation) == 0:
                    continue
                losses = []
                for lo in range(0, len(split.validation) - B + 1, B):
                    batch = make(split.validation[lo:lo + B])
                    rep = total_loss(self.model, self.model.forward(batch),
                                     batch, self.cfg.training.lambda_aux)
                    losses.append(float(rep.ntp.data))
                if losses:
                    rows.append((name, float(np.mean(losses))))
        if rows:
            path = self.out_dir / "val_metrics.csv"
            fresh = not path.exists()
            with open(path, "a", encoding="utf-8") as f:
                if fresh:
                    f.write("step,dataset,ntp\n")
                for name, value in rows:
                    f.write(f"{self.global_step},{name},{_fmt(value)}\n")


def load_model_from_checkpoint(path: str):
    """Rebuild the model a checkpoint describes; returns (model, cfg, manifest)."""
    manifest, blocks = read_checkpoint(path)
    cfg = config_from_dict(manifest["config"])
    T.set_default_dtype(np.float64 if cfg.training.precision == "f64" else np.float32)
    model = DualStreamModel(cfg.model, RngPool(cfg.training.seed))
    for name, p in model.params.items():
        if name not in blocks:
            raise DataFormatError(f"checkpoint lacks parameter block {name}")
        if blocks[name].shape != p.data.shape:
            raise DataFormatError(
                f"checkpoint block {name}: shape {blocks[name].shape} != {p.data.shape}")
        p.data = blocks[name].astype(p.data.dtype, copy=True)
    return model, cfg, manifest
