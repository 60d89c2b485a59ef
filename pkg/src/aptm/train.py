"""Run configuration, learning-rate schedule, AdamW, and the training / evaluation drivers."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import numcore as nc
from .attributes import Vocab, annotate, render_prompts
from .datapipe import load_dataset, load_manifest
from .encoders import APTM, ConfigError, ModelConfig
from .objectives import Batch, StepRandomness, compute_losses
from .retrieval import (
    attr_metrics,
    attribute_probs,
    build_gallery,
    predict_attributes,
    relevant_sets,
    retrieval_report,
    search_all,
)

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune", "eval", "annotate", "filter", "prompts", "attr-rec")
PRETRAIN_WARMUP = 2600
FINETUNE_WARMUP_EPOCHS = 3


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mode: str = "pretrain"
    batch_size: int = 8
    epochs: int = 30
    max_steps: int | None = None
    peak_lr: float = 1e-4
    floor_lr: float = 1e-5
    warmup_steps: int | None = None  # None: 2600 for pretrain, 3 epochs for finetune
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    beta: float = 0.8
    mask_prob: float = 0.25
    smoothing: float = 0.1
    flip: bool = True
    vocab_max: int = 8192
    seed: int = 0
    shortlist: int = 128
    workers: int = 1
    filesize_threshold: int = 24_000
    grayscale_threshold: float = 5.0
    pose_url: str | None = None
    caption_url: str | None = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 0 < self.floor_lr <= self.peak_lr:
            raise ConfigError("need 0 < floor_lr <= peak_lr")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def warmup_for(self, steps_per_epoch: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return PRETRAIN_WARMUP if self.mode == "pretrain" else FINETUNE_WARMUP_EPOCHS * steps_per_epoch


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.replace("-", "_").split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"no config section {k!r} in {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults < config file (YAML or JSON) < APTM_SEED < ``overrides`` (dotted keys)."""
    d = RunConfig().to_dict()
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        _merge(d, loaded)
    if "APTM_SEED" in os.environ:
        d["seed"] = int(os.environ["APTM_SEED"])
    for k, v in (overrides or {}).items():
        set_path(d, k, v)
    return RunConfig.from_dict(d)


def _merge(base: dict, new: dict, prefix: str = "") -> None:
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key {prefix}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{prefix}{k}.")
        else:
            base[k] = v


# -- schedule and optimizer -------------------------------------------------

def lr_at(step: int, total_steps: int, cfg: RunConfig, warmup: int | None = None) -> float:
    """Linear ramp floor->peak over the warmup, then linear decay peak->floor at ``total_steps``."""
    warmup = cfg.warmup_for(1) if warmup is None else warmup
    if total_steps < warmup:
        raise ConfigError(f"total_steps {total_steps} < warmup_steps {warmup}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lo, hi = cfg.floor_lr, cfg.peak_lr
    if step < warmup:
        t = step / warmup
        return (1.0 - t) * lo + t * hi
    if total_steps == warmup:
        return hi
    t = (step - warmup) / (total_steps - warmup)
    return (1.0 - t) * hi + t * lo


class AdamW:
    """Adam with decoupled weight decay; names in ``no_decay`` skip the decay."""

    def __init__(self, named_params, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8,
                 clip_norm: float | None = 1.0, no_decay=("temp",)):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                             for p in self.params.values() if p.grad is not None))

    def step(self, lr: float) -> float:
        """Apply one update; raises NumericError (leaving parameters untouched) on a non-finite gradient."""
        for n, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise nc.NumericError(f"non-finite gradient in {n}; step aborted")
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            if n not in self.no_decay and self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.data.dtype)
        return norm

    def state_dict(self) -> dict:
        out = {f"optim.m.{n}": a for n, a in self.m.items()}
        out.update({f"optim.v.{n}": a for n, a in self.v.items()})
        out["optim.t"] = np.array([self.t], dtype=np.float64)
        return out

    def load_state_dict(self, state: dict) -> None:
        for n in self.params:
            self.m[n] = np.array(state[f"optim.m.{n}"], dtype=self.m[n].dtype)
            self.v[n] = np.array(state[f"optim.v.{n}"], dtype=self.v[n].dtype)
        self.t = int(state["optim.t"][0])


# -- training ---------------------------------------------------------------

def build_vocab(records, max_size: int) -> Vocab:
    return Vocab.build([r.caption for r in records] + [p.text for p in render_prompts()], max_size)


def prompt_matrix(vocab: Vocab) -> np.ndarray:
    return np.stack([np.asarray(p.token_ids) for p in render_prompts(vocab=vocab)])


def fill_missing_labels(attrs: np.ndarray, records) -> np.ndarray:
    """Annotate captions of records that carry no attribute columns."""
    attrs = attrs.copy()
    for i, rec in enumerate(records):
        if rec.attributes is None:
            attrs[i] = annotate(rec.caption)
    return attrs


def _write_yaml(path: Path, cfg: RunConfig) -> None:
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def train(cfg: RunConfig, manifest: str | Path, run_dir: str | Path, resume: str | Path | None = None,
          init: str | Path | None = None) -> dict:
    """Pretrain or finetune; writes config.yaml, vocab.txt, loss.jsonl and checkpoints under ``run_dir``.

    ``resume`` continues an interrupted run (model, optimizer and step);
    ``init`` starts a fresh schedule from pretrained weights.
    """
    if cfg.mode not in ("pretrain", "finetune"):
        raise ConfigError(f"train() needs mode pretrain or finetune, not {cfg.mode!r}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    records = load_manifest(manifest)
    root = Path(manifest).parent

    vocab_path = run_dir / "vocab.txt"
    src_vocab = Path(resume or init).parent / "vocab.txt" if (resume or init) else None
    if (resume or init) and (vocab_path.exists() or (src_vocab and src_vocab.exists())):
        vocab = Vocab.load(vocab_path if vocab_path.exists() else src_vocab)
    else:
        vocab = build_vocab(records, cfg.vocab_max)
    vocab.save(vocab_path)
    cfg.model.text.vocab_size = len(vocab)
    _write_yaml(run_dir / "config.yaml", cfg)

    size = (cfg.model.image.image_height, cfg.model.image.image_width)
    pixels, ids, attrs, records = load_dataset(records, root, vocab, size)
    attrs = fill_missing_labels(attrs, records)
    n = len(records)
    prompts = prompt_matrix(vocab)
    bs = min(cfg.batch_size, n)
    spe = max(1, n // bs)
    total = cfg.epochs * spe
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    warmup = cfg.warmup_for(spe)
    lr_at(0, total, cfg, warmup)  # validates the schedule before any work

    model = APTM(cfg.model, seed=cfg.seed)
    opt = AdamW(model.named_parameters(), cfg.weight_decay, clip_norm=cfg.clip_norm)
    start = 0
    if resume:
        state = nc.checkpoint.load(resume)
        model.load_state_dict(state)
        opt.load_state_dict(state)
        start = int(state["state.step"][0])
    elif init:
        model.load_state_dict(nc.checkpoint.load(init))

    log_path = run_dir / "loss.jsonl"
    kept = []
    if resume and log_path.exists():
        kept = [l for l in log_path.read_text().splitlines() if json.loads(l)["step"] < start]
    log_path.write_text("".join(l + "\n" for l in kept))

    shuffle = nc.RngStream.named(cfg.seed, "shuffle")
    flip = nc.RngStream.named(cfg.seed, "flip")
    history = []
    with log_path.open("a") as fh:
        for step in range(start, total):
            epoch, pos = divmod(step, spe)
            idx = shuffle.generator(epoch).permutation(n)[pos * bs:(pos + 1) * bs]
            px = pixels[idx]
            if cfg.flip:
                coins = flip.generator(step).random(len(idx)) < 0.5
                px = np.where(coins[:, None, None, None], px[..., ::-1], px)
            batch = Batch(px, ids[idx], attrs[idx])
            model.zero_grad()
            loss, _, report = compute_losses(model, batch, prompts, StepRandomness.for_step(cfg.seed, step),
                                             beta=cfg.beta, mode=cfg.mode, mask_prob=cfg.mask_prob,
                                             smoothing=cfg.smoothing)
            loss.backward()
            lr = lr_at(step, total, cfg, warmup)
            extra = {}
            try:
                extra["grad_norm"] = opt.step(lr)
            except nc.NumericError as exc:
                log.error("step %d: %s", step, exc)
                extra["aborted"] = str(exc)
            report.extra.update(extra)
            fh.write(report.to_json(step=step, epoch=epoch, lr=lr) + "\n")
            history.append(report)
            if pos == spe - 1 or step == total - 1:
                state = {**model.state_dict(), **opt.state_dict(),
                         "state.step": np.array([step + 1], dtype=np.float64)}
                if pos == spe - 1:
                    nc.checkpoint.save(run_dir / f"epoch{epoch + 1:03d}.aptm", state)
                if step == total - 1:
                    nc.checkpoint.save(run_dir / "final.aptm", state)
    return {"model": model, "vocab": vocab, "history": history, "steps": total, "run_dir": run_dir}


# -- evaluation -------------------------------------------------------------

def load_run(checkpoint: str | Path, cfg: RunConfig | None = None):
    """Model and vocab from a checkpoint and the config/vocab snapshot beside it."""
    checkpoint = Path(checkpoint)
    run_dir = checkpoint.parent
    if cfg is None:
        cfg = load_config(run_dir / "config.yaml")
    vocab = Vocab.load(run_dir / "vocab.txt")
    cfg.model.text.vocab_size = len(vocab)
    model = APTM(cfg.model, seed=cfg.seed)
    model.load_state_dict(nc.checkpoint.load(checkpoint))
    return model, vocab, cfg


def _pid(rec):
    return rec.person_id if rec.person_id is not None else rec.image


def evaluate(model: APTM, vocab: Vocab, manifest: str | Path, cfg: RunConfig, k: int | None = None):
    """Text-to-image retrieval with every caption as a query against every image."""
    records = load_manifest(manifest)
    size = (model.cfg.image.image_height, model.cfg.image.image_width)
    pixels, ids, _, records = load_dataset(records, Path(manifest).parent, vocab, size)
    image_ids = [r.image for r in records]
    pids = [_pid(r) for r in records]
    gallery = build_gallery(model, pixels, image_ids, pids)
    qids = [f"q{i}" for i in range(len(records))]
    results = search_all(model, ids, qids, gallery, k or cfg.shortlist, cfg.workers)
    rel = relevant_sets(pids, image_ids, pids)
    return retrieval_report(results, rel), results


def recognize(model: APTM, vocab: Vocab, manifest: str | Path):
    """Attribute predictions for every image plus metrics against the manifest labels."""
    records = load_manifest(manifest)
    size = (model.cfg.image.image_height, model.cfg.image.image_width)
    pixels, _, attrs, records = load_dataset(records, Path(manifest).parent, vocab, size)
    attrs = fill_missing_labels(attrs, records)
    with nc.no_grad():
        V = np.concatenate([model.encode_image(pixels[s:s + 32]).data for s in range(0, len(pixels), 32)])
    pred = predict_attributes(attribute_probs(model, V, prompt_matrix(vocab)))
    return pred, attrs, attr_metrics(pred, attrs), records
