"""SGD training loop, checkpoint/resume and finite-difference gradient checks."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .backbone import init_toy_backbone
from .checkpoint import load_checkpoint, load_model_state, save_checkpoint
from .data import sample_training_batch
from .errors import ConfigurationError, NumericError
from .loss import LossConfig, batch_loss, pair_temperatures
from .model import PairEmbedding, init_params

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 50
    epochs: int = 50
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    freeze_backbone: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.lr >= 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list  # (epoch, batch, loss, psi_mean)
    checkpoint: Optional[Path] = None

    @property
    def epoch_means(self) -> list:
        by_epoch = {}
        for epoch, _, loss, _ in self.history:
            by_epoch.setdefault(epoch, []).append(loss)
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def embed_pairs(model, source, pairs, dtype=torch.float32) -> PairEmbedding:
    fa = source.fetch([p.img_a for p in pairs], dtype)
    fb = source.fetch([p.img_b for p in pairs], dtype)
    return model(fa.X, fb.X, fa.r, fb.r)


def write_history(path, history) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "batch", "loss", "psi_mean"])
        for epoch, b, loss, psi in history:
            w.writerow([epoch, b, repr(loss), repr(psi)])
    return path


def _trainable(model, source, config: TrainConfig) -> list:
    params = [("model", n, p) for n, p in model.named_parameters()]
    if not config.freeze_backbone and getattr(source, "trainable", False):
        params += [("backbone", n, p) for n, p in source.backbone.named_parameters()]
    return params


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    """Momentum SGD with a constant learning rate, no weight decay or dampening."""
    return torch.optim.SGD(list(params), lr=config.lr, momentum=config.momentum)


def train(
    config: TrainConfig,
    pairs,
    source,
    model: torch.nn.Module,
    out_dir=None,
    resume_from=None,
    meta: dict | None = None,
) -> TrainResult:
    """Optimise ``model`` (and a trainable toy backbone) with momentum SGD.

    Batch order depends only on ``(seed, epoch)``, so a run resumed from an
    epoch checkpoint follows the uninterrupted trajectory bit for bit.
    A checkpoint ``epoch-XXX.ckpt`` is written after every epoch when
    ``out_dir`` is given.
    """
    dtype = DTYPES[config.dtype]
    model.to(dtype)
    if getattr(source, "trainable", False):
        source.backbone.to(dtype)
    named = _trainable(model, source, config)
    opt = make_optimizer((p for _, _, p in named), config)
    history, start = [], 0

    if resume_from is not None:
        tensors, ck_meta = load_checkpoint(resume_from)
        load_model_state(model, tensors)
        if "backbone" in {g for g, _, _ in named}:
            state = {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}
            source.backbone.load_state_dict(state)
        for idx, (group, name, p) in enumerate(named):
            key = f"momentum.{group}.{name}"
            if key in tensors:
                opt.state[p]["momentum_buffer"] = tensors[key].to(dtype).clone()
        start = int(ck_meta["epoch"]) + 1
        history = [tuple(row) for row in ck_meta.get("history", [])]

    n_pos = sum(1 for p in pairs if p.label)
    n_batches = max(1, n_pos // config.batch_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = None
    for epoch in range(start, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        for b in range(n_batches):
            batch = sample_training_batch(pairs, config.batch_size, rng)
            emb = embed_pairs(model, source, batch, dtype)
            psi = pair_temperatures(emb, config.loss)
            loss = batch_loss(emb, config.loss, psi)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {b}: loss={loss.item()}, "
                    f"psi={psi.detach().tolist()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append((epoch, b, loss.item(), psi.detach().mean().item()))
        log.info("epoch %d mean loss %.6f", epoch, np.mean([h[2] for h in history if h[0] == epoch]))
        if out_dir is not None:
            ckpt = save_training_checkpoint(out_dir / f"epoch-{epoch:03d}.ckpt", model, source, opt, named,
                                            epoch, history, meta)
    if out_dir is not None:
        write_history(out_dir / "loss_history.csv", history)
    return TrainResult(history, ckpt)


def save_training_checkpoint(path, model, source, opt, named, epoch, history, meta=None) -> Path:
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    if any(g == "backbone" for g, _, _ in named):
        tensors.update({f"backbone.{k}": v for k, v in source.backbone.state_dict().items()})
    for group, name, p in named:
        buf = opt.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            tensors[f"momentum.{group}.{name}"] = buf
    info = dict(meta or {})
    info.update(epoch=epoch, history=[list(h) for h in history])
    return save_checkpoint(path, tensors, info)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict  # tensor name -> normwise relative error
    step: float

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def flagged(self, tol: float) -> list:
        return [n for n, e in self.errors.items() if e >= tol]

    def rows(self) -> list:
        return sorted(self.errors.items(), key=lambda kv: -kv[1])


def grad_check(fn: Callable[[], torch.Tensor], tensors: dict, step: float = 1e-5, floor: float = 1e-10) -> GradCheckReport:
    """Compare autograd gradients of the scalar ``fn()`` with central differences.

    ``tensors`` maps names to leaf tensors that ``fn`` reads (parameters or
    inputs).  The error per tensor is ``max|analytic - numeric|`` divided by
    ``max(max|analytic|, max|numeric|, floor)``.
    """
    names = list(tensors)
    leaves = [tensors[n] for n in names]
    for t in leaves:
        if t.dtype != torch.float64:
            raise ConfigurationError(f"gradient checks need float64 tensors; {t.dtype} given")
    out = fn()
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    errors = {}
    with torch.no_grad():
        for name, t, a in zip(names, leaves, analytic):
            a = torch.zeros_like(t) if a is None else a
            numeric = torch.empty_like(t)
            flat, nflat = t.view(-1), numeric.view(-1)
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + step
                fp = float(fn())
                flat[k] = orig - step
                fm = float(fn())
                flat[k] = orig
                nflat[k] = (fp - fm) / (2 * step)
            scale = max(float(a.abs().max()), float(numeric.abs().max()), floor)
            errors[name] = float((a - numeric).abs().max()) / scale
    return GradCheckReport(errors, step)


def full_model_gradcheck(config, seed: int = 0, loss: LossConfig | None = None, n_pairs: int = 3,
                         image_size: int | None = None, step: float = 1e-5) -> GradCheckReport:
    """Check toy backbone + FaCoR + loss end to end, in float64.

    The FaCoR head uses standard init and a non-zero gamma so that every
    branch (attention, both CI gates) carries gradient.
    """
    loss = loss or LossConfig(mode="rel-guided", scale_s=200.0)
    image_size = image_size or 2 * config.H
    head_cfg = replace(config, init_mode="standard", gamma_init=0.5)
    backbone = init_toy_backbone(config, seed, image_size).double()
    model = init_params(head_cfg, seed).double()
    gen = torch.Generator().manual_seed(int(seed) + 1)
    imgs = torch.randn(2, n_pairs, image_size, image_size, 3, generator=gen, dtype=torch.float64)
    imgs.requires_grad_(True)

    def fn():
        a, b = backbone(imgs[0]), backbone(imgs[1])
        return batch_loss(model(a.X, b.X, a.r, b.r), loss)

    tensors = {f"backbone.{n}": p for n, p in backbone.named_parameters()}
    tensors.update({f"facor.{n}": p for n, p in model.named_parameters()})
    tensors["input.images"] = imgs
    return grad_check(fn, tensors, step)
