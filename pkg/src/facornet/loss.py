"""Contrastive loss with fixed or relation-guided temperature."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import Tensor

from .errors import ConfigurationError, NumericError, ProtocolError
from .model import AttentionMap, PairEmbedding

MODES = ("fixed-tau", "rel-guided")
INDICATORS = ("global-sum", "global-max-per-row-sum", "presoftmax-sum")


@dataclass
class LossConfig:
    mode: str = "rel-guided"
    tau: float = 0.08
    scale_s: float = 500.0
    indicator: str = "global-sum"
    l2_normalize: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"loss mode must be one of {MODES}, got {self.mode!r}")
        if self.indicator not in INDICATORS:
            raise ConfigurationError(f"indicator must be one of {INDICATORS}, got {self.indicator!r}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if not self.scale_s > 0:
            raise ConfigurationError(f"scale_s must be > 0, got {self.scale_s}")

    def to_dict(self) -> dict:
        return asdict(self)


def _norms(x: Tensor) -> Tensor:
    n = torch.linalg.vector_norm(x, dim=-1)
    if bool((n == 0).any()):
        raise NumericError("cosine similarity of a zero-norm vector is undefined")
    return n


def cosine_similarity(x: Tensor, y: Tensor) -> Tensor:
    if x.shape[-1] != y.shape[-1]:
        raise ConfigurationError(f"length mismatch {x.shape[-1]} vs {y.shape[-1]}")
    return (x * y).sum(-1) / (_norms(x) * _norms(y))


def l2_normalize(x: Tensor) -> Tensor:
    return x / _norms(x).unsqueeze(-1)


def relation_temperature(att: AttentionMap, config: LossConfig) -> Tensor:
    """Temperature ``M(beta) / s``; one value per leading batch index."""
    beta = att.beta
    if config.indicator == "global-sum":
        m = beta.sum(dim=(-2, -1))
    elif config.indicator == "global-max-per-row-sum":
        m = beta.amax(dim=-1).sum(dim=-1)
    else:
        if att.score is None:
            raise ConfigurationError("presoftmax-sum indicator needs the pre-softmax scores")
        m = att.score.sum(dim=(-2, -1))
    psi = m / config.scale_s
    if not bool((psi > 0).all()):
        raise ConfigurationError(
            f"relation temperature must be positive; got min {float(psi.min()):.6g} "
            f"with indicator {config.indicator!r}"
        )
    return psi


def _anchor_terms(anchor: Tensor, partner: Tensor, psi: Tensor) -> Tensor:
    """``L_c(anchor_i, partner_i)`` for every i, stabilised by log-sum-exp.

    The denominator holds sim(anchor_i, anchor_j) and sim(anchor_i, partner_j)
    for j != i; the positive pair is not part of it.
    """
    n = anchor.shape[0]
    sa = cosine_similarity(anchor.unsqueeze(1), anchor.unsqueeze(0))
    sp = cosine_similarity(anchor.unsqueeze(1), partner.unsqueeze(0))
    scale = psi.reshape(n, 1)
    logits = torch.cat([sa, sp], dim=1) / scale
    eye = torch.eye(n, dtype=torch.bool, device=anchor.device)
    logits = logits.masked_fill(torch.cat([eye, eye], dim=1), float("-inf"))
    positive = torch.diagonal(sp) / psi
    return torch.logsumexp(logits, dim=1) - positive


def _check_batch(x: Tensor, y: Tensor):
    if x.dim() != 2 or x.shape != y.shape:
        raise ConfigurationError(f"expected two (N, D) tensors, got {tuple(x.shape)} and {tuple(y.shape)}")
    if x.shape[0] < 2:
        raise ProtocolError(f"contrastive loss needs at least 2 positive pairs, got {x.shape[0]}")


def _as_psi(psi, n: int, like: Tensor) -> Tensor:
    psi = torch.as_tensor(psi, dtype=like.dtype, device=like.device)
    psi = psi.expand(n) if psi.dim() == 0 else psi
    if not bool((psi > 0).all()):
        raise ConfigurationError("temperatures must be positive")
    return psi


def contrastive_pair_term(i: int, x: Tensor, y: Tensor, psi) -> Tensor:
    """Single term ``L_c(x_i, y_i)``; ``psi`` is a scalar or a per-pair vector."""
    _check_batch(x, y)
    return _anchor_terms(x, y, _as_psi(psi, x.shape[0], x))[i]


def pair_temperatures(batch: PairEmbedding, config: LossConfig) -> Tensor:
    n = batch.x_out_a.shape[0]
    if config.mode == "fixed-tau":
        return _as_psi(config.tau, n, batch.x_out_a)
    if batch.beta is None:
        raise ConfigurationError("rel-guided loss needs the attention maps of the batch")
    return relation_temperature(batch.beta, config).to(batch.x_out_a.dtype)


def batch_loss(batch: PairEmbedding, config: LossConfig, psi: Optional[Tensor] = None) -> Tensor:
    """Symmetrised loss ``(1/2N) sum_i [L_c(x_i, y_i) + L_c(y_i, x_i)]``.

    ``batch`` carries ``(N, D)`` embeddings and, for rel-guided mode, the
    ``(N, HW, HW)`` attention maps that produced them.
    """
    x, y = batch.x_out_a, batch.x_out_b
    _check_batch(x, y)
    if psi is None:
        psi = pair_temperatures(batch, config)
    psi = _as_psi(psi, x.shape[0], x)
    if config.l2_normalize:
        x, y = l2_normalize(x), l2_normalize(y)
    terms = _anchor_terms(x, y, psi) + _anchor_terms(y, x, psi)
    return terms.sum() / (2 * x.shape[0])
