"""Face Componential Relation (FaCoR) module.

Feature maps are channel-last tensors of shape ``(..., H, W, C)``.  Spatial
positions are flattened row-major over ``(h, w)``, so position ``n`` is
``(n // W, n % W)``.  Every function accepts arbitrary leading batch dims.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, NumericError

INIT_MODES = ("standard", "bounded-normal")


@dataclass
class FaCoRConfig:
    H: int = 7
    W: int = 7
    C: int = 512
    D: int = 512
    ci_reduction: int = 4
    gamma_init: float = 0.0
    init_mode: str = "bounded-normal"
    bounded_normal_range: tuple = (-0.05, 0.05)
    bounded_normal_std: float = 0.05
    transpose_beta_for_b: bool = False
    share_projection: bool = True
    use_ci: bool = True

    def __post_init__(self):
        self.bounded_normal_range = tuple(float(v) for v in self.bounded_normal_range)
        for name in ("H", "W", "C", "D", "ci_reduction"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.C % self.ci_reduction or (self.C + self.D) % self.ci_reduction:
            raise ConfigurationError(
                f"ci_reduction={self.ci_reduction} must divide C={self.C} and C+D={self.C + self.D}"
            )
        if self.init_mode not in INIT_MODES:
            raise ConfigurationError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        lo, hi = self.bounded_normal_range
        if not lo < hi:
            raise ConfigurationError(f"bounded_normal_range lower must be < upper, got {(lo, hi)}")
        if not math.isfinite(self.gamma_init):
            raise ConfigurationError("gamma_init must be finite")

    @property
    def N(self) -> int:
        return self.H * self.W

    @property
    def embedding_dim(self) -> int:
        return self.C + self.D

    @classmethod
    def toy(cls, **overrides) -> "FaCoRConfig":
        """Desk-scale dims used by the tests and the synthetic pipeline."""
        params = dict(H=4, W=4, C=8, D=8)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounded_normal_range"] = list(self.bounded_normal_range)
        return d


class AttentionMap(NamedTuple):
    beta: Tensor
    score: Optional[Tensor] = None


class PairEmbedding(NamedTuple):
    x_out_a: Tensor
    x_out_b: Tensor
    beta: Optional[AttentionMap]


def _flatten(X: Tensor) -> Tensor:
    return X.reshape(*X.shape[:-3], X.shape[-3] * X.shape[-2], X.shape[-1])


def _check_map(X: Tensor, H: int, W: int, C: int, name: str = "X"):
    if X.dim() < 3 or tuple(X.shape[-3:]) != (H, W, C):
        raise ConfigurationError(f"{name} has shape {tuple(X.shape)}, expected (..., {H}, {W}, {C})")


def project_features(X: Tensor, weight: Tensor) -> Tensor:
    """1x1 convolution: every position is mapped by ``weight`` (C_out x C_in)."""
    if weight.dim() != 2 or weight.shape[1] != X.shape[-1]:
        raise ConfigurationError(
            f"projection weight {tuple(weight.shape)} does not match {X.shape[-1]} input channels"
        )
    return X @ weight.transpose(0, 1)


def cross_attention(Fa: Tensor, Fb: Tensor) -> AttentionMap:
    """Cross-attention between two projected maps.

    ``score[..., i, j] = <Fa_i, Fb_j>`` and ``beta[..., j, i]`` is the softmax
    of ``score[..., :, j]`` over ``i``.  Each row of ``beta`` sums to one.
    """
    if Fa.shape != Fb.shape:
        raise ConfigurationError(f"shape mismatch {tuple(Fa.shape)} vs {tuple(Fb.shape)}")
    if not (torch.isfinite(Fa).all() and torch.isfinite(Fb).all()):
        raise NumericError("cross_attention received non-finite features")
    fa, fb = _flatten(Fa), _flatten(Fb)
    score = fa @ fb.transpose(-1, -2)
    logits = score.transpose(-1, -2)
    logits = logits - logits.amax(dim=-1, keepdim=True)
    e = torch.exp(logits)
    beta = e / e.sum(dim=-1, keepdim=True)
    return AttentionMap(beta, score)


def attend(X: Tensor, beta: Tensor, gamma) -> Tensor:
    """Residual attention ``O_j = X_j + gamma * sum_i beta[j, i] X_i``."""
    N = X.shape[-3] * X.shape[-2]
    if beta.shape[-2:] != (N, N):
        raise ConfigurationError(f"beta {tuple(beta.shape)} does not match {N} positions")
    flat = _flatten(X)
    out = flat + gamma * (beta @ flat)
    return out.reshape(X.shape)


def channel_interaction(x_hat: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Channel gate ``sigmoid(w2 relu(w1 x)) * x`` with bias-free 1x1 convs."""
    L = x_hat.shape[-1]
    if w1.shape[1] != L or w2.shape != (L, w1.shape[0]):
        raise ConfigurationError(
            f"CI weights {tuple(w1.shape)}, {tuple(w2.shape)} do not fit input length {L}"
        )
    w = torch.sigmoid(torch.relu(x_hat @ w1.transpose(0, 1)) @ w2.transpose(0, 1))
    return w * x_hat


def _init_weight(t: Tensor, config: FaCoRConfig, gen: torch.Generator):
    if config.init_mode == "bounded-normal":
        lo, hi = config.bounded_normal_range
        nn.init.trunc_normal_(t, mean=0.0, std=config.bounded_normal_std, a=lo, b=hi, generator=gen)
    else:
        nn.init.kaiming_uniform_(t, a=math.sqrt(5), generator=gen)


class ChannelInteraction(nn.Module):
    def __init__(self, length: int, reduction: int):
        super().__init__()
        if length % reduction:
            raise ConfigurationError(f"length {length} not divisible by reduction {reduction}")
        hidden = length // reduction
        self.conv1 = nn.Parameter(torch.zeros(hidden, length))
        self.conv2 = nn.Parameter(torch.zeros(length, hidden))

    def forward(self, x: Tensor) -> Tensor:
        return channel_interaction(x, self.conv1, self.conv2)


class FaCoR(nn.Module):
    """Parameters and forward pass of the FaCoR head.

    Output embeddings have length ``C + D`` (``2C`` for the usual ``D == C``).
    """

    def __init__(self, config: FaCoRConfig):
        super().__init__()
        self.config = config
        C = config.C
        self.proj_a = nn.Parameter(torch.eye(C))
        self.proj_b = None if config.share_projection else nn.Parameter(torch.eye(C))
        self.gamma = nn.Parameter(torch.tensor(float(config.gamma_init)))
        self.ci_inner = ChannelInteraction(C, config.ci_reduction)
        self.ci_outer = ChannelInteraction(C + config.D, config.ci_reduction)

    def _ci(self, block: ChannelInteraction, x: Tensor) -> Tensor:
        return block(x) if self.config.use_ci else x

    def forward(self, Xa: Tensor, Xb: Tensor, ra: Tensor, rb: Tensor) -> PairEmbedding:
        cfg = self.config
        for name, X in (("Xa", Xa), ("Xb", Xb)):
            _check_map(X, cfg.H, cfg.W, cfg.C, name)
        for name, r in (("ra", ra), ("rb", rb)):
            if r.shape[-1] != cfg.D:
                raise ConfigurationError(f"{name} has length {r.shape[-1]}, expected {cfg.D}")

        Fa = project_features(Xa, self.proj_a)
        Fb = project_features(Xb, self.proj_a if self.proj_b is None else self.proj_b)
        att = cross_attention(Fa, Fb)
        beta_b = att.beta.transpose(-1, -2) if cfg.transpose_beta_for_b else att.beta
        Oa = attend(Xa, att.beta, self.gamma)
        Ob = attend(Xb, beta_b, self.gamma)

        def fuse(O, r):
            pooled = _flatten(O).mean(dim=-2)
            return self._ci(self.ci_outer, torch.cat([self._ci(self.ci_inner, pooled), r], dim=-1))

        return PairEmbedding(fuse(Oa, ra), fuse(Ob, rb), att)


def facor_forward(Xa: Tensor, Xb: Tensor, ra: Tensor, rb: Tensor, params: FaCoR) -> PairEmbedding:
    return params(Xa, Xb, ra, rb)


def init_params(config: FaCoRConfig, seed: int) -> FaCoR:
    """Deterministic initialisation; gamma always starts at ``gamma_init``."""
    model = FaCoR(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name != "gamma":
                _init_weight(p, config, gen)
    return model


class ContrastiveHead(nn.Module):
    """Pair-independent two-layer MLP on the final backbone vector.

    This is the plain contrastive baseline: no cross-attention, so it returns
    no attention map and only supports a fixed temperature.
    """

    def __init__(self, config: FaCoRConfig, hidden: Optional[int] = None):
        super().__init__()
        self.config = config
        hidden = hidden or config.D
        self.fc1 = nn.Linear(config.D, hidden)
        self.fc2 = nn.Linear(hidden, config.D)

    def embed(self, r: Tensor) -> Tensor:
        return self.fc2(torch.relu(self.fc1(r)))

    def forward(self, Xa: Tensor, Xb: Tensor, ra: Tensor, rb: Tensor) -> PairEmbedding:
        return PairEmbedding(self.embed(ra), self.embed(rb), None)


ARCHS = ("facor", "baseline")


def build_model(arch: str, config: FaCoRConfig, seed: int) -> nn.Module:
    if arch == "facor":
        return init_params(config, seed)
    if arch == "baseline":
        model = ContrastiveHead(config)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    _init_weight(p, config, gen)
        return model
    raise ConfigurationError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
