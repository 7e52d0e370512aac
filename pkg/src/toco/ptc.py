"""Patch token contrast: reliable pairwise relations and the contrast loss.

Relations come from a token label grid (see cam.py for the encoding); the
loss pulls together final tokens of same-label pairs and pushes apart
different-label pairs via one of three cosine-similarity variants.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .cam import IGNORE
from .config import PTC_MODES
from .vit import TokenGrid

COSINE_EPS = 1e-8


@dataclass
class PairRelations:
    """Symmetric positive/negative pair masks over n tokens.

    ``n_pos``/``n_neg`` count unordered pairs, so each equals half the
    popcount of its symmetric mask. Pairs touching an uncertain token are
    in neither mask; the diagonal is excluded.
    """

    positive: Tensor  # bool [n, n]
    negative: Tensor  # bool [n, n]
    n_pos: int
    n_neg: int


def pairwise_relations(labels: Tensor) -> PairRelations:
    """Derive reliable pair masks from a token label grid ([h, w] or [n]).

    Two reliable tokens (anything but IGNORE) are a positive pair when
    their labels match and a negative pair otherwise.
    """
    flat = labels.reshape(-1)
    reliable = flat != IGNORE
    both = reliable[:, None] & reliable[None, :]
    same = flat[:, None] == flat[None, :]
    off_diag = ~torch.eye(flat.numel(), dtype=torch.bool, device=flat.device)
    positive = both & same & off_diag
    negative = both & ~same
    return PairRelations(
        positive=positive,
        negative=negative,
        n_pos=int(positive.sum().item()) // 2,
        n_neg=int(negative.sum().item()) // 2,
    )


def _mode_similarity(sim: Tensor, mode: str) -> Tensor:
    if mode == "raw":
        return sim
    if mode == "relu":
        return sim.clamp_min(0.0)
    if mode == "abs":
        return sim.abs()
    raise ValueError(f"mode must be one of {PTC_MODES}, got {mode!r}")


def ptc_loss(
    tokens: TokenGrid | Tensor,
    rel: PairRelations,
    mode: str = "abs",
    eps: float = COSINE_EPS,
) -> Tensor:
    """Mean (1 - sim) over positive pairs plus mean sim over negative pairs.

    ``sim`` is the cosine similarity, rectified or absolute depending on
    ``mode``. Empty relation sets contribute zero (their normalization is
    undefined); zero-norm tokens are handled by an eps-guarded division.
    """
    t = tokens.tokens if isinstance(tokens, TokenGrid) else tokens
    if t.dim() != 2:
        raise ValueError(f"ptc_loss expects a single token matrix, got shape {tuple(t.shape)}")
    zero = t.sum() * 0.0
    if rel.n_pos == 0 and rel.n_neg == 0:
        return zero
    unit = t / t.norm(dim=-1, keepdim=True).clamp_min(eps)
    sim = _mode_similarity(unit @ unit.t(), mode)
    # symmetric masks: mean over ordered entries equals mean over unordered pairs
    pos_term = ((1.0 - sim)[rel.positive].sum() / (2 * rel.n_pos)) if rel.n_pos else zero
    neg_term = (sim[rel.negative].sum() / (2 * rel.n_neg)) if rel.n_neg else zero
    return pos_term + neg_term
