"""Contrastive objectives: global image-text alignment, physical
consistency against mined signature anchors, and their weighted sum.

Anchors are always detached to plain arrays before use, so no gradient can
reach them even if a caller hands in watched tensors. With the physical
weight at zero, total_loss returns the alignment node itself, which makes
the ablation bit-for-bit identical to training without the physical term.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DomainError, ValidationError

BRANCHES = ("color", "struc", "tex")


@dataclass(frozen=True)
class LossConfig:
    """Weights of the physical term; the branch weights are scaled by lam."""

    lam: float = 1.0
    w_color: float = 1.0 / 3.0
    w_struc: float = 1.0 / 3.0
    w_tex: float = 1.0 / 3.0
    symmetric_itc: bool = False
    freeze_phy_temp: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError(f"lam must be >= 0, got {self.lam}")
        for name in ("w_color", "w_struc", "w_tex"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")

    def branch_weight(self, branch: str) -> float:
        return {"color": self.w_color, "struc": self.w_struc, "tex": self.w_tex}[branch]

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "w_color": self.w_color,
            "w_struc": self.w_struc,
            "w_tex": self.w_tex,
            "symmetric_itc": self.symmetric_itc,
            "freeze_phy_temp": self.freeze_phy_temp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class BatchFeatures:
    """Aligned per-sample rows: embeddings, projected descriptors, anchors.

    Row i of every member refers to the same sample. Anchors are plain
    arrays (mined histograms); everything else may be a tape node.
    """

    v: object
    t: object
    descriptors: dict
    anchors: dict


@dataclass
class LossBundle:
    """Tape nodes for every component of one batch loss."""

    total: nx.Tensor
    itc: nx.Tensor
    phy: nx.Tensor
    branches: dict[str, nx.Tensor]


def _check_temp(temp, name: str):
    value = temp.data if isinstance(temp, nx.Tensor) else np.asarray(temp, dtype=np.float64)
    if not (value > 0).all():
        raise DomainError(f"{name} must be > 0, got {value}")
    return temp


def _detach(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, nx.Tensor) else x, dtype=np.float64)


def info_nce(sims, temp) -> nx.Tensor:
    """Mean softmax cross-entropy of each row against its diagonal entry.

    The row max is detached before the log-sum-exp; the gradient of
    logsumexp is softmax regardless of the shift, so this only buys
    stability.
    """
    sims = nx.as_tensor(sims)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ContractError(f"similarity matrix must be square, got {sims.shape}")
    n = sims.shape[0]
    if n < 2:
        raise ContractError(f"contrastive loss needs N >= 2, got {n}")
    _check_temp(temp, "temperature")
    logits = nx.div(sims, temp)
    row_max = logits.data.max(axis=1, keepdims=True)
    shifted = nx.sub(logits, row_max)
    lse = nx.add(nx.log(nx.sum_(nx.exp(shifted), axis=1, keepdims=True)), row_max)
    pos = nx.sum_(nx.mul(logits, np.eye(n)), axis=1, keepdims=True)
    return nx.mean(nx.sub(lse, pos))


def itc_loss(v, t, temp, symmetric: bool = False) -> nx.Tensor:
    """Image-anchored InfoNCE over cosine similarities; optionally averaged
    with the text-anchored direction."""
    v, t = nx.as_tensor(v), nx.as_tensor(t)
    if v.ndim != 2 or t.ndim != 2 or v.shape != t.shape:
        raise ContractError(f"need matching (N, D) rows, got {v.shape} and {t.shape}")
    vn = nx.l2_normalize_rows(v)
    tn = nx.l2_normalize_rows(t)
    sims = nx.matmul(vn, nx.transpose(tn))
    loss = info_nce(sims, temp)
    if symmetric:
        loss = nx.mul(nx.add(loss, info_nce(nx.transpose(sims), temp)), 0.5)
    return loss


def _check_anchor_rows(branch: str, rows: np.ndarray, n: int):
    if rows.ndim != 2 or rows.shape[0] != n:
        raise ContractError(
            f"{branch} anchors must be (N, dim), got {rows.shape} for batch {n}"
        )
    if (rows < 0).any():
        raise ValidationError(f"{branch} anchors must be non-negative histograms")
    sums = rows.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValidationError(
            f"{branch} anchor rows must sum to 1, got sums in "
            f"[{sums.min():.6f}, {sums.max():.6f}]"
        )


def phy_loss(descriptors: dict, anchors: dict, temp, cfg: LossConfig) -> tuple[nx.Tensor, dict]:
    """Weighted sum of per-branch InfoNCE between projected descriptors and
    their mined signature anchors; returns (total, per-branch nodes)."""
    _check_temp(temp, "physical temperature")
    branches: dict[str, nx.Tensor] = {}
    total = None
    for b in BRANCHES:
        that = nx.as_tensor(descriptors[b])
        rows = _detach(anchors[b])
        _check_anchor_rows(b, rows, that.shape[0])
        tn = nx.l2_normalize_rows(that)
        an = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        sims = nx.matmul(tn, np.ascontiguousarray(an.T))
        branches[b] = info_nce(sims, temp)
        term = nx.mul(branches[b], cfg.branch_weight(b))
        total = term if total is None else nx.add(total, term)
    return total, branches


def total_loss(itc, phy, lam: float) -> nx.Tensor:
    """Alignment plus lam times the physical term; lam = 0 returns the
    alignment node itself (bit-for-bit ablation identity)."""
    if lam < 0:
        raise ValidationError(f"lam must be >= 0, got {lam}")
    if lam == 0.0:
        return itc
    return nx.add(itc, nx.mul(phy, lam))


def compute_losses(feat: BatchFeatures, log_temp, log_temp_phy, cfg: LossConfig) -> LossBundle:
    """Assemble every loss node for one batch.

    log_temp/log_temp_phy are tape nodes holding log-temperatures; with
    freeze_phy_temp the physical temperature is detached to a constant so
    no gradient reaches it.
    """
    temp = nx.exp(log_temp)
    itc = itc_loss(feat.v, feat.t, temp, symmetric=cfg.symmetric_itc)
    if cfg.freeze_phy_temp:
        temp_phy = float(np.exp(_detach(log_temp_phy)[0]))
    else:
        temp_phy = nx.exp(log_temp_phy)
    phy, branches = phy_loss(feat.descriptors, feat.anchors, temp_phy, cfg)
    return LossBundle(
        total=total_loss(itc, phy, cfg.lam),
        itc=itc,
        phy=phy,
        branches=branches,
    )
