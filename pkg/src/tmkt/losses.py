"""Training objectives: per-step classification, CKA domain alignment with a
learnable per-step gate, per-frame modality supervision, and mix-ratio
regression, combined into the weighted total."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateFeaturesError, DomainError, NumericError, PairingError

PROB_EPS = 1e-7
_HSIC_FLOOR = 1e-12


def per_step_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy per time step; logits (B, T, C), labels (B,) -> (T,)."""
    if logits.shape[1] < 1:
        raise DomainError("need at least one time step")
    T = logits.shape[1]
    return torch.stack([F.cross_entropy(logits[:, t], labels) for t in range(T)])


def tet_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Classification loss averaged over time steps."""
    return per_step_ce(logits, labels).mean()


def hsic(k: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
    n = k.shape[0]
    j = torch.eye(n, dtype=k.dtype, device=k.device) - 1.0 / n
    return torch.trace(k @ j @ l @ j) / (n - 1) ** 2


def linear_cka(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Linear-kernel CKA between (n, d1) and (n, d2) feature matrices."""
    if x.shape[0] != y.shape[0]:
        raise PairingError(f"row-count mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DomainError("CKA needs at least 2 rows")
    k = x @ x.T
    l = y @ y.T
    kk = hsic(k, k)
    ll = hsic(l, l)
    if kk.item() < _HSIC_FLOOR or ll.item() < _HSIC_FLOOR:
        raise DegenerateFeaturesError("zero-variance features, CKA undefined")
    return hsic(k, l) / torch.sqrt(kk * ll)


def da_per_step(v_m: torch.Tensor, v_e: torch.Tensor):
    """Per-step alignment terms 1 - CKA for paired (B, T, d) potentials.

    Returns (terms, skipped): ``terms`` is a length-T list holding a
    scalar tensor per step, or None where the features were degenerate;
    ``skipped`` counts the Nones.
    """
    if v_m.shape != v_e.shape:
        raise PairingError(f"shape mismatch: {tuple(v_m.shape)} vs {tuple(v_e.shape)}")
    terms, skipped = [], 0
    for t in range(v_m.shape[1]):
        try:
            terms.append(1.0 - linear_cka(v_m[:, t], v_e[:, t]))
        except DegenerateFeaturesError:
            terms.append(None)
            skipped += 1
    return terms, skipped


def da_loss(v_m: torch.Tensor, v_e: torch.Tensor) -> torch.Tensor:
    """Mean over valid steps of 1 - CKA between the two streams."""
    terms, skipped = da_per_step(v_m, v_e)
    valid = [t for t in terms if t is not None]
    if not valid:
        raise DegenerateFeaturesError("all time steps degenerate, alignment undefined")
    return torch.stack(valid).mean()


class AlignmentGate(nn.Module):
    """Learnable per-step blend between alignment and event classification."""

    def __init__(self, timesteps: int):
        super().__init__()
        self.theta = nn.Parameter(torch.zeros(timesteps))

    def gates(self) -> torch.Tensor:
        return torch.sigmoid(self.theta)


def rda_loss(da_terms, cls_e_steps: torch.Tensor, gate: AlignmentGate) -> torch.Tensor:
    """Gated blend per step: sigma(theta_t) * da_t + (1 - sigma) * ce_t.

    Steps whose alignment term was skipped as degenerate fall back to
    the classification regularizer alone.
    """
    g = gate.gates()
    if len(da_terms) != cls_e_steps.shape[0] or g.shape[0] != cls_e_steps.shape[0]:
        raise DomainError("da terms, per-step CE, and gate length must all equal T")
    parts = []
    for t, da_t in enumerate(da_terms):
        if da_t is None:
            parts.append(cls_e_steps[t])
        else:
            parts.append(g[t] * da_t + (1.0 - g[t]) * cls_e_steps[t])
    return torch.stack(parts).mean()


def mag_loss(source_probs: torch.Tensor, modality_labels: torch.Tensor) -> torch.Tensor:
    """Per-frame binary cross-entropy on the source head; (B, T) inputs."""
    p = source_probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = modality_labels.to(p.dtype)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


def mrp_loss(ratio_probs: torch.Tensor, static_ratio_target: torch.Tensor) -> torch.Tensor:
    """MSE between the time-averaged ratio prediction and the static fraction."""
    z_hat = ratio_probs.mean(dim=1)
    return ((z_hat - static_ratio_target.to(z_hat.dtype)) ** 2).mean()


@dataclass
class LossBreakdown:
    cls_m: float
    rda: float
    da: float | None       # None when every CKA step was degenerate
    cls_e: float
    mag: float
    mrp: float
    lam: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(
    cls_m: torch.Tensor,
    rda: torch.Tensor,
    mag: torch.Tensor,
    mrp: torch.Tensor,
    lam: float,
    da: float | None = 0.0,
    cls_e: float = 0.0,
):
    """Weighted sum cls_m + lam * rda + mag + mrp.

    Returns (total tensor for backward, LossBreakdown of floats); aborts
    with the offending component named if anything is non-finite.
    """
    parts = {"cls_m": cls_m, "rda": rda, "mag": mag, "mrp": mrp}
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise NumericError(f"loss component {name} is non-finite: {value.item()}")
    total = cls_m + lam * rda + mag + mrp
    # logged total is recomputed from the logged parts so the accounting
    # identity holds bit-exactly in the metrics stream
    breakdown = LossBreakdown(
        cls_m=cls_m.item(), rda=rda.item(),
        da=None if da is None else float(da), cls_e=float(cls_e),
        mag=mag.item(), mrp=mrp.item(), lam=float(lam),
        total=cls_m.item() + lam * rda.item() + mag.item() + mrp.item(),
    )
    return total, breakdown
