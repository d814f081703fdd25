"""Equivariance and diversity losses over landmark probability maps.

Probability maps are (B, H, W, K) torch tensors whose cells each sum to one
per landmark channel.  Every loss returns the mean over the batch, so a
single-instance batch reproduces the per-image definitions.  The quadratic
brute-force counterparts (``*_bruteforce``) serve as oracles for the
linear-time implementations and are not used in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .tps import PointMap, cell_centers


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    k: int
    gamma: float = 500.0
    weight_decay: float = 5e-4
    pool_window: int = 5

    def validate(self) -> None:
        if self.k < 1 or self.gamma < 0 or self.weight_decay < 0 or self.pool_window < 1:
            raise UsageError(f"invalid loss config {self}")


def mapped_cell_grid(g: PointMap, height: int, width: int) -> np.ndarray:
    """g evaluated at every normalized cell center, shape (H, W, 2).

    Depends only on geometry, so trainers cache it once per warp."""
    grid = cell_centers(height, width).reshape(-1, 2)
    return np.asarray(g(grid), dtype=np.float64).reshape(height, width, 2)


def _as_mapped_grid(g, height: int, width: int, dtype: torch.dtype) -> torch.Tensor:
    """Accept a point map, a (H, W, 2) array, or a (B, H, W, 2) batch."""
    if callable(g):
        g = mapped_cell_grid(g, height, width)
    if isinstance(g, np.ndarray):
        g = torch.from_numpy(np.ascontiguousarray(g))
    g = g.to(dtype)
    if g.ndim == 3:
        g = g[None]
    return g


def align_loss_points(landmarks_x: torch.Tensor, landmarks_xp: torch.Tensor,
                      g: PointMap) -> torch.Tensor:
    """Mean squared distance between landmarks of x and warped landmarks of x'.

    (1/K) sum_r ||u_r - g(v_r)||^2 with u from x and v from x'; shapes are
    (K, 2) or (B, K, 2).  Differentiable in ``landmarks_x`` only (the warp
    evaluation is geometric).
    """
    if landmarks_x.shape != landmarks_xp.shape:
        raise UsageError("landmark sets must have matching shapes")
    squeeze = landmarks_x.ndim == 2
    u = landmarks_x[None] if squeeze else landmarks_x
    v = landmarks_xp[None] if squeeze else landmarks_xp
    vn = v.detach().cpu().numpy().reshape(-1, 2)
    gv = torch.from_numpy(np.asarray(g(vn))).to(u.dtype).reshape(u.shape)
    return ((u - gv) ** 2).sum(dim=2).mean()


def align_loss_probmaps(maps_x: torch.Tensor, maps_xp: torch.Tensor, g) -> torch.Tensor:
    """Probability-map alignment loss, linear-time decomposition.

    Equals (1/K) sum_r sum_{u,v} ||u - g(v)||^2 p(u|x,r) p(v|x',r), computed
    as  sum_u ||u||^2 p  +  sum_v ||g(v)||^2 p'  -  2 <sum_u u p, sum_v g(v) p'>.
    """
    if maps_x.shape != maps_xp.shape:
        raise UsageError(
            f"map shapes differ: {tuple(maps_x.shape)} vs {tuple(maps_xp.shape)}")
    b, h, w, k = maps_x.shape
    grid = torch.from_numpy(cell_centers(h, w)).to(maps_x.dtype)  # (H, W, 2)
    gv = _as_mapped_grid(g, h, w, maps_x.dtype)                   # (1|B, H, W, 2)

    u_sq = (grid ** 2).sum(dim=2)                                 # (H, W)
    gv_sq = (gv ** 2).sum(dim=3)                                  # (1|B, H, W)
    t_uu = (maps_x * u_sq[None, :, :, None]).sum(dim=(1, 2))      # (B, K)
    t_vv = (maps_xp * gv_sq[:, :, :, None]).sum(dim=(1, 2))       # (B, K)
    mean_u = torch.einsum("bhwk,hwc->bkc", maps_x, grid)          # (B, K, 2)
    mean_gv = torch.einsum("bhwk,bhwc->bkc", maps_xp,
                           gv.expand(b, h, w, 2))                 # (B, K, 2)
    cross = (mean_u * mean_gv).sum(dim=2)                         # (B, K)
    return (t_uu + t_vv - 2.0 * cross).mean()


def align_loss_probmaps_bruteforce(maps_x: torch.Tensor, maps_xp: torch.Tensor,
                                   g) -> torch.Tensor:
    """O(N^2) double sum over all cell pairs; oracle for the linear form."""
    if maps_x.shape != maps_xp.shape:
        raise UsageError("map shapes differ")
    b, h, w, k = maps_x.shape
    n = h * w
    grid = torch.from_numpy(cell_centers(h, w)).to(maps_x.dtype).reshape(n, 2)
    gv = _as_mapped_grid(g, h, w, maps_x.dtype).expand(b, h, w, 2).reshape(b, n, 2)
    p = maps_x.reshape(b, n, k)
    q = maps_xp.reshape(b, n, k)
    total = maps_x.new_zeros(())
    for bi in range(b):
        d2 = ((grid[:, None, :] - gv[bi][None, :, :]) ** 2).sum(dim=2)  # (N, N)
        for r in range(k):
            total = total + (p[bi, :, r][:, None] * q[bi, :, r][None, :] * d2).sum()
    return total / (b * k)


def div_loss_overlap(maps: torch.Tensor, include_diagonal: bool = False) -> torch.Tensor:
    """Mutual overlap between landmark maps, (1/K^2) sum_{r,r'} sum_u p_r p_r'.

    The diagonal r = r' is excluded by default so that maps with disjoint
    supports score exactly zero; ``include_diagonal`` restores the full sum.
    """
    b, h, w, k = maps.shape
    total = (maps.sum(dim=3) ** 2).sum(dim=(1, 2))          # sum over r, r' pairs
    if not include_diagonal:
        total = total - (maps ** 2).sum(dim=(1, 2, 3))
    return (total / k ** 2).mean()


def div_loss_overlap_bruteforce(maps: torch.Tensor,
                                include_diagonal: bool = False) -> torch.Tensor:
    b, h, w, k = maps.shape
    total = maps.new_zeros(())
    for bi in range(b):
        for r in range(k):
            for rp in range(k):
                if r == rp and not include_diagonal:
                    continue
                total = total + (maps[bi, :, :, r] * maps[bi, :, :, rp]).sum()
    return total / (b * k ** 2)


def div_loss_max(maps: torch.Tensor) -> torch.Tensor:
    """K - sum_u max_r p(u|x,r); zero iff the channel supports are disjoint.

    The subgradient through the max routes to the first landmark attaining it.
    """
    b, h, w, k = maps.shape
    return (k - maps.max(dim=3).values.sum(dim=(1, 2))).mean()


def sum_pool(maps: torch.Tensor, window: int) -> torch.Tensor:
    """Non-overlapping window x window sum pooling; right/bottom windows may
    be partial (zero padding keeps the probability mass intact)."""
    if window < 1:
        raise UsageError(f"pool window must be >= 1, got {window}")
    if window == 1:
        return maps
    b, h, w, k = maps.shape
    hh = -(-h // window)
    ww = -(-w // window)
    padded = F.pad(maps.permute(0, 3, 1, 2),
                   (0, ww * window - w, 0, hh * window - h))
    pooled = padded.reshape(b, k, hh, window, ww, window).sum(dim=(3, 5))
    return pooled.permute(0, 2, 3, 1)


def div_loss_pooled(maps: torch.Tensor, window: int) -> torch.Tensor:
    """Diversity after sum pooling; merges nearby cells so landmarks are
    pushed farther apart than one cell."""
    return div_loss_max(sum_pool(maps, window))


def weight_penalty(params: dict[str, torch.Tensor]) -> torch.Tensor:
    """Sum of squared conv weights."""
    terms = [(p ** 2).sum() for n, p in params.items() if n.endswith(".weight")]
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


def objective(maps_x: torch.Tensor, maps_xp: torch.Tensor, g,
              params: dict[str, torch.Tensor],
              config: LossConfig) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Total training objective plus its term breakdown.

    weight_decay * R + mean_batch[ align + gamma * div(x) + gamma * div(x') ].
    """
    config.validate()
    align = align_loss_probmaps(maps_x, maps_xp, g)
    div_x = div_loss_pooled(maps_x, config.pool_window)
    div_xp = div_loss_pooled(maps_xp, config.pool_window)
    decay = weight_penalty(params)
    total = (config.weight_decay * decay + align
             + config.gamma * div_x + config.gamma * div_xp)
    breakdown = {
        "align": align,
        "div_x": config.gamma * div_x,
        "div_xp": config.gamma * div_xp,
        "weight_decay": config.weight_decay * decay,
    }
    for name, term in breakdown.items():
        if not torch.isfinite(term):
            raise FloatingPointError(f"non-finite objective term {name!r}")
    return total, breakdown
