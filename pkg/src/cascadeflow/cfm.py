"""Riemannian conditional flow-matching: velocity network, base samplers,
couplings, and the regression loss.

Coordinates follow the dataset encoding: one deposition logit coordinate plus
7 coordinates per particle slot (sphere position, momentum direction, and the
log-magnitude u).  The conditional path between a base draw y0 and an encoded
target y1 is the product-manifold geodesic; its velocity is the regression
target.  The physical base places particles around the ray-traced exit point
with angular concentration kappa (8 = tight, 1.4 = near-isotropic).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import Tensor, nn

from . import assign
from . import manifold as mf
from . import net
from .dataset import (Batch, COND_DIM, condition_vector, event_manifold_spec)
from .net import (Backbone, NetConfig, DTYPE, TYPE_COND, TYPE_DEP, TYPE_PART,
                  PDG_NONE, MASKED, UNMASKED, TrainingError)
from .oracle import Condition

KAPPA_PHYSICAL = 8.0
KAPPA_ISOTROPIC = 1.4

_LOG_2PI = math.log(2.0 * math.pi)


class BaseMode(str, Enum):
    PHYSICAL = "physical"
    INDEPENDENT_GAUSSIAN_LOGIT = "independent_gaussian_logit"


@dataclass(frozen=True)
class BaseConfig:
    kappa: float = KAPPA_PHYSICAL
    e_cutoff: float = 1.0
    mode: BaseMode = BaseMode.PHYSICAL

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")


class CouplingKind(str, Enum):
    INDEPENDENT = "independent"
    OT = "ot"


@dataclass(frozen=True)
class CouplingConfig:
    kind: CouplingKind = CouplingKind.INDEPENDENT
    group_size: int = 256

    def __post_init__(self):
        if self.kind == CouplingKind.OT and self.group_size < 2:
            raise ValueError("OT coupling needs group size >= 2")


# ---------------------------------------------------------------------------
# ray tracing

def ray_trace(pos_in: np.ndarray, dir_in: np.ndarray) -> np.ndarray:
    """Exit point of a ray entering the [-1,1]^3 cube at pos_in along dir_in."""
    pos = np.asarray(pos_in, dtype=float)
    dirn = np.asarray(dir_in, dtype=float)
    best = math.inf
    for axis in range(3):
        d = dirn[axis]
        if abs(d) < 1e-12:
            continue
        s = (math.copysign(1.0, d) - pos[axis]) / d
        if 1e-15 < s < best:
            best = s
    if not math.isfinite(best):
        raise ValueError("tangential direction: ray never exits")
    out = pos + dirn * best
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------------------
# physical base sampling

def _rotation_to(target: np.ndarray) -> np.ndarray:
    """Rotation matrix taking the north pole (0,0,1) to the unit vector target."""
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.clip(target @ z, -1.0, 1.0))
    if c > 1.0 - 1e-14:
        return np.eye(3)
    if c < -1.0 + 1e-14:
        return np.diag([1.0, -1.0, -1.0])  # pi rotation about x
    axis = np.cross(z, target)
    axis /= np.linalg.norm(axis)
    s = math.sqrt(max(0.0, 1.0 - c * c))
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def _sample_pole_directions(n: int, kappa: float, rng: np.random.Generator) -> np.ndarray:
    theta = np.pi * np.abs(np.tanh(rng.normal(size=n) / kappa))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def sample_base_arrays(cond: np.ndarray, mask: np.ndarray, cfg: BaseConfig,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Base draw in batch layout.

    cond: (B, COND_DIM) condition vectors; mask: (B, n_pad) active slots.
    Returns (dep (B,), particles (B, n_pad, 7)); masked slots carry the
    sentinel values already used by the dataset layout.
    """
    B, n_pad = mask.shape
    dep = rng.normal(size=B)
    parts = np.zeros((B, n_pad, 7))
    parts[:, :, 2] = 1.0  # sentinel north pole, position block
    parts[:, :, 5] = 1.0  # sentinel north pole, direction block

    if cfg.mode == BaseMode.INDEPENDENT_GAUSSIAN_LOGIT:
        for i in range(B):
            idx = np.flatnonzero(mask[i])
            k = len(idx)
            if k == 0:
                continue
            u = rng.normal(size=(k, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            v = rng.normal(size=(k, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            parts[i, idx, 0:3] = u
            parts[i, idx, 3:6] = v
            parts[i, idx, 6] = rng.normal(size=k)
        return dep, parts

    for i in range(B):
        idx = np.flatnonzero(mask[i])
        k = len(idx)
        if k == 0:
            continue
        density, pos_sphere, dirn, u_in = (cond[i, 0], cond[i, 1:4],
                                           cond[i, 4:7], cond[i, 7])
        pos_cube = mf.sphere_to_cube(pos_sphere / np.linalg.norm(pos_sphere))
        exit_sphere = mf.cube_to_sphere(ray_trace(pos_cube, dirn))
        rot_pos = _rotation_to(exit_sphere)
        rot_dir = _rotation_to(dirn / np.linalg.norm(dirn))
        parts[i, idx, 0:3] = _sample_pole_directions(k, cfg.kappa, rng) @ rot_pos.T
        parts[i, idx, 3:6] = _sample_pole_directions(k, cfg.kappa, rng) @ rot_dir.T
        e_upper = u_in  # ln(E_in / E_cutoff)
        parts[i, idx, 6] = e_upper * (1.0 - np.tanh(0.5 * np.abs(rng.normal(size=k)))) + 1.0
    return dep, parts


def sample_base_physical(condition: Condition, cardinalities, cfg: BaseConfig,
                         rng) -> mf.ProductPoint:
    """Single-event base draw as a ProductPoint (see sample_base_arrays)."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n_total = int(sum(cardinalities))
    cond = condition_vector(condition, cfg.e_cutoff)[None, :]
    mask = np.ones((1, n_total), dtype=bool)
    dep, parts = sample_base_arrays(cond, mask, cfg, rng)
    coords = np.concatenate([[dep[0]], parts[0].reshape(-1)])
    return mf.ProductPoint(event_manifold_spec(n_total), coords)


# -- base log-density (needed for exact likelihoods) ------------------------

def _log_density_angle(alpha: np.ndarray, kappa: float) -> np.ndarray:
    """Log density on S^2 (w.r.t. area) at angle alpha from the pole target."""
    a = np.clip(alpha, 1e-9, np.pi - 1e-9)
    w = a / np.pi
    g = kappa * np.arctanh(w)
    # p_theta(a) = 2*phi(g) * kappa / (pi*(1-w^2)); area factor 1/(2*pi*sin a)
    log_p_theta = (math.log(2.0) - 0.5 * (g * g + _LOG_2PI)
                   + math.log(kappa) - math.log(np.pi) - np.log1p(-w * w))
    return log_p_theta - math.log(2.0 * math.pi) - np.log(np.sin(a))


def _log_density_magnitude(u: np.ndarray, e_upper: float) -> np.ndarray:
    """Log density of u = E_upper*(1 - tanh(|N|/2)) + 1 on (1, 1+E_upper]."""
    u = np.asarray(u, dtype=float)
    out = np.full(u.shape, -np.inf)
    ok = (u > 1.0) & (u <= 1.0 + e_upper)
    w = 1.0 - (u[ok] - 1.0) / e_upper  # = tanh(g/2) in [0, 1)
    g = 2.0 * np.arctanh(w)
    log_half_normal = math.log(2.0) - 0.5 * (g * g + _LOG_2PI)
    log_jac = math.log(2.0) - math.log(e_upper) - np.log1p(-w * w)
    out[ok] = log_half_normal + log_jac
    return out


def base_log_density(coords: np.ndarray, cond: np.ndarray,
                     cfg: BaseConfig) -> float:
    """Log density of a full coordinate vector under the base distribution.

    coords: (1 + 7n,) manifold coordinates; cond: (COND_DIM,) condition vector.
    """
    coords = np.asarray(coords, dtype=float)
    n = (len(coords) - 1) // 7
    dep = coords[0]
    total = -0.5 * (dep * dep + _LOG_2PI)
    if n == 0:
        return float(total)
    parts = coords[1:].reshape(n, 7)
    pos = parts[:, 0:3] / np.linalg.norm(parts[:, 0:3], axis=1, keepdims=True)
    dirn = parts[:, 3:6] / np.linalg.norm(parts[:, 3:6], axis=1, keepdims=True)
    u = parts[:, 6]
    if cfg.mode == BaseMode.INDEPENDENT_GAUSSIAN_LOGIT:
        total += n * (-math.log(4.0 * math.pi) * 2)
        total += float(np.sum(-0.5 * (u * u + _LOG_2PI)))
        return float(total)
    pos_sphere, din, u_in = cond[1:4], cond[4:7], cond[7]
    pos_cube = mf.sphere_to_cube(pos_sphere / np.linalg.norm(pos_sphere))
    exit_sphere = mf.cube_to_sphere(ray_trace(pos_cube, din))
    a_pos = np.arccos(np.clip(pos @ exit_sphere, -1.0, 1.0))
    a_dir = np.arccos(np.clip(dirn @ (din / np.linalg.norm(din)), -1.0, 1.0))
    total += float(np.sum(_log_density_angle(a_pos, cfg.kappa)))
    total += float(np.sum(_log_density_angle(a_dir, cfg.kappa)))
    total += float(np.sum(_log_density_magnitude(u, float(u_in))))
    return float(total)


# ---------------------------------------------------------------------------
# batched product-manifold interpolation (torch)

def slerp_with_velocity(p0: Tensor, p1: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
    """Geodesic point and velocity between unit vectors; shapes (..., 3),
    t broadcastable to (..., 1)."""
    c = (p0 * p1).sum(-1, keepdim=True).clamp(-1.0, 1.0)
    theta = torch.acos(c)
    u = p1 - c * p0
    nu = u.norm(dim=-1, keepdim=True)
    safe = nu > 1e-12
    u0 = torch.where(safe, u / nu.clamp_min(1e-300), torch.zeros_like(u))
    tt = theta * t
    y = torch.cos(tt) * p0 + torch.sin(tt) * u0
    v = theta * (-torch.sin(tt) * p0 + torch.cos(tt) * u0)
    y = torch.where(safe, y, p0)
    v = torch.where(safe, v, torch.zeros_like(v))
    return y / y.norm(dim=-1, keepdim=True).clamp_min(1e-300), v


def interpolate_batch(dep0: Tensor, parts0: Tensor, dep1: Tensor, parts1: Tensor,
                      t: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Geodesic point/velocity in batch layout at per-event times t (B,)."""
    tb = t[:, None, None]
    dep_t = (1 - t) * dep0 + t * dep1
    vdep = dep1 - dep0
    pos_t, vpos = slerp_with_velocity(parts0[..., 0:3], parts1[..., 0:3], tb)
    dir_t, vdir = slerp_with_velocity(parts0[..., 3:6], parts1[..., 3:6], tb)
    u_t = (1 - tb[..., 0]) * parts0[..., 6] + tb[..., 0] * parts1[..., 6]
    vu = parts1[..., 6] - parts0[..., 6]
    parts_t = torch.cat([pos_t, dir_t, u_t[..., None]], dim=-1)
    vparts = torch.cat([vpos, vdir, vu[..., None]], dim=-1)
    return dep_t, parts_t, vdep, vparts


def project_particle_velocities(parts: Tensor, v: Tensor) -> Tensor:
    """Project raw per-slot outputs onto the tangent space (sphere blocks)."""
    out = v.clone()
    for sl in (slice(0, 3), slice(3, 6)):
        p = parts[..., sl]
        p = p / p.norm(dim=-1, keepdim=True).clamp_min(1e-300)
        out[..., sl] = v[..., sl] - (v[..., sl] * p).sum(-1, keepdim=True) * p
    return out


# ---------------------------------------------------------------------------
# velocity network

class FlowModel(nn.Module):
    """Velocity field over [condition, deposition, particle slots] tokens."""

    def __init__(self, cond_dim: int = COND_DIM, hidden: int = 128,
                 layers: int = 4, heads: int = 4, dropout: float = 0.0):
        super().__init__()
        self.cond_dim = cond_dim
        self.input_dim = max(cond_dim, 7)
        cfg = NetConfig(input_dim=self.input_dim, cond_dim=cond_dim,
                        hidden=hidden, layers=layers, heads=heads,
                        dropout=dropout, causal=False)
        self.backbone = Backbone(cfg)
        self.head_dep = nn.Linear(hidden, 1, dtype=DTYPE)
        self.head_part = nn.Linear(hidden, 7, dtype=DTYPE)

    def forward(self, dep: Tensor, parts: Tensor, species: Tensor, mask: Tensor,
                cond_vec: Tensor, pdg_role: Tensor, t: Tensor,
                project: bool = True) -> tuple[Tensor, Tensor]:
        """Raw (or tangent-projected) velocities for the deposition coordinate
        and every particle slot.

        dep: (B,), parts: (B, n_pad, 7), species: (B, n_pad) in {0..3},
        mask: (B, n_pad) bool, cond_vec: (B, cond_dim), pdg_role: (B,),
        t: (B,).  Returns (v_dep (B,), v_parts (B, n_pad, 7)).
        """
        B, n_pad, _ = parts.shape
        S = 2 + n_pad
        x = torch.zeros(B, S, self.input_dim, dtype=DTYPE)
        x[:, 0, :self.cond_dim] = cond_vec
        x[:, 1, 0] = dep
        x[:, 2:, :7] = parts
        roles = torch.zeros(B, S, 3, dtype=torch.long)
        roles[:, 0, 0] = TYPE_COND
        roles[:, 0, 1] = pdg_role
        roles[:, 1, 0] = TYPE_DEP
        roles[:, 2:, 0] = TYPE_PART
        roles[:, 2:, 1] = species
        roles[:, :, 2] = UNMASKED
        roles[:, 2:, 2] = torch.where(mask, UNMASKED, MASKED)
        token_mask = torch.cat(
            [torch.ones(B, 2, dtype=torch.bool), mask], dim=1)
        h = self.backbone(x, roles, token_mask, cond_vec, pdg_role, t=t)
        v_dep = self.head_dep(h[:, 1, :]).squeeze(-1)
        v_parts = self.head_part(h[:, 2:, :])
        if project:
            v_parts = project_particle_velocities(parts, v_parts)
        return v_dep, v_parts


# ---------------------------------------------------------------------------
# pair construction and loss

@dataclass
class PairBatch:
    dep0: Tensor
    parts0: Tensor
    dep1: Tensor
    parts1: Tensor
    t: Tensor
    cond: Tensor
    pdg_role: Tensor
    species: Tensor
    mask: Tensor

    def __len__(self):
        return self.dep0.shape[0]


def _pair_cost_matrix(dep0, parts0, dep1, parts1, mask) -> np.ndarray:
    """Squared product-geodesic distances between base draws i and targets j.

    All events share one cardinality signature, so slots align; masked slots
    contribute nothing.
    """
    n = dep0.shape[0]
    cost = (dep0[:, None] - dep1[None, :]) ** 2
    active = np.flatnonzero(mask[0])
    for s in active:
        for sl in (slice(0, 3), slice(3, 6)):
            dots = np.clip(parts0[:, s, sl] @ parts1[:, s, sl].T, -1.0, 1.0)
            cost += np.arccos(dots) ** 2
        cost += (parts0[:, s, 6][:, None] - parts1[:, s, 6][None, :]) ** 2
    return cost


def make_pairs(batch: Batch, base_cfg: BaseConfig, coupling: CouplingConfig,
               rng: np.random.Generator) -> PairBatch:
    """Draw base samples, couple them to the targets, and sample times."""
    dep0, parts0 = sample_base_arrays(batch.cond, batch.mask, base_cfg, rng)
    if coupling.kind == CouplingKind.OT and len(batch) > 1:
        signatures = [tuple(c) for c in batch.cardinalities]
        groups: dict[tuple, list[int]] = {}
        for i, sig in enumerate(signatures):
            groups.setdefault(sig, []).append(i)
        for idx in groups.values():
            if len(idx) < 2:
                continue
            ii = np.array(idx)
            cost = _pair_cost_matrix(dep0[ii], parts0[ii], batch.dep[ii],
                                     batch.particles[ii], batch.mask[ii])
            perm = assign.solve(cost)
            dep0[ii[perm]], parts0[ii[perm]] = dep0[ii].copy(), parts0[ii].copy()
    t = rng.uniform(0.0, 1.0, size=len(batch))
    from .cardinality import pdg_roles_tensor
    return PairBatch(
        dep0=torch.as_tensor(dep0, dtype=DTYPE),
        parts0=torch.as_tensor(parts0, dtype=DTYPE),
        dep1=torch.as_tensor(batch.dep, dtype=DTYPE),
        parts1=torch.as_tensor(batch.particles, dtype=DTYPE),
        t=torch.as_tensor(t, dtype=DTYPE),
        cond=torch.as_tensor(batch.cond, dtype=DTYPE),
        pdg_role=pdg_roles_tensor(batch.pdg_in),
        species=torch.as_tensor(batch.species, dtype=torch.long),
        mask=torch.as_tensor(batch.mask, dtype=torch.bool),
    )


def cfm_loss(model, pairs: PairBatch) -> Tensor:
    """Mean squared velocity regression error over unmasked coordinates."""
    dep_t, parts_t, vdep_c, vparts_c = interpolate_batch(
        pairs.dep0, pairs.parts0, pairs.dep1, pairs.parts1, pairs.t)
    v_dep, v_parts = model(dep_t, parts_t, pairs.species, pairs.mask,
                           pairs.cond, pairs.pdg_role, pairs.t)
    err_dep = (v_dep - vdep_c) ** 2
    err_parts = ((v_parts - vparts_c) ** 2) * pairs.mask[..., None]
    n_coords = len(pairs) + 7.0 * float(pairs.mask.sum())
    loss = (err_dep.sum() + err_parts.sum()) / n_coords
    if not torch.isfinite(loss):
        raise TrainingError("non-finite flow-matching loss")
    return loss


# ---------------------------------------------------------------------------
# training loop

@dataclass
class FlowTrainConfig:
    lr: float = 5e-4
    betas: tuple = (0.95, 0.999)
    weight_decay: float = 1e-2
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    val_fraction: float = 0.05


def _batch_rows(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(batch.cond[idx], batch.pdg_in[idx], batch.dep[idx],
                 batch.particles[idx], batch.species[idx], batch.mask[idx],
                 batch.cardinalities[idx])


def train_flow(model: FlowModel, data: Batch, base_cfg: BaseConfig,
               coupling: CouplingConfig, cfg: FlowTrainConfig,
               log_fn=None, checkpoint_fn=None) -> list[dict]:
    """Flow-matching training; returns the per-epoch loss trace."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    n_val = max(1, int(cfg.val_fraction * n)) if n > 20 else 0
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    val_batch = _batch_rows(data, val_idx) if n_val else None

    opt = net.AdamW(model.named_parameters(), lr=cfg.lr, betas=cfg.betas,
                    weight_decay=cfg.weight_decay)
    trace = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pairs = make_pairs(_batch_rows(data, idx), base_cfg, coupling, rng)
            try:
                loss = cfm_loss(model, pairs)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch starting {start}: "
                                    f"{exc}") from exc
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        model.eval()
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_batch is not None:
            with torch.no_grad():
                vpairs = make_pairs(val_batch, base_cfg, coupling,
                                    np.random.default_rng(cfg.seed + 1))
                entry["val_loss"] = float(cfm_loss(model, vpairs))
        trace.append(entry)
        if log_fn:
            log_fn(entry)
        if checkpoint_fn:
            checkpoint_fn(epoch, model)
    return trace
