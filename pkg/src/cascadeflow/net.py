"""Trainable transformer backbone shared by the cardinality and flow models.

Tokens are embedded with role-dependent parameter banks: each token carries a
(type, pdg, mask) role triple and its embedding uses the averaged weight
matrix W = (W_mask + W_pdg + W_type) / 3 and bias b = (b_mask + b_pdg +
b_type) / 3.  Blocks are pre-norm attention/feed-forward pairs whose layer
norms are modulated (AdaLN) by an affine function of the combined time and
condition embedding; the modulation maps are zero-initialized so every block
starts as an identity modulation.

Everything runs in double precision.  Gradients come from torch autograd;
the optimizer is a hand-rolled decoupled-weight-decay Adam so that update
traces are exactly reproducible and non-finite gradients fail loudly with
the offending parameter's name.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

DTYPE = torch.float64

# role triple index spaces
MASKED, UNMASKED = 0, 1
PDG_NONE, PDG_ELECTRON, PDG_POSITRON, PDG_PHOTON = 0, 1, 2, 3
TYPE_COND, TYPE_DEP, TYPE_PART = 0, 1, 2

N_MASK_ROLES, N_PDG_ROLES, N_TYPE_ROLES = 2, 4, 3

PDG_ROLE_OF = {11: PDG_ELECTRON, -11: PDG_POSITRON, 22: PDG_PHOTON}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    cond_dim: int
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.0
    causal: bool = False

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.hidden % 2 != 0:
            raise ValueError("hidden must be even (time embedding)")


class RoleEmbedding(nn.Module):
    """v = ((W_mask + W_pdg + W_type)/3) x + (b_mask + b_pdg + b_type)/3."""

    def __init__(self, input_dim: int, hidden: int):
        super().__init__()
        def bank(k):
            w = torch.empty(k, hidden, input_dim, dtype=DTYPE)
            nn.init.normal_(w, std=1.0 / math.sqrt(input_dim))
            return nn.Parameter(w)
        self.W_mask = bank(N_MASK_ROLES)
        self.W_pdg = bank(N_PDG_ROLES)
        self.W_type = bank(N_TYPE_ROLES)
        self.b_mask = nn.Parameter(torch.zeros(N_MASK_ROLES, hidden, dtype=DTYPE))
        self.b_pdg = nn.Parameter(torch.zeros(N_PDG_ROLES, hidden, dtype=DTYPE))
        self.b_type = nn.Parameter(torch.zeros(N_TYPE_ROLES, hidden, dtype=DTYPE))

    def forward(self, x: Tensor, roles: Tensor) -> Tensor:
        # x: (B, S, input_dim); roles: (B, S, 3) = (type, pdg, mask) indices
        def pick(bank_w, idx):
            y = torch.einsum("bsi,khi->bskh", x, bank_w)
            return torch.gather(
                y, 2, idx[..., None, None].expand(-1, -1, 1, y.shape[-1])
            ).squeeze(2)
        t_idx, p_idx, m_idx = roles[..., 0], roles[..., 1], roles[..., 2]
        v = (pick(self.W_type, t_idx) + pick(self.W_pdg, p_idx)
             + pick(self.W_mask, m_idx)) / 3.0
        b = (self.b_type[t_idx] + self.b_pdg[p_idx] + self.b_mask[m_idx]) / 3.0
        return v + b


class TimeEmbedding(nn.Module):
    """Alternating sin/cos features on a geometric frequency ladder 1..1e4."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("time embedding dim must be even")
        half = dim // 2
        exponents = torch.arange(half, dtype=DTYPE) / max(half - 1, 1)
        self.register_buffer("freqs", 10_000.0 ** exponents)

    def forward(self, t: Tensor) -> Tensor:
        ang = t[:, None] * self.freqs[None, :]
        out = torch.empty(t.shape[0], 2 * self.freqs.shape[0],
                          dtype=DTYPE, device=t.device)
        out[:, 0::2] = torch.sin(ang)
        out[:, 1::2] = torch.cos(ang)
        return out


class AdaLN(nn.Module):
    """LayerNorm followed by conditioning-driven per-channel scale/shift."""

    def __init__(self, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, dtype=DTYPE)
        self.to_mod = nn.Linear(hidden, 2 * hidden, dtype=DTYPE)
        nn.init.zeros_(self.to_mod.weight)
        nn.init.zeros_(self.to_mod.bias)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        scale, shift = self.to_mod(c).chunk(2, dim=-1)
        return self.norm(x) * (1.0 + scale[:, None, :]) + shift[:, None, :]


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.qkv = nn.Linear(hidden, 3 * hidden, dtype=DTYPE)
        self.proj = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.dropout = dropout

    def forward(self, x: Tensor, attn_mask: Tensor) -> Tensor:
        B, S, H = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        def split(z):
            return z.view(B, S, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(q), split(k), split(v)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~attn_mask[:, None, :, :], float("-inf"))
        w = torch.softmax(logits, dim=-1)
        if self.dropout > 0 and self.training:
            w = torch.dropout(w, self.dropout, True)
        out = (w @ v).transpose(1, 2).reshape(B, S, H)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        h = cfg.hidden
        self.adaln1 = AdaLN(h)
        self.attn = SelfAttention(h, cfg.heads, cfg.dropout)
        self.adaln2 = AdaLN(h)
        self.ff = nn.Sequential(
            nn.Linear(h, cfg.ff_mult * h, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(cfg.ff_mult * h, h, dtype=DTYPE),
        )
        self.dropout = cfg.dropout

    def forward(self, x: Tensor, c: Tensor, attn_mask: Tensor) -> Tensor:
        x = x + self.attn(self.adaln1(x, c), attn_mask)
        y = self.ff(self.adaln2(x, c))
        if self.dropout > 0 and self.training:
            y = torch.dropout(y, self.dropout, True)
        return x + y


class Backbone(nn.Module):
    """Role-embedded pre-norm transformer with AdaLN time/condition injection.

    No positional encoding is used: in encoder mode same-role particle tokens
    are exchangeable by construction, and in causal mode every position
    carries a distinct role triple.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.role_emb = RoleEmbedding(cfg.input_dim, cfg.hidden)
        self.time_emb = TimeEmbedding(cfg.hidden)
        self.cond_proj = nn.Linear(cfg.cond_dim, cfg.hidden, dtype=DTYPE)
        self.pdg_cond = nn.Embedding(N_PDG_ROLES, cfg.hidden)
        self.pdg_cond.weight.data = self.pdg_cond.weight.data.to(DTYPE)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(cfg.hidden, elementwise_affine=False,
                                       dtype=DTYPE)

    def forward(self, x: Tensor, roles: Tensor, token_mask: Tensor,
                cond_vec: Tensor, pdg_role: Tensor,
                t: Tensor | None = None) -> Tensor:
        """Per-token hidden outputs.

        x: (B, S, input_dim) token features, roles: (B, S, 3),
        token_mask: (B, S) bool (False = padding), cond_vec: (B, cond_dim),
        pdg_role: (B,) pdg role index of the incident particle,
        t: (B,) flow time, present iff the model is used in flow mode.
        """
        B, S, _ = x.shape
        h = self.role_emb(x, roles)
        c = self.cond_proj(cond_vec) + self.pdg_cond(pdg_role)
        if t is not None:
            te = self.time_emb(t)
            h = h + te[:, None, :]
            c = c + te
        key_ok = token_mask[:, None, :].expand(B, S, S)
        attn_mask = key_ok.clone()
        if self.cfg.causal:
            causal = torch.tril(torch.ones(S, S, dtype=torch.bool, device=x.device))
            attn_mask = attn_mask & causal[None, :, :]
        # every token may at least attend to itself, keeping softmax finite
        eye = torch.eye(S, dtype=torch.bool, device=x.device)
        attn_mask = attn_mask | eye[None, :, :]
        for blk in self.blocks:
            h = blk(h, c, attn_mask)
        return self.final_norm(h)


class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments."""

    def __init__(self, named_params, lr: float, betas=(0.95, 0.999),
                 weight_decay: float = 1e-2, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params}
        self.v = {n: torch.zeros_like(p) for n, p in self.params}

    @torch.no_grad()
    def step(self):
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if not torch.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name].mul_(b1).add_(g, alpha=1 - b1)
            v = self.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-self.lr)
            if self.weight_decay:
                p.add_(p, alpha=-self.lr * self.weight_decay)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints: versioned flat binary of named tensors with a shape header

_MAGIC = b"CFCKPT1\n"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors as little-endian float64/int64 after a JSON header."""
    entries = []
    blobs = []
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy()
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iu":
            arr = arr.astype("<i8")
        else:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.str})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns (tensors, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        tensors = {}
        for ent in header["tensors"]:
            nbytes = int(np.prod(ent["shape"], dtype=np.int64)) * 8
            arr = np.frombuffer(fh.read(nbytes), dtype=ent["dtype"])
            tensors[ent["name"]] = torch.from_numpy(arr.reshape(ent["shape"]).copy())
    return tensors, header["meta"]


def save_model(path, model: nn.Module, meta: dict | None = None) -> None:
    save_checkpoint(path, dict(model.state_dict()), meta)


def load_model(path, model: nn.Module) -> dict:
    tensors, meta = load_checkpoint(path)
    ref = model.state_dict()
    model.load_state_dict({k: v.to(dtype=ref[k].dtype) for k, v in tensors.items()})
    return meta
