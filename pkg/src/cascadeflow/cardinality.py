"""Autoregressive categorical model over per-species outgoing counts.

The sequence layout is fixed: two prompt tokens (discrete particle-type
prompt, continuous condition prompt) followed by the three count tokens in
the order [n_e-, n_e+, n_gamma].  Training is teacher-forced cross-entropy
over the three count positions; prompts carry no loss.  Sampling is
ancestral in the same order, and log_prob is exact, so the distribution
normalizes over the finite (n_max+1)^3 grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from . import net
from .dataset import COND_DIM
from .net import (Backbone, NetConfig, DTYPE, TYPE_COND, TYPE_PART, PDG_NONE,
                  UNMASKED, PDG_ROLE_OF, TrainingError)

SPECIES_ROLES = (net.PDG_ELECTRON, net.PDG_POSITRON, net.PDG_PHOTON)


class CardinalityModel(nn.Module):
    def __init__(self, n_max: int, cond_dim: int = COND_DIM,
                 hidden: int = 128, layers: int = 4, heads: int = 4,
                 dropout: float = 0.0):
        super().__init__()
        self.n_max = n_max
        self.vocab = n_max + 1
        self.cond_dim = cond_dim
        self.input_dim = max(cond_dim, self.vocab)
        cfg = NetConfig(input_dim=self.input_dim, cond_dim=cond_dim,
                        hidden=hidden, layers=layers, heads=heads,
                        dropout=dropout, causal=True)
        self.backbone = Backbone(cfg)
        self.head = nn.Linear(hidden, self.vocab, dtype=DTYPE)

    # -- token assembly ------------------------------------------------------

    def _prompt_tokens(self, cond_vec: Tensor, pdg_role: Tensor):
        B = cond_vec.shape[0]
        x = torch.zeros(B, 2, self.input_dim, dtype=DTYPE)
        x[:, 1, :self.cond_dim] = cond_vec
        roles = torch.zeros(B, 2, 3, dtype=torch.long)
        roles[:, :, 0] = TYPE_COND
        roles[:, 0, 1] = pdg_role
        roles[:, 1, 1] = PDG_NONE
        roles[:, :, 2] = UNMASKED
        return x, roles

    def _count_tokens(self, counts: Tensor):
        # counts: (B, k) with k <= 3 previously generated counts
        B, k = counts.shape
        x = torch.zeros(B, k, self.input_dim, dtype=DTYPE)
        x.scatter_(2, counts[..., None], 1.0)
        roles = torch.zeros(B, k, 3, dtype=torch.long)
        roles[:, :, 0] = TYPE_PART
        for j in range(k):
            roles[:, j, 1] = SPECIES_ROLES[j]
        roles[:, :, 2] = UNMASKED
        return x, roles

    def _forward_tokens(self, cond_vec: Tensor, pdg_role: Tensor,
                        counts: Tensor) -> Tensor:
        """Logits at each position that predicts a count.

        counts: (B, k) teacher counts already placed in the sequence; returns
        (B, k+1, vocab) logits for positions 1..k+1 (predicting counts 1..k+1),
        clipped to at most 3 predictions.
        """
        xp, rp = self._prompt_tokens(cond_vec, pdg_role)
        if counts.shape[1] > 0:
            xc, rc = self._count_tokens(counts)
            x = torch.cat([xp, xc], dim=1)
            roles = torch.cat([rp, rc], dim=1)
        else:
            x, roles = xp, rp
        token_mask = torch.ones(x.shape[0], x.shape[1], dtype=torch.bool)
        h = self.backbone(x, roles, token_mask, cond_vec, pdg_role)
        n_pred = min(counts.shape[1] + 1, 3)
        return self.head(h[:, 1:1 + n_pred, :])

    # -- public API ----------------------------------------------------------

    def logits(self, cond_vec: Tensor, pdg_role: Tensor, counts: Tensor) -> Tensor:
        """(B, 3, vocab) teacher-forced logits for the three count positions."""
        return self._forward_tokens(cond_vec, pdg_role, counts[:, :2])

    def log_prob(self, cond_vec: Tensor, pdg_role: Tensor, counts: Tensor) -> Tensor:
        if int(counts.max()) > self.n_max:
            raise ValueError(f"count {int(counts.max())} exceeds n_max={self.n_max}")
        logp = torch.log_softmax(self.logits(cond_vec, pdg_role, counts), dim=-1)
        return logp.gather(2, counts[..., None]).squeeze(-1).sum(dim=1)

    def loss(self, cond_vec: Tensor, pdg_role: Tensor, counts: Tensor) -> Tensor:
        """Mean cross-entropy over the three count positions."""
        logits = self.logits(cond_vec, pdg_role, counts)
        return nn.functional.cross_entropy(
            logits.reshape(-1, self.vocab), counts.reshape(-1))

    @torch.no_grad()
    def sample(self, cond_vec: Tensor, pdg_role: Tensor,
               generator: torch.Generator) -> Tensor:
        """Ancestral sample of (B, 3) counts in the fixed species order."""
        B = cond_vec.shape[0]
        counts = torch.zeros(B, 0, dtype=torch.long)
        for _ in range(3):
            logits = self._forward_tokens(cond_vec, pdg_role, counts)[:, -1, :]
            probs = torch.softmax(logits, dim=-1)
            nxt = torch.multinomial(probs, 1, generator=generator)
            counts = torch.cat([counts, nxt], dim=1)
        return counts


def pdg_roles_tensor(pdg_in: np.ndarray) -> Tensor:
    return torch.tensor([PDG_ROLE_OF[int(p)] for p in pdg_in], dtype=torch.long)


@dataclass
class CardinalityTrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.95, 0.999)
    weight_decay: float = 1e-2
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    val_fraction: float = 0.1


def train_cardinality(model: CardinalityModel, cond_vec: np.ndarray,
                      pdg_in: np.ndarray, counts: np.ndarray,
                      cfg: CardinalityTrainConfig,
                      log_fn=None) -> list[dict]:
    """Teacher-forced training; returns a per-epoch loss trace."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n = len(cond_vec)
    n_val = max(1, int(cfg.val_fraction * n)) if n > 10 else 0
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    cv = torch.as_tensor(cond_vec, dtype=DTYPE)
    pr = pdg_roles_tensor(pdg_in)
    ct = torch.as_tensor(counts, dtype=torch.long)

    opt = net.AdamW(model.named_parameters(), lr=cfg.lr, betas=cfg.betas,
                    weight_decay=cfg.weight_decay)
    trace = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = model.loss(cv[idx], pr[idx], ct[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, "
                                    f"batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        model.eval()
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if n_val:
            with torch.no_grad():
                entry["val_loss"] = float(model.loss(cv[val_idx], pr[val_idx],
                                                     ct[val_idx]))
        trace.append(entry)
        if log_fn:
            log_fn(entry)
    return trace
