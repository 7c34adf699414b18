"""Two-sample evaluation stack: per-event summary statistic, unbiased MMD,
energy distance, a parametrized classifier AUC, and disjoint-subsample
uncertainties.

The summary vector has 34 entries: for each species (e-, e+, gamma) the
per-event mean and standard deviation of five kinematic features (momentum
polar/azimuthal angle, momentum magnitude, position polar/azimuthal angle
after the cube-to-sphere identification), followed by the deposited energy
and the three per-species counts.  Species absent from an event contribute
zeros.

MMD uses an RBF kernel on standardized features with the median-heuristic
bandwidth; both MMD and the energy distance are computed with the unbiased
(off-diagonal) estimators, so null estimates may be slightly negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.distance import cdist
from scipy.stats import rankdata
from torch import nn

from . import manifold as mf
from .dataset import EventRecord, SPECIES_ORDER
from .net import DTYPE

SUMMARY_DIM = 34


class MetricsError(ValueError):
    pass


def summarize(rec: EventRecord) -> np.ndarray:
    """34-dim per-event summary vector (see module docstring for the layout)."""
    out = np.zeros(SUMMARY_DIM)
    counts = [0, 0, 0]
    for s_idx, pdg in enumerate(SPECIES_ORDER):
        feats = []
        for p in rec.outgoing:
            if p.pdg != pdg:
                continue
            d = np.asarray(p.dir, dtype=float)
            d = d / np.linalg.norm(d)
            x = mf.cube_to_sphere(np.asarray(p.pos, dtype=float))
            feats.append([
                math.acos(float(np.clip(d[2], -1, 1))),   # theta_p
                math.atan2(d[1], d[0]),                    # phi_p
                p.e,                                       # |p|
                math.acos(float(np.clip(x[2], -1, 1))),   # theta_x
                math.atan2(x[1], x[0]),                    # phi_x
            ])
        counts[s_idx] = len(feats)
        if feats:
            arr = np.array(feats)
            out[10 * s_idx: 10 * s_idx + 5] = arr.mean(axis=0)
            out[10 * s_idx + 5: 10 * s_idx + 10] = arr.std(axis=0)
    out[30] = rec.e_dep
    out[31:34] = counts
    return out


def summarize_all(records) -> np.ndarray:
    return np.stack([summarize(r) for r in records])


@dataclass
class DroppedFeatureStats:
    count: int = 0


def _standardize(xs: np.ndarray, ys: np.ndarray,
                 dropped: DroppedFeatureStats | None = None):
    pooled = np.concatenate([xs, ys], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    keep = std > 1e-12
    if dropped is not None:
        dropped.count += int((~keep).sum())
    return ((xs[:, keep] - mean[keep]) / std[keep],
            (ys[:, keep] - mean[keep]) / std[keep])


def mmd(xs: np.ndarray, ys: np.ndarray,
        dropped: DroppedFeatureStats | None = None) -> float:
    """Unbiased U-statistic estimate of squared MMD with an RBF kernel."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if len(xs) < 2 or len(ys) < 2:
        raise MetricsError("mmd needs at least 2 samples per side")
    x, y = _standardize(xs, ys, dropped)
    pooled = np.concatenate([x, y], axis=0)
    d_pool = cdist(pooled, pooled)
    bw = np.median(d_pool[np.triu_indices(len(pooled), k=1)])
    if bw <= 0:
        bw = 1.0
    gamma = 1.0 / (2.0 * bw * bw)
    m, n = len(x), len(y)
    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        # paired U-statistic: also drops i=j cross terms, so identical
        # sample sets give exactly zero
        sxy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        sxy = kxy.mean()
    return float(sxx + syy - 2.0 * sxy)


def energy_distance(xs: np.ndarray, ys: np.ndarray,
                    dropped: DroppedFeatureStats | None = None) -> float:
    """E-statistic 2 E|X-Y| - E|X-X'| - E|Y-Y'| on standardized vectors,
    with off-diagonal (unbiased) within-sample terms."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if len(xs) < 2 or len(ys) < 2:
        raise MetricsError("energy_distance needs at least 2 samples per side")
    x, y = _standardize(xs, ys, dropped)
    m, n = len(x), len(y)
    dxx = cdist(x, x)
    dyy = cdist(y, y)
    dxy = cdist(x, y)
    if m == n:
        exy = (dxy.sum() - np.trace(dxy)) / (m * (m - 1))
    else:
        exy = dxy.mean()
    exx = dxx.sum() / (m * (m - 1))
    eyy = dyy.sum() / (n * (n - 1))
    return float(2.0 * exy - exx - eyy)


# ---------------------------------------------------------------------------
# parametrized classifier AUC

class _ClassifierNet(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hidden, 1, dtype=DTYPE),
        )

    def forward(self, x):
        return self.net(x).squeeze(-1)


def auc_from_scores(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """Rank-statistic (Mann-Whitney) AUC."""
    ranks = rankdata(np.concatenate([scores_pos, scores_neg]))
    n_pos, n_neg = len(scores_pos), len(scores_neg)
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def classifier_auc(features_p: np.ndarray, features_q: np.ndarray,
                   conditions_p: np.ndarray, conditions_q: np.ndarray,
                   seed: int = 0, epochs: int = 40, batch_size: int = 256,
                   return_heldout=False):
    """Held-out AUC of a small network separating the two sources.

    Inputs are summary vectors and their matching condition vectors; the
    classifier sees (summary ⊕ condition) so a single network covers all
    parameter points.  When both sides share the same condition vectors
    (paired samples), the train/test split keeps each pair on one side:
    splitting a pair leaks the training copy's label to its held-out twin
    and biases the null AUC below 0.5.
    """
    n_p, n_q = len(features_p), len(features_q)
    if max(n_p, n_q) > 10 * min(n_p, n_q):
        raise MetricsError(f"class imbalance {n_p}:{n_q} exceeds 10:1")
    x = np.concatenate([np.concatenate([features_p, conditions_p], axis=1),
                        np.concatenate([features_q, conditions_q], axis=1)])
    labels = np.concatenate([np.ones(n_p), np.zeros(n_q)])
    mean, std = x.mean(axis=0), x.std(axis=0)
    std[std < 1e-12] = 1.0
    x = (x - mean) / std

    rng = np.random.default_rng(seed)
    paired = n_p == n_q and np.array_equal(conditions_p, conditions_q)
    if paired:
        cperm = rng.permutation(n_p)
        half = n_p // 2
        tr = np.concatenate([cperm[:half], cperm[:half] + n_p])
        te = np.concatenate([cperm[half:], cperm[half:] + n_p])
        tr, te = rng.permutation(tr), rng.permutation(te)
    else:
        perm = rng.permutation(len(x))
        n_train = len(x) // 2
        tr, te = perm[:n_train], perm[n_train:]

    torch.manual_seed(seed)
    model = _ClassifierNet(x.shape[1])
    xt = torch.as_tensor(x, dtype=DTYPE)
    yt = torch.as_tensor(labels, dtype=DTYPE)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    lossf = nn.BCEWithLogitsLoss()
    for _ in range(epochs):
        order = rng.permutation(tr)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            loss = lossf(model(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
    with torch.no_grad():
        scores = model(xt[te]).numpy()
    te_labels = labels[te]
    auc = auc_from_scores(scores[te_labels == 1], scores[te_labels == 0])
    if return_heldout:
        return auc, scores, te_labels
    return auc


# ---------------------------------------------------------------------------
# disjoint-subsample reports

@dataclass
class MetricEntry:
    value: float
    sem: float
    k_subsamples: int


def subsample_report(metric_fn, xs: np.ndarray, ys: np.ndarray,
                     k: int = 10) -> MetricEntry:
    """Point estimate on the full pool; sem = std/sqrt(K) over K disjoint parts."""
    if k < 2:
        raise MetricsError("subsample_report needs K >= 2")
    part_x = len(xs) // k
    part_y = len(ys) // k
    if part_x < 2 or part_y < 2:
        raise MetricsError("pool too small to split into K parts of size >= 2")
    point = metric_fn(xs, ys)
    parts = []
    for i in range(k):
        parts.append(metric_fn(xs[i * part_x:(i + 1) * part_x],
                               ys[i * part_y:(i + 1) * part_y]))
    sem = float(np.std(parts, ddof=1) / math.sqrt(k))
    return MetricEntry(value=float(point), sem=sem, k_subsamples=k)


@dataclass
class MetricReport:
    mmd: MetricEntry
    ed: MetricEntry
    auc: MetricEntry | None
    n_eval: int

    def to_dict(self) -> dict:
        d = {"mmd": self.mmd.value, "mmd_sem": self.mmd.sem,
             "ed": self.ed.value, "ed_sem": self.ed.sem,
             "n_eval": self.n_eval, "k": self.mmd.k_subsamples}
        if self.auc is not None:
            d["auc"] = self.auc.value
            d["auc_sem"] = self.auc.sem
        return d
