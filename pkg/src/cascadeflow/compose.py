"""Autoregressive rollout engine.

A rollout iterates a single-cube kernel: every in-flight particle is pushed
through the kernel with the round's material density, deposited energy is
accumulated by summation, outgoing particles are transported to the opposite
cube face (parallel transport in the flat ambient space: the dominant-axis
coordinate flips sign, direction unchanged), and the loop stops when the
particle set is empty or a round cap is reached.  Density schedules supply a
per-round material density; none of them appear in kernel training, so every
rollout evaluation is zero-shot.

Kernels are batched callables ``kernel(conditions, seed) -> [(outgoing,
e_dep), ...]`` so a learned kernel can amortize one network call over all
in-flight particles of a round across many rollouts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import metrics
from .cfm import BaseConfig
from .flow import SolverConfig, sample_events
from .oracle import (Condition, GUN_DENSITY_RANGE, ParticleState,
                     SPECIES, ToyPhysicsConfig, simulate_batch)

DEFAULT_ROUNDS = 10


class ComposeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# transport

def transport_opposite_face(p: ParticleState) -> ParticleState:
    """Move a particle from its exit face to the opposite face.

    The dominant-axis coordinate (|coordinate| = 1; ties broken by axis
    order x < y < z) flips sign; the in-face coordinates and the direction
    are unchanged.  An outward-pointing particle becomes inward-pointing,
    and the map is an involution.
    """
    axis = int(np.argmax(np.abs(p.position)))
    pos = p.position.copy()
    pos[axis] = -pos[axis]
    return ParticleState(p.pdg, pos, p.direction, p.magnitude)


def _prepare_inward(p: ParticleState) -> ParticleState:
    """Ensure a transported particle points strictly into the cube.

    Kernel outputs are outward-pointing by construction, so transport alone
    normally suffices; a learned kernel can emit degenerate directions, which
    are reflected about the face plane (and nudged off exact tangency).
    """
    n_out = p.outward_normal()
    if float(p.direction @ n_out) < 0:
        return p
    axis = p.face_axis()
    d = p.direction.copy()
    d[axis] = -d[axis]
    if d[axis] * n_out[axis] >= 0:  # direction was tangent to the face
        d[axis] = -math.copysign(1e-6, n_out[axis])
        d = d / np.linalg.norm(d)
    return ParticleState(p.pdg, p.position, d, p.magnitude)


# ---------------------------------------------------------------------------
# density schedules

class ScheduleKind(str, Enum):
    HIGH_LOW = "high_low"
    LOW_HIGH = "low_high"
    ALTERNATING = "alternating"
    RANDOM10 = "random10"
    CUSTOM = "custom"


@dataclass(frozen=True)
class DensitySchedule:
    """Per-round material densities; length fixes the round cap."""

    kind: ScheduleKind
    densities: tuple

    def __post_init__(self):
        lo, hi = GUN_DENSITY_RANGE
        if not self.densities:
            raise ValueError("schedule must have at least one round")
        for rho in self.densities:
            if not lo <= rho <= hi:
                raise ValueError(f"density {rho} outside [{lo}, {hi}]")

    @property
    def n_rounds(self) -> int:
        return len(self.densities)

    @classmethod
    def high_low(cls, n_rounds: int = DEFAULT_ROUNDS) -> "DensitySchedule":
        lo, hi = GUN_DENSITY_RANGE
        return cls(ScheduleKind.HIGH_LOW,
                   tuple(np.linspace(hi, lo, n_rounds)))

    @classmethod
    def low_high(cls, n_rounds: int = DEFAULT_ROUNDS) -> "DensitySchedule":
        lo, hi = GUN_DENSITY_RANGE
        return cls(ScheduleKind.LOW_HIGH,
                   tuple(np.linspace(lo, hi, n_rounds)))

    @classmethod
    def alternating(cls, n_rounds: int = DEFAULT_ROUNDS) -> "DensitySchedule":
        lo, hi = GUN_DENSITY_RANGE
        return cls(ScheduleKind.ALTERNATING,
                   tuple(hi if r % 2 == 0 else lo for r in range(n_rounds)))

    @classmethod
    def random10(cls, seed: int = 0) -> "DensitySchedule":
        lo, hi = GUN_DENSITY_RANGE
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD5]))
        return cls(ScheduleKind.RANDOM10, tuple(rng.uniform(lo, hi, size=10)))

    @classmethod
    def custom(cls, densities) -> "DensitySchedule":
        return cls(ScheduleKind.CUSTOM, tuple(float(d) for d in densities))


BY_NAME = {
    "high_low": DensitySchedule.high_low,
    "low_high": DensitySchedule.low_high,
    "alternating": DensitySchedule.alternating,
    "random10": DensitySchedule.random10,
}


# ---------------------------------------------------------------------------
# kernels

def oracle_kernel(cfg: ToyPhysicsConfig):
    """Mechanistic single-cube kernel backed by the toy Monte Carlo."""
    def kernel(conds, seed):
        events = simulate_batch(cfg, conds, seed)
        return [(list(ev.outgoing), ev.e_dep) for ev in events]
    return kernel


_KERNEL_CHUNK = 2048


def _result_from_record(rec) -> tuple[list[ParticleState], float]:
    """Convert a sampled event to kernel output under an energy budget.

    Sampled kernels carry no conservation guarantee, so outgoing energies
    are rescaled whenever they exceed the remaining budget e_in - e_dep,
    with the excess booked as deposition.  Without this projection rollout
    populations can grow without bound.
    """
    e_dep = rec.e_dep
    total = sum(p.e for p in rec.outgoing)
    budget = rec.e_in - rec.e_dep
    scale = 1.0
    if total > budget:
        scale = budget / total
        e_dep += total - budget
    out = []
    for p in rec.outgoing:
        d = np.asarray(p.dir, dtype=float)
        out.append(ParticleState(p.pdg, np.asarray(p.pos, dtype=float),
                                 d / np.linalg.norm(d), p.e * scale))
    return out, e_dep


def _chunked_sampler(sample_fn):
    def kernel(conds, seed):
        results = []
        for i in range(0, len(conds), _KERNEL_CHUNK):
            recs = sample_fn(conds[i:i + _KERNEL_CHUNK], seed + i)
            results.extend(_result_from_record(r) for r in recs)
        return results
    return kernel


def learned_kernel(card_model, flow_model, base_cfg: BaseConfig,
                   solver_cfg: SolverConfig):
    """Trained two-factor kernel (cardinality sampler + integrated flow)."""
    return _chunked_sampler(
        lambda conds, seed: sample_events(card_model, flow_model, conds,
                                          base_cfg, solver_cfg, seed))


def base_kernel(card_model, base_cfg: BaseConfig):
    """Reference kernel that decodes raw base-distribution draws (no flow)."""
    return _chunked_sampler(
        lambda conds, seed: sample_events(card_model, None, conds, base_cfg,
                                          SolverConfig(), seed,
                                          integrate_field=False))


# ---------------------------------------------------------------------------
# rollout engine

@dataclass
class RolloutState:
    round: int
    particles: list                 # in-flight, inward-prepared
    accumulated_e: float
    per_round_log: list = field(default_factory=list)


def rollouts(kernel, initials, schedule: DensitySchedule,
             e_cutoff: float = 1.0, seed: int = 0) -> list[RolloutState]:
    """Run one rollout per initial particle, batching kernel calls per round.

    Each round every in-flight particle is pushed through the kernel at the
    round's density; deposited energy plus the energy of sub-cutoff outgoing
    particles is added to the rollout's accumulator; survivors (species
    e-/e+/gamma with energy above the cutoff) are transported to the opposite
    face.  Per-round multiplicity and deposition are logged before transport.
    """
    states = [RolloutState(0, [_prepare_inward(p)], 0.0) for p in initials]
    seq = np.random.SeedSequence([int(seed), 0x0C11])
    round_seeds = seq.generate_state(schedule.n_rounds, dtype=np.uint64)
    for r, density in enumerate(schedule.densities):
        conds, owners = [], []
        for i, st in enumerate(states):
            for p in st.particles:
                conds.append(Condition(p, float(density)))
                owners.append(i)
        if not conds:
            break
        try:
            results = kernel(conds, int(round_seeds[r]))
        except Exception as exc:
            raise ComposeError(f"kernel failed at round {r}: {exc}") from exc
        e_round = [0.0] * len(states)
        survivors = [[] for _ in states]
        for owner, (outgoing, e_dep) in zip(owners, results):
            e_round[owner] += e_dep
            for p in outgoing:
                if p.pdg not in SPECIES:
                    continue
                if p.magnitude <= e_cutoff:
                    e_round[owner] += p.magnitude
                else:
                    survivors[owner].append(p)
        for i, st in enumerate(states):
            if not st.particles:
                continue
            st.accumulated_e += e_round[i]
            st.per_round_log.append({"multiplicity": len(survivors[i]),
                                     "e_dep": e_round[i]})
            st.particles = [_prepare_inward(transport_opposite_face(p))
                            for p in survivors[i]]
            st.round = r + 1
    return states


def rollout(kernel, initial: ParticleState, schedule: DensitySchedule,
            e_cutoff: float = 1.0, seed: int = 0) -> RolloutState:
    return rollouts(kernel, [initial], schedule, e_cutoff, seed)[0]


def rollout_summaries(states: list[RolloutState], n_rounds: int) -> np.ndarray:
    """Fixed-size (2*n_rounds) vectors [multiplicities..., depositions...];
    rounds after termination are zero-padded."""
    out = np.zeros((len(states), 2 * n_rounds))
    for i, st in enumerate(states):
        for r, log in enumerate(st.per_round_log[:n_rounds]):
            out[i, r] = log["multiplicity"]
            out[i, n_rounds + r] = log["e_dep"]
    return out


def rollout_mmd(kernel_a, kernel_b, initials, schedule: DensitySchedule,
                e_cutoff: float = 1.0, seed_a: int = 0, seed_b: int = 1,
                k: int = 10) -> metrics.MetricEntry:
    """MMD between the rollout-summary distributions of two kernels started
    from the same initial particles."""
    xs = rollout_summaries(rollouts(kernel_a, initials, schedule, e_cutoff,
                                    seed_a), schedule.n_rounds)
    ys = rollout_summaries(rollouts(kernel_b, initials, schedule, e_cutoff,
                                    seed_b), schedule.n_rounds)
    return metrics.subsample_report(metrics.mmd, xs, ys, k=k)


def write_trace_csv(path, states: list[RolloutState],
                    schedule: DensitySchedule) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rollout", "round", "multiplicity", "e_dep", "density"])
        for i, st in enumerate(states):
            for r, log in enumerate(st.per_round_log):
                w.writerow([i, r, log["multiplicity"],
                            f"{log['e_dep']:.10g}",
                            f"{schedule.densities[r]:.10g}"])
