"""Toy mechanistic Monte Carlo of electromagnetic cascades in a homogeneous cube.

A single cube of configurable half-edge is filled with a material whose
interaction lengths and continuous loss rate scale inversely with density.
Electrons and positrons lose energy continuously and radiate bremsstrahlung
photons; photons pair-produce above twice the tracking cutoff and
Compton-scatter below it.  Kinematics are massless (E = |p|) for all three
species so per-event energy bookkeeping is exact.

Positions are kept in cube-local coordinates scaled to the surface of
[-1, 1]^3; physical path lengths are the scaled length times the half-edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ELECTRON = 11
POSITRON = -11
PHOTON = 22
SPECIES = (ELECTRON, POSITRON, PHOTON)

# std-dev (radians) of the small-angle Compton deflection
_DEFLECT_SIGMA = 0.3

GUN_ENERGY_RANGE = (20.0, 300.0)
GUN_DENSITY_RANGE = (0.5, 10.0)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ToyPhysicsConfig:
    """Material/transport constants, quoted at reference density 1 g/cm^3.

    The defaults are order-of-magnitude Argon-like stand-ins; no claim of
    physical fidelity is made.
    """

    radiation_length_ref: float = 14.0      # cm, bremsstrahlung mfp
    pair_mfp_ref: float = 18.0              # cm
    compton_mfp_ref: float = 25.0           # cm
    continuous_loss_rate_ref: float = 0.4   # MeV/cm
    e_cutoff: float = 1.0                   # MeV, tracking cutoff
    max_internal_steps: int = 100_000
    cube_half_edge: float = 5.0             # cm (10 cm edge cube)

    def __post_init__(self):
        for name in ("radiation_length_ref", "pair_mfp_ref", "compton_mfp_ref",
                     "continuous_loss_rate_ref", "e_cutoff", "cube_half_edge"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


def _surface_face_axis(position: np.ndarray) -> int:
    return int(np.argmax(np.abs(position)))


@dataclass(frozen=True)
class ParticleState:
    """A typed particle on the cube surface (massless convention E = |p|)."""

    pdg: int
    position: np.ndarray     # on the surface of [-1, 1]^3
    direction: np.ndarray    # unit 3-vector
    magnitude: float         # MeV

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        dirn = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "direction", dirn)
        if self.pdg not in SPECIES:
            raise ValueError(f"unsupported species pdg={self.pdg}")
        if abs(np.linalg.norm(dirn) - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")
        if abs(np.max(np.abs(pos)) - 1.0) > 1e-9:
            raise ValueError("position must lie on the cube surface")
        if self.magnitude <= 0:
            raise ValueError("magnitude must be > 0")

    def face_axis(self) -> int:
        return _surface_face_axis(self.position)

    def outward_normal(self) -> np.ndarray:
        axis = self.face_axis()
        n = np.zeros(3)
        n[axis] = math.copysign(1.0, self.position[axis])
        return n


@dataclass(frozen=True)
class Condition:
    """Incident particle plus the cube's material density."""

    incident: ParticleState
    density: float

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError("density must be > 0")
        inward = -self.incident.outward_normal()
        if float(np.dot(self.incident.direction, inward)) <= 0:
            raise ValueError("incident direction must point into the cube")

    def in_gun_ranges(self) -> bool:
        lo_e, hi_e = GUN_ENERGY_RANGE
        lo_d, hi_d = GUN_DENSITY_RANGE
        return (lo_e <= self.incident.magnitude <= hi_e
                and lo_d <= self.density <= hi_d)


@dataclass(frozen=True)
class Event:
    condition: Condition
    outgoing: tuple  # of ParticleState, directions outward
    e_dep: float     # MeV
    truncated: bool = False


def _event_rng(seed, index: int, condition: Condition) -> np.random.Generator:
    """Per-event RNG stream keyed by the condition content.

    Keying on the condition (rather than the list index) makes simulate_batch
    permutation-covariant: permuting the input conditions permutes the output
    events.  Repeated identical conditions are disambiguated by their
    occurrence index.
    """
    c = condition
    payload = np.concatenate([
        [float(c.incident.pdg), c.incident.magnitude, c.density, float(index)],
        c.incident.position, c.incident.direction,
    ])
    key = int.from_bytes(payload.tobytes(), "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), key]))


def _distance_to_surface(pos: np.ndarray, dirn: np.ndarray) -> tuple[float, int]:
    """Scaled distance along dirn from an interior/surface point to exit, and exit axis."""
    best_s, best_axis = math.inf, -1
    for axis in range(3):
        d = dirn[axis]
        if abs(d) < 1e-12:
            continue
        s = (math.copysign(1.0, d) - pos[axis]) / d
        if 1e-15 < s < best_s:
            best_s, best_axis = s, axis
    if best_axis < 0:
        raise SimulationError("direction is tangential; no exit face found")
    return best_s, best_axis


def _exit_particle(pdg: int, pos: np.ndarray, dirn: np.ndarray, energy: float,
                   s_exit: float, axis: int) -> ParticleState:
    p = pos + dirn * s_exit
    p[axis] = math.copysign(1.0, dirn[axis])  # snap exactly onto the face
    p = np.clip(p, -1.0, 1.0)
    return ParticleState(pdg, p, dirn.copy(), energy)


def _deflect(dirn: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotate dirn by a small polar angle with uniform azimuth."""
    theta = abs(rng.normal(0.0, _DEFLECT_SIGMA))
    phi = rng.uniform(0.0, 2.0 * math.pi)
    # orthonormal frame around dirn
    a = np.array([1.0, 0.0, 0.0]) if abs(dirn[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(dirn, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(dirn, e1)
    out = (math.cos(theta) * dirn
           + math.sin(theta) * (math.cos(phi) * e1 + math.sin(phi) * e2))
    return out / np.linalg.norm(out)


def simulate_event(cfg: ToyPhysicsConfig, cond: Condition, seed) -> Event:
    """Track one incident particle through the cube; exact energy bookkeeping.

    seed may be an int or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rho = cond.density
    cutoff = cfg.e_cutoff
    half = cfg.cube_half_edge
    e_in = cond.incident.magnitude

    if e_in <= cutoff:
        return Event(cond, (), e_in)

    stack = [(cond.incident.pdg, cond.incident.position.copy(),
              cond.incident.direction.copy(), e_in)]
    outgoing: list[ParticleState] = []
    e_dep = 0.0
    steps = 0
    truncated = False

    while stack:
        pdg, pos, dirn, energy = stack.pop()
        while True:
            steps += 1
            if steps > cfg.max_internal_steps:
                truncated = True
                e_dep += energy
                break
            s_exit, axis = _distance_to_surface(pos, dirn)
            if pdg == PHOTON:
                mfp_cm = (cfg.pair_mfp_ref if energy > 2.0 * cutoff
                          else cfg.compton_mfp_ref) / rho
                s_int = rng.exponential(mfp_cm) / half
                if s_int >= s_exit:
                    outgoing.append(_exit_particle(pdg, pos, dirn, energy, s_exit, axis))
                    break
                pos = pos + dirn * s_int
                if energy > 2.0 * cutoff:
                    # pair production, equal split; both halves are above cutoff
                    stack.append((ELECTRON, pos.copy(), dirn.copy(), energy / 2.0))
                    pdg, energy = POSITRON, energy / 2.0
                    continue
                # Compton scatter: deposit a uniform fraction, small-angle redirect
                u = rng.random()
                e_dep += u * energy
                energy *= (1.0 - u)
                if energy <= cutoff:
                    e_dep += energy
                    break
                dirn = _deflect(dirn, rng)
            else:
                # charged particle: continuous loss + bremsstrahlung Poisson process
                s_int = rng.exponential(cfg.radiation_length_ref / rho) / half
                s = min(s_int, s_exit)
                loss = cfg.continuous_loss_rate_ref * rho * s * half
                if energy - loss <= cutoff:
                    e_dep += energy  # ranges out inside the cube
                    break
                energy -= loss
                e_dep += loss
                if s_int >= s_exit:
                    outgoing.append(_exit_particle(pdg, pos, dirn, energy, s_exit, axis))
                    break
                pos = pos + dirn * s_int
                u = rng.random()
                e_gamma = u * energy
                energy -= e_gamma
                if e_gamma > cutoff:
                    stack.append((PHOTON, pos.copy(), dirn.copy(), e_gamma))
                else:
                    e_dep += e_gamma
                if energy <= cutoff:
                    e_dep += energy
                    break
        if truncated:
            for _, _, _, rest_e in stack:
                e_dep += rest_e
            stack.clear()

    return Event(cond, tuple(outgoing), e_dep, truncated=truncated)


def simulate_batch(cfg: ToyPhysicsConfig, conds: list[Condition], seed: int) -> list[Event]:
    """Elementwise simulate_event with per-event derived RNG streams."""
    occurrence: dict[bytes, int] = {}
    events = []
    for cond in conds:
        fp = np.concatenate([
            [float(cond.incident.pdg), cond.incident.magnitude, cond.density],
            cond.incident.position, cond.incident.direction,
        ]).tobytes()
        k = occurrence.get(fp, 0)
        occurrence[fp] = k + 1
        events.append(simulate_event(cfg, cond, _event_rng(seed, k, cond)))
    return events


def generation_stats(events: list[Event]) -> dict:
    """Summary emitted alongside generated datasets."""
    n = len(events)
    if n == 0:
        return {"n_events": 0, "n_truncated": 0, "mean_multiplicity": 0.0,
                "mean_e_dep": 0.0}
    mult = [len(e.outgoing) for e in events]
    return {
        "n_events": n,
        "n_truncated": sum(1 for e in events if e.truncated),
        "mean_multiplicity": float(np.mean(mult)),
        "max_multiplicity": int(np.max(mult)),
        "mean_e_dep": float(np.mean([e.e_dep for e in events])),
    }
