"""Event serialization, condition priors, and manifold-coordinate encoding.

Events are stored as JSON lines (one object per line) so they stay
inspectable at desk scale.  Encoding maps an event into

* a condition vector (density, incident sphere position, incident direction,
  log-magnitude coordinate u_in = ln(E_in / E_cutoff)),
* a cardinality vector [n_e-, n_e+, n_gamma], and
* a point on the product manifold  LogitInterval(0,1) x (S^2 x S^2 x R)^n
  holding the deposition fraction logit and, per outgoing particle grouped by
  species, its sphere position, momentum direction, and u = ln(E / E_cutoff).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from . import manifold as mf
from . import oracle
from .oracle import (ELECTRON, POSITRON, PHOTON, SPECIES, Condition, Event,
                     ParticleState, GUN_ENERGY_RANGE, GUN_DENSITY_RANGE)

SCHEMA_VERSION = 1
SPECIES_ORDER = (ELECTRON, POSITRON, PHOTON)
SPECIES_INDEX = {ELECTRON: 0, POSITRON: 1, PHOTON: 2}
COND_DIM = 8


class DatasetError(ValueError):
    pass


class EncodeRejected(DatasetError):
    """Record cannot be encoded (sub-cutoff particle or cardinality overflow)."""


# ---------------------------------------------------------------------------
# records and JSONL round trip

@dataclass
class OutgoingRecord:
    pdg: int
    pos: list
    dir: list
    e: float


@dataclass
class EventRecord:
    schema_version: int
    pdg_in: int
    pos_in: list
    dir_in: list
    e_in: float
    density: float
    e_dep: float
    outgoing: list  # of OutgoingRecord

    def cardinalities(self) -> tuple[int, int, int]:
        counts = [0, 0, 0]
        for p in self.outgoing:
            counts[SPECIES_INDEX[p.pdg]] += 1
        return tuple(counts)


def record_from_event(ev: Event) -> EventRecord:
    inc = ev.condition.incident
    return EventRecord(
        schema_version=SCHEMA_VERSION,
        pdg_in=inc.pdg,
        pos_in=list(map(float, inc.position)),
        dir_in=list(map(float, inc.direction)),
        e_in=float(inc.magnitude),
        density=float(ev.condition.density),
        e_dep=float(ev.e_dep),
        outgoing=[OutgoingRecord(p.pdg, list(map(float, p.position)),
                                 list(map(float, p.direction)), float(p.magnitude))
                  for p in ev.outgoing],
    )


def condition_from_record(rec: EventRecord) -> Condition:
    return Condition(
        ParticleState(rec.pdg_in, np.array(rec.pos_in), np.array(rec.dir_in), rec.e_in),
        rec.density,
    )


def write_events(events: list[EventRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in events:
            fh.write(json.dumps(asdict(rec)) + "\n")


def read_events(path) -> list[EventRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip() == "":
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
            version = d.get("schema_version")
            if version != SCHEMA_VERSION:
                raise DatasetError(
                    f"{path}: line {lineno}: schema version {version} unsupported "
                    f"(expected {SCHEMA_VERSION})")
            try:
                outgoing = [OutgoingRecord(**o) for o in d.pop("outgoing")]
                out.append(EventRecord(outgoing=outgoing, **d))
            except TypeError as exc:
                raise DatasetError(f"{path}: line {lineno}: bad record fields: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# condition priors

class PriorKind(str, Enum):
    GUN = "gun"
    PHI_SWEEP = "phi_sweep"
    THETA_SWEEP = "theta_sweep"
    ENERGY_SWEEP = "energy_sweep"
    INCIDENCE_SWEEP = "incidence_sweep"
    SLIDE_SWEEP = "slide_sweep"
    DENSITY_SWEEP = "density_sweep"


ALL_PRIOR_KINDS = tuple(PriorKind)


def default_template() -> Condition:
    """Electron at the -x face center, normal incidence, 150 MeV, rho = 3."""
    return Condition(
        ParticleState(ELECTRON, np.array([-1.0, 0.0, 0.0]),
                      np.array([1.0, 0.0, 0.0]), 150.0),
        3.0,
    )


_DEFAULT_RANGES = {
    PriorKind.PHI_SWEEP: (-math.pi, math.pi),
    PriorKind.THETA_SWEEP: (0.2, math.pi - 0.2),
    PriorKind.ENERGY_SWEEP: GUN_ENERGY_RANGE,
    PriorKind.INCIDENCE_SWEEP: (0.0, 1.2),
    PriorKind.SLIDE_SWEEP: (-0.9, 0.9),
    PriorKind.DENSITY_SWEEP: GUN_DENSITY_RANGE,
}


@dataclass(frozen=True)
class PriorSpec:
    kind: PriorKind
    template: Condition = field(default_factory=default_template)
    sweep_range: tuple | None = None

    def range(self) -> tuple:
        if self.sweep_range is not None:
            return self.sweep_range
        return _DEFAULT_RANGES.get(self.kind, (0.0, 0.0))


def _sample_gun(rng: np.random.Generator) -> Condition:
    pdg = int(rng.choice(SPECIES_ORDER))
    face = int(rng.integers(6))
    axis, sign = face % 3, (1.0 if face < 3 else -1.0)
    pos = rng.uniform(-1.0, 1.0, size=3)
    pos[axis] = sign
    inward = np.zeros(3)
    inward[axis] = -sign
    while True:
        d = rng.normal(size=3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            continue
        d /= n
        if float(d @ inward) < 0:
            d = -d
        if float(d @ inward) > 1e-6:
            break
    e = rng.uniform(*GUN_ENERGY_RANGE)
    rho = rng.uniform(*GUN_DENSITY_RANGE)
    return Condition(ParticleState(pdg, pos, d, e), rho)


def sample_condition(prior: PriorSpec, rng) -> Condition:
    """Draw one condition from the prior (gun or a 1-D sweep sub-manifold)."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    kind = prior.kind
    if kind == PriorKind.GUN:
        return _sample_gun(rng)

    tpl = prior.template
    lo, hi = prior.range()
    s = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    inc = tpl.incident

    if kind in (PriorKind.PHI_SWEEP, PriorKind.THETA_SWEEP):
        # rotate the incident position on the surrounding sphere; the particle
        # always aims at the cube center
        u0 = mf.cube_to_sphere(inc.position)
        theta0 = math.acos(float(np.clip(u0[2], -1, 1)))
        phi0 = math.atan2(u0[1], u0[0])
        theta, phi = (theta0, s) if kind == PriorKind.PHI_SWEEP else (s, phi0)
        u = np.array([math.sin(theta) * math.cos(phi),
                      math.sin(theta) * math.sin(phi),
                      math.cos(theta)])
        pos = mf.sphere_to_cube(u)
        return Condition(ParticleState(inc.pdg, pos, -u, inc.magnitude), tpl.density)

    if kind == PriorKind.ENERGY_SWEEP:
        return Condition(ParticleState(inc.pdg, inc.position, inc.direction, s),
                         tpl.density)

    if kind == PriorKind.DENSITY_SWEEP:
        return Condition(inc, s)

    if kind == PriorKind.INCIDENCE_SWEEP:
        # fixed position, entry direction tilted by zenith angle s off the
        # inward face normal, in the plane spanned by the normal and +y-like axis
        inward = -inc.outward_normal()
        axis = inc.face_axis()
        t1 = np.zeros(3)
        t1[(axis + 1) % 3] = 1.0
        d = math.cos(s) * inward + math.sin(s) * t1
        return Condition(ParticleState(inc.pdg, inc.position, d / np.linalg.norm(d),
                                       inc.magnitude), tpl.density)

    if kind == PriorKind.SLIDE_SWEEP:
        # fixed entry direction; position slides along one in-face axis, with
        # offsets in [-1, 1] reaching the face edge midpoints
        axis = inc.face_axis()
        pos = inc.position.copy()
        pos[(axis + 1) % 3] = s
        pos[(axis + 2) % 3] = 0.0
        return Condition(ParticleState(inc.pdg, pos, inc.direction, inc.magnitude),
                         tpl.density)

    raise DatasetError(f"unknown prior kind {kind}")


def sample_conditions(prior: PriorSpec, n: int, seed: int) -> list[Condition]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), 0xC04D]))
    return [sample_condition(prior, rng) for _ in range(n)]


# ---------------------------------------------------------------------------
# manifold encoding

def event_manifold_spec(n_total: int) -> mf.ManifoldSpec:
    factors = [mf.LogitInterval(0.0, 1.0)]
    for _ in range(n_total):
        factors.extend([mf.Sphere2(), mf.Sphere2(), mf.Euclidean(1)])
    return mf.ManifoldSpec(tuple(factors))


def condition_vector(rec_or_cond, e_cutoff: float) -> np.ndarray:
    """(density, sphere position of entry point, entry direction, u_in)."""
    if isinstance(rec_or_cond, Condition):
        inc = rec_or_cond.incident
        density = rec_or_cond.density
        pos, dirn, e_in = inc.position, inc.direction, inc.magnitude
    else:
        rec = rec_or_cond
        density = rec.density
        pos, dirn, e_in = np.array(rec.pos_in), np.array(rec.dir_in), rec.e_in
    u_in = math.log(e_in / e_cutoff)
    return np.concatenate([[density], mf.cube_to_sphere(pos), dirn, [u_in]])


@dataclass
class EncodedEvent:
    condition_vector: np.ndarray   # (COND_DIM,)
    pdg_in: int
    cardinalities: tuple           # (n_e-, n_e+, n_gamma)
    coords: np.ndarray             # point coords on event_manifold_spec(sum(n))
    e_in: float
    density: float

    @property
    def spec(self) -> mf.ManifoldSpec:
        return event_manifold_spec(sum(self.cardinalities))

    def point(self) -> mf.ProductPoint:
        return mf.ProductPoint(self.spec, self.coords)


def encode_event(rec: EventRecord, e_cutoff: float,
                 clamp_stats: mf.ClampStats | None = None) -> EncodedEvent:
    """Map a record to (condition, cardinalities, manifold coordinates).

    Outgoing particles are grouped by species in the fixed order and sorted
    within species by descending magnitude (a serialization convention only).
    Raises EncodeRejected if a particle is at or below the cutoff.
    """
    for p in rec.outgoing:
        if p.e <= e_cutoff:
            raise EncodeRejected(f"particle energy {p.e} <= cutoff {e_cutoff}")
    cards = rec.cardinalities()
    coords = [mf.logit_encode(rec.e_dep / rec.e_in, 0.0, 1.0, clamp_stats)]
    for pdg in SPECIES_ORDER:
        group = sorted((p for p in rec.outgoing if p.pdg == pdg),
                       key=lambda p: -p.e)
        for p in group:
            coords.extend(mf.cube_to_sphere(np.array(p.pos)))
            d = np.asarray(p.dir, dtype=float)
            coords.extend(d / np.linalg.norm(d))
            coords.append(math.log(p.e / e_cutoff))
    return EncodedEvent(
        condition_vector=condition_vector(rec, e_cutoff),
        pdg_in=rec.pdg_in,
        cardinalities=cards,
        coords=np.array(coords, dtype=float),
        e_in=rec.e_in,
        density=rec.density,
    )


def decode_sample(coords: np.ndarray, cardinalities: tuple, cond: Condition,
                  e_cutoff: float) -> EventRecord:
    """Inverse of encode_event for a manifold point under a given condition."""
    coords = np.asarray(coords, dtype=float)
    n_total = int(sum(cardinalities))
    if coords.shape != (1 + 7 * n_total,):
        raise DatasetError(f"coords shape {coords.shape} inconsistent with "
                           f"cardinalities {cardinalities}")
    e_in = cond.incident.magnitude
    e_dep = mf.logit_decode(float(coords[0]), 0.0, 1.0) * e_in
    outgoing = []
    off = 1
    for pdg, n in zip(SPECIES_ORDER, cardinalities):
        for _ in range(n):
            pos_s = coords[off:off + 3]
            pos_s = pos_s / np.linalg.norm(pos_s)
            dirn = coords[off + 3:off + 6]
            dirn = dirn / np.linalg.norm(dirn)
            u = float(coords[off + 6])
            outgoing.append(OutgoingRecord(
                pdg, list(map(float, mf.sphere_to_cube(pos_s))),
                list(map(float, dirn)), float(e_cutoff * math.exp(u))))
            off += 7
    inc = cond.incident
    return EventRecord(SCHEMA_VERSION, inc.pdg, list(map(float, inc.position)),
                       list(map(float, inc.direction)), float(e_in),
                       float(cond.density), float(e_dep), outgoing)


# ---------------------------------------------------------------------------
# batching

# masked-slot sentinel: north pole positions/directions, zero magnitude coord
_SENTINEL = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class Batch:
    """Fixed-layout padded arrays: 1 deposition slot + n_pad particle slots."""

    cond: np.ndarray        # (B, COND_DIM)
    pdg_in: np.ndarray      # (B,) pdg codes
    dep: np.ndarray         # (B,) deposition logit coordinate
    particles: np.ndarray   # (B, n_pad, 7)
    species: np.ndarray     # (B, n_pad) in {0: none, 1: e-, 2: e+, 3: gamma}
    mask: np.ndarray        # (B, n_pad) bool, True on active slots
    cardinalities: np.ndarray  # (B, 3)

    def __len__(self):
        return self.cond.shape[0]

    @property
    def n_pad(self) -> int:
        return self.particles.shape[1]


def make_batch(encoded: list[EncodedEvent], n_pad: int) -> Batch:
    B = len(encoded)
    cond = np.zeros((B, COND_DIM))
    pdg_in = np.zeros(B, dtype=int)
    dep = np.zeros(B)
    particles = np.tile(_SENTINEL, (B, n_pad, 1))
    species = np.zeros((B, n_pad), dtype=int)
    mask = np.zeros((B, n_pad), dtype=bool)
    cards = np.zeros((B, 3), dtype=int)
    for i, enc in enumerate(encoded):
        n_total = sum(enc.cardinalities)
        if n_total > n_pad:
            raise DatasetError(
                f"event {i}: {n_total} outgoing particles exceed padding width {n_pad}")
        cond[i] = enc.condition_vector
        pdg_in[i] = enc.pdg_in
        dep[i] = enc.coords[0]
        cards[i] = enc.cardinalities
        slot = 0
        for s_idx, n in enumerate(enc.cardinalities):
            for _ in range(n):
                particles[i, slot] = enc.coords[1 + 7 * slot: 8 + 7 * slot]
                species[i, slot] = s_idx + 1
                mask[i, slot] = True
                slot += 1
    return Batch(cond, pdg_in, dep, particles, species, mask, cards)


def suggest_n_max(records: list[EventRecord], quantile: float = 99.9) -> int:
    """Per-species cardinality cap: quantile of per-species counts, rounded up."""
    counts = np.array([rec.cardinalities() for rec in records])
    if len(counts) == 0:
        return 1
    return int(math.ceil(float(np.percentile(counts, quantile))))


@dataclass
class EncodeStats:
    n_encoded: int = 0
    n_rejected_cutoff: int = 0
    n_dropped_overflow: int = 0
    clamp: mf.ClampStats = field(default_factory=mf.ClampStats)


def encode_events(records: list[EventRecord], e_cutoff: float, n_max: int,
                  stats: EncodeStats | None = None) -> list[EncodedEvent]:
    """Encode all records, dropping cutoff violations and cardinality overflows."""
    stats = stats if stats is not None else EncodeStats()
    out = []
    for rec in records:
        try:
            enc = encode_event(rec, e_cutoff, stats.clamp)
        except EncodeRejected:
            stats.n_rejected_cutoff += 1
            continue
        if max(enc.cardinalities) > n_max:
            stats.n_dropped_overflow += 1
            continue
        out.append(enc)
        stats.n_encoded += 1
    return out
