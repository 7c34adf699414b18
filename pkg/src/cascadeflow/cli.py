"""Command-line entry point.

One YAML config drives every stage: dataset generation, cardinality and flow
training, per-prior evaluation, solver Pareto sweeps, composition rollouts,
and exact-likelihood reports.  A single global seed fans out to named
per-stage sub-seeds so stages can be rerun independently; every command is
reproducible byte-for-byte from (config, seed) except wall-clock timing
columns.  Outputs land under a run directory together with a manifest JSON
recording the config hash, package versions, and derived seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import zlib
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from . import compose, metrics
from .cardinality import (CardinalityModel, CardinalityTrainConfig,
                          pdg_roles_tensor, train_cardinality)
from .cfm import (BaseConfig, CouplingConfig, CouplingKind, FlowModel,
                  FlowTrainConfig, KAPPA_ISOTROPIC, KAPPA_PHYSICAL,
                  train_flow)
from .dataset import (PriorKind, PriorSpec, condition_vector, encode_events,
                      make_batch, read_events, record_from_event,
                      sample_conditions, suggest_n_max, write_events,
                      EncodeStats)
from .flow import SolverConfig, SolverMethod, log_likelihood_batch, sample_events
from .net import DTYPE, load_model, save_model
from .oracle import ToyPhysicsConfig, simulate_batch, generation_stats


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema

_SCHEMA = {
    "seed": int,
    "run_dir": str,
    "oracle": {
        "radiation_length_ref": float, "pair_mfp_ref": float,
        "compton_mfp_ref": float, "continuous_loss_rate_ref": float,
        "e_cutoff": float, "max_internal_steps": int, "cube_half_edge": float,
    },
    "dataset": {"n_train": int, "path": str, "n_max": (int, type(None))},
    "model": {"hidden": int, "layers": int, "heads": int},
    "base": {"kappa": float},
    "coupling": {"kind": str, "group_size": int},
    "train_card": {"lr": float, "epochs": int, "batch_size": int,
                   "checkpoint": str},
    "train_flow": {"lr": float, "epochs": int, "batch_size": int,
                   "checkpoint": str},
    "solver": {"method": str, "steps": int},
    "metrics": {"n_eval": int, "k": int},
    "pareto": {"steps_grid": list, "repeats": int, "n_eval": int},
    "rollout": {"schedules": list, "n_rollouts": int, "n_rounds": int,
                "k": int},
    "nll": {"n_events": int},
}

_DEFAULTS = {
    "seed": 0,
    "run_dir": "runs/default",
    "oracle": {},
    "dataset": {"n_train": 100_000, "path": "data/train.jsonl", "n_max": None},
    "model": {"hidden": 48, "layers": 2, "heads": 4},
    "base": {"kappa": KAPPA_PHYSICAL},
    "coupling": {"kind": "independent", "group_size": 256},
    "train_card": {"lr": 1e-3, "epochs": 8, "batch_size": 256,
                   "checkpoint": "checkpoints/card.ckpt"},
    "train_flow": {"lr": 5e-4, "epochs": 6, "batch_size": 256,
                   "checkpoint": "checkpoints/flow.ckpt"},
    "solver": {"method": "midpoint", "steps": 4},
    "metrics": {"n_eval": 2000, "k": 10},
    "pareto": {"steps_grid": [2, 4, 10, 20, 40], "repeats": 5, "n_eval": 500},
    "rollout": {"schedules": ["high_low", "low_high", "alternating",
                              "random10"],
                "n_rollouts": 400, "n_rounds": 10, "k": 10},
    "nll": {"n_events": 200},
}


def _validate(raw: dict, schema: dict, path: str = "") -> None:
    for key, val in raw.items():
        where = f"{path}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key: {where}")
        rule = schema[key]
        if isinstance(rule, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be a mapping")
            _validate(val, rule, where + ".")
        else:
            kinds = rule if isinstance(rule, tuple) else (rule,)
            if float in kinds:
                kinds = kinds + (int,)
            if not isinstance(val, kinds) or isinstance(val, bool):
                raise ConfigError(f"{where} has wrong type "
                                  f"{type(val).__name__}")


class RunConfig:
    """Validated config with defaults; see _SCHEMA for the key tree."""

    def __init__(self, raw: dict | None = None):
        raw = raw or {}
        _validate(raw, _SCHEMA)
        self.data = {}
        for key, default in _DEFAULTS.items():
            if isinstance(default, dict):
                merged = dict(default)
                merged.update(raw.get(key, {}))
                self.data[key] = merged
            else:
                self.data[key] = raw.get(key, default)

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        raw = {}
        if path is not None:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        for item in overrides:
            key, _, val = item.partition("=")
            if not _:
                raise ConfigError(f"override '{item}' must be key=value")
            node = raw
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = yaml.safe_load(val)
        return cls(raw)

    def __getitem__(self, key):
        return self.data[key]

    def sub_seed(self, stage: str) -> int:
        seq = np.random.SeedSequence([self.data["seed"],
                                      zlib.crc32(stage.encode())])
        return int(seq.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFF)

    def physics(self) -> ToyPhysicsConfig:
        return ToyPhysicsConfig(**self.data["oracle"])

    def base_cfg(self, kappa: float | None = None) -> BaseConfig:
        return BaseConfig(kappa=self.data["base"]["kappa"] if kappa is None
                          else kappa,
                          e_cutoff=self.physics().e_cutoff)

    def coupling_cfg(self) -> CouplingConfig:
        return CouplingConfig(kind=CouplingKind(self.data["coupling"]["kind"]),
                              group_size=self.data["coupling"]["group_size"])

    def solver_cfg(self, method=None, steps=None) -> SolverConfig:
        return SolverConfig(
            method=SolverMethod(method or self.data["solver"]["method"]),
            steps=steps or self.data["solver"]["steps"])

    def run_path(self, rel: str) -> Path:
        p = Path(self.data["run_dir"]) / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_manifest(self, command: str) -> None:
        canon = json.dumps(self.data, sort_keys=True)
        manifest = {
            "command": command,
            "config": self.data,
            "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
            "seed": self.data["seed"],
            "sub_seeds": {s: self.sub_seed(s)
                          for s in ("data", "train", "eval", "pareto",
                                    "rollout", "nll")},
            "versions": {"numpy": np.__version__, "torch": torch.__version__},
        }
        with open(self.run_path(f"manifest_{command}.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v
                        for v in row])


# ---------------------------------------------------------------------------
# model (re)construction

def _new_card_model(cfg: RunConfig, n_max: int) -> CardinalityModel:
    m = cfg["model"]
    return CardinalityModel(n_max=n_max, hidden=m["hidden"],
                            layers=m["layers"], heads=m["heads"])


def _new_flow_model(cfg: RunConfig) -> FlowModel:
    m = cfg["model"]
    return FlowModel(hidden=m["hidden"], layers=m["layers"], heads=m["heads"])


def load_card_model(path) -> CardinalityModel:
    from .net import load_checkpoint
    _, meta = load_checkpoint(path)
    model = CardinalityModel(n_max=meta["n_max"], hidden=meta["hidden"],
                             layers=meta["layers"], heads=meta["heads"])
    load_model(path, model)
    model.eval()
    return model


def load_flow_model(path) -> tuple[FlowModel, dict]:
    from .net import load_checkpoint
    _, meta = load_checkpoint(path)
    model = FlowModel(hidden=meta["hidden"], layers=meta["layers"],
                      heads=meta["heads"])
    load_model(path, model)
    model.eval()
    return model, meta


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise click.ClickException(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# evaluation helpers shared by eval/pareto/nll

def all_priors() -> list[PriorSpec]:
    return [PriorSpec(kind) for kind in PriorKind]


def _records_to_features(records, e_cutoff: float):
    feats = metrics.summarize_all(records)
    conds = np.stack([condition_vector(r, e_cutoff) for r in records])
    return feats, conds


def evaluate_sources(card_model, flow_model, prior: PriorSpec,
                     cfg: RunConfig, seed: int):
    """Per-prior metric rows for model / phys-base / iso-base vs the oracle.

    All three sources are sampled with the same seed (common random
    numbers): they share the sampled cardinalities and base draws, so the
    paired per-part differences in ``gaps`` isolate what actually differs
    between the sources instead of resampling noise.

    Returns (rows, gaps) where gaps maps "phys_minus_model" and
    "iso_minus_phys" to (mmd difference, sem of the paired per-part
    differences).
    """
    n_eval = cfg["metrics"]["n_eval"]
    k = cfg["metrics"]["k"]
    phys = cfg.physics()
    solver = cfg.solver_cfg()
    conds = sample_conditions(prior, n_eval, seed)
    oracle_recs = [record_from_event(ev)
                   for ev in simulate_batch(phys, conds, seed + 1)]
    ref_feats, ref_conds = _records_to_features(oracle_recs, phys.e_cutoff)
    sources = {
        "model": sample_events(card_model, flow_model, conds,
                               cfg.base_cfg(), solver, seed + 2),
        "phys_base": sample_events(card_model, None, conds,
                                   cfg.base_cfg(KAPPA_PHYSICAL), solver,
                                   seed + 2, integrate_field=False),
        "iso_base": sample_events(card_model, None, conds,
                                  cfg.base_cfg(KAPPA_ISOTROPIC), solver,
                                  seed + 2, integrate_field=False),
    }
    rows = []
    feats_by_source = {}
    for name, recs in sources.items():
        feats, conds_vec = _records_to_features(recs, phys.e_cutoff)
        feats_by_source[name] = feats
        m = metrics.subsample_report(metrics.mmd, feats, ref_feats, k=k)
        e = metrics.subsample_report(metrics.energy_distance, feats,
                                     ref_feats, k=k)
        auc, scores, labels = metrics.classifier_auc(
            feats, ref_feats, conds_vec, ref_conds, seed=seed,
            return_heldout=True)
        parts = []
        n_te = len(scores)
        part = n_te // k
        for i in range(k):
            sl = slice(i * part, (i + 1) * part)
            s, l = scores[sl], labels[sl]
            if 0 < l.sum() < len(l):
                parts.append(metrics.auc_from_scores(s[l == 1], s[l == 0]))
        auc_sem = float(np.std(parts, ddof=1) / np.sqrt(len(parts)))
        rows.append([prior.kind.value, name, m.value, m.sem, e.value, e.sem,
                     float(auc), auc_sem])
    gaps = {
        "phys_minus_model": _paired_mmd_gap(feats_by_source["phys_base"],
                                            feats_by_source["model"],
                                            ref_feats, k),
        "iso_minus_phys": _paired_mmd_gap(feats_by_source["iso_base"],
                                          feats_by_source["phys_base"],
                                          ref_feats, k),
    }
    return rows, gaps


def _paired_mmd_gap(feats_a, feats_b, ref_feats, k: int):
    """mmd(a, ref) - mmd(b, ref) with the sem of paired per-part diffs."""
    gap = metrics.mmd(feats_a, ref_feats) - metrics.mmd(feats_b, ref_feats)
    part = len(ref_feats) // k
    diffs = []
    for i in range(k):
        sl = slice(i * part, (i + 1) * part)
        diffs.append(metrics.mmd(feats_a[sl], ref_feats[sl])
                     - metrics.mmd(feats_b[sl], ref_feats[sl]))
    return float(gap), float(np.std(diffs, ddof=1) / np.sqrt(k))


# ---------------------------------------------------------------------------
# commands

@click.group()
def main():
    """Neural Markov-kernel emulator for cascades in a material cube."""


def _config_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="YAML config file.")(fn)
    fn = click.option("--set", "overrides", multiple=True,
                      help="Override a config key, e.g. --set seed=3 or "
                           "--set dataset.n_train=1000.")(fn)
    return fn


@main.command("gen-data")
@_config_options
def gen_data(config_path, overrides):
    """Generate a training dataset from the built-in mechanistic oracle."""
    cfg = RunConfig.load(config_path, overrides)
    cfg.write_manifest("gen-data")
    phys = cfg.physics()
    seed = cfg.sub_seed("data")
    n = cfg["dataset"]["n_train"]
    conds = sample_conditions(PriorSpec(PriorKind.GUN), n, seed)
    events = simulate_batch(phys, conds, seed)
    records = [record_from_event(ev) for ev in events]
    out = cfg.run_path(cfg["dataset"]["path"])
    write_events(records, out)
    stats = generation_stats(events)
    stats["seed"] = seed
    if records:
        stats["suggested_n_max"] = suggest_n_max(records)
    with open(out.with_suffix(".stats.json"), "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"wrote {len(records)} events to {out}")


def _load_dataset(cfg: RunConfig):
    path = _require(cfg.run_path(cfg["dataset"]["path"]), "dataset")
    records = read_events(path)
    n_max = cfg["dataset"]["n_max"]
    if n_max is None:
        n_max = suggest_n_max(records)
    return records, n_max


@main.command("train-card")
@_config_options
def train_card(config_path, overrides):
    """Train the per-species count model."""
    cfg = RunConfig.load(config_path, overrides)
    cfg.write_manifest("train-card")
    records, n_max = _load_dataset(cfg)
    phys = cfg.physics()
    cond = np.stack([condition_vector(r, phys.e_cutoff) for r in records])
    pdg_in = np.array([r.pdg_in for r in records])
    counts = np.array([[min(c, n_max) for c in r.cardinalities()]
                       for r in records])
    torch.manual_seed(cfg.sub_seed("train"))  # reproducible initialization
    model = _new_card_model(cfg, n_max)
    tc = cfg["train_card"]
    trace = train_cardinality(
        model, cond, pdg_in, counts,
        CardinalityTrainConfig(lr=tc["lr"], epochs=tc["epochs"],
                               batch_size=tc["batch_size"],
                               seed=cfg.sub_seed("train")),
        log_fn=lambda e: click.echo(f"epoch {e['epoch']}: "
                                    f"train {e['train_loss']:.4f}"))
    meta = {"n_max": n_max, **cfg["model"]}
    save_model(cfg.run_path(tc["checkpoint"]), model, meta)
    _write_csv(cfg.run_path("loss_card.csv"),
               ["epoch", "train_loss", "val_loss"],
               [[t["epoch"], t["train_loss"], t.get("val_loss", "")]
                for t in trace])
    click.echo(f"saved {tc['checkpoint']} (n_max={n_max})")


@main.command("train-flow")
@_config_options
def train_flow_cmd(config_path, overrides):
    """Train the flow-matching velocity field."""
    cfg = RunConfig.load(config_path, overrides)
    cfg.write_manifest("train-flow")
    records, n_max = _load_dataset(cfg)
    phys = cfg.physics()
    stats = EncodeStats()
    encoded = encode_events(records, phys.e_cutoff, n_max, stats)
    n_pad = max(sum(e.cardinalities) for e in encoded)
    batch = make_batch(encoded, n_pad)
    click.echo(f"encoded {stats.n_encoded} events "
               f"({stats.n_rejected_cutoff} cutoff-rejected, "
               f"{stats.n_dropped_overflow} overflow-dropped)")
    torch.manual_seed(cfg.sub_seed("train"))  # reproducible initialization
    model = _new_flow_model(cfg)
    tf = cfg["train_flow"]
    trace = train_flow(
        model, batch, cfg.base_cfg(), cfg.coupling_cfg(),
        FlowTrainConfig(lr=tf["lr"], epochs=tf["epochs"],
                        batch_size=tf["batch_size"],
                        seed=cfg.sub_seed("train")),
        log_fn=lambda e: click.echo(f"epoch {e['epoch']}: "
                                    f"train {e['train_loss']:.4f}"))
    meta = {**cfg["model"], "kappa": cfg["base"]["kappa"],
            "coupling": cfg["coupling"]["kind"], "n_max": n_max}
    save_model(cfg.run_path(tf["checkpoint"]), model, meta)
    _write_csv(cfg.run_path("loss_flow.csv"),
               ["epoch", "train_loss", "val_loss"],
               [[t["epoch"], t["train_loss"], t.get("val_loss", "")]
                for t in trace])
    click.echo(f"saved {tf['checkpoint']}")


def _load_models(cfg: RunConfig):
    card = load_card_model(_require(cfg.run_path(cfg["train_card"]["checkpoint"]),
                                    "cardinality checkpoint"))
    flow_model, meta = load_flow_model(
        _require(cfg.run_path(cfg["train_flow"]["checkpoint"]),
                 "flow checkpoint"))
    return card, flow_model, meta


@main.command("eval")
@_config_options
def eval_cmd(config_path, overrides):
    """Per-prior two-sample metrics for the model and both base references."""
    cfg = RunConfig.load(config_path, overrides)
    cfg.write_manifest("eval")
    card, flow_model, _ = _load_models(cfg)
    seed = cfg.sub_seed("eval")
    rows, gap_rows = [], []
    for i, prior in enumerate(all_priors()):
        prior_rows, gaps = evaluate_sources(card, flow_model, prior, cfg,
                                            seed + 100 * i)
        rows.extend(prior_rows)
        for name, (gap, sem) in gaps.items():
            gap_rows.append([prior.kind.value, name, gap, sem])
        click.echo(f"{prior.kind.value}: "
                   + ", ".join(f"{r[1]} mmd={r[2]:.4f}" for r in prior_rows))
    _write_csv(cfg.run_path("eval.csv"),
               ["prior", "source", "mmd", "mmd_sem", "ed", "ed_sem",
                "auc", "auc_sem"], rows)
    _write_csv(cfg.run_path("eval_gaps.csv"),
               ["prior", "comparison", "mmd_gap", "mmd_gap_sem"], gap_rows)
    click.echo(f"wrote {cfg.run_path('eval.csv')}")


@main.command("pareto")
@_config_options
def pareto_cmd(config_path, overrides):
    """Solver-method x step-count sweep of per-event cost and sample quality."""
    cfg = RunConfig.load(config_path, overrides)
    cfg.write_manifest("pareto")
    card, flow_model, _ = _load_models(cfg)
    phys = cfg.physics()
    seed = cfg.sub_seed("pareto")
    n_eval = cfg["pareto"]["n_eval"]
    repeats = cfg["pareto"]["repeats"]
    conds = sample_conditions(PriorSpec(PriorKind.GUN), n_eval, seed)
    ref = [record_from_event(ev)
           for ev in simulate_batch(phys, conds, seed + 1)]
    ref_feats = metrics.summarize_all(ref)
    rows = []
    for method in SolverMethod:
        for steps in cfg["pareto"]["steps_grid"]:
            solver = cfg.solver_cfg(method=method.value, steps=steps)
            times, mmds = [], []
            # one warm-up call per cell, discarded from timing
            sample_events(card, flow_model, conds[:32], cfg.base_cfg(),
                          solver, seed)
            for rep in range(repeats):
                t0 = time.process_time()
                recs = sample_events(card, flow_model, conds, cfg.base_cfg(),
                                     solver, seed + 10 + rep)
                times.append((time.process_time() - t0) * 1e3 / n_eval)
                mmds.append(metrics.mmd(metrics.summarize_all(recs),
                                        ref_feats))
            # min CPU time over repeats: contention noise is additive
            rows.append([method.value, steps,
                         float(min(times)), float(np.std(times, ddof=1)),
                         float(np.mean(mmds)), float(np.std(mmds, ddof=1))])
            click.echo(f"{method.value:8s} steps={steps:3d} "
                       f"{rows[-1][2]:.3f} ms/event mmd={rows[-1][4]:.4f}")
    _write_csv(cfg.run_path("pareto.csv"),
               ["method", "steps", "ms_per_event", "ms_per_event_std",
                "mmd", "mmd_std"], rows)
    click.echo(f"wrote {cfg.run_path('pareto.csv')}")


@main.command("rollout")
@_config_options
def rollout_cmd(config_path, overrides):
    """Zero-shot composition rollouts over density schedules."""
    cfg = RunConfig.load(config_path, overrides)
    cfg.write_manifest("rollout")
    names = cfg["rollout"]["schedules"]
    if not names:
        click.echo("no schedules configured; nothing to do")
        return
    card, flow_model, _ = _load_models(cfg)
    phys = cfg.physics()
    seed = cfg.sub_seed("rollout")
    n_rounds = cfg["rollout"]["n_rounds"]
    n_roll = cfg["rollout"]["n_rollouts"]
    k = cfg["rollout"]["k"]
    k_oracle = compose.oracle_kernel(phys)
    k_model = compose.learned_kernel(card, flow_model, cfg.base_cfg(),
                                     cfg.solver_cfg())
    k_base = compose.base_kernel(card, cfg.base_cfg())
    prior = PriorSpec(PriorKind.GUN)
    initials = [c.incident for c in sample_conditions(prior, n_roll, seed)]
    rows = []
    for name in names:
        if name not in compose.BY_NAME:
            raise click.ClickException(f"unknown schedule '{name}'")
        maker = compose.BY_NAME[name]
        sched = (maker(seed) if name == "random10" else maker(n_rounds))
        pairs = [("oracle_floor", k_oracle, k_oracle, seed + 1, seed + 2),
                 ("model", k_model, k_oracle, seed + 3, seed + 4),
                 ("base", k_base, k_oracle, seed + 5, seed + 6)]
        for label, ka, kb, sa, sb in pairs:
            entry = compose.rollout_mmd(ka, kb, initials, sched,
                                        phys.e_cutoff, sa, sb, k=k)
            rows.append([name, label, entry.value, entry.sem])
            click.echo(f"{name:12s} {label:12s} "
                       f"mmd={entry.value:.4f} +- {entry.sem:.4f}")
        states = compose.rollouts(k_oracle, initials, sched, phys.e_cutoff,
                                  seed + 7)
        compose.write_trace_csv(cfg.run_path(f"traces/{name}_oracle.csv"),
                                states, sched)
    _write_csv(cfg.run_path("rollout.csv"),
               ["schedule", "pair", "mmd", "mmd_sem"], rows)
    click.echo(f"wrote {cfg.run_path('rollout.csv')}")


@main.command("nll")
@_config_options
def nll_cmd(config_path, overrides):
    """Exact per-event negative log-likelihoods under the trained flow."""
    cfg = RunConfig.load(config_path, overrides)
    cfg.write_manifest("nll")
    card, flow_model, _ = _load_models(cfg)
    phys = cfg.physics()
    seed = cfg.sub_seed("nll")
    n = cfg["nll"]["n_events"]
    solver = cfg.solver_cfg()
    conds = sample_conditions(PriorSpec(PriorKind.GUN), n, seed)
    sources = {
        "model": sample_events(card, flow_model, conds, cfg.base_cfg(),
                               solver, seed + 1),
        "oracle": [record_from_event(ev)
                   for ev in simulate_batch(phys, conds, seed + 2)],
        "base": sample_events(card, None, conds, cfg.base_cfg(), solver,
                              seed + 3, integrate_field=False),
    }
    rows = []
    for label, recs in sources.items():
        nlls = nll_of_records(flow_model, recs, phys.e_cutoff, solver,
                              cfg.base_cfg())
        rows.extend([label, i, float(v)] for i, v in enumerate(nlls))
        finite = [v for v in nlls if np.isfinite(v)]
        click.echo(f"{label:8s} mean NLL {np.mean(finite):.3f} "
                   f"({len(finite)}/{len(nlls)} encodable)")
    _write_csv(cfg.run_path("nll.csv"), ["source", "event", "nll"], rows)
    click.echo(f"wrote {cfg.run_path('nll.csv')}")


def nll_of_records(flow_model, records, e_cutoff: float,
                   solver: SolverConfig, base_cfg: BaseConfig) -> np.ndarray:
    """Negative log-likelihood of each record's continuous coordinates.

    Events are grouped by cardinality signature so the augmented ODE runs in
    batches; records that cannot be encoded (sub-cutoff energies) get NaN.
    """
    from .dataset import encode_event, EncodeRejected
    encoded, keep = [], []
    for i, rec in enumerate(records):
        try:
            encoded.append(encode_event(rec, e_cutoff))
            keep.append(i)
        except EncodeRejected:
            continue
    out = np.full(len(records), np.nan)
    groups: dict[tuple, list[int]] = {}
    for j, enc in enumerate(encoded):
        groups.setdefault(enc.cardinalities, []).append(j)
    for card_sig, idx in groups.items():
        coords = np.stack([encoded[j].coords for j in idx])
        cond = np.stack([encoded[j].condition_vector for j in idx])
        pdg = np.array([encoded[j].pdg_in for j in idx])
        ll = log_likelihood_batch(flow_model, coords, cond, pdg, card_sig,
                                  solver, base_cfg)
        for j, v in zip(idx, ll):
            out[keep[j]] = -float(v)
    return out


if __name__ == "__main__":
    main()
