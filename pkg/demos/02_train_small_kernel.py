"""Train a small two-factor kernel and sample from it.

The kernel factorizes into an autoregressive count model (how many
electrons/positrons/photons leave the cube) and a Riemannian flow-matching
model over the continuous coordinates (deposition fraction in logit space,
exit positions and directions on spheres, log energy).  This demo trains
both at toy scale; expect a few minutes on one CPU core.
"""

import numpy as np
import torch

from cascadeflow import dataset as ds
from cascadeflow.cardinality import (CardinalityModel, CardinalityTrainConfig,
                                     train_cardinality)
from cascadeflow.cfm import (BaseConfig, CouplingConfig, FlowModel,
                             FlowTrainConfig, train_flow)
from cascadeflow.flow import SolverConfig, sample_events
from cascadeflow.oracle import ToyPhysicsConfig, simulate_batch

phys = ToyPhysicsConfig()

print("simulating 4000 training events ...")
conds = ds.sample_conditions(ds.PriorSpec(ds.PriorKind.GUN), 4000, seed=0)
records = [ds.record_from_event(ev) for ev in simulate_batch(phys, conds, 0)]
n_max = ds.suggest_n_max(records)
encoded = ds.encode_events(records, phys.e_cutoff, n_max)
batch = ds.make_batch(encoded, max(sum(e.cardinalities) for e in encoded))
print(f"encoded {len(encoded)} events, n_max = {n_max}")

torch.manual_seed(0)
card = CardinalityModel(n_max=n_max, hidden=32, layers=2, heads=2)
train_cardinality(
    card, batch.cond, batch.pdg_in, np.minimum(batch.cardinalities, n_max),
    CardinalityTrainConfig(epochs=3),
    log_fn=lambda e: print(f"  card epoch {e['epoch']}: "
                           f"{e['train_loss']:.3f}"))

flow = FlowModel(hidden=32, layers=2, heads=2)
train_flow(
    flow, batch, BaseConfig(), CouplingConfig(),
    FlowTrainConfig(epochs=3),
    log_fn=lambda e: print(f"  flow epoch {e['epoch']}: "
                           f"{e['train_loss']:.3f}"))

# sample the learned kernel on fresh conditions and compare means
test_conds = ds.sample_conditions(ds.PriorSpec(ds.PriorKind.GUN), 500, 9)
samples = sample_events(card, flow, test_conds, BaseConfig(),
                        SolverConfig(), seed=9)
oracle = [ds.record_from_event(ev)
          for ev in simulate_batch(phys, test_conds, 9)]
print(f"\nmean deposition   model {np.mean([r.e_dep for r in samples]):8.2f}"
      f"  oracle {np.mean([r.e_dep for r in oracle]):8.2f}")
print(f"mean multiplicity model "
      f"{np.mean([len(r.outgoing) for r in samples]):8.2f}"
      f"  oracle {np.mean([len(r.outgoing) for r in oracle]):8.2f}")
