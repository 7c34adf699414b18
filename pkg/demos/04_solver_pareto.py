"""Sweep ODE solver method and step count: cost versus sample quality.

Sampling integrates the learned velocity field from t=0 to t=1 with a
projection integrator; Euler, midpoint, and RK4 run 1, 2, and 4 network
calls per step, so per-event cost scales with steps x stages while quality
saturates after a handful of steps.  Run demo 02's training code first or
accept the (deliberately poor) untrained model used here.
"""

import time

import numpy as np
import torch

from cascadeflow import dataset as ds, metrics
from cascadeflow.cardinality import CardinalityModel
from cascadeflow.cfm import BaseConfig, FlowModel
from cascadeflow.flow import SolverConfig, SolverMethod, sample_events
from cascadeflow.oracle import ToyPhysicsConfig, simulate_batch

phys = ToyPhysicsConfig()
torch.manual_seed(0)
card = CardinalityModel(n_max=6, hidden=32, layers=2, heads=2)
flow = FlowModel(hidden=32, layers=2, heads=2)

conds = ds.sample_conditions(ds.PriorSpec(ds.PriorKind.GUN), 300, seed=0)
ref = metrics.summarize_all([ds.record_from_event(ev)
                             for ev in simulate_batch(phys, conds, 1)])

print(f"{'method':10s} {'steps':>5s} {'ms/event':>9s} {'mmd':>8s}")
for method in SolverMethod:
    for steps in (2, 8, 32):
        solver = SolverConfig(method, steps)
        t0 = time.monotonic()
        recs = sample_events(card, flow, conds, BaseConfig(), solver, seed=2)
        ms = (time.monotonic() - t0) * 1e3 / len(conds)
        quality = metrics.mmd(metrics.summarize_all(recs), ref)
        print(f"{method.value:10s} {steps:5d} {ms:9.3f} {quality:8.4f}")
