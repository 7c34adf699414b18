import math

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from cascadeflow import cfm, dataset as ds
from cascadeflow.cfm import (BaseConfig, BaseMode, CouplingConfig,
                             CouplingKind, FlowModel, FlowTrainConfig,
                             cfm_loss, interpolate_batch, make_pairs,
                             ray_trace, train_flow)
from cascadeflow.net import DTYPE
from cascadeflow.oracle import ToyPhysicsConfig, simulate_batch

CFG = ToyPhysicsConfig()


def encoded_batch(n_events=64, seed=0, signature=None):
    conds = ds.sample_conditions(ds.PriorSpec(ds.PriorKind.GUN),
                                 n_events, seed)
    records = [ds.record_from_event(ev)
               for ev in simulate_batch(CFG, conds, seed)]
    encoded = ds.encode_events(records, CFG.e_cutoff, n_max=6)
    if signature is not None:
        encoded = [e for e in encoded if e.cardinalities == signature]
    n_pad = max((sum(e.cardinalities) for e in encoded), default=1)
    return ds.make_batch(encoded, n_pad=max(n_pad, 1))


def ray_march_oracle(pos, dirn, step=1e-2):
    """Independent exit-point finder: fixed-step march plus bisection."""
    s = 0.0
    while np.max(np.abs(pos + (s + step) * dirn)) <= 1.0:
        s += step
    lo, hi = s, s + step
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if np.max(np.abs(pos + mid * dirn)) <= 1.0:
            lo = mid
        else:
            hi = mid
    return pos + lo * dirn


class TestRayTrace:
    def test_axis_ray(self):
        out = ray_trace(np.array([-1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-12)

    def test_diagonal_ray_exits_side_face(self):
        d = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
        out = ray_trace(np.array([-1.0, 0.0, 0.0]), d)
        np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-12)

    def test_matches_ray_march(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            pos = rng.uniform(-0.9, 0.9, size=3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            got = ray_trace(pos, d)
            ref = ray_march_oracle(pos, d)
            assert np.max(np.abs(got - ref)) < 1e-9

    def test_tangential_ray_rejected(self):
        with pytest.raises(ValueError):
            ray_trace(np.array([1.0, 0.0, 0.0]), np.array([1e-13, 0.0, 0.0]))


class TestPoleDirections:
    def test_huge_kappa_collapses_to_pole(self):
        rng = np.random.default_rng(1)
        v = cfm._sample_pole_directions(10_000, 1e6, rng)
        angles = np.arccos(np.clip(v[:, 2], -1.0, 1.0))
        assert angles.max() < 1e-3

    def test_mean_cosine_matches_quadrature(self):
        kappa = cfm.KAPPA_ISOTROPIC
        rng = np.random.default_rng(2)
        n = 200_000
        v = cfm._sample_pole_directions(n, kappa, rng)
        cosines = v[:, 2]
        # E[cos(pi*|tanh(g/kappa)|)] over g ~ N(0,1), by 1-D quadrature
        expect, _ = integrate.quad(
            lambda g: math.cos(math.pi * abs(math.tanh(g / kappa)))
            * math.exp(-0.5 * g * g) / math.sqrt(2 * math.pi),
            -10.0, 10.0)
        sem = cosines.std(ddof=1) / math.sqrt(n)
        assert abs(cosines.mean() - expect) < 3.0 * sem

    def test_unit_vectors(self):
        v = cfm._sample_pole_directions(1000, 8.0, np.random.default_rng(3))
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)


class TestBaseSampling:
    def test_magnitude_range(self):
        batch = encoded_batch(200, seed=4)
        dep, parts = cfm.sample_base_arrays(batch.cond, batch.mask,
                                            BaseConfig(),
                                            np.random.default_rng(0))
        for i in range(len(batch.cond)):
            idx = np.flatnonzero(batch.mask[i])
            if len(idx) == 0:
                continue
            e_upper = batch.cond[i, 7]
            u = parts[i, idx, 6]
            assert np.all(u > 1.0) and np.all(u <= 1.0 + e_upper)

    def test_masked_slots_keep_sentinel(self):
        batch = encoded_batch(100, seed=5)
        _, parts = cfm.sample_base_arrays(batch.cond, batch.mask, BaseConfig(),
                                          np.random.default_rng(1))
        inactive = ~batch.mask
        assert np.all(parts[inactive][:, 2] == 1.0)
        assert np.all(parts[inactive][:, 6] == 0.0)

    def test_isotropic_mode_unit_spheres(self):
        batch = encoded_batch(100, seed=6)
        cfg = BaseConfig(mode=BaseMode.INDEPENDENT_GAUSSIAN_LOGIT)
        _, parts = cfm.sample_base_arrays(batch.cond, batch.mask, cfg,
                                          np.random.default_rng(2))
        active = parts[batch.mask]
        np.testing.assert_allclose(np.linalg.norm(active[:, 0:3], axis=1),
                                   1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(active[:, 3:6], axis=1),
                                   1.0, atol=1e-12)


class TestInterpolant:
    def setup_method(self):
        batch = encoded_batch(32, seed=7)
        rng = np.random.default_rng(0)
        self.pairs = make_pairs(batch, BaseConfig(), CouplingConfig(), rng)

    def test_endpoints(self):
        p = self.pairs
        for t_val, dep_ref, parts_ref in ((0.0, p.dep0, p.parts0),
                                          (1.0, p.dep1, p.parts1)):
            t = torch.full_like(p.t, t_val)
            dep_t, parts_t, _, _ = interpolate_batch(p.dep0, p.parts0,
                                                     p.dep1, p.parts1, t)
            assert torch.allclose(dep_t, dep_ref, atol=1e-12)
            active = p.mask[..., None].expand_as(parts_t)
            assert torch.allclose(parts_t[active], parts_ref[active],
                                  atol=1e-9)

    def test_velocity_matches_finite_difference(self):
        p = self.pairs
        t = torch.full_like(p.t, 0.37)
        h = 1e-6
        dep_t, parts_t, vdep, vparts = interpolate_batch(
            p.dep0, p.parts0, p.dep1, p.parts1, t)
        dep_u, parts_u, _, _ = interpolate_batch(
            p.dep0, p.parts0, p.dep1, p.parts1, t + h)
        dep_d, parts_d, _, _ = interpolate_batch(
            p.dep0, p.parts0, p.dep1, p.parts1, t - h)
        fd_dep = (dep_u - dep_d) / (2 * h)
        fd_parts = (parts_u - parts_d) / (2 * h)
        assert torch.allclose(vdep, fd_dep, atol=1e-5)
        active = p.mask[..., None].expand_as(vparts)
        assert torch.allclose(vparts[active], fd_parts[active], atol=1e-5)

    def test_sphere_blocks_stay_unit(self):
        p = self.pairs
        _, parts_t, _, _ = interpolate_batch(p.dep0, p.parts0, p.dep1,
                                             p.parts1,
                                             torch.full_like(p.t, 0.61))
        active = parts_t[p.mask]
        for sl in (slice(0, 3), slice(3, 6)):
            norms = active[:, sl].norm(dim=-1)
            assert torch.allclose(norms, torch.ones_like(norms), atol=1e-12)

    def test_time_samples_uniform(self):
        batch = encoded_batch(400, seed=8)
        ts = np.concatenate([
            make_pairs(batch, BaseConfig(), CouplingConfig(),
                       np.random.default_rng(s)).t.numpy()
            for s in range(5)])
        assert stats.kstest(ts, "uniform").pvalue > 0.001


class TestCoupling:
    def pick_signature_batch(self):
        # most common cardinality signature so the OT group is large
        batch_all = encoded_batch(600, seed=9)
        sigs, counts = np.unique(batch_all.cardinalities, axis=0,
                                 return_counts=True)
        sig = tuple(int(v) for v in sigs[counts.argmax()])
        return encoded_batch(600, seed=9, signature=sig)

    def total_cost(self, pairs):
        cost = cfm._pair_cost_matrix(pairs.dep0.numpy(), pairs.parts0.numpy(),
                                     pairs.dep1.numpy(), pairs.parts1.numpy(),
                                     pairs.mask.numpy())
        return float(np.trace(cost))

    def test_ot_cost_not_above_independent(self):
        batch = self.pick_signature_batch()
        indep = make_pairs(batch, BaseConfig(), CouplingConfig(),
                           np.random.default_rng(3))
        ot = make_pairs(batch, BaseConfig(),
                        CouplingConfig(kind=CouplingKind.OT),
                        np.random.default_rng(3))
        assert self.total_cost(ot) <= self.total_cost(indep) + 1e-9

    def test_ot_preserves_base_marginal(self):
        batch = self.pick_signature_batch()
        ot = make_pairs(batch, BaseConfig(),
                        CouplingConfig(kind=CouplingKind.OT),
                        np.random.default_rng(4))
        indep = make_pairs(batch, BaseConfig(), CouplingConfig(),
                           np.random.default_rng(4))
        # the coupling only permutes base draws within the group
        assert np.allclose(np.sort(ot.dep0.numpy()),
                           np.sort(indep.dep0.numpy()))


class TestLoss:
    def small_pairs(self, n=16, seed=10):
        batch = encoded_batch(n, seed=seed)
        return make_pairs(batch, BaseConfig(), CouplingConfig(),
                          np.random.default_rng(seed))

    def test_teacher_velocity_gives_zero_loss(self):
        p = self.small_pairs()

        class Teacher:
            def __call__(self, dep_t, parts_t, species, mask, cond, pdg,
                         t, project=True):
                _, _, vdep, vparts = interpolate_batch(p.dep0, p.parts0,
                                                       p.dep1, p.parts1, p.t)
                return vdep, vparts

        assert float(cfm_loss(Teacher(), p)) == 0.0

    def test_zero_model_matches_closed_form(self):
        p = self.small_pairs(seed=11)

        class Zero:
            def __call__(self, dep_t, parts_t, species, mask, cond, pdg,
                         t, project=True):
                return torch.zeros_like(dep_t), torch.zeros_like(parts_t)

        got = float(cfm_loss(Zero(), p))
        # closed form from the endpoints: squared geodesic speed per block
        total = float(((p.dep1 - p.dep0) ** 2).sum())
        mask = p.mask.numpy()
        for sl in (slice(0, 3), slice(3, 6)):
            dots = (p.parts0[..., sl] * p.parts1[..., sl]).sum(-1)
            theta = torch.acos(dots.clamp(-1.0, 1.0)).numpy()
            total += float((theta[mask] ** 2).sum())
        du = (p.parts1[..., 6] - p.parts0[..., 6]).numpy()
        total += float((du[mask] ** 2).sum())
        expect = total / (len(p) + 7.0 * mask.sum())
        assert got == pytest.approx(expect, rel=1e-9)

    def test_masked_slot_perturbation_leaves_loss_unchanged(self):
        torch.manual_seed(12)
        model = FlowModel(hidden=16, layers=2, heads=2)
        p = self.small_pairs(seed=12)
        assert not p.mask.all()
        with torch.no_grad():
            a = float(cfm_loss(model, p))
            p.parts1[~p.mask] += 37.0
            p.parts0[~p.mask] -= 11.0
            b = float(cfm_loss(model, p))
        assert a == pytest.approx(b, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        from test_net import fd_check
        torch.manual_seed(13)
        model = FlowModel(hidden=8, layers=1, heads=2)
        p = self.small_pairs(n=4, seed=13)
        fd_check(lambda: cfm_loss(model, p), list(model.named_parameters()),
                 coords_per_tensor=2)


class TestTraining:
    def test_loss_decreases_and_rerun_is_deterministic(self):
        batch = encoded_batch(300, seed=14)
        cfg = FlowTrainConfig(lr=1e-3, epochs=5, batch_size=64, seed=0)

        def run():
            torch.manual_seed(14)
            model = FlowModel(hidden=16, layers=2, heads=2)
            return train_flow(model, batch, BaseConfig(), CouplingConfig(),
                              cfg)

        t1 = run()
        assert t1[-1]["train_loss"] < t1[0]["train_loss"]
        assert run() == t1
