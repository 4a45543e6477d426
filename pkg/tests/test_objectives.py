"""Loss terms: per-case decomposition, sign invariants, reduction identities
and the exact-enumeration oracle."""

import numpy as np
import pytest

from svrnn import model as M
from svrnn.autodiff import constant
from svrnn.data import EntitySeq, SequenceBatch, SynthSpec, mask_labels, synth_generate
from svrnn.distributions import CategoricalParams, GaussianParams
from svrnn.gradcheck import tiny_spec
from svrnn.model import ModelSpec, StepBeliefs, StepSamples
from svrnn.objectives import step_loss, sequence_loss, trace_csv, unlabeled_loss_exact
from svrnn.rng import NoiseSource

LOG4 = np.log(4.0)


def handmade_beliefs(B=2, dim_y=4, dim_z=3, dim_x=3, same_z=False, same_y=False):
    rng = np.random.default_rng(0)
    z_post = GaussianParams(constant(rng.normal(size=(B, dim_z))), constant(rng.normal(size=(B, dim_z)) * 0.2))
    z_prior = z_post if same_z else GaussianParams(
        constant(rng.normal(size=(B, dim_z))), constant(rng.normal(size=(B, dim_z)) * 0.2)
    )
    y_post = CategoricalParams(constant(rng.normal(size=(B, dim_y))))
    y_prior = y_post if same_y else CategoricalParams(constant(rng.normal(size=(B, dim_y))))
    decoded = GaussianParams(constant(rng.normal(size=(B, dim_x))), constant(np.zeros((B, dim_x))))
    return StepBeliefs(
        label_prior=y_prior, label_posterior=y_post,
        latent_prior=z_prior, latent_posterior=z_post, decoded=decoded,
    )


def samples_for(y_idx, dim_y):
    y_idx = np.asarray(y_idx)
    B = len(y_idx)
    obs = (y_idx >= 0).astype(np.float64).reshape(B, 1)
    return StepSamples(
        y_input=constant(np.zeros((B, dim_y))), z=constant(np.zeros((B, 1))), y_observed=obs
    )


class TestStepLoss:
    def spec(self, dim_y=4):
        return ModelSpec(variant="flat", dim_x=(3,), dim_y=dim_y, dim_z=3, hidden_width=4)

    def test_shared_latent_parameters_zero_kl(self):
        b = handmade_beliefs(same_z=True)
        sl = step_loss(self.spec(), b, samples_for([0, 1], 4), np.zeros((2, 3)), np.array([0, 1]))
        assert sl.kl_z.item() == pytest.approx(0.0, abs=1e-12)

    def test_labeled_uniform_networks_sup_is_two_log4(self):
        B, dim_y = 2, 4
        uniform = CategoricalParams(constant(np.zeros((B, dim_y))))
        b = handmade_beliefs(B=B, dim_y=dim_y)
        b.label_prior = uniform
        b.label_posterior = uniform
        sl = step_loss(self.spec(), b, samples_for([2, 0], dim_y), np.zeros((B, 3)), np.array([2, 0]))
        assert sl.sup_y.item() == pytest.approx(2 * LOG4, abs=1e-12)
        assert sl.label_const.item() == pytest.approx(LOG4, abs=1e-12)

    def test_unlabeled_equal_networks_zero_label_kl(self):
        b = handmade_beliefs(same_y=True)
        sl = step_loss(self.spec(), b, samples_for([-1, -1], 4), np.zeros((2, 3)), np.array([-1, -1]))
        assert sl.kl_y.item() == pytest.approx(0.0, abs=1e-12)

    def test_inapplicable_fields_are_exactly_zero(self):
        b = handmade_beliefs()
        labeled = step_loss(self.spec(), b, samples_for([1, 3], 4), np.zeros((2, 3)), np.array([1, 3]))
        assert labeled.kl_y.item() == 0.0
        unlabeled = step_loss(self.spec(), b, samples_for([-1, -1], 4), np.zeros((2, 3)), np.array([-1, -1]))
        assert unlabeled.sup_y.item() == 0.0
        assert unlabeled.label_const.item() == 0.0

    def test_mask_mismatch_is_rejected(self):
        b = handmade_beliefs()
        with pytest.raises(ValueError, match="mask"):
            step_loss(self.spec(), b, samples_for([1, -1], 4), np.zeros((2, 3)), np.array([1, 1]))

    def test_parent_labels_on_flat_model_rejected(self):
        b = handmade_beliefs()
        with pytest.raises(ValueError, match="hierarchical"):
            step_loss(self.spec(), b, samples_for([1, 1], 4), np.zeros((2, 3)),
                      np.array([1, 1]), c_idx=np.array([0, 0]))

    def test_sign_invariants_on_random_models(self):
        # 1000 random draws through the real cell
        spec = tiny_spec("hierarchical")
        rng = np.random.default_rng(44)
        for trial in range(1000):
            params, _ = M.init_model(spec, seed=trial)
            B = 2
            x = rng.normal(size=(B, 3))
            y_idx = rng.integers(-1, spec.dim_y, size=B)
            c_idx = rng.integers(-1, spec.dim_c, size=B)
            st = M.init_state(spec, B)
            beliefs, samples, _ = M.cell_step(
                spec, params, [x], [(y_idx, c_idx)], st, NoiseSource(trial), "train", t=0
            )
            sl = step_loss(spec, beliefs[0], samples[0], x, y_idx, c_idx)
            for f in ("kl_z", "kl_y", "kl_c", "sup_y", "sup_c", "label_const"):
                assert getattr(sl, f).item() >= -1e-9, f"{f} negative at trial {trial}"


class TestSequenceLoss:
    def synth(self, n=4, T=5, mask=0.5):
        ss = SynthSpec(
            n_modes=2, dim_x=3,
            transition=[[0.8, 0.2], [0.3, 0.7]],
            dynamics_a=np.stack([np.eye(3) * 0.9, np.eye(3) * 0.5]),
            dynamics_b=np.stack([np.ones(3) * 0.3, -np.ones(3) * 0.3]),
            noise_scale=0.1, length_range=(T, T),
        )
        ds, _ = synth_generate(ss, n, seed=5)
        return mask_labels(ds, mask, seed=6) if mask else ds

    def spec(self):
        return ModelSpec(variant="flat", dim_x=(3,), dim_y=2, dim_z=2, hidden_width=4)

    def test_empty_batch_is_zero(self):
        loss, trace = sequence_loss(self.spec(), M.init_model(self.spec(), 0)[0], [], NoiseSource(0))
        assert loss.item() == 0.0 and trace == []

    def test_empty_sequence_is_zero(self):
        b = SequenceBatch("empty", [EntitySeq("human", "human", np.zeros((0, 3)))])
        loss, _ = sequence_loss(self.spec(), M.init_model(self.spec(), 0)[0], [b], NoiseSource(0))
        assert loss.item() == 0.0

    def test_fully_labeled_trace_has_zero_label_kl(self):
        spec = self.spec()
        params, _ = M.init_model(spec, 0)
        loss, trace = sequence_loss(spec, params, self.synth(mask=0.0), NoiseSource(1), "train")
        assert trace and all(r.kl_y == 0.0 for r in trace)
        assert all(r.case == "L" for r in trace)

    def test_alpha_scales_supervised_terms(self):
        ds = self.synth(mask=0.0)
        base = dict(variant="flat", dim_x=(3,), dim_y=2, dim_z=2, hidden_width=4)
        s1 = ModelSpec(alpha=1.0, **base)
        s2 = ModelSpec(alpha=10.0, **base)
        p, _ = M.init_model(s1, 0)
        l1, t1 = sequence_loss(s1, p, ds, NoiseSource(1), "train")
        l2, _ = sequence_loss(s2, p, ds, NoiseSource(1), "train")
        sup = sum(r.sup_y + r.sup_c for r in t1)
        assert l2.item() - l1.item() == pytest.approx(9.0 * sup, rel=1e-9)

    def test_permutation_equivariance(self):
        spec = self.spec()
        params, _ = M.init_model(spec, 0)
        ds = self.synth()
        a, _ = sequence_loss(spec, params, ds, NoiseSource(2), "eval")
        b, _ = sequence_loss(spec, params, list(reversed(ds)), NoiseSource(2), "eval")
        assert a.item() == pytest.approx(b.item(), abs=1e-12)

    def test_mixed_lengths_group_and_average(self):
        spec = self.spec()
        params, _ = M.init_model(spec, 0)
        short = self.synth(n=2, T=3)
        long = self.synth(n=2, T=6)
        both, _ = sequence_loss(spec, params, short + long, NoiseSource(3), "eval")
        a, _ = sequence_loss(spec, params, short, NoiseSource(3), "eval")
        b, _ = sequence_loss(spec, params, long, NoiseSource(3), "eval")
        assert both.item() == pytest.approx((2 * a.item() + 2 * b.item()) / 4, abs=1e-12)

    def test_hierarchical_all_labeled_has_no_label_kl(self):
        spec = tiny_spec("hierarchical")
        params, _ = M.init_model(spec, 0)
        rng = np.random.default_rng(8)
        ents = [EntitySeq("human", "human", rng.normal(size=(4, 3)),
                          y=rng.integers(0, 2, size=4), c=rng.integers(0, 2, size=4))]
        batch = SequenceBatch("h", ents).validate()
        _, trace = sequence_loss(spec, params, [batch], NoiseSource(4), "train")
        assert all(r.kl_y == 0.0 and r.kl_c == 0.0 for r in trace)
        assert all(r.case == "LyLc" for r in trace)

    def test_multi_sample_bound_averages_independent_passes(self):
        spec = self.spec()
        params, _ = M.init_model(spec, 0)
        ds = self.synth(n=2, T=4)
        noise = NoiseSource(7)
        avg, _ = sequence_loss(spec, params, ds, noise, "train", key=(1,), n_z_samples=3)
        parts = [
            sequence_loss(spec, params, ds, noise, "train", key=(1, "zs", s))[0].item()
            for s in range(3)
        ]
        assert avg.item() == pytest.approx(np.mean(parts), rel=1e-12)

    def test_trace_csv_shape(self):
        spec = self.spec()
        params, _ = M.init_model(spec, 0)
        _, trace = sequence_loss(spec, params, self.synth(n=1, T=3), NoiseSource(1), "train")
        csv = trace_csv(trace)
        lines = csv.strip().split("\n")
        assert lines[0] == "t,entity,case,recon,kl_z,kl_y,kl_c,sup_y,sup_c,label_const"
        assert len(lines) == 1 + len(trace)

    def test_training_reduces_loss_on_synthetic_set(self):
        # 500 optimizer steps cut the loss by at least 20%
        from svrnn.trainer import TrainConfig, train

        ss = SynthSpec(
            n_modes=2, dim_x=3,
            transition=[[0.85, 0.15], [0.2, 0.8]],
            dynamics_a=np.stack([np.eye(3) * 0.9, np.eye(3) * 0.6]),
            dynamics_b=np.stack([np.ones(3) * 0.4, -np.ones(3) * 0.4]),
            noise_scale=0.1, length_range=(20, 20),
        )
        ds, _ = synth_generate(ss, 20, seed=9)
        ds = mask_labels(ds, 0.25, seed=10)
        spec = ModelSpec(variant="flat", dim_x=(3,), dim_y=2, dim_z=4, hidden_width=16)
        cfg = TrainConfig(epochs=100, batch_size=4, seed=0)  # 5 steps/epoch
        ckpt, log = train(spec, cfg, ds)
        assert len(log.rows) == 500
        assert log.rows[-1].loss < 0.8 * log.rows[0].loss


class TestExactOracle:
    def unlabeled_batch(self, T=3, dim_x=3, seed=2):
        rng = np.random.default_rng(seed)
        return SequenceBatch(
            "u", [EntitySeq("human", "human", rng.normal(size=(T, dim_x)))]
        ).validate()

    def test_single_class_equals_sequence_loss(self):
        spec = ModelSpec(variant="flat", dim_x=(3,), dim_y=1, dim_z=2, hidden_width=4,
                         dropout_rate=0.0)
        params, _ = M.init_model(spec, 7)
        b = self.unlabeled_batch()
        noise = NoiseSource(3)
        exact = unlabeled_loss_exact(spec, params, [b], noise)
        loss, _ = sequence_loss(spec, params, [b], noise, "eval")
        assert exact == pytest.approx(loss.item(), abs=1e-9)

    def test_independent_of_gumbel_noise(self):
        spec = ModelSpec(variant="flat", dim_x=(3,), dim_y=2, dim_z=2, hidden_width=4,
                         dropout_rate=0.0)
        params, _ = M.init_model(spec, 7)
        b = self.unlabeled_batch()
        a = unlabeled_loss_exact(spec, params, [b], NoiseSource(0, gumbel_seed=1))
        c = unlabeled_loss_exact(spec, params, [b], NoiseSource(0, gumbel_seed=999))
        assert a == c

    def test_low_temperature_sampling_converges_to_exact(self):
        spec = ModelSpec(variant="flat", dim_x=(3,), dim_y=3, dim_z=2, hidden_width=4,
                         temperature=1e-3, dropout_rate=0.0)
        params, _ = M.init_model(spec, 5)
        b = self.unlabeled_batch()
        exact = unlabeled_loss_exact(spec, params, [b], NoiseSource(21))
        vals = []
        for k in range(2000):
            n = NoiseSource(21, gumbel_seed=50_000 + k)
            vals.append(sequence_loss(spec, params, [b], n, "eval")[0].item())
        vals = np.asarray(vals)
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - exact) < 3 * se + 1e-9

    def test_enumeration_guards(self):
        spec = ModelSpec(variant="flat", dim_x=(3,), dim_y=17, dim_z=2, hidden_width=4)
        params, _ = M.init_model(spec, 0)
        with pytest.raises(ValueError, match="16"):
            unlabeled_loss_exact(spec, params, [self.unlabeled_batch()], NoiseSource(0))
        spec2 = ModelSpec(variant="flat", dim_x=(3,), dim_y=4, dim_z=2, hidden_width=4)
        params2, _ = M.init_model(spec2, 0)
        long = self.unlabeled_batch(T=12)
        with pytest.raises(ValueError, match="paths"):
            unlabeled_loss_exact(spec2, params2, [long], NoiseSource(0))

    def test_rejects_observed_labels(self):
        spec = ModelSpec(variant="flat", dim_x=(3,), dim_y=2, dim_z=2, hidden_width=4)
        params, _ = M.init_model(spec, 0)
        rng = np.random.default_rng(1)
        b = SequenceBatch(
            "l", [EntitySeq("human", "human", rng.normal(size=(2, 3)), y=np.array([0, 1]))]
        ).validate()
        with pytest.raises(ValueError, match="unobserved"):
            unlabeled_loss_exact(spec, params, [b], NoiseSource(0))
