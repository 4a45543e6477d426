"""Model cell: initialization, network heads, recurrence, entity aggregation,
variant reduction laws and end-to-end gradients."""

import numpy as np
import pytest

from svrnn import model as M
from svrnn import objectives as O
from svrnn.autodiff import Tensor, backprop, constant
from svrnn.data import SynthSpec, mask_labels, synth_generate
from svrnn.gradcheck import end_to_end_check, tiny_batches, tiny_spec
from svrnn.model import ModelSpec, SpecError, cad120_spec, kinect_spec
from svrnn.rng import NoiseSource


def flat_spec(**kw):
    base = dict(variant="flat", dim_x=(3,), dim_y=2, dim_z=2, hidden_width=4, dropout_rate=0.1)
    base.update(kw)
    return ModelSpec(**base)


def synth(n=3, T=5, seed=1, dim_x=3):
    ss = SynthSpec(
        n_modes=2, dim_x=dim_x,
        transition=[[0.8, 0.2], [0.3, 0.7]],
        dynamics_a=np.stack([np.eye(dim_x) * 0.9, np.eye(dim_x) * 0.5]),
        dynamics_b=np.stack([np.ones(dim_x) * 0.3, -np.ones(dim_x) * 0.3]),
        noise_scale=0.1, length_range=(T, T),
    )
    ds, _ = synth_generate(ss, n, seed=seed)
    return mask_labels(ds, 0.5, seed=seed + 1)


class SpyNoise(NoiseSource):
    def __init__(self, seed):
        super().__init__(seed)
        self.gumbel_calls = 0
        self.gaussian_calls = 0

    def uniform_open(self, shape, *key):
        self.gumbel_calls += 1
        return super().uniform_open(shape, *key)

    def gaussian(self, shape, *key):
        self.gaussian_calls += 1
        return super().gaussian(shape, *key)


class TestSpec:
    def test_narrow_preset(self):
        s = cad120_spec(dim_x=(10,), dim_y=10)
        assert (s.hidden_width, s.dim_z, s.recurrent_layers) == (256, 256, 1)
        assert s.decoder_width == 512

    def test_wide_preset(self):
        s = kinect_spec(dim_x=(60,), dim_y=10)
        assert (s.hidden_width, s.dim_z, s.recurrent_layers) == (516, 516, 3)
        assert s.decoder_width == 1032
        defs = M._layer_defs(s)
        assert defs["human/dec/h1/W_h"][0] == (1032, 1032)
        assert defs["human/prior_z/mu/W_h"][0] == (516, 516)

    def test_invalid_specs_list_violations(self):
        with pytest.raises(SpecError) as e:
            ModelSpec(variant="flat", dim_x=(3,), dim_y=0, dim_z=2, hidden_width=4,
                      temperature=-1.0)
        msg = str(e.value)
        assert "dim_y" in msg and "temperature" in msg

    def test_flat_forbids_parent_classes(self):
        with pytest.raises(SpecError, match="dim_c"):
            ModelSpec(variant="flat", dim_x=(3,), dim_y=2, dim_z=2, hidden_width=4, dim_c=3)

    def test_default_alpha_is_total_feature_dim(self):
        s = ModelSpec(variant="multi-entity", dim_x=(6, 4, 4), dim_y=2, dim_z=2,
                      hidden_width=4, n_objects=2)
        assert s.resolved_alpha == 14.0

    def test_roundtrip_via_dict(self):
        s = tiny_spec("hierarchical")
        assert ModelSpec.from_dict(s.to_dict()) == s


class TestInit:
    def test_same_seed_is_bit_identical(self):
        a, _ = M.init_model(flat_spec(), seed=3)
        b, _ = M.init_model(flat_spec(), seed=3)
        assert set(a) == set(b)
        for k in a:
            assert a[k].data.tobytes() == b[k].data.tobytes()

    def test_different_seed_differs(self):
        a, _ = M.init_model(flat_spec(), seed=3)
        b, _ = M.init_model(flat_spec(), seed=4)
        assert any(not np.array_equal(a[k].data, b[k].data) for k in a)

    def test_initial_state_is_zero(self):
        _, st = M.init_model(flat_spec(recurrent_layers=2), seed=0)
        assert len(st.layers[0]) == 2
        for h, c in st.layers[0]:
            assert not h.data.any() and not c.data.any()

    def test_forget_gate_bias_starts_open(self):
        params, _ = M.init_model(flat_spec(), seed=0)
        b = params["human/rnn/l0/b"].data
        H = 4
        assert np.array_equal(b[H : 2 * H], np.ones(H))
        assert not b[:H].any() and not b[2 * H :].any()

    def test_object_entities_share_one_parameter_group(self):
        one = ModelSpec(variant="multi-entity", dim_x=(3, 2), dim_y=2, dim_z=2,
                        hidden_width=4, n_objects=1)
        two = ModelSpec(variant="multi-entity", dim_x=(3, 2, 2), dim_y=2, dim_z=2,
                        hidden_width=4, n_objects=2)
        p1, _ = M.init_model(one, seed=0)
        p2, _ = M.init_model(two, seed=0)
        assert set(p1) == set(p2)  # extra object adds no parameters
        groups = {k.split("/")[0] for k in p2}
        assert groups == {"human", "object"}


class TestNetworks:
    def test_zero_output_layer_gives_uniform_prior(self):
        spec = flat_spec(dim_y=5)
        params, _ = M.init_model(spec, seed=0)
        params["human/prior_y/out/W_h"].data[:] = 0.0
        params["human/prior_y/out/b"].data[:] = 0.0
        st = M.init_state(spec, 1)
        out = M.label_prior(spec, params, 0, [("h", st.top_h(0))])
        assert np.allclose(out.probs().data, 0.2)
        assert out.logits.data.shape == (1, 5)

    def test_posterior_depends_on_observation(self):
        spec = flat_spec()
        params, _ = M.init_model(spec, seed=1)
        st = M.init_state(spec, 1)
        h_blocks = [("h", st.top_h(0))]

        def logits(xv):
            xl = M.lift_input(spec, params, 0, constant(xv), None, None, "eval", ())
            return M.label_posterior(spec, params, 0, xl, h_blocks).logits.data

        a = logits(np.ones((1, 3)))
        b = logits(np.ones((1, 3)) * -0.5)
        assert not np.allclose(a, b)
        assert np.array_equal(a, logits(np.ones((1, 3))))  # purity

    def test_latent_heads_have_latent_dim(self):
        spec = flat_spec(dim_z=7)
        params, _ = M.init_model(spec, seed=2)
        st = M.init_state(spec, 1)
        h_blocks = [("h", st.top_h(0))]
        y = constant(np.array([[1.0, 0.0]]))
        prior = M.latent_prior(spec, params, 0, y, h_blocks)
        assert prior.mu.data.shape == (1, 7) and prior.log_sigma.data.shape == (1, 7)
        xl = M.lift_input(spec, params, 0, constant(np.ones((1, 3))), None, None, "eval", ())
        post = M.latent_posterior(spec, params, 0, xl, y, h_blocks)
        assert not np.allclose(post.mu.data, prior.mu.data)

    def test_decoder_shapes_and_z_gradient(self):
        spec = flat_spec()
        params, _ = M.init_model(spec, seed=3)
        y = constant(np.array([[0.0, 1.0]]))
        z = Tensor(np.array([[0.2, -0.4]]))
        xl = M.lift_input(spec, params, 0, constant(np.zeros((1, 3))), None, None, "eval", ())
        decoded = M.decode(spec, params, 0, xl, y, z)
        assert decoded.mu.data.shape == (1, 3)
        from svrnn.autodiff import reduce_sum

        backprop(reduce_sum(decoded.mu))
        assert z.grad is not None and np.abs(z.grad).sum() > 0

    def test_observation_log_sigma_is_bounded(self):
        spec = flat_spec()
        params, _ = M.init_model(spec, seed=4)
        for k in params:
            if "/dec/ls/" in k:
                params[k].data[:] = 50.0
        y = constant(np.array([[1.0, 0.0]]))
        z = constant(np.zeros((1, 2)))
        xl = M.lift_input(spec, params, 0, constant(np.ones((1, 3))), None, None, "eval", ())
        decoded = M.decode(spec, params, 0, xl, y, z)
        assert np.all(np.abs(decoded.log_sigma.data) <= M.OBS_LOG_SIGMA_BOUND + 1e-12)


class TestRecurrence:
    def test_zero_parameters_keep_state_at_zero(self):
        spec = flat_spec()
        params, _ = M.init_model(spec, seed=0)
        for p in params.values():
            p.data[:] = 0.0
        st = M.init_state(spec, 2)
        layers = M.recurrence(
            spec, params, 0,
            constant(np.ones((2, 4))), constant(np.ones((2, 2))),
            constant(np.ones((2, 2))), None, st.layers[0],
        )
        for h, c in layers:
            assert not h.data.any() and not c.data.any()

    def test_layer_count_matches_spec(self):
        spec = flat_spec(recurrent_layers=3)
        params, _ = M.init_model(spec, seed=0)
        st = M.init_state(spec, 1)
        layers = M.recurrence(
            spec, params, 0,
            constant(np.zeros((1, 4))), constant(np.zeros((1, 2))),
            constant(np.zeros((1, 2))), None, st.layers[0],
        )
        assert len(layers) == 3

    def test_three_step_unrolled_gradient(self):
        # recurrence-only graph unrolled over three steps vs finite differences
        from svrnn.autodiff import Graph, grad_check, mul, reduce_sum

        spec = flat_spec(dropout_rate=0.0)
        params, _ = M.init_model(spec, seed=6)
        rnn_params = {k: p.data for k, p in params.items() if "/rnn/" in k}
        rng = np.random.default_rng(0)
        xs = [rng.normal(size=(2, 4)) for _ in range(3)]

        def build(P, I):
            layers = M.init_state(spec, 2).layers[0]
            for t in range(3):
                layers = M.recurrence(
                    spec, P, 0, constant(xs[t]),
                    constant(np.zeros((2, 2))), constant(np.zeros((2, 2))),
                    None, layers,
                )
            h = layers[-1][0]
            return {"out": reduce_sum(mul(h, h))}

        assert grad_check(Graph(rnn_params, build), "out") < 1e-5

    def test_label_prior_gradient_reaches_recurrent_state(self):
        # finite-difference probe on h
        spec = flat_spec()
        params, _ = M.init_model(spec, seed=1)
        h = np.zeros((1, 4))
        h[0, 1] = 0.3

        def logits_at(hv):
            return M.label_prior(spec, params, 0, [("h", constant(hv))]).logits.data

        eps = 1e-5
        hp, hm = h.copy(), h.copy()
        hp[0, 1] += eps
        hm[0, 1] -= eps
        fd = (logits_at(hp) - logits_at(hm)) / (2 * eps)
        assert np.abs(fd).max() > 1e-3


class TestEntityAggregate:
    def me_spec(self, n_objects):
        dims = (3,) + (2,) * n_objects
        return ModelSpec(variant="multi-entity", dim_x=dims, dim_y=2, dim_z=2,
                         hidden_width=4, n_objects=n_objects)

    def test_single_object_sum_is_identity(self):
        spec = self.me_spec(1)
        st = M.init_state(spec, 1)
        xs = [constant(np.ones((1, 3))), constant(np.full((1, 2), 0.5))]
        agg = M.entity_aggregate(spec, xs, st)
        assert np.array_equal(agg[0][0].data, xs[1].data)
        assert np.array_equal(agg[1][0].data, xs[0].data)

    def test_object_order_does_not_matter(self):
        spec = self.me_spec(3)
        st = M.init_state(spec, 1)
        rng = np.random.default_rng(0)
        objs = [rng.normal(size=(1, 2)) for _ in range(3)]
        x0 = rng.normal(size=(1, 3))
        a = M.entity_aggregate(spec, [constant(x0)] + [constant(o) for o in objs], st)
        b = M.entity_aggregate(spec, [constant(x0)] + [constant(o) for o in reversed(objs)], st)
        assert np.allclose(a[0][0].data, b[0][0].data, atol=1e-15)

    def test_no_objects_degenerates(self):
        spec = flat_spec()
        st = M.init_state(spec, 1)
        agg = M.entity_aggregate(spec, [constant(np.ones((1, 3)))], st)
        assert agg == [(None, None)]

    def test_entity_count_mismatch(self):
        spec = self.me_spec(1)
        st = M.init_state(spec, 1)
        with pytest.raises(Exception, match="entity"):
            M.entity_aggregate(spec, [constant(np.ones((1, 3)))], st)


class TestCellStep:
    def test_fully_observed_consumes_no_gumbel_noise(self):
        spec = flat_spec(dropout_rate=0.0)
        params, _ = M.init_model(spec, seed=0)
        st = M.init_state(spec, 2)
        noise = SpyNoise(3)
        labels = [(np.array([0, 1]), None)]
        M.cell_step(spec, params, [np.ones((2, 3))], labels, st, noise, "train")
        assert noise.gumbel_calls == 0
        assert noise.gaussian_calls == 1  # the latent sample only

    def test_eval_mode_is_deterministic(self):
        spec = flat_spec()
        params, _ = M.init_model(spec, seed=0)
        st = M.init_state(spec, 1)
        x = [np.ones((1, 3))]
        a = M.cell_step(spec, params, x, None, st, None, "eval")
        b = M.cell_step(spec, params, x, None, st, None, "eval")
        assert a[0][0].label_posterior.probs().data.tobytes() == b[0][0].label_posterior.probs().data.tobytes()
        assert a[2].top_h(0).data.tobytes() == b[2].top_h(0).data.tobytes()

    def test_state_changes_on_generic_step(self):
        spec = flat_spec()
        params, _ = M.init_model(spec, seed=0)
        st = M.init_state(spec, 1)
        _, _, st2 = M.cell_step(spec, params, [np.ones((1, 3))], None, st, None, "eval")
        assert np.abs(st2.top_h(0).data).sum() > 0

    def test_errors_carry_timestep(self):
        spec = flat_spec()
        params, _ = M.init_model(spec, seed=0)
        st = M.init_state(spec, 1)
        with pytest.raises(Exception, match="t=7"):
            M.cell_step(spec, params, [np.ones((1, 5))], None, st, None, "eval", t=7)


class TestReductionLaws:
    def test_multi_entity_with_no_objects_is_bit_exact(self):
        flat = flat_spec(dim_x=(3,), hidden_width=8, dim_z=4, dim_y=3)
        me = ModelSpec(variant="multi-entity", dim_x=(3,), dim_y=3, dim_z=4,
                       hidden_width=8, n_objects=0, dropout_rate=0.1)
        pf, _ = M.init_model(flat, seed=42)
        pm, _ = M.init_model(me, seed=42)
        assert set(pf) == set(pm)
        ds = synth()
        for step in range(2):
            lf, _ = O.sequence_loss(flat, pf, ds, NoiseSource(5), "train", key=(step,))
            lm, _ = O.sequence_loss(me, pm, ds, NoiseSource(5), "train", key=(step,))
            assert lf.item() == lm.item()

    def test_one_class_parent_matches_flat(self):
        from dataclasses import replace
        from svrnn.data import SequenceBatch

        flat = flat_spec(dim_x=(3,), hidden_width=8, dim_z=4, dim_y=3)
        hier = ModelSpec(variant="hierarchical", dim_x=(3,), dim_y=3, dim_z=4,
                         hidden_width=8, dim_c=1, dropout_rate=0.1)
        pf, _ = M.init_model(flat, seed=42)
        ph, _ = M.init_model(hier, seed=42)
        assert set(pf) <= set(ph)
        ds = synth()
        ds_h = [
            SequenceBatch(
                rec_id=b.rec_id,
                entities=[replace(e, c=np.where(e.y >= 0, 0, -1).astype(np.int64)) for e in b.entities],
            ).validate()
            for b in ds
        ]
        lf, tf = O.sequence_loss(flat, pf, ds, NoiseSource(5), "train", key=(0,))
        lh, th = O.sequence_loss(hier, ph, ds_h, NoiseSource(5), "train", key=(0,))
        assert abs(lf.item() - lh.item()) < 1e-12
        for a, b in zip(tf, th):
            assert abs(a.recon - b.recon) < 1e-12
            assert abs(a.kl_z - b.kl_z) < 1e-12
            assert abs(a.kl_y - b.kl_y) < 1e-12


class TestEndToEndGradients:
    def test_hierarchical_closure(self):
        assert end_to_end_check("hierarchical") < 1e-4

    def test_multi_entity_closure(self):
        assert end_to_end_check("multi-entity") < 1e-4

    def test_object_gradients_accumulate_into_shared_group(self):
        spec = ModelSpec(variant="multi-entity", dim_x=(3, 2, 2), dim_y=2, dim_z=2,
                         hidden_width=4, n_objects=2, dropout_rate=0.0)
        params, _ = M.init_model(spec, seed=0)
        batches = tiny_batches(spec, seed=0)
        loss, _ = O.sequence_loss(spec, params, batches, NoiseSource(1), "train", key=(0,))
        backprop(loss)
        object_keys = [k for k in params if k.startswith("object/")]
        assert object_keys
        assert all(params[k].grad is not None for k in object_keys)
