import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from legoflow import autodiff as ad
from legoflow import network as net
from legoflow.autodiff import ShapeError, Tape, Tensor
from legoflow.seeding import rng_from

from oracles import central_differences, gumbel_softmax64, max_rel_err


def make_backbone(n_layers=2, n_units=2, dim=8, seed=0, residual=True):
    return net.Backbone.build(n_layers, n_units, dim, rng_from(seed, "bb"),
                              residual=residual)


class TestGumbelSoftmax:
    @pytest.mark.parametrize("tau", [0.01, 1.0, 5.0])
    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_equal_logits_zero_noise_is_uniform(self, tau, n):
        u = ad.gumbel_softmax(Tensor(np.zeros(n)), tau, np.zeros(n, np.float32))
        np.testing.assert_allclose(u.data, np.full(n, 1.0 / n), atol=1e-7)

    def test_injected_noise_case(self):
        u = ad.gumbel_softmax(Tensor([0.0, 0.0]), 1.0, np.array([1.0, 0.0], np.float32))
        np.testing.assert_allclose(u.data, [0.73106, 0.26894], atol=1e-4)

    def test_low_temperature_sampling_matches_categorical(self):
        # at tiny tau the argmax of the relaxed sample is an exact
        # categorical draw (monotone transform of logits + Gumbel noise)
        rng = rng_from(123, "gumbel-oracle")
        p = np.array([0.8, 0.2])
        draws = 100_000
        noise = ad.sample_gumbel(rng, (draws, 2))
        u = ad.gumbel_softmax_probs(np.log(p), 0.01, noise)
        freq = (u.argmax(axis=1) == 0).mean()
        assert abs(freq - 0.8) < 0.01

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            ad.gumbel_softmax(Tensor([0.0, 0.0]), 0.0, np.zeros(2, np.float32))

    @settings(max_examples=60, deadline=None)
    @given(
        logits=st.lists(st.floats(-4, 4), min_size=2, max_size=5),
        tau=st.sampled_from([0.01, 1.0, 5.0]),
        seed=st.integers(0, 2 ** 31),
    )
    def test_output_on_simplex(self, logits, tau, seed):
        noise = ad.sample_gumbel(np.random.default_rng(seed), len(logits))
        u = ad.gumbel_softmax(Tensor(logits), tau, noise).data
        assert (u >= 0).all()
        assert abs(float(u.sum()) - 1.0) < 1e-6

    def test_concentration_grows_as_tau_shrinks(self):
        rng = rng_from(5, "mono")
        for _ in range(10):
            logits = Tensor(rng.standard_normal(4))
            noise = ad.sample_gumbel(rng, 4)
            peaks = [float(ad.gumbel_softmax(logits, tau, noise).data.max())
                     for tau in (5.0, 1.0, 0.1, 0.01)]
            assert all(b >= a - 1e-7 for a, b in zip(peaks, peaks[1:]))

    def test_gradient_matches_finite_differences(self):
        rng = rng_from(17, "gumbel-fd")
        logits0 = rng.standard_normal(3)
        noise = ad.sample_gumbel(rng, 3)
        c = rng.standard_normal(3)
        tape = Tape()
        logits = Tensor(logits0, tape)
        tape.backward(ad.dot(ad.gumbel_softmax(logits, 1.0, noise), c))
        fd = central_differences(
            lambda a: float(gumbel_softmax64(a, 1.0, noise) @ c), logits0)
        assert max_rel_err(logits.grad, fd) < 1e-4


class TestStraightThrough:
    def test_forward_one_hot(self):
        out = ad.straight_through(Tensor([0.7, 0.3]))
        np.testing.assert_array_equal(out.data, [1.0, 0.0])

    def test_tie_breaks_low_index(self):
        out = ad.straight_through(Tensor([0.5, 0.5]))
        np.testing.assert_array_equal(out.data, [1.0, 0.0])

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_gradient_equals_soft_gradient(self, n):
        rng = rng_from(n, "st-grad")
        logits0 = rng.standard_normal(n)
        noise = ad.sample_gumbel(rng, n)
        c = rng.standard_normal(n)

        tape_hard = Tape()
        lh = Tensor(logits0, tape_hard)
        tape_hard.backward(ad.dot(ad.straight_through(
            ad.gumbel_softmax(lh, 0.7, noise)), c))

        tape_soft = Tape()
        ls = Tensor(logits0, tape_soft)
        tape_soft.backward(ad.dot(ad.gumbel_softmax(ls, 0.7, noise), c))

        np.testing.assert_allclose(lh.grad, ls.grad, atol=1e-6)
        fd = central_differences(
            lambda a: float(gumbel_softmax64(a, 0.7, noise) @ c), logits0)
        assert max_rel_err(lh.grad, fd) < 1e-4


class TestLegoForward:
    def test_single_unit_all_modes_agree(self):
        bb = make_backbone(n_layers=1, n_units=1)
        x = Tensor(rng_from(0, "x").standard_normal((4, 8)))
        outs = [net.lego_forward(x, bb.layers[0], Tensor([1.0]), mode).data
                for mode in ("soft", "hard", "argmax")]
        assert np.array_equal(outs[0], outs[1])
        assert np.array_equal(outs[0], outs[2])

    def test_one_hot_soft_equals_hard(self):
        bb = make_backbone()
        x = Tensor(rng_from(1, "x").standard_normal((4, 8)))
        soft = net.lego_forward(x, bb.layers[0], Tensor([0.0, 1.0]), "soft")
        hard = net.lego_forward(x, bb.layers[0], Tensor([0.0, 1.0]), "hard")
        np.testing.assert_allclose(soft.data, hard.data, atol=1e-6)

    def test_even_mixture_is_mean_of_unit_outputs(self):
        bb = make_backbone()
        rng = rng_from(2, "x")
        x = Tensor(rng.standard_normal((5, 8)))
        layer = bb.layers[0]
        # oracle: run each unit independently, average in float64
        leaf = lambda p: p.leaf(None)
        unit_outs = [layer.units[k].forward_running(x, leaf).data.astype(np.float64)
                     for k in range(2)]
        expected = (unit_outs[0] + unit_outs[1]) / 2
        mixed = net.lego_forward(x, layer, Tensor([0.5, 0.5]), "soft")
        np.testing.assert_allclose(mixed.data, expected, atol=1e-6)

    def test_weight_count_mismatch(self):
        bb = make_backbone()
        x = Tensor(np.zeros((2, 8)))
        with pytest.raises(ShapeError):
            net.lego_forward(x, bb.layers[0], Tensor([1.0, 0.0, 0.0]), "soft")


class TestPaths:
    def controllers(self, rows):
        c = net.TaskController("t", len(rows), len(rows[0]))
        c.logits.value[...] = np.array(rows, np.float32)
        return {"t": c}

    def test_extract_uniform_rows(self):
        ctl = self.controllers([[0.9, 0.1]] * 3)
        assert net.extract_path(ctl, "t").selections == [0, 0, 0]

    def test_extract_mixed_rows(self):
        ctl = self.controllers([[0.2, 0.8], [0.6, 0.4]])
        assert net.extract_path(ctl, "t").selections == [1, 0]

    def test_unknown_task(self):
        with pytest.raises(KeyError):
            net.extract_path({}, "nope")

    @settings(max_examples=40, deadline=None)
    @given(shift=st.floats(-50, 50), seed=st.integers(0, 10 ** 6))
    def test_argmax_invariant_to_row_shift(self, shift, seed):
        rows = rng_from(seed, "rows").standard_normal((4, 3))
        base = net.extract_path(self.controllers(rows), "t")
        shifted = net.extract_path(self.controllers(rows + shift), "t")
        assert base.selections == shifted.selections

    def test_dump_parse_round_trip(self):
        path = net.Path([0, 1, 1, 0])
        text = net.dump_path(path, 2)
        assert text.splitlines()[0] == "L=4 N=2"
        parsed, n_units = net.parse_path(text)
        assert parsed.selections == path.selections and n_units == 2

    @pytest.mark.parametrize("bad", [
        "", "3\n0\n1", "L=2 N=2\n0", "L=2 N=2\n0\n5", "L=x N=2\n0\n0",
    ])
    def test_parse_rejects_malformed(self, bad):
        with pytest.raises(ValueError):
            net.parse_path(bad)


class TestMaterialize:
    def test_single_layer_selects_unit(self):
        bb = make_backbone(n_layers=1, n_units=2)
        static = net.materialize_static(bb, net.Path([1]))
        x = Tensor(rng_from(3, "x").standard_normal((4, 8)))
        leaf = lambda p: p.leaf(None)
        expected = bb.layers[0].units[1].forward_running(x, leaf).data
        got = static.layers[0].units[0].forward_running(x, leaf).data
        np.testing.assert_array_equal(got, expected)

    def test_wrong_path_length(self):
        bb = make_backbone(n_layers=3)
        with pytest.raises(ShapeError):
            net.materialize_static(bb, net.Path([0, 1]))

    def test_unit_index_out_of_range(self):
        bb = make_backbone(n_layers=2, n_units=2)
        with pytest.raises(ValueError):
            net.materialize_static(bb, net.Path([0, 2]))

    def test_static_matches_dynamic_argmax_forward(self):
        bb = make_backbone(n_layers=4, n_units=2, seed=9)
        path = net.Path([0, 1, 1, 0])
        static = net.materialize_static(bb, path)
        rng = rng_from(4, "x")
        leaf = lambda p: p.leaf(None)
        for _ in range(100):
            x = rng.standard_normal((3, 8))
            hd = Tensor(x)
            hs = Tensor(x)
            for l in range(4):
                onehot = np.zeros(2, np.float32)
                onehot[path.selections[l]] = 1.0
                hd = net.lego_forward(hd, bb.layers[l], Tensor(onehot), "argmax")
                hs = net.lego_forward(hs, static.layers[l], Tensor([1.0]), "argmax")
            assert np.abs(hd.data - hs.data).max() < 1e-6

    def test_copies_are_independent(self):
        bb = make_backbone(n_layers=2, n_units=2, seed=5)
        static = net.materialize_static(bb, net.Path([0, 0]))
        x = rng_from(6, "x").standard_normal((4, 8))
        before = net.lego_forward(
            net.lego_forward(Tensor(x), bb.layers[0], Tensor([1.0, 0.0]), "argmax"),
            bb.layers[1], Tensor([1.0, 0.0]), "argmax").data.copy()
        static.layers[0].units[0].w.value += 1.0
        after = net.lego_forward(
            net.lego_forward(Tensor(x), bb.layers[0], Tensor([1.0, 0.0]), "argmax"),
            bb.layers[1], Tensor([1.0, 0.0]), "argmax").data
        assert np.array_equal(before, after)


class TestController:
    def test_rows_start_uniform(self):
        c = net.TaskController("t", 3, 4)
        assert np.array_equal(c.logits.value, np.zeros((3, 4), np.float32))
        np.testing.assert_allclose(c.probabilities().sum(axis=1), 1.0, atol=1e-6)
        assert not c.logits.decay

    def test_probability_rows_sum_to_one(self):
        c = net.TaskController("t", 5, 3)
        c.logits.value[...] = rng_from(8, "pr").standard_normal((5, 3)) * 4
        np.testing.assert_allclose(c.probabilities().sum(axis=1), 1.0, atol=1e-6)
