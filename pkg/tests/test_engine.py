import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from legoflow import engine as eng
from legoflow.autodiff import ShapeError
from legoflow.engine import SIMTConfig, Trainer, TrainingDiverged
from legoflow.model import MultiTaskModel
from legoflow.seeding import rng_from
from legoflow.tasks import make_conflict_suite, make_shape_suite

from oracles import batch_stats64


def small_setup(seed=0, workers=2, steps=50, suite=None, **cfg_kw):
    suite = suite or make_conflict_suite(seed=seed)
    cfg = SIMTConfig(num_workers=workers, total_steps=steps,
                     warmup_steps=min(10, steps), seed=seed,
                     execution="sequential", **cfg_kw)
    model = MultiTaskModel.build(suite, 2, 2, 32, seed=seed)
    return model, suite, cfg


class TestSampleTask:
    def test_single_task_always_chosen(self):
        rng = rng_from(0, "s")
        assert all(eng.sample_task([3.0], rng) == 0 for _ in range(100))

    def test_equal_weights_balanced(self):
        rng = rng_from(1, "s")
        draws = np.array([eng.sample_task([1.0, 1.0], rng) for _ in range(100_000)])
        assert abs((draws == 0).mean() - 0.5) < 0.01

    def test_three_to_one_weights(self):
        rng = rng_from(2, "s")
        draws = np.array([eng.sample_task([3.0, 1.0], rng) for _ in range(100_000)])
        assert abs((draws == 0).mean() - 0.75) < 0.01

    def test_rejects_empty_and_nonpositive(self):
        rng = rng_from(3, "s")
        with pytest.raises(ValueError):
            eng.sample_task([], rng)
        with pytest.raises(ValueError):
            eng.sample_task([1.0, 0.0], rng)


class TestSyncbnReduce:
    def test_hand_case(self):
        mean, var = eng.syncbn_reduce([
            (2, np.array([4.0]), np.array([10.0])),
            (1, np.array([5.0]), np.array([25.0])),
        ])
        np.testing.assert_allclose(mean, [3.0], atol=1e-7)
        np.testing.assert_allclose(var, [8.0 / 3.0], rtol=1e-6)

    def test_single_worker_identity(self):
        x = rng_from(1, "bn").standard_normal((9, 4)).astype(np.float32)
        n, s, sq = batch_stats64(x)
        mean, var = eng.syncbn_reduce([(n, s, sq)])
        np.testing.assert_allclose(mean, x.mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(var, x.var(axis=0), atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10 ** 6),
           sizes=st.lists(st.integers(1, 40), min_size=1, max_size=5))
    def test_matches_concatenation(self, seed, sizes):
        rng = np.random.default_rng(seed)
        chunks = [rng.standard_normal((n, 3)).astype(np.float32) * 3 + 1
                  for n in sizes]
        mean, var = eng.syncbn_reduce([batch_stats64(c) for c in chunks])
        whole = np.concatenate(chunks).astype(np.float64)
        assert np.abs(mean - whole.mean(axis=0)).max() < 1e-6
        assert np.abs(var - whole.var(axis=0)).max() < 1e-6

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            eng.syncbn_reduce([])
        with pytest.raises(ValueError):
            eng.syncbn_reduce([(0, np.zeros(1), np.zeros(1))])


class TestFuseGradients:
    def test_two_workers_average(self):
        rep = eng.fuse_gradients([
            {"p": np.array([1.0], np.float32)},
            {"p": np.array([3.0], np.float32)},
        ])
        np.testing.assert_allclose(rep.fused["p"], [2.0])
        assert rep.n_gpu["p"] == 2 and rep.users["p"] == (0, 1)

    def test_divisor_is_user_count(self):
        rep = eng.fuse_gradients([
            {"p": np.array([2.0], np.float32)},
            {},
            {"p": np.array([4.0], np.float32)},
        ])
        np.testing.assert_allclose(rep.fused["p"], [3.0])
        assert rep.n_gpu["p"] == 2

    def test_task_average_is_not_sample_average(self):
        # two workers, batch sizes 4 and 12, same parameter
        g_small = np.array([1.0], np.float32)
        g_big = np.array([2.0], np.float32)
        rep = eng.fuse_gradients([{"p": g_small}, {"p": g_big}])
        task_avg = (g_small + g_big) / 2
        sample_avg = (4 * g_small + 12 * g_big) / 16
        np.testing.assert_allclose(rep.fused["p"], task_avg, atol=1e-7)
        assert abs(float(rep.fused["p"] - sample_avg)) > 0.1

    def test_equal_gradients_fuse_exactly(self):
        g = rng_from(4, "g").standard_normal((5, 3)).astype(np.float32)
        rep = eng.fuse_gradients([{"p": g.copy()} for _ in range(3)])
        assert np.array_equal(rep.fused["p"], g)

    def test_unused_parameter_absent(self):
        rep = eng.fuse_gradients([{}, {}], param_order=["p"])
        assert "p" not in rep.fused and "p" not in rep.n_gpu

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            eng.fuse_gradients([{"p": np.zeros(2, np.float32)},
                                {"p": np.zeros(3, np.float32)}])

    def test_histogram(self):
        rep = eng.fuse_gradients([
            {"a": np.zeros(1, np.float32), "b": np.zeros(1, np.float32)},
            {"a": np.zeros(1, np.float32)},
        ])
        assert rep.histogram() == {"2": 1, "1": 1}


class TestSchedules:
    def cfg(self, **kw):
        base = dict(num_workers=1, total_steps=1000, warmup_steps=100,
                    base_lr=0.16, seed=0)
        base.update(kw)
        return SIMTConfig(**base)

    def test_lr_starts_at_zero(self):
        assert eng.lr_schedule(0, self.cfg()) == 0.0

    def test_lr_reaches_base_after_warmup(self):
        assert eng.lr_schedule(100, self.cfg()) == pytest.approx(0.16)

    def test_lr_ends_at_zero(self):
        assert abs(eng.lr_schedule(1000, self.cfg())) < 1e-9

    def test_lr_half_at_mid_decay(self):
        assert eng.lr_schedule(550, self.cfg()) == pytest.approx(0.08)

    def test_lr_out_of_range(self):
        with pytest.raises(ValueError):
            eng.lr_schedule(-1, self.cfg())
        with pytest.raises(ValueError):
            eng.lr_schedule(1001, self.cfg())

    def test_tau_starts_at_five(self):
        assert eng.temperature_schedule(0, self.cfg()) == 5.0

    def test_tau_constant_after_decay_end(self):
        cfg = self.cfg()
        end = int(0.9 * cfg.total_steps)
        for step in (end, end + 1, cfg.total_steps):
            assert eng.temperature_schedule(step, cfg) == pytest.approx(0.01)

    def test_tau_midpoint(self):
        assert eng.temperature_schedule(450, self.cfg()) == pytest.approx(
            (5.0 + 0.01) / 2)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SIMTConfig(num_workers=0)
        with pytest.raises(ValueError):
            SIMTConfig(tau_decay_end_fraction=0.0)
        with pytest.raises(ValueError):
            SIMTConfig(sampling_mode="nope")
        with pytest.raises(ValueError):
            SIMTConfig(warmup_steps=10, total_steps=5)


class TestIterationProtocol:
    def test_per_batch_mode_shares_one_task(self):
        model, suite, cfg = small_setup(workers=4, sampling_mode="per_batch")
        trainer = Trainer(model, suite, cfg)
        for step in range(30):
            assert len(set(trainer.sampled_tasks(step))) == 1
        recs = trainer.run(steps=5)
        by_step = {}
        for r in recs:
            by_step.setdefault(r["step"], set()).add(r["task"])
        assert all(len(tasks) == 1 for tasks in by_step.values())

    def test_simt_mode_samples_independently(self):
        model, suite, cfg = small_setup(workers=4)
        trainer = Trainer(model, suite, cfg)
        distinct = [len(set(trainer.sampled_tasks(s))) for s in range(50)]
        assert max(distinct) > 1

    def test_soft_routing_ngpu_counts(self):
        model, suite, cfg = small_setup(workers=4, steps=5)
        trainer = Trainer(model, suite, cfg)
        res = trainer.run_iteration()
        chosen = {r.task for r in []} if False else None
        counts = {}
        for r in res.records:
            counts[r["task"]] = counts.get(r["task"], 0) + 1
        for pid, n in res.fusion.n_gpu.items():
            if pid.startswith("backbone"):
                assert n == 4
            else:
                task = pid.split(".")[1]
                assert n == counts[task]

    def test_never_sampled_task_untouched(self):
        suite = make_conflict_suite(seed=0)
        model = MultiTaskModel.build(suite, 2, 2, 32, seed=0)
        live = suite[:2]
        frozen = suite[2:]
        before = {p.id: p.value.copy() for p in model.params()}
        cfg = SIMTConfig(num_workers=2, total_steps=40, warmup_steps=5,
                         seed=0, execution="sequential")
        trainer = Trainer(model, live, cfg)
        trainer.run()
        for task in frozen:
            for mod in (model.stems[task.name], model.heads[task.name]):
                for p in mod.params():
                    assert np.array_equal(p.value, before[p.id])
                    assert not p.momentum.any()
            assert np.array_equal(model.controllers[task.name].logits.value,
                                  before[f"controller.{task.name}"])

    def test_heterogeneous_shapes_complete(self):
        suite = make_shape_suite(seed=1)
        model = MultiTaskModel.build(suite, 2, 2, 32, seed=1)
        cfg = SIMTConfig(num_workers=4, total_steps=5, warmup_steps=2,
                         base_lr=0.02, seed=1, execution="sequential")
        recs = Trainer(model, suite, cfg).run()
        assert len(recs) == 5 * 4

    def test_metrics_record_schema(self):
        model, suite, cfg = small_setup(steps=3)
        recs = Trainer(model, suite, cfg).run()
        required = {"step", "worker", "task", "loss", "lr", "tau", "ngpu_histogram"}
        assert all(required <= set(r) for r in recs)

    def test_nonfinite_loss_diagnostic(self):
        model, suite, cfg = small_setup(steps=10)
        trainer = Trainer(model, suite, cfg)
        trainer.run(steps=2)
        model.stems[suite[0].name].w.value[0, 0] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            trainer.run(steps=8)
        assert err.value.task in {t.name for t in suite}
        assert 0 <= err.value.worker < cfg.num_workers
        assert err.value.step >= 2
        for field in ("worker", "task", "step"):
            assert str(getattr(err.value, field)) in str(err.value)

    def test_duplicate_worker_fusion_identity(self):
        # two workers fed the same task, batch and noise produce equal
        # gradients, so the fused result equals either one
        from legoflow.autodiff import sample_gumbel
        from legoflow.tasks import BatchStream, next_batch

        suite = make_conflict_suite(seed=5)
        model = MultiTaskModel.build(suite, 2, 2, 32, seed=5)
        task = suite[0]
        stream = BatchStream(task, "train", rng_from(5, "dup"))
        batch = next_batch(task, "train", stream)
        noise = sample_gumbel(rng_from(5, "dupnoise"), (2, 2))

        def worker_grads():
            gen = model.forward_train(task, batch.x, batch.y, 1.0, noise,
                                      "soft", True)
            reply = None
            first = True
            while True:
                try:
                    stats = next(gen) if first else gen.send(reply)
                except StopIteration as stop:
                    out = stop.value
                    break
                first = False
                reply = {k: eng.syncbn_reduce([stats[k]] * 2) for k in stats}
            out.loss.tape.backward(out.loss)
            return out.grads()

        g0, g1 = worker_grads(), worker_grads()
        rep = eng.fuse_gradients([g0, g1])
        for pid, fused in rep.fused.items():
            np.testing.assert_allclose(fused, g0[pid], atol=1e-7)


class TestDeterminismAndParallel:
    def run_params(self, execution, seed=7, steps=30):
        suite = make_shape_suite(seed=seed)
        model = MultiTaskModel.build(suite, 3, 2, 32, seed=seed)
        cfg = SIMTConfig(num_workers=4, total_steps=steps, warmup_steps=10,
                         base_lr=0.02, seed=seed, execution=execution)
        trainer = Trainer(model, suite, cfg)
        trainer.run()
        trainer.close()
        return {p.id: p.value.copy() for p in model.params()}

    def test_parallel_equals_sequential_bitwise(self):
        a = self.run_params("parallel")
        b = self.run_params("sequential")
        assert set(a) == set(b)
        for k in a:
            assert np.array_equal(a[k], b[k]), k

    def test_repeat_runs_bitwise_identical(self):
        a = self.run_params("parallel")
        b = self.run_params("parallel")
        for k in a:
            assert np.array_equal(a[k], b[k]), k

    def test_thread_cap_env(self, monkeypatch):
        monkeypatch.setenv("LEGOFLOW_THREADS", "2")
        capped = self.run_params("parallel")
        monkeypatch.delenv("LEGOFLOW_THREADS")
        full = self.run_params("parallel")
        for k in capped:
            assert np.array_equal(capped[k], full[k]), k


class TestSingleWorkerDegenerate:
    def test_matches_plain_training_loop_bitwise(self):
        # hand-rolled single-task loop with the same schedules and local BN
        from legoflow.autodiff import sample_gumbel, sgd_step
        from legoflow.tasks import BatchStream, next_batch

        seed, steps = 3, 25
        suite = [make_conflict_suite(seed=seed)[0]]
        cfg = SIMTConfig(num_workers=1, total_steps=steps, warmup_steps=5,
                         seed=seed, execution="sequential")

        engine_model = MultiTaskModel.build(suite, 2, 2, 32, seed=seed)
        Trainer(engine_model, suite, cfg).run()

        plain = MultiTaskModel.build(suite, 2, 2, 32, seed=seed)
        params = plain.params()
        task = suite[0]
        stream = BatchStream(task, "train", rng_from(seed, "data", 0, 0))
        for step in range(steps):
            rng = rng_from(seed, "worker-step", 0, step)
            eng.sample_task([task.sampling_weight], rng)
            noise = sample_gumbel(rng, (2, 2))
            batch = next_batch(task, "train", stream)
            gen = plain.forward_train(task, batch.x, batch.y,
                                      eng.temperature_schedule(step, cfg),
                                      noise, "soft", True)
            reply = None
            first = True
            layer = 0
            while True:
                try:
                    stats = next(gen) if first else gen.send(reply)
                except StopIteration as stop:
                    out = stop.value
                    break
                first = False
                reply = {}
                for k in sorted(stats):
                    mean, var = eng.syncbn_reduce([stats[k]])
                    reply[k] = (mean, var)
                    plain.backbone.layers[layer].units[k].update_running(mean, var)
                layer += 1
            out.loss.tape.backward(out.loss)
            fused = eng.fuse_gradients([out.grads()],
                                       [p.id for p in params])
            sgd_step(params, fused.fused, eng.lr_schedule(step, cfg),
                     cfg.momentum, cfg.weight_decay)

        for pe, pp in zip(engine_model.params(), plain.params()):
            assert np.array_equal(pe.value, pp.value), pe.id
            assert np.array_equal(pe.momentum, pp.momentum), pe.id
        for le, lp in zip(engine_model.backbone.layers, plain.backbone.layers):
            for ue, up in zip(le.units, lp.units):
                assert np.array_equal(ue.running_mean, up.running_mean)
                assert np.array_equal(ue.running_var, up.running_var)
