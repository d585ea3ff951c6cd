import json

import numpy as np
import pytest

from oct_engine import data as D
from oct_engine import tensor as T
from oct_engine import training as TR
from oct_engine.models import ModelConfig, StageConfig, build_classifier, build_vae_twohead, transfer_encoder
from oct_engine.tensor import Parameter


# ---------------------------------------------------------------------------
# label smoothing / cross entropy


class TestLabelSmooth:
    def test_formula(self):
        out = TR.label_smooth([2], 4, 0.1)
        np.testing.assert_allclose(out, [[0.025, 0.025, 0.925, 0.025]])

    def test_zero_epsilon_one_hot(self):
        out = TR.label_smooth([0, 3], 4, 0.0)
        np.testing.assert_array_equal(out, [[1, 0, 0, 0], [0, 0, 0, 1]])

    def test_near_one_epsilon_rows_sum_to_one(self):
        out = TR.label_smooth([1, 2, 0], 4, 0.999)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.abs(out - 0.25) < 0.001)

    def test_bad_epsilon(self):
        with pytest.raises(ValueError, match="epsilon"):
            TR.label_smooth([0], 4, 1.0)


def np_mean_ce(logits, labels, epsilon=0.0):
    """Independent numpy cross entropy for comparison."""
    z = logits - logits.max(axis=1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    targets = TR.label_smooth(labels, logits.shape[1], epsilon)
    return float(-(targets * ls).sum(axis=1).mean())


class TestWeightedCE:
    def test_uniform_weights_equal_unweighted_mean(self):
        rng = np.random.default_rng(0)
        logits_np = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        g = T.Graph("f64")
        loss = TR.weighted_ce_loss(g.constant(logits_np), labels,
                                   np.full(6, 3.7), epsilon=0.1)
        assert abs(loss.item() - np_mean_ce(logits_np, labels, 0.1)) < 1e-7

    def test_vanishing_weight_limit(self):
        rng = np.random.default_rng(1)
        logits_np = rng.normal(size=(2, 4))
        labels = np.array([1, 3])
        g = T.Graph("f64")
        loss = TR.weighted_ce_loss(g.constant(logits_np), labels,
                                   np.array([1.0, 1e-9]))
        first_only = np_mean_ce(logits_np[:1], labels[:1])
        assert abs(loss.item() - first_only) < 1e-6

    def test_uniform_logits_give_log_k(self):
        g = T.Graph("f64")
        loss = TR.weighted_ce_loss(g.constant(np.zeros((3, 4))),
                                   np.array([0, 1, 2]), np.ones(3), epsilon=0.0)
        assert abs(loss.item() - np.log(4.0)) < 1e-9

    def test_nonpositive_weight_rejected(self):
        g = T.Graph()
        with pytest.raises(ValueError, match="> 0"):
            TR.weighted_ce_loss(g.constant(np.zeros((2, 4))),
                                np.array([0, 1]), np.array([1.0, 0.0]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 3, size=4)
        weights = rng.uniform(0.3, 1.0, size=4)

        def build(g, t):
            return TR.weighted_ce_loss(t["logits"], labels, weights, epsilon=0.1)

        report = T.grad_check(build, {"logits": rng.normal(size=(4, 3))},
                              tolerance=1e-5)
        assert report["pass"], report


class TestVaeLoss:
    def make(self, recon, target, mu, logvar, logits, labels, weights, **kw):
        g = T.Graph("f64")
        return TR.vae_total_loss(
            g.constant(recon), g.constant(target), g.constant(mu),
            g.constant(logvar), g.constant(logits), labels, weights, **kw)

    def test_standard_normal_posterior_has_zero_kl(self):
        _, parts = self.make(np.zeros((2, 1, 4, 4)), np.ones((2, 1, 4, 4)),
                             np.zeros((2, 3)), np.zeros((2, 3)),
                             np.zeros((2, 4)), np.array([0, 1]), np.ones(2))
        assert parts["kl"] == pytest.approx(0.0, abs=1e-12)

    def test_perfect_reconstruction_zero_mse(self):
        x = np.random.default_rng(3).normal(size=(2, 1, 4, 4))
        _, parts = self.make(x, x.copy(), np.zeros((2, 2)), np.zeros((2, 2)),
                             np.zeros((2, 4)), np.array([0, 1]), np.ones(2))
        assert parts["mse"] == 0.0

    def test_unit_mean_kl_half(self):
        _, parts = self.make(np.zeros((2, 1, 2, 2)), np.zeros((2, 1, 2, 2)),
                             np.ones((2, 1)), np.zeros((2, 1)),
                             np.zeros((2, 4)), np.array([0, 1]), np.ones(2))
        assert parts["kl"] == pytest.approx(0.5, abs=1e-12)

    def test_total_combines_parts(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 1, 4, 4))
        total, parts = self.make(x + 1.0, x, np.ones((2, 2)), np.zeros((2, 2)),
                                 rng.normal(size=(2, 4)), np.array([0, 1]),
                                 np.ones(2), beta=0.5, lam=2.0)
        expected = parts["mse"] + 0.5 * parts["kl"] + 2.0 * parts["ce"]
        assert total.item() == pytest.approx(expected, rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            self.make(np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 5, 5)),
                      np.zeros((2, 1)), np.zeros((2, 1)),
                      np.zeros((2, 4)), np.array([0, 1]), np.ones(2))


# ---------------------------------------------------------------------------
# schedules & optimizers


class TestPolyLR:
    def test_known_points(self):
        sched = TR.LRSchedule(base_lr=0.01, end_lr=0.0, power=1.0, total_steps=100)
        assert TR.poly_lr(0, sched) == pytest.approx(0.01)
        assert TR.poly_lr(50, sched) == pytest.approx(0.005)
        assert TR.poly_lr(100, sched) == 0.0
        assert TR.poly_lr(250, sched) == 0.0

    def test_monotone_nonincreasing_random_schedules(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            base = rng.uniform(1e-5, 1.0)
            end = rng.uniform(0.0, base)
            sched = TR.LRSchedule(base_lr=base, end_lr=end,
                                  power=rng.uniform(0.1, 5.0),
                                  total_steps=int(rng.integers(1, 50)))
            lrs = [TR.poly_lr(s, sched) for s in range(sched.total_steps + 2)]
            assert all(a >= b - 1e-15 for a, b in zip(lrs, lrs[1:]))


class TestAdam:
    def test_first_step_bias_corrected(self):
        p = Parameter("p", np.zeros(5))
        state = TR.OptimizerState(kind="adam")
        TR.adam_step([p], {"p": np.ones(5, dtype=np.float32)}, state, 0.001)
        assert np.all(np.abs(p.data + 0.001) < 1e-6)

    def test_zero_gradient_no_change(self):
        p = Parameter("p", np.full(3, 2.5))
        state = TR.OptimizerState(kind="adam")
        TR.adam_step([p], {"p": np.zeros(3, dtype=np.float32)}, state, 0.1)
        np.testing.assert_array_equal(p.data, np.full(3, 2.5, dtype=np.float32))

    def test_oscillation_update_magnitude_bounded(self):
        # alternating +/- gradients: every update stays within lr (plus slack)
        p = Parameter("p", np.zeros(1))
        state = TR.OptimizerState(kind="adam")
        lr = 0.001
        prev = p.data.copy()
        deltas = []
        for t in range(100):
            sign = 1.0 if t % 2 == 0 else -1.0
            TR.adam_step([p], {"p": np.full(1, sign, dtype=np.float32)}, state, lr)
            deltas.append(float(p.data[0] - prev[0]))
            prev = p.data.copy()
        assert max(abs(d) for d in deltas) <= lr * 1.001
        assert min(deltas) < 0 < max(deltas)  # it oscillates

    def test_wrong_state_kind(self):
        with pytest.raises(ValueError, match="adam"):
            TR.adam_step([], {}, TR.OptimizerState(kind="nesterov"), 0.1)


class TestNesterov:
    def test_zero_momentum_is_sgd(self):
        p = Parameter("p", np.array([1.0, 2.0]))
        state = TR.OptimizerState(kind="nesterov", momentum=0.0)
        g = np.array([0.5, -0.5], dtype=np.float32)
        TR.nesterov_step([p], {"p": g}, state, 0.1)
        np.testing.assert_array_equal(
            p.data, np.array([1.0, 2.0], dtype=np.float32) - np.float32(0.1) * g)

    def test_velocity_converges_to_geometric_limit(self):
        p = Parameter("p", np.zeros(1))
        state = TR.OptimizerState(kind="nesterov", momentum=0.9)
        g = np.full(1, 2.0, dtype=np.float32)
        for _ in range(100):
            TR.nesterov_step([p], {"p": g}, state, 0.01)
        target = -0.01 * 2.0 / (1 - 0.9)
        assert abs(float(state.slots["p"]["vel"][0]) - target) / abs(target) < 0.01

    def test_zero_gradient_zero_velocity_noop(self):
        p = Parameter("p", np.array([3.0]))
        state = TR.OptimizerState(kind="nesterov")
        TR.nesterov_step([p], {"p": np.zeros(1, dtype=np.float32)}, state, 0.1)
        np.testing.assert_array_equal(p.data, np.array([3.0], dtype=np.float32))

    def test_iteration_order_invariance(self):
        rng = np.random.default_rng(6)
        names = [f"p{i}" for i in range(6)]
        datas = {n: rng.normal(size=4).astype(np.float32) for n in names}
        grads = {n: rng.normal(size=4).astype(np.float32) for n in names}

        def run(order):
            params = {n: Parameter(n, datas[n].copy()) for n in order}
            state = TR.OptimizerState(kind="nesterov")
            for _ in range(5):
                TR.nesterov_step(params, {n: g.copy() for n, g in grads.items()},
                                 state, 0.05)
            return {n: params[n].data for n in names}

        fwd = run(names)
        rev = run(list(reversed(names)))
        for n in names:
            np.testing.assert_array_equal(fwd[n], rev[n])


class TestClip:
    def test_under_limit_unchanged(self):
        grads = {"a": np.array([3.0, 4.0], dtype=np.float32)}
        TR.clip_global_norm(grads, 5.0)
        np.testing.assert_array_equal(grads["a"], [3.0, 4.0])

    def test_scaled_to_limit(self):
        grads = {"a": np.array([3.0, 4.0], dtype=np.float32)}
        TR.clip_global_norm(grads, 2.5)
        np.testing.assert_allclose(grads["a"], [1.5, 2.0], atol=1e-6)

    def test_post_clip_norm(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            grads = {f"g{i}": rng.normal(size=rng.integers(1, 6)).astype(np.float32)
                     for i in range(4)}
            before = TR.global_grad_norm(grads)
            max_norm = float(rng.uniform(0.1, 3.0))
            originals = {k: v.copy() for k, v in grads.items()}
            TR.clip_global_norm(grads, max_norm)
            assert TR.global_grad_norm(grads) <= min(before, max_norm) + 1e-6
            for k in grads:   # clipping never increases any magnitude
                assert np.all(np.abs(grads[k]) <= np.abs(originals[k]) + 1e-7)


# ---------------------------------------------------------------------------
# checkpoints


class TestCheckpoint:
    def tensors(self):
        rng = np.random.default_rng(8)
        return {
            "alpha.weight": rng.normal(size=(3, 4)).astype(np.float32),
            "beta.bias": rng.normal(size=7).astype(np.float32),
            "gamma": rng.normal(size=(2, 2, 2)).astype(np.float32),
        }

    def test_roundtrip_bit_exact(self, tmp_path):
        tensors = self.tensors()
        meta = {"step": 12, "metrics": {"auc": 0.75}}
        path = TR.save_checkpoint(tensors, tmp_path / "c.ckpt", meta)
        ckpt = TR.load_checkpoint(path)
        assert ckpt.version == 1
        assert ckpt.metadata == meta
        assert set(ckpt.tensors) == set(tensors)
        for name, arr in tensors.items():
            assert ckpt.tensors[name].tobytes() == arr.tobytes()

    def test_corrupted_magic(self, tmp_path):
        path = TR.save_checkpoint(self.tensors(), tmp_path / "c.ckpt", {})
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(TR.CheckpointError, match="magic"):
            TR.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = TR.save_checkpoint(self.tensors(), tmp_path / "c.ckpt", {})
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(TR.CheckpointError, match="version"):
            TR.load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = TR.save_checkpoint(self.tensors(), tmp_path / "c.ckpt", {})
        raw = path.read_bytes()
        path.write_bytes(raw[:40])
        with pytest.raises(TR.CheckpointError, match="truncated"):
            TR.load_checkpoint(path)

    def test_file_size_formula(self, tmp_path):
        tensors = self.tensors()
        meta = {"k": "v"}
        path = TR.save_checkpoint(tensors, tmp_path / "c.ckpt", meta)
        expected = 4 + 4 + 4
        for name, arr in tensors.items():
            expected += 4 + len(name.encode()) + 4 + 8 * arr.ndim + 4 * arr.size
        expected += len(json.dumps(meta, sort_keys=True).encode())
        assert path.stat().st_size == expected


# ---------------------------------------------------------------------------
# training loop


def tiny_model_cfg(head="classifier"):
    return ModelConfig(
        input_size=(3, 16, 16),
        stages=[StageConfig(num_blocks=1, out_channels=8)],
        attention_links=[],
        num_classes=4,
        latent_dim=4,
        dropout_rate=0.1,
        head=head,
    )


def tiny_aug_cfg():
    return D.AugmentConfig(resize=(16, 16), crop=(16, 16), flip_lr_prob=0.5,
                           flip_ud_prob=0.0, mask_count_range=(1, 2),
                           mask_size_range=(0.05, 0.15))


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata")
    manifest = D.synth_generate(4, 16, 0, root)
    return D.load_manifest(manifest)


class TestTrainLoop:
    def test_loss_decreases_by_step_200(self, tiny_dataset, tmp_path):
        model = build_classifier(tiny_model_cfg(), seed=0)
        settings = TR.TrainSettings(
            phase="classifier", optimizer="nesterov",
            schedule=TR.LRSchedule(base_lr=0.02, end_lr=1e-4, power=2.0, total_steps=201),
            max_steps=201, batch_size=8, eval_every=200, seed=1,
        )
        result = TR.train(model, tiny_dataset, settings, tiny_aug_cfg(), tmp_path)
        losses = {r["step"]: r["loss"] for r in result["history"]}
        assert losses[200] < losses[0]

    def test_determinism_bit_identical(self, tiny_dataset, tmp_path):
        def run(where):
            model = build_classifier(tiny_model_cfg(), seed=3)
            settings = TR.TrainSettings(
                phase="classifier", optimizer="adam",
                schedule=TR.LRSchedule(base_lr=0.002, end_lr=1e-4, total_steps=30),
                max_steps=30, batch_size=8, eval_every=10, seed=5,
            )
            out = TR.train(model, tiny_dataset, settings, tiny_aug_cfg(),
                           tmp_path / where)
            return (out["metrics_path"].read_bytes(), out["last"].read_bytes())

        log_a, ckpt_a = run("a")
        log_b, ckpt_b = run("b")
        assert log_a == log_b
        assert ckpt_a == ckpt_b

    def test_vae_phase_and_transfer_integration(self, tiny_dataset, tmp_path):
        vae = build_vae_twohead(tiny_model_cfg(head="vae_twohead"), seed=0)
        settings = TR.TrainSettings(
            phase="vae", optimizer="adam",
            schedule=TR.LRSchedule(base_lr=0.002, end_lr=1e-4, total_steps=20),
            max_steps=20, batch_size=8, eval_every=10, seed=2,
        )
        result = TR.train(vae, tiny_dataset, settings, tiny_aug_cfg(), tmp_path / "vae")
        assert {"mse", "kl", "ce"} <= set(result["history"][0]["loss_parts"])

        ckpt = TR.load_checkpoint(result["last"])
        clf = build_classifier(tiny_model_cfg(), seed=1)
        report = transfer_encoder(ckpt, clf)
        assert report["matched"] == len(clf.encoder_names())

        settings2 = TR.TrainSettings(
            phase="classifier", optimizer="nesterov",
            schedule=TR.LRSchedule(base_lr=0.01, end_lr=1e-4, total_steps=5),
            max_steps=5, batch_size=8, eval_every=5, seed=3,
        )
        TR.train(clf, tiny_dataset, settings2, tiny_aug_cfg(), tmp_path / "clf")

    def test_phase_model_mismatch(self, tiny_dataset, tmp_path):
        model = build_classifier(tiny_model_cfg(), seed=0)
        settings = TR.TrainSettings(phase="vae")
        with pytest.raises(TR.TrainingError, match="phase"):
            TR.train(model, tiny_dataset, settings, tiny_aug_cfg(), tmp_path)

    def test_eval_metrics_logged_with_validation(self, tiny_dataset, tmp_path):
        model = build_classifier(tiny_model_cfg(), seed=0)
        settings = TR.TrainSettings(
            phase="classifier",
            schedule=TR.LRSchedule(base_lr=0.01, total_steps=6),
            max_steps=6, batch_size=8, eval_every=5, seed=4,
        )
        result = TR.train(model, tiny_dataset, settings, tiny_aug_cfg(),
                          tmp_path, val_records=tiny_dataset)
        for record in result["history"]:
            assert {"step", "lr", "loss", "loss_parts", "metrics"} <= set(record)
            assert record["metrics"] is not None
            assert "binary_auc" in record["metrics"]


# ---------------------------------------------------------------------------
# ensembling


class TestEnsemble:
    def test_uniform_average(self):
        a = np.array([[0.6, 0.4]])
        b = np.array([[0.8, 0.2]])
        avg = TR.average_probabilities([a, b])
        # exact arithmetic mean (decimal literals differ by 1 ulp in binary)
        np.testing.assert_array_equal(avg, (a + b) / 2)
        np.testing.assert_allclose(avg, [[0.7, 0.3]], atol=1e-12)

    def test_single_checkpoint_equals_plain_predict(self, tiny_dataset, tmp_path):
        model = build_classifier(tiny_model_cfg(), seed=0)
        path = TR.save_checkpoint(model, tmp_path / "m.ckpt", {"step": 0})
        images = np.stack([
            D.eval_transform(D.decode_image(r.path), tiny_aug_cfg())
            for r in tiny_dataset[:4]
        ])
        single = TR.ensemble_predict([path], images)
        plain = TR.predict_proba(model, images)
        np.testing.assert_allclose(single, plain, atol=1e-7)
        np.testing.assert_allclose(single.sum(axis=1), 1.0, atol=1e-6)

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            TR.average_probabilities([np.zeros((1, 2)), np.zeros((1, 3))])
