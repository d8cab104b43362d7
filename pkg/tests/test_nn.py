import numpy as np
import pytest

from cdcml import losses as L
from cdcml.errors import CheckpointFormatError, DataError, NumericError, ShapeError
from cdcml.gradcheck import check_layer
from cdcml.nn import (
    ArchConfig,
    Network,
    OptimizerState,
    affine,
    apply_sgd,
    batch_norm,
    build_model,
    dropout,
    load_checkpoint,
    lr_at,
    relu,
    save_checkpoint,
    sigmoid,
)
from cdcml.trainer import SplitData, TrainConfig

from conftest import build_split_data


class TestForward:
    def test_identity_affine(self):
        net = Network([affine(3, 3)], seed=0)
        net.params[0]["W"] = np.eye(3)
        net.params[0]["b"] = np.zeros(3)
        x = np.array([[1.0, -2.0, 0.5], [0.0, 4.0, -1.0]])
        out, _ = net.forward(x, mode="eval")
        assert np.array_equal(out, x)

    def test_relu_definition(self):
        net = Network([relu(3)], seed=0)
        out, _ = net.forward(np.array([[-1.0, 0.0, 2.0]]), mode="eval")
        assert np.array_equal(out, [[0.0, 0.0, 2.0]])

    def test_sigmoid_at_zero(self):
        net = Network([sigmoid(1)], seed=0)
        out, cache = net.forward(np.array([[0.0], [0.0]]), mode="eval")
        assert np.allclose(out, 0.5)
        dx, _ = net.backward(cache, np.ones((2, 1)))
        assert np.allclose(dx, 0.25)

    def test_dropout_eval_is_identity(self):
        net = Network([dropout(4, 0.5)], seed=0)
        x = np.random.default_rng(0).normal(size=(3, 4))
        out, _ = net.forward(x, mode="eval")
        assert np.array_equal(out, x)

    def test_dropout_train_mask_seeded(self):
        net = Network([dropout(6, 0.5)], seed=0)
        x = np.ones((4, 6))
        a, _ = net.forward(x, mode="train", dropout_seed=9)
        b, _ = net.forward(x, mode="train", dropout_seed=9)
        c, _ = net.forward(x, mode="train", dropout_seed=10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert set(np.unique(a)) <= {0.0, 2.0}  # survivors scaled by 1/(1-rate)

    def test_dropout_needs_seed_in_train(self):
        net = Network([dropout(4, 0.5)], seed=0)
        with pytest.raises(DataError):
            net.forward(np.ones((2, 4)), mode="train")

    def test_batch_norm_standardizes_batch(self):
        net = Network([batch_norm(3)], seed=0)
        x = np.random.default_rng(1).normal(2.0, 3.0, size=(64, 3))
        out, _ = net.forward(x, mode="train")
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=0), 1.0, atol=1e-3)  # variance floor skews slightly

    def test_batch_norm_running_update(self):
        net = Network([batch_norm(2)], seed=0)
        x = np.array([[1.0, 10.0], [3.0, 14.0]])
        net.forward(x, mode="train")
        assert np.allclose(net.running[0]["mean"], 0.9 * 0.0 + 0.1 * np.array([2.0, 12.0]))
        assert np.allclose(net.running[0]["var"], 0.9 * 1.0 + 0.1 * np.array([1.0, 4.0]))

    def test_batch_norm_train_needs_two_rows(self):
        net = Network([batch_norm(2)], seed=0)
        with pytest.raises(DataError):
            net.forward(np.ones((1, 2)), mode="train")
        out, _ = net.forward(np.ones((1, 2)), mode="eval")
        assert out.shape == (1, 2)

    def test_dimension_mismatch(self):
        net = Network([affine(3, 2)], seed=0)
        with pytest.raises(ShapeError):
            net.forward(np.ones((2, 4)))

    def test_specs_must_chain(self):
        with pytest.raises(ShapeError):
            Network([affine(3, 2), affine(3, 1)], seed=0)


class TestBackward:
    def test_zero_output_grad_gives_zero_grads(self):
        net = Network(
            [affine(4, 5), batch_norm(5), relu(5), affine(5, 2), sigmoid(2)], seed=3
        )
        x = np.random.default_rng(0).normal(size=(6, 4))
        _, cache = net.forward(x, mode="train")
        dx, grads = net.backward(cache, np.zeros((6, 2)))
        assert np.all(dx == 0.0)
        for layer in grads:
            for g in layer.values():
                assert np.all(g == 0.0)

    @pytest.mark.parametrize("kind", ["affine", "batch_norm", "relu", "sigmoid",
                                      "dropout", "stack"])
    def test_gradcheck_each_layer_kind(self, kind):
        for seed in range(6):
            mode = "train" if seed % 2 == 0 else "eval"
            assert check_layer(kind, seed=seed, mode=mode) < 1e-6

    def test_stale_cache_detected(self):
        net = Network([affine(3, 2)], seed=0)
        other = Network([relu(3)], seed=0)
        _, cache = other.forward(np.ones((2, 3)))
        with pytest.raises(DataError):
            net.backward(cache, np.ones((2, 2)))


class TestSGD:
    def test_zero_lr_keeps_params(self):
        net = Network([affine(2, 2)], seed=1)
        before = net.params[0]["W"].copy()
        apply_sgd(net, [{"W": np.ones((2, 2)), "b": np.ones(2)}], lr=0.0)
        assert np.array_equal(net.params[0]["W"], before)

    def test_one_step_arithmetic(self):
        net = Network([affine(1, 1)], seed=1)
        net.params[0]["W"][:] = 1.0
        apply_sgd(net, [{"W": np.array([[0.5]]), "b": np.zeros(1)}], lr=0.1)
        assert net.params[0]["W"][0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_non_finite_gradient_aborts(self):
        net = Network([affine(2, 2)], seed=1)
        with pytest.raises(NumericError):
            apply_sgd(net, [{"W": np.full((2, 2), np.nan), "b": np.zeros(2)}], lr=0.1)

    def test_full_model_step_descends(self, tiny_corpus):
        _, data = build_split_data(tiny_corpus)
        arch = ArchConfig(embed_dim=8, branch_hidden=(8,), sim_hidden=(8,),
                          va_hidden=(8,))
        model = build_model(data.image_dim, data.music_dim, arch=arch, seed=2)
        pairs = data.pairs["train"]
        items = data.items["train"]
        img_x = items["image"].features[pairs.image_rows]
        mus_x = items["music"].features[pairs.music_rows]
        cfg = L.LossConfig.similarity_family()

        def loss_and_grads():
            img_emb, img_cache = model.image_branch.forward(
                img_x, mode="train", update_stats=False
            )
            mus_emb, mus_cache = model.music_branch.forward(
                mus_x, mode="train", update_stats=False
            )
            concat = np.concatenate([img_emb, mus_emb], axis=1)
            sim_out, sim_cache = model.similarity_predictor.forward(
                concat, mode="train", dropout_seed=7, update_stats=False
            )
            reports = [
                L.sim_mse_loss(sim_out[:, 0], pairs.similarity),
                L.cfm_loss(img_emb, mus_emb, cfg),
            ]
            tot = L.total_loss(reports, L.LossConfig.from_ablation_flags(
                sim=True, va=False, cfr=False, cfm=True, sfr=False))
            d_concat, sim_grads = model.similarity_predictor.backward(
                sim_cache, tot.grads[L.GRAD_SIM_PRED][:, None]
            )
            e = img_emb.shape[1]
            d_img = tot.grads[L.GRAD_IMG_EMB] + d_concat[:, :e]
            d_mus = tot.grads[L.GRAD_MUS_EMB] + d_concat[:, e:]
            _, ig = model.image_branch.backward(img_cache, d_img)
            _, mg = model.music_branch.backward(mus_cache, d_mus)
            return tot.total, (ig, mg, sim_grads)

        before, grads = loss_and_grads()
        apply_sgd(model.image_branch, grads[0], lr=1e-5)
        apply_sgd(model.music_branch, grads[1], lr=1e-5)
        apply_sgd(model.similarity_predictor, grads[2], lr=1e-5)
        after, _ = loss_and_grads()
        assert after < before


class TestSchedule:
    def test_lr_at_decay_points(self):
        opt = OptimizerState()
        assert lr_at(opt, 0) == pytest.approx(1e-3)
        assert lr_at(opt, 9) == pytest.approx(1e-3)
        assert lr_at(opt, 10) == pytest.approx(1e-4)
        assert lr_at(opt, 25) == pytest.approx(1e-5)

    def test_negative_epoch_rejected(self):
        with pytest.raises(DataError):
            lr_at(OptimizerState(), -1)


class TestCheckpoints:
    def small_model(self):
        arch = ArchConfig(embed_dim=6, branch_hidden=(5,), sim_hidden=(4,),
                          va_hidden=(4,))
        return build_model(3, 4, arch=arch, seed=9)

    def test_round_trip_bit_exact(self, tmp_path):
        model = self.small_model()
        x = np.random.default_rng(2).normal(size=(5, 3))
        y = np.random.default_rng(3).normal(size=(5, 4))
        before = model.predict_similarity(x, y)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        after = loaded.predict_similarity(x, y)
        assert np.array_equal(before, after)
        for (n1, net1), (n2, net2) in zip(model.networks(), loaded.networks()):
            assert n1 == n2
            for (k1, a1), (k2, a2) in zip(net1.param_entries(), net2.param_entries()):
                assert k1 == k2 and np.array_equal(a1, a2)

    def test_corrupt_magic_rejected(self, tmp_path):
        model = self.small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(b"xdcml-ckpt v9" + raw[13:])
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file_names_tensor(self, tmp_path):
        model = self.small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 64])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_tampered_shape_rejected(self, tmp_path):
        model = self.small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        tampered = raw.replace(b"tensor image_branch.0.W 3 5", b"tensor image_branch.0.W 5 3", 1)
        assert tampered != raw
        path.write_bytes(tampered)
        with pytest.raises((CheckpointFormatError, ShapeError)):
            load_checkpoint(path)
