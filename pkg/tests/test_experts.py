import numpy as np
import pytest

from amulet import corpus as cp
from amulet import experts as ex
from amulet import tensor as tc
from amulet.audio import AudioClip

from oracles import finite_difference_grads, relative_error

TINY = cp.SynthConfig(n_train=24, n_dev=8, n_eval=6)
ENC = ex.EncoderConfig()


def random_clip(seed, seconds=2.0, sr=16000):
    rng = np.random.default_rng(seed)
    return AudioClip(0.4 * rng.standard_normal(int(seconds * sr)), sr, f"rc{seed}", "bonafide")


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = cp.build_corpus(TINY, root, seed=51)
    return manifest, root


class TestFrameFeatures:
    def test_frame_count_default(self):
        clip = random_clip(0)
        feats = ex.frame_features(clip, ENC)
        assert feats.shape == (200, 160)

    def test_frame_count_formula(self):
        clip = AudioClip(np.ones(1000), 16000, "x", "bonafide")
        cfg = ex.EncoderConfig(frame_len=160, hop=100, hidden_dims=(8, 8))
        feats = ex.frame_features(clip, cfg)
        assert feats.shape[0] == (1000 - 160) // 100 + 1

    def test_constant_clip_zero_features(self):
        clip = AudioClip(np.full(32000, 0.25), 16000, "c", "bonafide")
        feats = ex.frame_features(clip, ENC)
        assert np.allclose(feats, 0.0)

    def test_short_clip_rejected(self):
        clip = AudioClip(np.ones(100), 16000, "s", "bonafide")
        with pytest.raises(ex.ExpertError):
            ex.frame_features(clip, ENC)


class TestLoraAlgebra:
    def test_merged_equals_base_at_init(self):
        w0 = np.random.default_rng(0).standard_normal((6, 4))
        adapter = ex.LoraAdapter(
            np.random.default_rng(1).normal(0, 0.02, (6, 2)), np.zeros((2, 4)),
            rank=2, alpha=8.0, dropout_p=0.1,
        )
        assert np.array_equal(ex.lora_merged_weight(w0, adapter), w0)

    def test_hand_case(self):
        w0 = np.zeros((2, 2))
        adapter = ex.LoraAdapter(
            np.array([[1.0], [0.0]]), np.array([[1.0, 2.0]]),
            rank=1, alpha=4.0, dropout_p=0.0,
        )
        merged = ex.lora_merged_weight(w0, adapter)
        assert np.array_equal(merged, [[4.0, 8.0], [0.0, 0.0]])

    def test_literal_scale_mode(self):
        adapter = ex.LoraAdapter(
            np.zeros((2, 4)), np.zeros((4, 2)),
            rank=4, alpha=4.0, dropout_p=0.0, scale_mode=ex.SCALE_ALPHA_LITERAL,
        )
        # literal mode ignores the rank divisor
        assert adapter.scale == 4.0
        over_r = ex.LoraAdapter(np.zeros((2, 4)), np.zeros((4, 2)), 4, 4.0, 0.0)
        assert over_r.scale == 1.0

    def test_shape_mismatch(self):
        adapter = ex.LoraAdapter(np.zeros((3, 1)), np.zeros((1, 2)), 1, 1.0, 0.0)
        with pytest.raises(ex.ExpertError):
            ex.lora_merged_weight(np.zeros((2, 2)), adapter)

    def test_two_path_equals_merged_forward(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            m, r, n, t = rng.integers(2, 12, size=4)
            w0 = rng.standard_normal((m, n))
            a = rng.normal(0, 0.02, (m, r))
            b = rng.standard_normal((r, n))
            adapter = ex.LoraAdapter(a, b, int(r), float(rng.uniform(1, 32)), 0.0)
            x = rng.standard_normal((t, m))
            merged = tc.matmul_values(x, ex.lora_merged_weight(w0, adapter))
            two_path = tc.matmul_values(x, w0) + adapter.scale * tc.matmul_values(
                tc.matmul_values(x, a), b
            )
            assert np.max(np.abs(merged - two_path)) < 1e-10


class TestLoraInject:
    def test_identity_at_init_bitwise(self):
        base = ex.new_expert(ENC, seed=3)
        injected = ex.lora_inject(base, rank=4, alpha=16.0, dropout_p=0.1, seed=4)
        for seed in range(5):
            feats = ex.frame_features(random_clip(seed), ENC)
            assert np.array_equal(
                ex.encoder_forward(base, feats), ex.encoder_forward(injected, feats)
            )
            assert np.array_equal(
                ex.expert_logits(base, feats), ex.expert_logits(injected, feats)
            )

    def test_trainable_count_formula_and_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            dims = tuple(int(d) for d in rng.integers(2, 40, size=int(rng.integers(1, 4))))
            frame_len = int(rng.integers(8, 200))
            rank = int(rng.integers(1, 8))
            cfg = ex.EncoderConfig(frame_len=frame_len, hop=frame_len, hidden_dims=dims)
            injected = ex.lora_inject(ex.new_expert(cfg, 0), rank, 8.0, 0.0, seed=1)
            counts = ex.count_trainable(injected)
            chain = (frame_len, *dims)
            formula = sum(rank * (m + n) for m, n in zip(chain[:-1], chain[1:]))
            brute = sum(
                injected.tensors[name].size
                for name in injected.tensors
                if not name.startswith("head.") and name not in injected.frozen
            )
            assert counts["trainable"] == formula == brute

    def test_default_architecture_counts(self):
        injected = ex.lora_inject(ex.new_expert(ENC, 0), rank=4, alpha=16.0, dropout_p=0.1, seed=1)
        counts = ex.count_trainable(injected)
        assert counts["trainable"] == 1920
        assert counts["total"] == 18624
        assert round(counts["percent"], 2) == 10.31

    def test_double_injection_rejected(self):
        injected = ex.lora_inject(ex.new_expert(ENC, 0), 4, 16.0, 0.1, seed=1)
        with pytest.raises(ex.ExpertError):
            ex.lora_inject(injected, 4, 16.0, 0.1, seed=2)

    def test_frozen_everything_counts_zero(self):
        model = ex.new_expert(ENC, 0)
        model.frozen = set(model.tensors)
        assert ex.count_trainable(model)["trainable"] == 0

    def test_fully_trainable_is_100_percent(self):
        assert ex.count_trainable(ex.new_expert(ENC, 0))["percent"] == 100.0


class TestForwardGradients:
    def test_graph_forward_matches_plain_bitwise(self):
        model = ex.lora_inject(ex.new_expert(ENC, 5), 4, 16.0, 0.1, seed=6)
        rng = np.random.default_rng(0)
        model.tensors["lora.b1"] = rng.normal(0, 0.1, model.tensors["lora.b1"].shape)
        feats = ex.frame_features(random_clip(9), ENC)
        plain = ex.encoder_forward(model, feats)
        leaves = ex.make_leaves(model)
        graph = ex.encoder_forward_nodes(model, leaves, feats)
        assert np.array_equal(plain, graph.value)

    def test_expert_loss_matches_finite_differences(self):
        cfg = ex.EncoderConfig(frame_len=12, hop=12, hidden_dims=(6, 6))
        model = ex.lora_inject(ex.new_expert(cfg, 1), rank=2, alpha=4.0, dropout_p=0.0, seed=2)
        rng = np.random.default_rng(3)
        for i in range(model.n_layers):
            model.tensors[f"lora.b{i}"] = rng.normal(0, 0.2, model.tensors[f"lora.b{i}"].shape)
        feats = rng.standard_normal((5, 12)) * 0.4

        def loss_value(tensors):
            probe = ex.ExpertModel(cfg, tensors, model.frozen, model.lora_meta)
            leaves = ex.make_leaves(probe)
            return float(ex.loss_nodes(probe, leaves, feats, "spoof").value[0, 0])

        leaves = ex.make_leaves(model)
        loss = ex.loss_nodes(model, leaves, feats, "spoof")
        tc.backward(loss)
        trainable = {n: model.tensors[n] for n in model.tensors if n not in model.frozen}
        fd = finite_difference_grads(lambda vals: loss_value({**model.tensors, **vals}), trainable)
        for name in trainable:
            assert relative_error(leaves[name].grad, fd[name]) < 1e-4, name

    def test_zero_features_zero_bias_gives_zero_output(self):
        model = ex.new_expert(ENC, 2)
        for i in range(model.n_layers):
            model.tensors[f"enc.b{i}"] = np.zeros_like(model.tensors[f"enc.b{i}"])
        out = ex.encoder_forward(model, np.zeros((4, 160)))
        assert np.array_equal(out, np.zeros((4, 64)))


class TestTraining:
    def test_loss_decreases_and_reload_reproduces_dev_eer(self, tiny_corpus, tmp_path):
        manifest, root = tiny_corpus
        hyper = ex.TrainHyper(max_epochs=3)
        model, history = ex.train_shared(
            ENC, manifest.split("train"), manifest.split("dev"), root, hyper, seed=77
        )
        assert history[1]["loss"] < history[0]["loss"]

        feats = [ex.frame_features(cp.resolve_clip(e, root), ENC) for e in manifest.split("dev")]
        labels = [e.label for e in manifest.split("dev")]
        before = ex.dev_eer(model, feats, labels)
        path = tmp_path / "e0.json"
        ex.save_expert_checkpoint(model, path)
        reloaded = ex.load_expert_checkpoint(path)
        assert ex.dev_eer(reloaded, feats, labels) == before
        for name in model.tensors:
            assert np.array_equal(model.tensors[name], reloaded.tensors[name])

    def test_training_is_deterministic(self, tiny_corpus, tmp_path):
        manifest, root = tiny_corpus
        hyper = ex.TrainHyper(max_epochs=2)
        paths = []
        for run in range(2):
            model, _ = ex.train_shared(
                ENC, manifest.split("train"), manifest.split("dev"), root, hyper, seed=88
            )
            path = tmp_path / f"run{run}.json"
            ex.save_expert_checkpoint(model, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_ase_training_respects_frozen_contract(self, tiny_corpus):
        manifest, root = tiny_corpus
        hyper = ex.TrainHyper(max_epochs=2)
        base, _ = ex.train_shared(
            ENC, manifest.split("train"), manifest.split("dev"), root, hyper, seed=99
        )
        base_enc = ex.encoder_checksum(base)
        ase, _ = ex.train_ase(
            base, "T0", manifest.split("train"), manifest.split("dev"), root,
            rank=2, alpha=8.0, dropout_p=0.1, hyper=hyper, seed=100,
        )
        assert ex.encoder_checksum(ase) == base_enc
        assert any(np.any(ase.tensors[f"lora.b{i}"] != 0.0) for i in range(ase.n_layers))

    def test_frozen_drift_is_hard_failure(self, tiny_corpus, monkeypatch):
        manifest, root = tiny_corpus
        base = ex.new_expert(ENC, 7)
        injected = ex.lora_inject(base, 2, 8.0, 0.0, seed=8)

        real_make_leaves = ex.make_leaves

        def leaky_make_leaves(model):
            leaves = real_make_leaves(model)
            leaves["enc.w0"] = tc.Node(model.tensors["enc.w0"], requires_grad=True)
            return leaves

        monkeypatch.setattr(ex, "make_leaves", leaky_make_leaves)
        dev = manifest.split("dev")
        balanced_dev = dev[:2] + dev[-2:]
        # a zero head blocks encoder gradients on the very first step, so give
        # the leak a couple of epochs to actually move the frozen tensor
        with pytest.raises(ex.FrozenContractError):
            ex.train_expert(
                injected, manifest.split("train")[:8], balanced_dev,
                root, ex.TrainHyper(max_epochs=3), seed=101,
            )

    def test_non_finite_loss_aborts(self, tiny_corpus):
        manifest, root = tiny_corpus
        model = ex.new_expert(ENC, 9)
        model.tensors["head.w"] = np.full_like(model.tensors["head.w"], 1e308)
        dev = manifest.split("dev")
        with pytest.raises((tc.NonFiniteError, OverflowError)):
            ex.train_expert(
                model, manifest.split("train")[:4], dev[:2] + dev[-2:],
                root, ex.TrainHyper(max_epochs=1), seed=102,
            )


class TestCheckpoints:
    def test_adapter_checkpoint_small_and_binding(self, tmp_path):
        base = ex.new_expert(ENC, 12)
        injected = ex.lora_inject(base, rank=4, alpha=16.0, dropout_p=0.1, seed=13)
        full_path = tmp_path / "full.json"
        adapter_path = tmp_path / "adapter.json"
        ex.save_expert_checkpoint(injected, full_path)
        ex.save_adapter_checkpoint(injected, adapter_path)
        ratio = adapter_path.stat().st_size / full_path.stat().st_size
        assert ratio < 0.15

        restored = ex.load_adapter_checkpoint(adapter_path, base)
        feats = ex.frame_features(random_clip(3), ENC)
        assert np.array_equal(
            ex.expert_logits(restored, feats), ex.expert_logits(injected, feats)
        )

    def test_adapter_binding_mismatch_fails(self, tmp_path):
        base = ex.new_expert(ENC, 14)
        injected = ex.lora_inject(base, 4, 16.0, 0.1, seed=15)
        path = tmp_path / "adapter.json"
        ex.save_adapter_checkpoint(injected, path)
        other = ex.new_expert(ENC, 999)
        with pytest.raises(ex.CheckpointError, match="different base"):
            ex.load_adapter_checkpoint(path, other)

    def test_corrupted_checkpoint_detected(self, tmp_path):
        model = ex.new_expert(ENC, 16)
        path = tmp_path / "ckpt.json"
        ex.save_expert_checkpoint(model, path)
        text = path.read_text().replace('"version":1', '"version":2')
        path.write_text(text)
        with pytest.raises(ex.CheckpointError, match="checksum"):
            ex.load_expert_checkpoint(path)

    def test_adapter_requires_adapters(self, tmp_path):
        with pytest.raises(ex.CheckpointError):
            ex.save_adapter_checkpoint(ex.new_expert(ENC, 17), tmp_path / "x.json")
