import json
import statistics

import numpy as np
import pytest
import torch

import ssankit.engine as engine
from ssankit.config import ConfigError, ModelConfig, TrainConfig, load_config
from ssankit.data import SyntheticSpec, generate_synthetic
from ssankit.engine import (
    TrainingDiverged,
    TrainState,
    identity_batches,
    learning_rate,
    resume,
    sample_companions,
    train,
)
from ssankit.model import SSAN


@pytest.fixture(scope="module")
def records():
    train_recs, _ = generate_synthetic(SyntheticSpec(identities=4, images_per_identity=2, test_identities=0, seed=3))
    return train_recs


def tiny_cfg(**kw):
    base = dict(batch_size=4, epochs=1, lr=1e-3, model=ModelConfig.tiny())
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_full_scale_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.lr) == (64, 60, 1e-3)
        m = cfg.model
        assert (m.parts, m.embed_dim, m.global_dim, m.part_out_dim, m.relation_dim) == (6, 512, 1024, 512, 512)
        assert (cfg.loss.margin, cfg.loss.beta, cfg.loss.stream_weights) == (0.2, 0.1, (1.0, 0.5, 0.5))

    def test_batch_too_small(self):
        with pytest.raises(ConfigError, match="at least 4"):
            tiny_cfg(batch_size=2).validate()

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"batch_sise": 8}))
        with pytest.raises(ConfigError, match="batch_sise"):
            load_config(tmp_path / "c.json")

    def test_round_trip(self):
        cfg = tiny_cfg(lr_decay_epochs=(5, 9))
        again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg


class TestForward:
    def test_tiny_shapes(self):
        model = SSAN(ModelConfig.tiny(vocab_size=8)).eval()
        vis, txt = model(torch.randn(2, 3, 96, 32), torch.tensor([[2, 3, 4], [5, 6, 0]]), torch.tensor([3, 2]))
        for bundle in (vis, txt):
            assert tuple(bundle.concat(s).shape[1] for s in ("global", "pfl", "prl")) == (32, 96, 48)
        assert txt.word_scores.shape == (2, 3, 3)

    @pytest.mark.slow
    def test_full_scale_shapes(self):
        model = SSAN(ModelConfig(vocab_size=8)).eval()
        with torch.no_grad():
            vis, txt = model(torch.randn(1, 3, 384, 128), torch.tensor([[2, 3]]), torch.tensor([2]))
        for bundle in (vis, txt):
            assert tuple(bundle.concat(s).shape[1] for s in ("global", "pfl", "prl")) == (1024, 6144, 3072)

    def test_deterministic(self):
        model = SSAN(ModelConfig.tiny(vocab_size=8)).eval()
        args = torch.randn(2, 3, 96, 32), torch.tensor([[2, 3], [4, 5]]), torch.tensor([2, 2])
        (v1, t1), (v2, t2) = model(*args), model(*args)
        for s in ("global", "pfl", "prl"):
            assert torch.equal(v1.stream(s), v2.stream(s)) and torch.equal(t1.stream(s), t2.stream(s))


class TestSampler:
    labels = np.repeat(np.arange(6), 3)

    def test_balanced_batches(self):
        batches = identity_batches(self.labels, 4, 2, np.random.default_rng(0))
        seen = np.concatenate(batches)
        assert sorted(seen.tolist()) == list(range(18))
        for b in batches:
            assert len(np.unique(self.labels[b])) >= 2

    def test_companions_same_identity_other_image(self):
        rng = np.random.default_rng(1)
        batch = np.arange(18)
        comp = sample_companions(batch, self.labels, rng)
        assert (self.labels[comp] == self.labels[batch]).all()
        assert (comp != batch).all()

    def test_single_image_falls_back_to_itself(self):
        comp = sample_companions(np.array([0]), np.array([7, 8]), np.random.default_rng(0))
        assert comp.tolist() == [0]


def test_learning_rate_step_decay():
    cfg = TrainConfig(lr=1e-3, lr_decay_epochs=(40,), lr_decay=0.1)
    assert learning_rate(cfg, 39) == 1e-3
    assert learning_rate(cfg, 40) == pytest.approx(1e-4)


class TestTraining:
    def test_smoke_and_checkpoint(self, records, tmp_path):
        state = train(tiny_cfg(), records, tmp_path)
        assert (tmp_path / "epoch_001.npz").is_file()
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert set(json.loads(lines[0])) == {"step", "L_cr_global", "L_cr_pfl", "L_cr_prl",
                                             "L_id_global", "L_id_pfl", "L_id_prl", "total"}
        loaded = TrainState.load(tmp_path / "epoch_001.npz")
        images = torch.randn(2, 3, 96, 32)
        ids, lengths = torch.tensor([[2, 3, 4]] * 2), torch.tensor([3, 2])
        before, after = state.model.eval()(images, ids, lengths), loaded.model.eval()(images, ids, lengths)
        for b, a in zip(before, after):
            for s in ("global", "pfl", "prl"):
                assert torch.equal(b.stream(s), a.stream(s))

    def test_loss_decreases(self, records):
        first, last = [], []
        for seed in range(3):
            state = train(tiny_cfg(epochs=10, seed=seed), records)
            first.append(state.history[0]["mean_loss"])
            last.append(state.history[-1]["mean_loss"])
        assert all(np.isfinite(first))
        assert statistics.median(last) < statistics.median(first)

    def test_same_seed_same_trajectory(self, records):
        a = train(tiny_cfg(epochs=2, seed=5), records)
        b = train(tiny_cfg(epochs=2, seed=5), records)
        assert a.history == b.history
        for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert ka == kb and torch.equal(pa, pb)

    def test_resume_matches_uninterrupted(self, records, tmp_path):
        full = train(tiny_cfg(epochs=3, seed=2), records)
        train(tiny_cfg(epochs=2, seed=2), records, tmp_path)
        resumed = resume(tmp_path / "epoch_002.npz", records, epochs=3)
        assert resumed.history == full.history
        for (_, pa), (_, pb) in zip(full.named_parameters(), resumed.named_parameters()):
            assert torch.equal(pa, pb)

    def test_resume_rejects_other_identities(self, records, tmp_path):
        train(tiny_cfg(), records, tmp_path)
        others, _ = generate_synthetic(SyntheticSpec(identities=4, images_per_identity=2, test_identities=0, seed=4))
        others = [type(r)(r.identity_id + 100, r.image_ref, r.captions, r.pixels) for r in others]
        with pytest.raises(ValueError, match="identities differ"):
            resume(tmp_path / "epoch_001.npz", others, epochs=2)

    def test_divergence_dumps_batch(self, records, tmp_path, monkeypatch):
        real = engine.total_loss

        def poisoned(*args, **kw):
            loss, parts = real(*args, **kw)
            return loss * float("nan"), parts

        monkeypatch.setattr(engine, "total_loss", poisoned)
        with pytest.raises(TrainingDiverged, match="batch dumped"):
            train(tiny_cfg(), records, tmp_path)
        dump = json.loads(next(tmp_path.glob("diverged_step*.json")).read_text())
        assert {"batch", "captions", "weak_captions"} <= set(dump)
