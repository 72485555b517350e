import json
import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from prune2edge import poolgen, store
from prune2edge.errors import ConfigError, PoolError

TINY = (8,)


@pytest.fixture(scope="module")
def tiny_dataset():
    return store.gen_dataset("blobs", 2000, 3, 1.0, seed=4)


def tiny_overrides(**extra):
    # 1280 training rows at batch 32 -> 40 steps/epoch, 120 steps over 3 epochs
    return {"epochs": 3, "batch_size": 32, "frequency": 100, **extra}


class TestHyperParams:
    def test_deterministic(self):
        a = poolgen.sample_hyperparams(np.random.default_rng(poolgen.member_seed(5, 2)))
        b = poolgen.sample_hyperparams(np.random.default_rng(poolgen.member_seed(5, 2)))
        assert a == b
        assert a != poolgen.sample_hyperparams(np.random.default_rng(poolgen.member_seed(5, 3)))

    def test_coverage_chi_square(self):
        draws = [poolgen.sample_hyperparams(np.random.default_rng(poolgen.member_seed(0, i))) for i in range(1000)]
        for field, choices in [("epochs", poolgen.EPOCHS), ("batch_size", poolgen.BATCH_SIZES),
                               ("loss", poolgen.LOSS_CHOICES), ("optimizer", poolgen.OPTIMIZER_CHOICES),
                               ("frequency", poolgen.FREQUENCIES)]:
            counts = Counter(getattr(d, field) for d in draws)
            assert set(counts) == set(choices), field
            observed = [counts[c] for c in choices]
            assert stats.chisquare(observed).pvalue > 0.001, field
        for d in draws:
            assert 0.1 <= d.initial_sparsity <= 0.6 and 0.7 <= d.final_sparsity <= 0.9
            assert d.initial_sparsity < d.final_sparsity

    def test_out_of_range_rejected(self):
        hp = poolgen.sample_hyperparams(np.random.default_rng(0))
        with pytest.raises(ConfigError):
            poolgen.HyperParams(**{**hp.__dict__, "batch_size": 16})
        with pytest.raises(ConfigError):
            poolgen.HyperParams(**{**hp.__dict__, "final_sparsity": 0.95})

    def test_schedule_fits_training(self):
        hp = poolgen.HyperParams(3, 128, "mean_squared_error", "adam", 0.2, 0.8, 400, 1)
        sched = poolgen.schedule_for(hp, 17280)
        assert sched.start_step == 0 and sched.end_step <= 3 * 135
        with pytest.raises(ConfigError):
            poolgen.schedule_for(hp, 1000)


class TestGeneratePool:
    def test_single_member(self, tiny_dataset, tmp_path):
        m = poolgen.generate_pool(tiny_dataset, 1, 0, tmp_path, hidden=TINY, overrides=tiny_overrides())
        assert len(m["entries"]) == 1 and m["entries"][0]["status"] == "ok"
        assert (tmp_path / "manifest.json").exists()

    def test_same_seed_same_bytes(self, tiny_dataset, tmp_path):
        kw = dict(hidden=TINY, overrides=tiny_overrides())
        poolgen.generate_pool(tiny_dataset, 3, 9, tmp_path / "a", **kw)
        poolgen.generate_pool(tiny_dataset, 3, 9, tmp_path / "b", workers=2, **kw)
        for name in ["manifest.json", "model_000.json", "model_001.json", "model_002.json"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_failed_member_recorded(self, tiny_dataset, tmp_path):
        # frequency 400 cannot fit into 120 steps
        over = tiny_overrides(frequency=lambda i: 400 if i == 1 else 100)
        m = poolgen.generate_pool(tiny_dataset, 3, 0, tmp_path, hidden=TINY, overrides=over)
        assert [e["status"] for e in m["entries"]] == ["ok", "failed", "ok"]
        assert "error" in m["entries"][1]
        manifest, models = poolgen.load_pool(tmp_path / "manifest.json")
        assert sorted(models) == [0, 2]

    def test_all_failed(self, tiny_dataset, tmp_path):
        with pytest.raises(PoolError):
            poolgen.generate_pool(tiny_dataset, 2, 0, tmp_path, hidden=TINY, overrides=tiny_overrides(frequency=400))

    def test_zero_size(self, tiny_dataset, tmp_path):
        with pytest.raises(ConfigError):
            poolgen.generate_pool(tiny_dataset, 0, 0, tmp_path)

    def test_duplicate_ids_rejected(self, tiny_dataset, tmp_path):
        poolgen.generate_pool(tiny_dataset, 2, 0, tmp_path, hidden=TINY, overrides=tiny_overrides())
        path = tmp_path / "manifest.json"
        doc = json.loads(path.read_text())
        doc["entries"][1]["model_id"] = 0
        path.write_text(json.dumps(doc))
        with pytest.raises(PoolError):
            poolgen.load_pool(path)


class TestPoolInvariants:
    def test_entries(self, small_pool):
        out, manifest = small_pool
        entries = poolgen.ok_entries(manifest)
        assert len(entries) == 6
        for e in entries:
            hp = e["hyperparams"]
            assert e["quantized"]
            assert e["file_size"] == (out / e["path"]).stat().st_size
            # at least floor(s_f * size) zeros per tensor; quantization can only add zeros
            sizes = [2 * 256, 256 * 128, 128 * 4]
            for s, size in zip(e["tensor_sparsity"], sizes):
                assert s * size >= math.floor(hp["final_sparsity"] * size)
            assert e["file_size"] < e["dense_f32_size"]

    def test_accuracy_spread(self, small_pool):
        _, manifest = small_pool
        accs = [e["pruning_accuracy"] for e in poolgen.ok_entries(manifest)]
        assert np.std(accs) > 0

    def test_hyperparams_vary(self, small_pool):
        _, manifest = small_pool
        hps = {json.dumps(e["hyperparams"], sort_keys=True) for e in manifest["entries"]}
        assert len(hps) == 6

    def test_load_pool_matches_files(self, small_pool):
        out, manifest = small_pool
        loaded, models = poolgen.load_pool(out / "manifest.json")
        assert loaded == json.loads((out / "manifest.json").read_text())
        for mid, model in models.items():
            assert model.is_quantized and model.metadata["hyperparams"]["seed"] == manifest["entries"][mid]["hyperparams"]["seed"]
