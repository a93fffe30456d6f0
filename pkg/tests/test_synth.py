"""Synthetic world generators against binomial and counting oracles."""

import numpy as np
import numpy.testing as npt
import pytest

from advfuse.errors import ContractError
from advfuse.model import CLS_ID, MASK_ID, ModelConfig
from advfuse.synth import (
    WorldSpec,
    dump_dataset,
    gen_downstream_batch,
    gen_pair,
    gen_pretrain_batch,
    gen_probe_batch,
    load_dataset,
    nearest_prototype_count,
)


def make_world(noise_sigma=0.1, seed=0, **cfg_kw):
    cfg = ModelConfig(**cfg_kw) if cfg_kw else ModelConfig()
    return WorldSpec(cfg, noise_sigma=noise_sigma, seed=seed)


class TestWorldSpec:
    def test_prototypes_unit_norm_and_separated(self):
        world = make_world()
        norms = np.sqrt((world.prototypes ** 2).sum(axis=1))
        npt.assert_allclose(norms, 1.0, atol=1e-12)
        n = world.num_concepts
        dists = [
            np.sqrt(((world.prototypes[i] - world.prototypes[j]) ** 2).sum())
            for i in range(n) for j in range(i + 1, n)
        ]
        assert min(dists) > 4 * world.noise_sigma

    def test_tokens_injective_and_clear_of_specials(self):
        world = make_world()
        tokens = [world.concept_token(c) for c in range(world.num_concepts)]
        assert len(set(tokens)) == len(tokens)
        assert min(tokens) >= 3

    def test_deterministic_from_seed(self):
        a = make_world(seed=5)
        b = make_world(seed=5)
        npt.assert_array_equal(a.prototypes, b.prototypes)
        c = make_world(seed=6)
        assert np.any(a.prototypes != c.prototypes)

    def test_vocab_capacity_check(self):
        cfg = ModelConfig(vocab_size=16)
        with pytest.raises(ContractError):
            WorldSpec(cfg, num_concepts=16)


class TestGenPair:
    def test_zero_noise_features_equal_prototypes(self):
        world = make_world(noise_sigma=0.0)
        feats, boxes, tokens, tmask, rmask, meta = gen_pair(
            world, np.random.default_rng(1))
        for r in range(meta["n_regions"]):
            npt.assert_array_equal(feats[r], world.prototypes[meta["region_concepts"][r]])

    def test_fixed_seed_bitwise_identical(self):
        world = make_world()
        a = gen_pair(world, np.random.default_rng(42))
        b = gen_pair(world, np.random.default_rng(42))
        for x, y in zip(a[:5], b[:5]):
            npt.assert_array_equal(x, y)

    def test_caption_concepts_are_depicted(self):
        world = make_world()
        rng = np.random.default_rng(7)
        for _ in range(50):
            feats, boxes, tokens, tmask, rmask, meta = gen_pair(world, rng)
            depicted = set(c for c in meta["region_concepts"] if c >= 0)
            for tok in tokens[tmask == 1.0][1:]:
                c = world.token_concept(int(tok))
                if c >= 0:
                    assert c in depicted

    def test_box_coordinates_normalized(self):
        world = make_world()
        feats, boxes, tokens, tmask, rmask, meta = gen_pair(
            world, np.random.default_rng(3))
        n = meta["n_regions"]
        assert boxes[:n].min() >= 0.0 and boxes[:n].max() <= 1.0
        npt.assert_array_equal(boxes[n:], 0.0)


class TestPretrainBatches:
    def test_mlm_mask_fraction_binomial(self):
        world = make_world()
        rng = np.random.default_rng(11)
        masked = total = 0
        for _ in range(100):
            batch = gen_pretrain_batch(world, 100, "mlm", rng)
            eligible = (batch.txt_mask == 1.0) & (batch.txt_tokens != CLS_ID)
            masked += int((batch.mlm_targets >= 0).sum())
            total += int(eligible.sum())
        frac = masked / total
        assert 0.13 <= frac <= 0.17, frac

    def test_mlm_targets_align_with_mask_token(self):
        world = make_world()
        batch = gen_pretrain_batch(world, 8, "mlm", np.random.default_rng(12))
        chosen = batch.mlm_targets >= 0
        assert chosen.any()
        assert np.all(batch.txt_tokens[chosen] == MASK_ID)
        assert np.all(batch.mlm_targets[chosen] >= 3)
        assert np.all(batch.txt_tokens[~chosen] != MASK_ID)

    def test_mlm_force_full_masking(self):
        world = make_world()
        batch = gen_pretrain_batch(world, 4, "mlm", np.random.default_rng(13),
                                   mask_prob=1.0)
        eligible = (batch.txt_mask == 1.0) & (batch.txt_tokens != CLS_ID)
        assert np.all(batch.txt_tokens[eligible] == MASK_ID)

    def test_mlm_always_has_a_masked_position(self):
        world = make_world()
        rng = np.random.default_rng(14)
        for _ in range(50):
            batch = gen_pretrain_batch(world, 2, "mlm", rng, mask_prob=0.01)
            assert (batch.mlm_targets >= 0).any()

    def test_itm_label_mean_binomial(self):
        world = make_world()
        rng = np.random.default_rng(15)
        labels = []
        for _ in range(100):
            batch = gen_pretrain_batch(world, 100, "itm", rng)
            labels.append(batch.itm_label)
        mean = np.concatenate(labels).mean()
        assert 0.47 <= mean <= 0.53, mean

    def test_itm_never_swaps_own_caption(self):
        world = make_world()
        rng = np.random.default_rng(16)
        for _ in range(30):
            batch = gen_pretrain_batch(world, 6, "itm", rng)
            for i, meta in enumerate(batch.meta["samples"]):
                if "caption_from" in meta:
                    assert meta["caption_from"] != i
                    assert batch.itm_label[i] == 0
                else:
                    assert batch.itm_label[i] == 1

    def test_itm_needs_two_samples(self):
        world = make_world()
        with pytest.raises(ContractError):
            gen_pretrain_batch(world, 1, "itm", np.random.default_rng(0))

    def test_batches_are_deterministic(self):
        world = make_world()
        a = gen_pretrain_batch(world, 16, "mlm", np.random.default_rng(77))
        b = gen_pretrain_batch(world, 16, "mlm", np.random.default_rng(77))
        npt.assert_array_equal(a.txt_tokens, b.txt_tokens)
        npt.assert_array_equal(a.img_feats, b.img_feats)
        npt.assert_array_equal(a.mlm_targets, b.mlm_targets)


class TestProbeBatches:
    def test_unlabeled_and_valid(self):
        world = make_world()
        batch = gen_probe_batch(world, 6, np.random.default_rng(3))
        assert batch.mlm_targets is None
        assert batch.itm_label is None
        assert batch.answer_label is None
        assert len(batch.meta["samples"]) == 6

    def test_concept_spans_point_at_concept_tokens(self):
        world = make_world()
        batch = gen_probe_batch(world, 6, np.random.default_rng(4))
        for i, meta in enumerate(batch.meta["samples"]):
            for c, (start, stop) in meta["concept_spans"].items():
                assert batch.txt_tokens[i, start] == world.concept_token(c)
                assert stop == start + 1

    def test_deterministic(self):
        world = make_world()
        a = gen_probe_batch(world, 4, np.random.default_rng(9))
        b = gen_probe_batch(world, 4, np.random.default_rng(9))
        npt.assert_array_equal(a.img_feats, b.img_feats)
        npt.assert_array_equal(a.txt_tokens, b.txt_tokens)


class TestDownstreamBatches:
    def test_label_equals_constructed_count(self):
        world = make_world()
        rng = np.random.default_rng(21)
        for _ in range(10):
            batch = gen_downstream_batch(world, 16, rng)
            for i, meta in enumerate(batch.meta["samples"]):
                query = meta["query_concept"]
                count = sum(1 for c in meta["region_concepts"] if c == query)
                assert batch.answer_label[i] == min(count, 3)
                assert batch.answer_label[i] == meta["true_count"]

    def test_zero_count_label_zero(self):
        world = make_world()
        batch = gen_downstream_batch(world, 16, np.random.default_rng(22))
        zero_rows = np.nonzero(batch.answer_label == 0)[0]
        assert len(zero_rows) > 0
        for i in zero_rows:
            meta = batch.meta["samples"][i]
            assert meta["query_concept"] not in meta["region_concepts"]

    def test_class_histogram_near_uniform(self):
        world = make_world()
        rng = np.random.default_rng(23)
        labels = []
        for _ in range(100):
            labels.append(gen_downstream_batch(world, 100, rng).answer_label)
        hist = np.bincount(np.concatenate(labels), minlength=4) / 10000.0
        npt.assert_allclose(hist, 0.25, atol=0.05 * 0.25)

    def test_nearest_prototype_oracle_is_perfect_at_zero_noise(self):
        world = make_world(noise_sigma=0.0)
        rng = np.random.default_rng(24)
        batch = gen_downstream_batch(world, 200, rng)
        oracle = nearest_prototype_count(world, batch)
        npt.assert_array_equal(oracle, batch.answer_label)

    def test_question_names_the_query(self):
        world = make_world()
        batch = gen_downstream_batch(world, 8, np.random.default_rng(25))
        for i, meta in enumerate(batch.meta["samples"]):
            tok = batch.txt_tokens[i, 1]
            assert world.token_concept(int(tok)) == meta["query_concept"]
            assert batch.txt_mask[i, :2].sum() == 2.0


class TestDatasetRoundTrip:
    def test_dump_load_bit_exact(self, tmp_path):
        world = make_world()
        rng = np.random.default_rng(31)
        batch = gen_downstream_batch(world, 12, rng)
        path = tmp_path / "data.jsonl"
        dump_dataset([batch], path)
        back = load_dataset(path, world)
        npt.assert_array_equal(back.img_feats, batch.img_feats)
        npt.assert_array_equal(back.region_boxes, batch.region_boxes)
        npt.assert_array_equal(back.txt_tokens, batch.txt_tokens)
        npt.assert_array_equal(back.txt_mask, batch.txt_mask)
        npt.assert_array_equal(back.region_mask, batch.region_mask)
        npt.assert_array_equal(back.answer_label, batch.answer_label)
        assert back.meta["samples"][0]["query_span"] == (1, 2)

    def test_mlm_labels_round_trip(self, tmp_path):
        world = make_world()
        batch = gen_pretrain_batch(world, 6, "mlm", np.random.default_rng(32))
        path = tmp_path / "mlm.jsonl"
        dump_dataset([batch], path)
        back = load_dataset(path, world)
        npt.assert_array_equal(back.mlm_targets, batch.mlm_targets)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(ContractError):
            load_dataset(path, make_world())
