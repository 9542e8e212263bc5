import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from grain.errors import ConfigError, ShapeError
from grain.evaluate import (
    CLASS_TEMPLATE,
    DESCRIPTION_TEMPLATE,
    ClassPromptSet,
    GrainEncoder,
    MetricReport,
    build_classifier,
    classify,
    classify_by_attributes,
    classify_by_region_match,
    dump_groundings,
    map_free_text_to_vocab,
    retrieve,
)
from grain.model import parameter_digest

from .oracles import recall_at_k_oracle


class TableEncoder:
    """Embedding lookup by exact string / array index, for fixture tests."""

    def __init__(self, text_table, image_rows=None):
        self.text_table = {k: np.asarray(v, dtype=np.float64) for k, v in text_table.items()}
        self.image_rows = None if image_rows is None else np.asarray(image_rows, dtype=np.float64)

    def embed_texts(self, texts):
        return np.stack([self.text_table[t] for t in texts])

    def embed_images(self, images):
        return self.image_rows[np.asarray(images, dtype=np.int64)]


def unit(*v):
    arr = np.asarray(v, dtype=np.float64)
    return arr / np.linalg.norm(arr)


class TestBuildClassifier:
    def test_averages_class_prompt_with_descriptions(self):
        table = {
            "a photo of a cat": unit(1, 0, 0),
            "cat, which has whiskers": unit(0, 1, 0),
            "a photo of a dog": unit(0, 0, 1),
        }
        sets = [
            ClassPromptSet("cat", ["has whiskers"]),
            ClassPromptSet("dog", []),
        ]
        classifier = build_classifier(sets, TableEncoder(table))
        np.testing.assert_allclose(classifier[0], unit(1, 1, 0), atol=1e-12)
        np.testing.assert_allclose(classifier[1], unit(0, 0, 1), atol=1e-12)

    def test_duplicate_descriptions_counted_once(self):
        table = {
            "a photo of a cat": unit(1, 0),
            "cat, which striped": unit(0, 1),
        }
        once = build_classifier([ClassPromptSet("cat", ["striped"])], TableEncoder(table))
        thrice = build_classifier(
            [ClassPromptSet("cat", ["striped", "striped", "striped"])], TableEncoder(table)
        )
        np.testing.assert_allclose(once, thrice, atol=1e-12)

    def test_custom_templates(self):
        # the table only knows the custom phrasings, so default templates
        # would KeyError
        table = {
            "an image showing a cat": unit(1, 0),
            "cat :: striped": unit(0, 1),
        }
        classifier = build_classifier(
            [ClassPromptSet("cat", ["striped"])],
            TableEncoder(table),
            class_template="an image showing a {classname}",
            description_template="{classname} :: {description}",
        )
        np.testing.assert_allclose(classifier[0], unit(1, 1), atol=1e-12)

    def test_default_templates_text(self):
        assert CLASS_TEMPLATE.format(classname="cat") == "a photo of a cat"
        assert (
            DESCRIPTION_TEMPLATE.format(classname="cat", description="has whiskers")
            == "cat, which has whiskers"
        )

    def test_rows_unit_norm(self):
        rng = np.random.default_rng(0)
        table = {}
        sets = []
        for c in range(3):
            name = f"class{c}"
            table[f"a photo of a {name}"] = unit(*rng.normal(size=4))
            descs = [f"trait {c}{j}" for j in range(2)]
            for d in descs:
                table[f"{name}, which {d}"] = unit(*rng.normal(size=4))
            sets.append(ClassPromptSet(name, descs))
        classifier = build_classifier(sets, TableEncoder(table))
        np.testing.assert_allclose(np.linalg.norm(classifier, axis=1), 1.0, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            build_classifier([], TableEncoder({}))


class TestClassify:
    def fixture(self):
        # 10 images, 2 classes; images 0-7 land near class 0, 8-9 near class 1,
        # but labels say 0-4 are class 0 and 5-9 class 1 -> 7 correct, top1 0.7
        classifier = np.stack([unit(1, 0), unit(0, 1)])
        rows = [unit(1, 0.1)] * 8 + [unit(0.1, 1)] * 2
        labels = [0] * 5 + [1] * 5
        return classifier, TableEncoder({}, image_rows=np.stack(rows)), labels

    def test_top1_and_per_class(self):
        classifier, enc, labels = self.fixture()
        preds, report = classify(list(range(10)), labels, classifier, enc, classnames=["a", "b"])
        assert report.top1 == pytest.approx(0.7)
        assert report.per_class == {"a": 1.0, "b": pytest.approx(0.4)}
        assert preds.tolist() == [0] * 8 + [1] * 2
        assert report.n_samples == 10

    def test_tie_goes_to_lowest_index(self):
        classifier = np.stack([unit(1, 0), unit(1, 0)])
        enc = TableEncoder({}, image_rows=np.stack([unit(1, 0)]))
        preds, _ = classify([0], [1], classifier, enc)
        assert preds.tolist() == [0]

    def test_length_mismatch(self):
        classifier, enc, _ = self.fixture()
        with pytest.raises(ShapeError):
            classify(list(range(10)), [0] * 9, classifier, enc)

    def test_report_roundtrips_to_json(self, tmp_path):
        classifier, enc, labels = self.fixture()
        _, report = classify(list(range(10)), labels, classifier, enc, dataset="fixture")
        path = report.write(tmp_path / "report.json")
        loaded = json.loads(path.read_text())
        assert loaded["dataset"] == "fixture"
        assert loaded["top1"] == pytest.approx(0.7)


class TestClassifyByAttributes:
    def test_no_classname_in_prompts(self):
        # encoder table only holds bare descriptions: lookups would KeyError
        # if class names leaked into the prompts
        table = {"striped": unit(1, 0), "barks": unit(0, 1)}
        enc = TableEncoder(table, image_rows=np.stack([unit(1, 0.2), unit(0.2, 1)]))
        sets = [ClassPromptSet("cat", ["striped"]), ClassPromptSet("dog", ["barks"])]
        preds, report = classify_by_attributes([0, 1], [0, 1], sets, enc)
        assert report.top1 == 1.0
        assert preds.tolist() == [0, 1]

    def test_mean_over_descriptions(self):
        # class 0 has one strong and one weak description; mean decides
        table = {
            "exact match": unit(1, 0),
            "opposite": unit(-1, 0),
            "halfway": unit(1, 1),
        }
        enc = TableEncoder(table, image_rows=np.stack([unit(1, 0)]))
        sets = [
            ClassPromptSet("mixed", ["exact match", "opposite"]),  # mean sim 0
            ClassPromptSet("steady", ["halfway"]),  # sim ~0.707
        ]
        preds, _ = classify_by_attributes([0], [1], sets, enc)
        assert preds.tolist() == [1]

    def test_class_without_descriptions_rejected(self):
        with pytest.raises(ConfigError, match="cat"):
            classify_by_attributes([0], [0], [ClassPromptSet("cat", [])], TableEncoder({}))


class TestRetrieve:
    def test_perfect_identity_pairing(self):
        embeds = np.eye(4)
        report = retrieve(embeds, embeds.copy(), ks=(1,))
        assert report.recall_at == {"i2t@1": 1.0, "t2i@1": 1.0}

    def test_shifted_pairing_has_zero_r1(self):
        # text j carries image (j+1)'s embedding, so top-1 is always the
        # wrong neighbour; the full list always contains the match
        n = 20
        images = np.eye(n)
        texts = np.roll(images, shift=-1, axis=0)
        report = retrieve(images, texts, ks=(1, n))
        assert report.recall_at["i2t@1"] == 0.0
        assert report.recall_at["t2i@1"] == 0.0
        assert report.recall_at[f"i2t@{n}"] == 1.0
        assert report.recall_at[f"t2i@{n}"] == 1.0

    def test_second_choice_catches_weak_match(self):
        # strongest hit is the shifted neighbour, second strongest the true
        # pair: R@1 = 0 but R@2 = 1 in both directions
        n = 8
        images = np.eye(n)
        texts = 0.9 * np.roll(images, shift=-1, axis=0) + 0.1 * images
        texts /= np.linalg.norm(texts, axis=1, keepdims=True)
        report = retrieve(images, texts, ks=(1, 2))
        assert report.recall_at["i2t@1"] == 0.0
        assert report.recall_at["i2t@2"] == 1.0
        assert report.recall_at["t2i@1"] == 0.0
        assert report.recall_at["t2i@2"] == 1.0

    def test_multi_caption_groups(self):
        images = np.eye(2)
        texts = np.stack([unit(1, 0), unit(0.9, 0.1), unit(0, 1)])
        report = retrieve(images, texts, text_groups=[[0, 1], [2]], ks=(1,))
        assert report.recall_at["i2t@1"] == 1.0
        assert report.recall_at["t2i@1"] == 1.0

    def test_group_errors(self):
        images = np.eye(2)
        texts = np.eye(2)
        with pytest.raises(ShapeError):
            retrieve(images, texts, text_groups=[[0, 1], [0]])
        with pytest.raises(ShapeError):
            retrieve(images, texts, text_groups=[[0]])
        with pytest.raises(ShapeError):
            retrieve(images, np.eye(3)[:2], text_groups=[[0], [1, 5]])

    def test_identity_needs_equal_counts(self):
        with pytest.raises(ShapeError):
            retrieve(np.eye(3), np.eye(4))

    def test_recall_monotone_in_k(self, rng):
        images = rng.normal(size=(12, 6))
        images /= np.linalg.norm(images, axis=1, keepdims=True)
        texts = rng.normal(size=(12, 6))
        texts /= np.linalg.norm(texts, axis=1, keepdims=True)
        report = retrieve(images, texts, ks=(1, 5, 10))
        r = report.recall_at
        assert r["i2t@1"] <= r["i2t@5"] <= r["i2t@10"]
        assert r["t2i@1"] <= r["t2i@5"] <= r["t2i@10"]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 16), st.integers(0, 10_000))
    def test_matches_brute_force_oracle(self, n, seed):
        rng = np.random.default_rng(seed)
        images = rng.normal(size=(n, 5))
        images /= np.linalg.norm(images, axis=1, keepdims=True)
        texts = rng.normal(size=(n, 5))
        texts /= np.linalg.norm(texts, axis=1, keepdims=True)
        report = retrieve(images, texts, ks=(1, 5))
        sims = images @ texts.T
        for k in (1, 5):
            assert report.recall_at[f"i2t@{k}"] == pytest.approx(
                recall_at_k_oracle(sims, [{i} for i in range(n)], k)
            )
            assert report.recall_at[f"t2i@{k}"] == pytest.approx(
                recall_at_k_oracle(sims.T, [{i} for i in range(n)], k)
            )


class TestRegionMatch:
    def test_matches_manual_best_region_scores(self, tiny_model, tokenizer, rng):
        images = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(3)]
        sets = [
            ClassPromptSet("red circle", ["red fill", "round outline"]),
            ClassPromptSet("blue square", ["blue fill", "straight edges"]),
        ]
        preds, report = classify_by_region_match(images, [0, 1, 0], sets, tiny_model, tokenizer)
        assert preds.shape == (3,)
        assert 0.0 <= report.top1 <= 1.0

        # recompute the class scores the slow way: max cosine over all
        # (region, description) combinations
        from grain.model import preprocess_images

        with torch.no_grad():
            out = tiny_model(preprocess_images(images), with_boxes=False)
            manual = np.empty((3, 2))
            for c, ps in enumerate(sets):
                text = tiny_model.encode_text(tokenizer.encode_batch(ps.descriptions))
                sims = torch.einsum("bqe,de->bqd", out.region_embeds, text)
                manual[:, c] = sims.amax(dim=(1, 2)).numpy()
        np.testing.assert_array_equal(preds, manual.argmax(axis=1))

    def test_requires_descriptions(self, tiny_model):
        with pytest.raises(ConfigError):
            classify_by_region_match([], [], [ClassPromptSet("x", [])], tiny_model)

    def test_does_not_mutate_parameters(self, tiny_model, tokenizer, rng):
        images = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)]
        before = parameter_digest(tiny_model)
        classify_by_region_match(
            images, [0], [ClassPromptSet("x", ["some trait"])], tiny_model, tokenizer
        )
        assert parameter_digest(tiny_model) == before


class TestFreeTextMapping:
    def test_maps_to_nearest_entry(self):
        table = {
            "tabby cat": unit(1, 0.1),
            "cat": unit(1, 0),
            "dog": unit(0, 1),
        }
        match, was_empty = map_free_text_to_vocab("tabby cat", ["cat", "dog"], TableEncoder(table))
        assert match == "cat" and not was_empty

    def test_empty_answer_flagged(self):
        match, was_empty = map_free_text_to_vocab("   ", ["cat"], TableEncoder({}))
        assert match is None and was_empty

    def test_empty_vocabulary_rejected(self):
        with pytest.raises(ConfigError):
            map_free_text_to_vocab("cat", [], TableEncoder({}))


class TestGrainEncoder:
    def test_unit_norm_and_batching(self, tiny_model, tokenizer, rng):
        enc = GrainEncoder(tiny_model, tokenizer, batch_size=2)
        images = np.stack([rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(5)])
        embeds = enc.embed_images(images)
        assert embeds.shape == (5, tiny_model.config.embed_dim)
        np.testing.assert_allclose(np.linalg.norm(embeds, axis=1), 1.0, atol=1e-5)
        texts = enc.embed_texts(["a", "b", "c"])
        assert texts.shape == (3, tiny_model.config.embed_dim)

    def test_batch_size_does_not_change_results(self, tiny_model, tokenizer, rng):
        images = np.stack([rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(5)])
        small = GrainEncoder(tiny_model, tokenizer, batch_size=2).embed_images(images)
        big = GrainEncoder(tiny_model, tokenizer, batch_size=64).embed_images(images)
        np.testing.assert_allclose(small, big, atol=1e-6)


class TestDumpGroundings:
    def test_schema_and_determinism(self, tiny_model, tokenizer, rng, tmp_path):
        images = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(2)]
        descriptions = ["red fill", "straight edges"]
        out = dump_groundings(images, ["i0", "i1"], descriptions, tiny_model, tokenizer,
                              out_path=tmp_path / "g1.jsonl")
        assert [e["image_id"] for e in out] == ["i0", "i1"]
        for entry in out:
            assert len(entry["pred_boxes"]) == tiny_model.config.n_region_queries
            assert len(entry["matches"]) == 2
            for m in entry["matches"]:
                assert 0 <= m["region_index"] < tiny_model.config.n_region_queries
                assert -1.0 <= m["similarity"] <= 1.0
                assert m["box"] == entry["pred_boxes"][m["region_index"]]
        dump_groundings(images, ["i0", "i1"], descriptions, tiny_model, tokenizer,
                        out_path=tmp_path / "g2.jsonl")
        assert (tmp_path / "g1.jsonl").read_bytes() == (tmp_path / "g2.jsonl").read_bytes()

    def test_id_mismatch(self, tiny_model, rng):
        images = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)]
        with pytest.raises(ShapeError):
            dump_groundings(images, ["a", "b"], [], tiny_model)

    def test_no_descriptions_still_dumps_boxes(self, tiny_model, tokenizer, rng):
        images = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)]
        out = dump_groundings(images, ["i0"], [], tiny_model, tokenizer)
        assert out[0]["matches"] == []
        assert len(out[0]["pred_boxes"]) == tiny_model.config.n_region_queries


class TestMetricReport:
    def test_write_is_stable(self, tmp_path):
        report = MetricReport(dataset="d", n_samples=3, top1=0.5, per_class={"a": 0.5})
        p1 = report.write(tmp_path / "a.json")
        p2 = report.write(tmp_path / "b.json")
        assert p1.read_bytes() == p2.read_bytes()
