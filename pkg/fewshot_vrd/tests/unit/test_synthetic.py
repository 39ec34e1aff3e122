import itertools

import numpy as np
import pytest

from app.core.config import EpisodeConfig, SyntheticSpec, build_config
from app.core.errors import ConfigurationError
from app.models.schemas import Caption, NodeMode
from app.services.caption_parser import parse_caption, parse_corpus
from app.services.corpus_io import load_dataset, read_name_list
from app.services.eval_metrics import SeenSets
from app.services.fewshot_trainer import InstancePool, sample_support
from app.services.fusion_core import CandidateSet
from app.services.relation_kg import FilterSpec, apply_filters, build_graph
from app.services.synthetic import (
    caption_text,
    generate_synthetic,
    load_vocabulary,
    read_partition,
    write_benchmark,
)
from app.services.text_knowledge import load_embedding_table


def small_spec(**overrides):
    values = dict(train_images=40, test_images=20, captions_per_pair=2)
    values.update(overrides)
    return SyntheticSpec(**values)


def labeled_pairs(records):
    for record in records:
        for rel in record.relations:
            yield record.objects[rel.subject].class_tag, rel.predicate, record.objects[rel.object].class_tag


class TestPartition:
    def test_sizes_match_enumeration(self):
        bench = generate_synthetic(SyntheticSpec(num_classes=12, num_relations=10, holdout_fraction=0.3, seed=7, train_images=5, test_images=5))
        classes, _ = load_vocabulary()
        everything = set(itertools.permutations(classes[:12], 2))
        assert len(everything) == 132
        seen, unseen = set(bench.world.seen_pairs), set(bench.world.unseen_pairs)
        assert len(unseen) == 40
        assert len(seen) == 92
        assert seen | unseen == everything
        assert not seen & unseen

    def test_training_images_use_seen_pairs_only(self):
        bench = generate_synthetic(small_spec())
        seen = set(bench.world.seen_pairs)
        assert all((s, o) in seen for s, _, o in labeled_pairs(bench.train))
        assert any((s, o) not in seen for s, _, o in labeled_pairs(bench.test))

    def test_zero_holdout_leaves_everything_seen(self):
        bench = generate_synthetic(small_spec(holdout_fraction=0.0))
        assert bench.world.unseen_pairs == []
        seen = set(bench.world.seen_pairs)
        assert all((s, o) in seen for s, _, o in labeled_pairs(bench.test))

    def test_support_seen_pairs_lie_in_partition(self):
        bench = generate_synthetic(SyntheticSpec(seed=3))
        candidates = CandidateSet(bench.world.relations)
        config = build_config(EpisodeConfig, benchmark="custom", relations=bench.world.relations, shots=2, seed=3)
        support = sample_support(InstancePool(bench.train), config, candidates)
        seen = SeenSets.from_support(support.instances, candidates)
        assert seen.seen_pairs <= set(bench.world.seen_pairs)
        assert not seen.seen_pairs & set(bench.world.unseen_pairs)


class TestImages:
    def test_relations_follow_rule_table(self):
        bench = generate_synthetic(small_spec())
        world = bench.world
        for s, predicate, o in labeled_pairs(bench.train + bench.test):
            assert predicate == world.relation_of(s, o)

    def test_image_layout(self):
        spec = small_spec(objects_per_image=5, relations_per_image=2)
        for record in generate_synthetic(spec).train:
            classes = [o.class_tag for o in record.objects]
            assert len(classes) == 5 and len(set(classes)) == 5
            assert len(record.relations) == 2
            descriptors = record.descriptors()
            for rel in record.relations:
                # subject starts left of its object and the boxes overlap
                subject, obj = descriptors[rel.subject].box, descriptors[rel.object].box
                assert subject[0] < obj[0] < subject[2]

    def test_zero_noise_gives_one_vector_per_class(self):
        bench = generate_synthetic(small_spec(noise=0.0))
        by_class = {}
        for record in bench.train + bench.test:
            for obj, feature in zip(record.objects, record.features):
                by_class.setdefault(obj.class_tag, []).append(feature)
        for features in by_class.values():
            for feature in features[1:]:
                np.testing.assert_array_equal(feature, features[0])

    def test_noise_spreads_features(self):
        bench = generate_synthetic(small_spec(noise=0.5))
        record = bench.train[0]
        centers = {c: bench.world.centers[bench.world.classes.index(c)] for c in (o.class_tag for o in record.objects)}
        assert any(not np.allclose(f, centers[o.class_tag]) for o, f in zip(record.objects, record.features))

    def test_same_seed_same_benchmark(self):
        first, second = generate_synthetic(small_spec(seed=11)), generate_synthetic(small_spec(seed=11))
        assert first.world.partition() == second.world.partition()
        for a, b in zip(first.train + first.test, second.train + second.test):
            assert a.objects == b.objects and a.relations == b.relations
            assert all(np.array_equal(x, y) for x, y in zip(a.features, b.features))
        assert first.captions == second.captions
        assert first.table == second.table

    def test_different_seed_differs(self):
        assert generate_synthetic(small_spec(seed=1)).world.partition() != generate_synthetic(small_spec(seed=2)).world.partition()


class TestRuleTable:
    def test_explicit_table_is_used(self):
        table = [[0, 1], [2, 3]]
        bench = generate_synthetic(small_spec(num_classes=6, num_groups=2, num_relations=4, rule_table=table))
        world = bench.world
        for s, o in world.seen_pairs + world.unseen_pairs:
            assert world.relation_of(s, o) == world.relations[table[world.groups[s]][world.groups[o]]]

    def test_table_missing_a_group_pair(self):
        with pytest.raises(ConfigurationError, match="2x2 group pairs"):
            generate_synthetic(small_spec(num_classes=6, num_groups=2, num_relations=4, rule_table=[[0, 1], [2]]))

    def test_table_with_unknown_relation(self):
        with pytest.raises(ConfigurationError, match="relation indices"):
            generate_synthetic(small_spec(num_classes=6, num_groups=2, num_relations=4, rule_table=[[0, 1], [2, 4]]))

    def test_too_few_cells_for_random_table(self):
        with pytest.raises(ConfigurationError, match="rule cells"):
            generate_synthetic(small_spec(num_groups=2, num_relations=5))

    def test_random_table_uses_every_relation(self):
        bench = generate_synthetic(small_spec())
        assert set(bench.world.rule_table.ravel().tolist()) == set(range(10))

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            build_config(SyntheticSpec, holdout_fraction=1.0)
        with pytest.raises(ConfigurationError):
            build_config(SyntheticSpec, noise=-0.1)
        with pytest.raises(ConfigurationError):
            build_config(SyntheticSpec, objects_per_image=3, relations_per_image=2)


class TestKnowledge:
    def test_every_caption_parses_to_its_rule(self, lexicon):
        bench = generate_synthetic(small_spec())
        graph = build_graph(parse_corpus(bench.captions, lexicon))
        world = bench.world
        expected = {(s, world.relation_of(s, o), o): 2 for s, o in world.seen_pairs + world.unseen_pairs}
        assert dict(graph.counts) == expected

    def test_every_relation_name_parses(self, lexicon):
        _, relations = load_vocabulary()
        for relation in relations:
            triplets = parse_caption(Caption(id="x", text=caption_text("man", relation, "umbrella")), lexicon)
            assert [t.key() for t in triplets] == [("man", relation, "umbrella")]

    def test_caption_coverage_and_noise(self, lexicon):
        assert generate_synthetic(small_spec(caption_coverage=0.0)).captions == []
        noisy = generate_synthetic(small_spec(caption_noise=1.0, captions_per_pair=5))
        world = noisy.world
        triplets = parse_corpus(noisy.captions, lexicon)
        assert any(t.predicate != world.relation_of(t.subject, t.object) for t in triplets)

    def test_class_vectors_cluster_by_group(self):
        bench = generate_synthetic(small_spec(word_noise=0.0))
        world, table = bench.world, bench.table
        for a, b in itertools.combinations(world.classes, 2):
            same = np.array_equal(table.vector(a), table.vector(b))
            assert same == (world.groups[a] == world.groups[b])
        assert "<unk>" in table
        assert all(w in table for w in ("is", "no", "relation", "sitting", "on"))


class TestWriteBenchmark:
    def test_files_load_back(self, tmp_path):
        bench = generate_synthetic(small_spec())
        paths = write_benchmark(tmp_path / "synth", bench)
        train = load_dataset(paths["train"])
        assert len(train.records) == 40
        assert train.feature_dim == 16
        assert len(load_dataset(paths["test"]).records) == 20
        assert read_name_list(paths["relations"]) == bench.world.relations
        assert read_name_list(paths["classes"]) == bench.world.classes
        assert load_embedding_table(paths["embeddings"]) == bench.table
        seen, unseen = read_partition(paths["partition"])
        assert seen == bench.world.seen_pairs
        assert unseen == bench.world.unseen_pairs


class TestDistractors:
    def test_distractors_shape_the_knowledge_regimes(self, lexicon):
        bench = generate_synthetic(small_spec(num_classes=8, distractor_classes=3, captions_per_pair=1))
        world = bench.world
        assert len(world.distractors) == 3 and not set(world.distractors) & set(world.classes)
        graph = build_graph(parse_corpus(bench.captions, lexicon))
        anchors = frozenset(world.classes)
        zero = apply_filters(graph, FilterSpec(node_mode=NodeMode.ZERO_HOP, anchors=anchors))
        one = apply_filters(graph, FilterSpec(node_mode=NodeMode.ONE_HOP, anchors=anchors))
        assert zero.nodes == anchors
        assert len(zero) == 8 * 7
        # every distractor neighbors a benchmark class, so one hop reaches the whole graph
        assert one == graph
        assert len(graph) == 8 * 7 + 2 * 8 * 3 + 3 * 2

    def test_distractors_never_enter_images(self):
        bench = generate_synthetic(small_spec(distractor_classes=4))
        classes = {o.class_tag for r in bench.train + bench.test for o in r.objects}
        assert classes <= set(bench.world.classes)

    def test_vocabulary_limit(self):
        with pytest.raises(ConfigurationError, match="distractors"):
            generate_synthetic(small_spec(num_classes=22, distractor_classes=3))
