import pytest

from app.core.config import build_config
from app.core.errors import ConfigurationError, GraphParseError
from app.models.schemas import Caption, ExtractedTriplet, NodeMode, RelationMode
from app.services.caption_parser import parse_corpus
from app.services.relation_kg import (
    FilterSpec,
    GraphStats,
    VisualRelationKG,
    apply_filters,
    build_graph,
    deserialize,
    filter_nodes,
    filter_relations,
    filter_spec,
    graph_stats,
    merge_graphs,
    serialize,
)


def T(s, r, o, src="c"):
    return ExtractedTriplet(subject=s, predicate=r, object=o, source=src)


def spec(**kwargs):
    return build_config(FilterSpec, **kwargs)


@pytest.fixture
def chain():
    return build_graph([T("a", "r", "b"), T("b", "r", "c"), T("c", "r", "d")])


@pytest.fixture
def fixture_graph(lexicon, gold_captions):
    captions = [Caption(id=e["id"], text=e["text"]) for e in gold_captions]
    return build_graph(parse_corpus(captions, lexicon))


def random_graph(rng, max_nodes=100):
    n_nodes = int(rng.integers(1, max_nodes + 1))
    n_rel = int(rng.integers(1, 8))
    n_edges = int(rng.integers(0, 3 * n_nodes))
    triplets = [
        T(f"n{rng.integers(n_nodes)}", f"r{rng.integers(n_rel)}", f"n{rng.integers(n_nodes)}")
        for _ in range(n_edges)
    ]
    return build_graph(triplets), n_nodes


def brute_force_hops(graph, anchors):
    zero = {n for n in graph.nodes if n in anchors}
    one = set(zero)
    for s, _, o in graph.counts:
        if s in zero or o in zero:
            one.update({s, o})
    return zero, one


class TestBuild:
    def test_merges_duplicates(self):
        g = build_graph([T("a", "r", "b"), T("a", "r", "b"), T("a", "q", "c")])
        assert dict(g.counts) == {("a", "r", "b"): 2, ("a", "q", "c"): 1}
        assert g.nodes == {"a", "b", "c"}
        assert g.relations == {"r", "q"}
        assert graph_stats(g) == GraphStats(3, 2, 2, 3)

    def test_empty(self):
        g = build_graph([])
        assert graph_stats(g) == (0, 0, 0, 0)

    def test_fixture_graph_matches_recount(self, fixture_graph, gold_captions):
        expected = {}
        for entry in gold_captions:
            for s, r, o in entry["triplets"]:
                expected[(s, r, o)] = expected.get((s, r, o), 0) + 1
        assert dict(fixture_graph.counts) == expected
        nodes = {n for s, _, o in expected for n in (s, o)}
        assert graph_stats(fixture_graph) == (
            len(nodes),
            len({r for _, r, _ in expected}),
            len(expected),
            sum(expected.values()),
        )

    def test_build_is_associative_under_merge(self, rng):
        for _ in range(20):
            a, _ = random_graph(rng, 20)
            b, _ = random_graph(rng, 20)
            triplets = [T(s, r, o) for (s, r, o), c in list(a.counts.items()) + list(b.counts.items()) for _ in range(c)]
            assert build_graph(triplets) == merge_graphs(a, b)

    def test_counts_are_read_only(self, chain):
        with pytest.raises(TypeError):
            chain.counts[("x", "y", "z")] = 1


class TestFilterSpec:
    def test_hop_modes_need_anchors(self):
        with pytest.raises(ConfigurationError):
            spec(node_mode=NodeMode.ZERO_HOP)
        with pytest.raises(ConfigurationError):
            spec(node_mode=NodeMode.ONE_HOP, anchors=frozenset())

    def test_top_k_needs_positive_k(self):
        with pytest.raises(ConfigurationError):
            spec(relation_mode=RelationMode.TOP_K)
        with pytest.raises(ConfigurationError):
            spec(relation_mode=RelationMode.TOP_K, top_k=0)

    def test_command_line_spelling(self):
        parsed = filter_spec("1hop", "top:3", ["dog", "man"])
        assert parsed.node_mode is NodeMode.ONE_HOP
        assert parsed.relation_mode is RelationMode.TOP_K and parsed.top_k == 3
        assert parsed.anchors == {"dog", "man"}
        assert filter_spec("all") == FilterSpec()

    @pytest.mark.parametrize("node_mode,relations", [("2hop", "all"), ("all", "top"), ("all", "top:x"), ("all", "top:²"), ("all", "top:-1"), ("all", "best:2"), ("0hop", "all")])
    def test_bad_spellings(self, node_mode, relations):
        with pytest.raises(ConfigurationError):
            filter_spec(node_mode, relations)


class TestNodeFilters:
    def test_chain_example(self, chain):
        zero = filter_nodes(chain, spec(node_mode=NodeMode.ZERO_HOP, anchors={"a"}))
        assert zero.nodes == {"a"} and len(zero) == 0 and zero.relations == frozenset()
        one = filter_nodes(chain, spec(node_mode=NodeMode.ONE_HOP, anchors={"a"}))
        assert one.nodes == {"a", "b"} and set(one.counts) == {("a", "r", "b")}

    def test_all_is_identity(self, chain):
        assert filter_nodes(chain, spec()) == chain

    def test_fixture_filters_match_brute_force(self, fixture_graph):
        anchors = {"dog", "man", "table", "umbrella"}
        zero_expected, one_expected = brute_force_hops(fixture_graph, anchors)
        zero = filter_nodes(fixture_graph, spec(node_mode=NodeMode.ZERO_HOP, anchors=anchors))
        one = filter_nodes(fixture_graph, spec(node_mode=NodeMode.ONE_HOP, anchors=anchors))
        assert zero.nodes == zero_expected
        assert one.nodes == one_expected
        assert set(one.counts) == {k for k in fixture_graph.counts if k[0] in one_expected and k[2] in one_expected}

    def test_monotone_on_random_graphs(self, rng):
        for _ in range(200):
            graph, n_nodes = random_graph(rng)
            anchors = {f"n{i}" for i in rng.choice(n_nodes, size=max(1, n_nodes // 5), replace=False)}
            zero = filter_nodes(graph, spec(node_mode=NodeMode.ZERO_HOP, anchors=anchors))
            one = filter_nodes(graph, spec(node_mode=NodeMode.ONE_HOP, anchors=anchors))
            full = filter_nodes(graph, spec())
            assert zero.nodes <= one.nodes <= full.nodes
            assert set(zero.counts) <= set(one.counts) <= set(full.counts)
            zero_expected, one_expected = brute_force_hops(graph, anchors)
            assert zero.nodes == zero_expected and one.nodes == one_expected
            for g in (zero, one, full):
                assert g.relations == {r for _, r, _ in g.counts}
                assert all(s in g.nodes and o in g.nodes for s, _, o in g.counts)


class TestRelationFilter:
    def test_keeps_most_frequent(self):
        g = build_graph([T("a", "r", "b")] * 5 + [T("a", "q", "c")] * 3 + [T("d", "p", "e")])
        top = filter_relations(g, spec(relation_mode=RelationMode.TOP_K, top_k=2))
        assert top.relations == {"r", "q"}
        assert top.nodes == {"a", "b", "c"}

    def test_ties_break_lexicographically(self):
        g = build_graph([T("a", "z", "b"), T("a", "m", "b"), T("a", "b", "c")])
        top = filter_relations(g, spec(relation_mode=RelationMode.TOP_K, top_k=2))
        assert top.relations == {"b", "m"}

    def test_large_k_is_identity_on_relations(self, chain):
        top = filter_relations(chain, spec(relation_mode=RelationMode.TOP_K, top_k=10))
        assert top.relations == chain.relations

    def test_fixture_top_one(self, fixture_graph):
        totals = {}
        for (_, r, _), c in fixture_graph.counts.items():
            totals[r] = totals.get(r, 0) + c
        best = min(totals, key=lambda r: (-totals[r], r))
        # "in" and "on" both occur four times
        assert best == "in"
        top = filter_relations(fixture_graph, spec(relation_mode=RelationMode.TOP_K, top_k=1))
        assert top.relations == {"in"}
        assert set(top.counts) == {k for k in fixture_graph.counts if k[1] == "in"}

    def test_combined_drops_isolated_nodes(self, chain):
        combined = apply_filters(
            chain,
            spec(node_mode=NodeMode.ZERO_HOP, anchors={"a"}, relation_mode=RelationMode.TOP_K, top_k=1),
        )
        assert graph_stats(combined) == (0, 0, 0, 0)


class TestSerialization:
    def test_round_trip(self, fixture_graph):
        assert deserialize(serialize(fixture_graph)) == fixture_graph

    def test_round_trip_keeps_isolated_nodes(self, chain):
        zero = filter_nodes(chain, spec(node_mode=NodeMode.ZERO_HOP, anchors={"a", "c"}))
        assert serialize(zero) == b"#node\ta\n#node\tc\n"
        assert deserialize(serialize(zero)) == zero

    def test_rows_sorted(self):
        g = build_graph([T("b", "r", "a"), T("a", "s", "b"), T("a", "r", "c")])
        assert serialize(g) == b"a\tr\tc\t1\na\ts\tb\t1\nb\tr\ta\t1\n"

    def test_empty(self):
        assert serialize(build_graph([])) == b""
        assert deserialize(b"") == build_graph([])

    def test_comment_lines_ignored(self):
        assert deserialize(b"# knowledge graph\na\tr\tb\t2\n") == VisualRelationKG({("a", "r", "b"): 2})

    @pytest.mark.parametrize(
        "payload, line",
        [
            (b"a\tr\tb\t1\na\tr\tb\n", 2),
            (b"a\tr\tb\t1\nc\tr\td\t0\n", 2),
            (b"a\tr\tb\tx\n", 1),
            (b"a\tr\tb\t1\nb\tr\tc\t1\nc\tr\td\t-3\n", 3),
            (b"a\tr\tb\t1\na\tr\tb\t2\n", 2),
            ("a\tr\tb\t1\nc\tr\td\t²\n".encode("utf-8"), 2),
            ("a\tr\tb\t١\n".encode("utf-8"), 1),
            (b"a\tr\tb\t1\nd\xffog\ton\tsofa\t1\n", 2),
            (b"\xe9\tr\tb\t1\n", 1),
        ],
    )
    def test_malformed_row_names_line(self, payload, line):
        with pytest.raises(GraphParseError) as info:
            deserialize(payload)
        assert info.value.line == line
        assert f"line {line}" in str(info.value)

    def test_distinct_graphs_serialize_differently(self, rng):
        graphs = {random_graph(rng, 6)[0] for _ in range(50)}
        assert len({serialize(g) for g in graphs}) == len(graphs)
