import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from fairgkd.graph import (
    LABEL_UNKNOWN,
    DataError,
    DatasetMeta,
    Graph,
    SynthConfig,
    ViewKind,
    adjacency_from_edges,
    generate_synthetic,
    intra_group_fraction,
    load_dataset,
    load_dataset_dir,
    make_view,
    normalize_adjacency,
    read_edge_file,
    split_nodes,
    synthetic_meta,
    write_dataset,
    write_node_mapping,
)
from oracles import dense_gcn_norm, random_edges, small_graph


def _write(tmp_path, edges: str, table: str, meta: dict):
    (tmp_path / "edges.txt").write_text(edges)
    (tmp_path / "attributes.csv").write_text(table)
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    return tmp_path


BASIC_META = {"name": "t", "label_column": "y", "sensitive": {"s": None}}


class TestLoad:
    def test_two_node_graph(self, tmp_path):
        _write(tmp_path, "0 1\n", "s,a,y\n0,1.5,1\n1,2.5,0\n", BASIC_META)
        g = load_dataset_dir(tmp_path)
        assert g.num_nodes == 2 and g.num_edges == 1
        assert g.adjacency[0, 1] == 1 and g.adjacency[1, 0] == 1
        assert g.adjacency.diagonal().sum() == 0

    def test_formats_and_comments(self, tmp_path):
        edges = "# header\n0,1\n1 2  # trailing\n\n2\t0\n1 0\n"
        _write(tmp_path, edges, "s,a,y\n0,1,1\n1,2,0\n0,3,1\n", BASIC_META)
        g = load_dataset_dir(tmp_path)
        assert g.num_edges == 3  # the reversed duplicate collapses

    def test_splits_repeatable(self, tmp_path):
        rows = "\n".join(f"{i % 2},{i},{(i // 2) % 2}" for i in range(40))
        meta = dict(BASIC_META, split_seed=7)
        _write(tmp_path, "0 1\n", "s,a,y\n" + rows + "\n", meta)
        a, b = load_dataset_dir(tmp_path), load_dataset_dir(tmp_path)
        for k in ("train", "val", "test"):
            np.testing.assert_array_equal(a.splits[k], b.splits[k])

    def test_malformed_edge_line_names_line(self, tmp_path):
        _write(tmp_path, "0 1\n1 2 3\n", "s,a,y\n0,1,1\n1,2,0\n0,3,1\n", BASIC_META)
        with pytest.raises(DataError, match=r"edges.txt:2"):
            load_dataset_dir(tmp_path)

    def test_non_integer_id(self, tmp_path):
        _write(tmp_path, "0 x\n", "s,a,y\n0,1,1\n1,2,0\n", BASIC_META)
        with pytest.raises(DataError, match=r":1:"):
            load_dataset_dir(tmp_path)

    def test_dangling_id(self, tmp_path):
        _write(tmp_path, "0 1\n0 5\n", "s,a,y\n0,1,1\n1,2,0\n", BASIC_META)
        with pytest.raises(DataError, match=r"edges.txt:2.*dangling"):
            load_dataset_dir(tmp_path)

    def test_dangling_with_id_column(self, tmp_path):
        meta = dict(BASIC_META, id_column="id")
        _write(tmp_path, "10 20\n10 99\n", "id,s,a,y\n10,0,1,1\n20,1,2,0\n", meta)
        with pytest.raises(DataError, match="dangling"):
            load_dataset_dir(tmp_path)

    def test_reindexing_and_mapping(self, tmp_path):
        meta = dict(BASIC_META, id_column="id")
        _write(tmp_path, "30 10\n", "id,s,a,y\n10,0,1,1\n30,1,2,0\n20,1,2,0\n", meta)
        g = load_dataset_dir(tmp_path)
        assert g.node_ids == (10, 30, 20)
        assert g.adjacency[0, 1] == 1 and g.num_edges == 1
        write_node_mapping(g, tmp_path / "map.csv")
        assert (tmp_path / "map.csv").read_text().splitlines()[1:] == ["10,0", "30,1", "20,2"]

    def test_duplicate_row(self, tmp_path):
        meta = dict(BASIC_META, id_column="id")
        _write(tmp_path, "", "id,s,a,y\n1,0,1,1\n2,1,2,0\n1,1,2,0\n", meta)
        with pytest.raises(DataError, match=r"attributes.csv:4.*duplicate"):
            load_dataset_dir(tmp_path)

    def test_non_binary_sensitive(self, tmp_path):
        _write(tmp_path, "", "s,a,y\n0,1,1\n2,2,0\n", BASIC_META)
        with pytest.raises(DataError, match="non-binary"):
            load_dataset_dir(tmp_path)

    def test_non_binary_label(self, tmp_path):
        _write(tmp_path, "", "s,a,y\n0,1,1\n1,2,3\n", BASIC_META)
        with pytest.raises(DataError, match="non-binary"):
            load_dataset_dir(tmp_path)

    def test_missing_column(self, tmp_path):
        _write(tmp_path, "", "s,a\n0,1\n1,2\n", BASIC_META)
        with pytest.raises(DataError, match="missing column 'y'"):
            load_dataset_dir(tmp_path)

    def test_threshold_binarization(self, tmp_path):
        meta = dict(BASIC_META, sensitive={"s": None, "age": 25})
        _write(tmp_path, "", "s,age,y\n0,24,1\n1,25,0\n1,60,-1\n", meta)
        g = load_dataset_dir(tmp_path)
        np.testing.assert_array_equal(g.sensitive["age"], [0, 1, 1])
        assert g.labels[2] == LABEL_UNKNOWN
        for idx in g.splits.values():
            assert 2 not in idx

    def test_unknown_meta_key(self):
        with pytest.raises(DataError):
            DatasetMeta.from_dict(dict(BASIC_META, colour="blue"))

    def test_yaml_meta(self, tmp_path):
        (tmp_path / "m.yaml").write_text("name: t\nlabel_column: y\nsensitive: s\n")
        meta = DatasetMeta.load(tmp_path / "m.yaml")
        assert meta.sensitive == {"s": None}

    def test_read_edge_file_line_numbers(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("# c\n\n3 4\n")
        assert read_edge_file(p) == [(3, 4, 3)]

    def test_integral_float_ids(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("3.0 4.0\n")
        assert read_edge_file(p) == [(3, 4, 1)]
        p.write_text("3.5 4\n")
        with pytest.raises(DataError, match=r":1:"):
            read_edge_file(p)


class TestGraphInvariants:
    def test_rejects_asymmetric(self):
        a = sp.csr_matrix(np.array([[0, 1], [0, 0]], dtype=float))
        with pytest.raises(DataError):
            Graph(a, np.zeros((2, 1)), ("a",), {}, np.zeros(2, dtype=np.int64), {})

    def test_rejects_self_loop(self):
        a = sp.csr_matrix(np.eye(2))
        with pytest.raises(DataError):
            Graph(a, np.zeros((2, 1)), ("a",), {}, np.zeros(2, dtype=np.int64), {})

    def test_rejects_overlapping_splits(self):
        a = sp.csr_matrix((2, 2))
        splits = {"train": np.array([0]), "test": np.array([0])}
        with pytest.raises(DataError):
            Graph(a, np.zeros((2, 1)), ("a",), {}, np.zeros(2, dtype=np.int64), splits)

    def test_self_loops_dropped_on_build(self):
        adj = adjacency_from_edges(3, np.array([[0, 0], [0, 1], [1, 0]]))
        assert adj.nnz == 2 and adj.diagonal().sum() == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 2**31 - 1))
    def test_split_properties(self, n, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(-1, 2, n)
        sp_ = split_nodes(labels, (0.5, 0.25, 0.25), seed)
        all_idx = np.concatenate(list(sp_.values()))
        assert np.unique(all_idx).size == all_idx.size <= n
        assert np.all(labels[all_idx] != LABEL_UNKNOWN)
        again = split_nodes(labels, (0.5, 0.25, 0.25), seed)
        for k in sp_:
            np.testing.assert_array_equal(sp_[k], again[k])


class TestNormalize:
    def test_single_edge(self):
        a = normalize_adjacency(adjacency_from_edges(2, np.array([[0, 1]])))
        np.testing.assert_array_equal(a.toarray(), np.full((2, 2), 0.5))

    def test_empty_is_identity(self):
        a = normalize_adjacency(sp.csr_matrix((4, 4)))
        np.testing.assert_array_equal(a.toarray(), np.eye(4))

    def test_path(self):
        a = normalize_adjacency(adjacency_from_edges(3, np.array([[0, 1], [1, 2]]))).toarray()
        assert a[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert a[0, 1] == pytest.approx(1 / np.sqrt(6), abs=1e-15)
        assert a[1, 1] == pytest.approx(1 / 3, abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 25), st.integers(0, 60), st.integers(0, 2**31 - 1))
    def test_properties(self, n, m, seed):
        rng = np.random.default_rng(seed)
        adj = adjacency_from_edges(n, random_edges(rng, n, m))
        a = normalize_adjacency(adj)
        dense = a.toarray()
        np.testing.assert_array_equal(dense, dense.T)
        assert dense.min() >= 0 and np.all(np.diag(dense) > 0)
        np.testing.assert_allclose(dense, dense_gcn_norm(adj.toarray()), rtol=1e-14, atol=1e-15)


class TestViews:
    @pytest.fixture
    def g(self):
        return small_graph(6, [[0, 1], [1, 2], [3, 4]], d=5, seed=1)

    def test_nodes_only_identity(self, g):
        v = make_view(g, ViewKind.NODES_ONLY)
        np.testing.assert_array_equal(v.adjacency.toarray(), np.eye(6))
        np.testing.assert_array_equal(v.normalized_adjacency.toarray(), np.eye(6))
        assert v.gin_adjacency.nnz == 0
        assert v.attributes.shape == (6, 4)

    def test_topology_only_ones(self, g):
        v = make_view(g, "topology-only")
        np.testing.assert_array_equal(v.attributes, np.ones((6, 5)))
        assert (v.adjacency != g.adjacency).nnz == 0

    def test_full_strips_sensitive(self, g):
        v = make_view(g, "full")
        assert v.attributes.shape == (6, 4)
        np.testing.assert_array_equal(v.attributes, g.attributes[:, 1:])
        w = make_view(g, "full", with_sensitive=True)
        assert w.attributes.shape == (6, 5)

    def test_standardize(self, g):
        v = make_view(g, "full", standardize=True)
        np.testing.assert_allclose(v.attributes.mean(axis=0), 0, atol=1e-12)

    def test_source_not_mutated(self, g):
        before = (g.attributes.copy(), g.adjacency.copy())
        for kind in ViewKind:
            v = make_view(g, kind, standardize=True)
            v.attributes, v.normalized_adjacency, v.gin_adjacency
        np.testing.assert_array_equal(g.attributes, before[0])
        assert (g.adjacency != before[1]).nnz == 0
        with pytest.raises(ValueError):
            g.attributes[0, 0] = 5.0

    def test_errors(self, g):
        with pytest.raises(ValueError):
            make_view(g, "sideways")
        with pytest.raises(KeyError):
            make_view(g, "full", sensitive_column="nope")


class TestSynthetic:
    def test_homophily_planted(self):
        g = generate_synthetic(SynthConfig(num_nodes=2000, homophily=0.9), 0)
        assert intra_group_fraction(g) > 0.8

    def test_no_bias_baseline(self):
        fr = [
            intra_group_fraction(generate_synthetic(SynthConfig(num_nodes=600, homophily=0.5, proxy_corr=0.0), s))
            for s in range(5)
        ]
        assert abs(np.mean(fr) - 0.5) < 0.03

    def test_deterministic(self):
        cfg = SynthConfig(num_nodes=300)
        a, b = generate_synthetic(cfg, 4), generate_synthetic(cfg, 4)
        np.testing.assert_array_equal(a.edge_list(), b.edge_list())
        np.testing.assert_array_equal(a.attributes, b.attributes)

    def test_monotone_in_homophily(self):
        hs = (0.5, 0.7, 0.9)
        means = [
            np.mean([intra_group_fraction(generate_synthetic(SynthConfig(num_nodes=400, homophily=h), s)) for s in range(10)])
            for h in hs
        ]
        assert means[0] < means[1] < means[2]

    def test_proxy_correlation(self):
        g = generate_synthetic(SynthConfig(num_nodes=4000, proxy_corr=0.6), 1)
        s = g.sensitive["sens"] * 2.0 - 1.0
        col = g.attributes[:, g.feature_names.index("proxy_0")]
        assert np.corrcoef(s, col)[0, 1] == pytest.approx(0.6, abs=0.05)

    def test_labels_depend_on_group(self):
        gaps = []
        for offset in (0.0, 0.3, 0.8):
            g = generate_synthetic(SynthConfig(num_nodes=2000, group_offset=offset), 2)
            s, y = g.sensitive["sens"], g.labels
            gaps.append(y[s == 1].mean() - y[s == 0].mean())
        assert abs(gaps[0]) < 0.06
        assert gaps[1] > 0.1
        assert gaps[2] > gaps[1]

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            generate_synthetic(SynthConfig(homophily=1.2), 0)
        with pytest.raises(ValueError):
            generate_synthetic(SynthConfig(proxy_corr=-0.1), 0)
        with pytest.raises(ValueError):
            SynthConfig.from_dict({"bogus": 1})

    def test_round_trip_through_files(self, tmp_path):
        cfg = SynthConfig(num_nodes=150)
        g = generate_synthetic(cfg, 3)
        write_dataset(g, tmp_path, synthetic_meta(cfg, 3))
        back = load_dataset_dir(tmp_path)
        assert back.feature_names == g.feature_names
        np.testing.assert_array_equal(back.attributes, g.attributes)
        np.testing.assert_array_equal(back.labels, g.labels)
        np.testing.assert_array_equal(back.sensitive["sens"], g.sensitive["sens"])
        assert (back.adjacency != g.adjacency).nnz == 0
        for k in g.splits:
            np.testing.assert_array_equal(back.splits[k], g.splits[k])

    def test_summary(self):
        g = small_graph(4, [[0, 1]], seed=0, sensitive=[0, 0, 1, 1], labels=[1, 0, 1, 0])
        s = g.summary()
        assert s["nodes"] == 4 and s["edges"] == 1 and s["groups"]["s"] == [2, 2]


def test_load_dataset_explicit_paths(tmp_path):
    _write(tmp_path, "0 1\n", "s,a,y\n0,1,1\n1,2,0\n", BASIC_META)
    g = load_dataset(tmp_path / "edges.txt", tmp_path / "attributes.csv", DatasetMeta.from_dict(BASIC_META))
    assert g.feature_names == ("s", "a")
