import numpy as np
import pytest
import scipy.sparse as sp

from _oracles import (FLAVORS, as_dict, d2v_oracle, dist, join_case, random_matrix,
                      same_entries, v2v_oracle)
from matrel import Cluster, Scheme, exec_join, parse_gamma, parse_merge
from matrel.bloom import BloomFilter, bloom_build, bloom_probe
from matrel.dist import build_tensor
from matrel.errors import DimMismatch, ResourceLimit, UndefinedMerge
from matrel.join import choose_d1, tensor_layout
from matrel.merge import Tri


def run(gamma, merge, A, B, L=2, n=3, **kw):
    cluster = Cluster(n, L, **{k: v for k, v in kw.items() if k != "schemes"})
    res = exec_join(parse_gamma(gamma), parse_merge(merge) if isinstance(merge, str) else merge,
                    dist(np.asarray(A, float), L, n), dist(np.asarray(B, float), L, n), cluster,
                    schemes=kw.get("schemes"))
    return res, cluster


# -- oracle sweep ------------------------------------------------------------------

@pytest.mark.parametrize("flavor", FLAVORS)
@pytest.mark.parametrize("batch", range(3))
def test_join_matches_nested_loop_oracle(flavor, batch):
    rng = np.random.default_rng(1000 * batch + FLAVORS.index(flavor))
    for case in range(10):
        g, A, B, (text, _), want = join_case(rng, flavor, max_dim=10)
        L, n = int(rng.choice([2, 3, 4])), int(rng.choice([1, 2, 4]))
        cluster = Cluster(n, L)
        a = dist(A, L, n, scheme=Scheme.RANDOM, seed=case)
        b = dist(B, L, n, scheme=rng.choice([Scheme.ROW, Scheme.COL]))
        res = exec_join(parse_gamma(g), parse_merge(text), a, b, cluster)
        assert same_entries(as_dict(res.value), want), (flavor, g, text)


# -- hand examples --------------------------------------------------------------------

def test_cross_identity_kronecker():
    res, _ = run("", "x*y", np.eye(2), np.eye(2))
    got = as_dict(res.value)
    assert got == {(i, i, k, k): 1.0 for i in range(2) for k in range(2)}
    assert res.value.shape == (2, 2, 2, 2)
    # flattened per the Kronecker layout (i*p + k, j*q + l) it is I4
    flat = np.zeros((4, 4))
    for (i, j, k, l), v in got.items():
        flat[i * 2 + k, j * 2 + l] = v
    assert np.array_equal(flat, np.eye(4))


def test_cross_shape_for_any_merge():
    for f in ("x*y", "x+y", "y"):
        res, _ = run("", f, np.ones((2, 2)), np.ones((3, 3)))
        assert res.value.shape == (2, 2, 3, 3)


def test_kronecker_nnz_law():
    rng = np.random.default_rng(3)
    A = random_matrix(rng, 12, 9, 0.2)
    B = random_matrix(rng, 7, 11, 0.3)
    res, _ = run("", "x*y", A, B, L=4, n=4)
    assert res.value.nnz == np.count_nonzero(A) * np.count_nonzero(B)
    assert res.value.shape == (12, 9, 7, 11)


def test_direct_overlay_sum_uses_zero_for_absent_side():
    A = sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
    B = sp.csr_matrix(np.array([[2.0, 0.0], [0.0, 0.0]]))
    res, _ = run("rid_a=rid_b and cid_a=cid_b", "x+y", A.toarray(), B.toarray())
    assert res.value.to_dense()[0, 0] == 2


def test_direct_overlay_product_of_disjoint_patterns_is_empty():
    res, _ = run("rid_a=rid_b and cid_a=cid_b", "x*y", np.diag([1.0, 0]), np.diag([0, 1.0]))
    assert res.value.nnz == 0


def test_transpose_overlay_of_zero_and_b_is_bt():
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    res, _ = run("rid_a=cid_b and cid_a=rid_b", "x+y", np.zeros((2, 2)), B)
    assert np.array_equal(res.value.to_dense(), B.T)


def test_overlay_shape_checks():
    with pytest.raises(DimMismatch):
        run("rid_a=rid_b and cid_a=cid_b", "x*y", np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(DimMismatch):
        run("rid_a=cid_b and cid_a=rid_b", "x*y", np.ones((2, 3)), np.ones((2, 3)))


def test_d2d_identity():
    res, _ = run("rid_a=rid_b", "x*y", np.eye(2), np.eye(2))
    assert as_dict(res.value) == {(0, 0, 0): 1.0, (1, 1, 1): 1.0}


def test_d2d_shape_and_mismatch():
    res, _ = run("rid_a=rid_b", "x*y", np.ones((3, 4)), np.ones((3, 5)))
    assert res.value.shape == (3, 4, 5)
    with pytest.raises(DimMismatch):
        run("rid_a=cid_b", "x*y", np.ones((3, 4)), np.ones((3, 5)))


def test_d2d_sum_with_empty_a_broadcasts_b():
    B = np.array([[0.0, 5.0], [7.0, 0.0]])
    res, _ = run("rid_a=rid_b", "x+y", np.zeros((2, 3)), B)
    want = {(i, j, k): B[i, k] for i in range(2) for j in range(3) for k in range(2)
            if B[i, k] != 0}
    assert as_dict(res.value) == want


def test_v2v_examples():
    res, _ = run("val_a=val_b", "x*y", [[1.0]], [[1.0]])
    assert as_dict(res.value) == {(0, 0, 0, 0): 1.0}
    res, _ = run("val_a=val_b", "x+y", [[1.0, 2.0]], [[3.0]])
    assert res.value.nnz == 0


def test_d2v_matches_row():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    B = np.array([[1.0]])
    res, _ = run("rid_a=val_b", "x*y", A, B)
    assert as_dict(res.value) == {(1, 0, 0, 0): 3.0, (1, 1, 0, 0): 4.0}


def test_d2v_without_index_values_is_empty():
    A = np.ones((3, 3))
    B = np.array([[0.5, -1.0], [3.0, 7.25]])
    res, _ = run("rid_a=val_b", "x*y", A, B)
    assert res.value.nnz == 0


def test_d2v_symmetry_on_transposed_inputs():
    rng = np.random.default_rng(5)
    A = random_matrix(rng, 5, 6, 0.6, integer=True, low=0, high=6)
    B = random_matrix(rng, 6, 4, 0.6, integer=True, low=0, high=6)
    f = "x*y + 2*x"
    r1, _ = run("rid_a=val_b", f, A, B)           # row of A against values of B
    r2, _ = run("val_a=cid_b", "y*x + 2*y", B.T, A.T)  # values of B^T against cols of A^T
    # (v, j, k, l) of the first is (l, k, j, v) of the second
    want = {(l, k, j, v): x for (v, j, k, l), x in as_dict(r1.value).items()}
    assert same_entries(as_dict(r2.value), want)
    assert same_entries(as_dict(r1.value),
                        d2v_oracle(A, B, ("RID", "VAL"), lambda x, y: x * y + 2 * x))


# -- undefined merges and budgets -------------------------------------------------------

def test_nonzero_at_origin_is_rejected_where_zeros_would_fill():
    f = parse_merge("x + y + 1")
    for g in ("", "rid_a=rid_b", "rid_a=rid_b and cid_a=cid_b"):
        with pytest.raises(UndefinedMerge):
            run(g, f, np.eye(2), np.eye(2))
    # value joins only ever pair nonzero values
    res, _ = run("val_a=val_b", f, np.eye(2), np.eye(2))
    assert res.value.nnz == 4


def test_dense_cross_over_budget_raises():
    with pytest.raises(ResourceLimit):
        run("", "x*y", np.ones((20, 20)), np.ones((20, 20)), L=8, n=2, entry_budget=100_000)


# -- sparsity fast path ---------------------------------------------------------------

@pytest.mark.parametrize("flavor", FLAVORS)
def test_fast_path_off_changes_nothing(flavor):
    rng = np.random.default_rng(77 + FLAVORS.index(flavor))
    for case in range(8):
        g, A, B, (text, _), _ = join_case(rng, flavor, max_dim=8)
        f = parse_merge(text)
        on = exec_join(parse_gamma(g), f, dist(A, 3, 2), dist(B, 3, 2), Cluster(2, 3))
        off = exec_join(parse_gamma(g), f, dist(A, 3, 2), dist(B, 3, 2),
                        Cluster(2, 3, sparsity_fast_path=False))
        forced = exec_join(parse_gamma(g), f.forced(Tri.NO, Tri.NO), dist(A, 3, 2),
                           dist(B, 3, 2), Cluster(2, 3))
        assert as_dict(on.value) == as_dict(off.value) == as_dict(forced.value)


# -- Bloom filter ---------------------------------------------------------------------

def test_bloom_no_false_negatives():
    bf = bloom_build([1.0, 2.0, 3.0])
    assert bloom_probe(bf, 2.0)
    assert all(bloom_probe(bf, v) for v in (1.0, 2.0, 3.0))


def test_bloom_empty_filter_rejects_everything():
    bf = bloom_build([])
    assert not bloom_probe(bf, 0.0) and not bloom_probe(bf, 1.5)


def test_bloom_zero_policy():
    assert not bloom_probe(bloom_build([0.0, 1.0]), 0.0)
    assert bloom_probe(bloom_build([0.0, 1.0], include_zeros=True), 0.0)


def test_bloom_sizing():
    bf = BloomFilter(1000, 0.01)
    assert bf.m == int(np.ceil(-1000 * np.log(0.01) / np.log(2) ** 2))
    assert bf.k == round(bf.m / 1000 * np.log(2))
    with pytest.raises(ValueError):
        bloom_build([1.0], target_fpr=0.6)
    with pytest.raises(ValueError):
        bloom_build([1.0], target_fpr=0.00001)


def test_bloom_measured_fpr():
    rng = np.random.default_rng(11)
    members = rng.uniform(0, 1e6, 10_000)
    bf = bloom_build(members, 0.01)
    assert bf.probe_many(members).all()
    others = rng.uniform(2e6, 3e6, 10_000)
    assert bf.probe_many(others).mean() <= 0.02


def test_bloom_join_same_result_and_fewer_probes():
    rng = np.random.default_rng(8)
    A = random_matrix(rng, 16, 16, 0.3, integer=True, low=1, high=200)
    B = random_matrix(rng, 16, 16, 0.3, integer=True, low=150, high=400)
    f = parse_merge("x*y")
    out = {}
    for bloom in (True, False):
        c = Cluster(4, 4, bloom=bloom)
        res = exec_join(parse_gamma("val_a=val_b"), f, dist(A, 4, 4), dist(B, 4, 4), c)
        out[bloom] = (as_dict(res.value), c.ledger.ops["nested_loop_probes"])
    assert out[True][0] == out[False][0] == v2v_oracle(A, B, lambda x, y: x * y)
    assert out[True][1] <= out[False][1]


# -- tensor layout ---------------------------------------------------------------------

def test_choose_d1():
    assert choose_d1(3) == 0
    assert choose_d1(3, downstream_dim=1) == 0
    assert choose_d1(3, downstream_dim=0) == 1
    assert choose_d1(3, downstream_dim=2) == 0
    with pytest.raises(ValueError):
        choose_d1(4)


def test_tensor_blocks_keyed_by_layout():
    coords = np.array([[0, 1, 2], [1, 3, 0], [2, 0, 3]])
    vals = np.array([1.0, 2.0, 3.0])
    t = build_tensor((3, 4, 4), coords, vals, 2, 2, tensor_layout(3, 1))
    assert t.layout == (1, 0, 2)
    for key, tb in t.blocks.items():
        assert tb.payload.rows <= 2 and tb.payload.cols <= 2
        assert tb.d1 == key[0]
    assert set(t.blocks) == {(1, 0, 1), (3, 0, 0), (0, 1, 1)}
    assert np.array_equal(t.to_dense()[tuple(coords.T)], vals)


def test_order4_keys():
    res, _ = run("", "x*y", np.eye(3), np.ones((3, 3)), L=2, n=2)
    for key, tb in res.value.blocks.items():
        assert (tb.d1, tb.d2, tb.d3_blk, tb.d4_blk) == key
        assert tb.payload.rows <= 2 and tb.payload.cols <= 2


def test_join_output_stays_where_produced():
    res, c = run("rid_a=rid_b", "x*y", np.ones((4, 4)), np.ones((4, 4)), L=2, n=2)
    # (r, r) from row-partitioned inputs: no movement at all
    assert c.ledger.total_moved == 0
    t = res.value
    for key in t.blocks:
        assert t.placement[key] == (key[0] // 2) % 2
