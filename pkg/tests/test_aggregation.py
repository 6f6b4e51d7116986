import math

import numpy as np
import pytest

from dkinet import tensor as T
from dkinet.aggregation import (aggregate_filter_layer, aggregate_umls_layer, build_knowledge_tables,
                                distance_correlation, filter_attention, filter_embeddings, independence_loss)
from dkinet.gradcheck import check_gradients
from dkinet.params import ParamStore
from dkinet.tensor import Tensor

from fixtures import knowledge_case, make_index
from oracles import brute_dcor, loop_code_layer, random_graph


def test_filter_embedding_single_relation():
    rel = Tensor([[0.3, -1.0, 2.0]])
    out = filter_embeddings(Tensor(np.random.default_rng(0).normal(size=(4, 1))), rel)
    np.testing.assert_allclose(out.data, np.repeat(rel.data, 4, axis=0), atol=1e-15)


def test_filter_embedding_hand_mix():
    out = filter_embeddings(Tensor([[math.log(2), math.log(1)]]), Tensor([[2.0, 0.0], [0.0, 2.0]]))
    np.testing.assert_allclose(out.data, [[4 / 3, 2 / 3]], atol=1e-12)


def test_filter_embedding_convexity():
    v = np.array([0.5, -0.25, 1.0])
    out = filter_embeddings(Tensor(np.zeros((2, 3))), Tensor(np.tile(v, (3, 1))))
    np.testing.assert_allclose(out.data, np.tile(v, (2, 1)), atol=1e-15)


def test_concept_layer_examples():
    # single neighbour through an all-ones relation
    idx = make_index(2, 1, 1, [(0, 0, 1)], [], 1)
    prev = Tensor([[9.0, 9.0], [2.0, 3.0]])
    out = aggregate_umls_layer(prev, Tensor([[1.0, 1.0]]), idx)
    assert out.data[0].tolist() == [2.0, 3.0]
    # two neighbours: mean of [2,0] and [0,5]; concept 1 and 2 are isolated and carried forward
    idx = make_index(3, 2, 1, [(0, 0, 1), (0, 1, 2)], [], 1)
    prev = Tensor([[7.0, 7.0], [2.0, 3.0], [4.0, 5.0]])
    out = aggregate_umls_layer(prev, Tensor([[1.0, 0.0], [0.0, 1.0]]), idx)
    assert out.data.tolist() == [[1.0, 2.5], [2.0, 3.0], [4.0, 5.0]]


def test_code_layer_examples():
    concepts = Tensor([[2.0, -1.0, 0.5]])
    f = Tensor([[0.5, 2.0, 1.0]])
    idx = make_index(1, 1, 2, [], [(0, 0)], 1)
    prev = Tensor([[0.1, 0.2, 0.3], [5.0, 6.0, 7.0]])
    out = aggregate_filter_layer(prev, concepts, f, idx)
    np.testing.assert_allclose(out.data[0], f.data[0] * concepts.data[0], atol=1e-15)
    assert out.data[1].tolist() == [5.0, 6.0, 7.0]  # unmapped code keeps its base row


def test_code_layer_equal_logits_matches_loop():
    # two filters with equal logits for the code: att = 1/2 each, |N_c| = 2
    f = Tensor([[1.0, 0.0], [0.0, 1.0]])
    prev = Tensor([[1.0, 1.0]])
    u = Tensor([[3.0, 5.0]])
    idx = make_index(1, 1, 1, [], [(0, 0)], 2)
    out = aggregate_filter_layer(prev, u, f, idx).data[0]
    expected = 0.5 * (0.5 * f.data[0] * u.data[0] + 0.5 * f.data[1] * u.data[0])
    np.testing.assert_allclose(out, expected, atol=1e-15)
    np.testing.assert_allclose(out, loop_code_layer(prev.data, u.data, f.data, [(0, 0)], 2)[0], atol=1e-15)


@pytest.mark.parametrize("seed", range(25))
def test_vectorized_layers_match_loop_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    n_u, n_r, n_c, triples, pairs = random_graph(rng)
    for n_f in (1, 2, 4):
        for layers in (1, 2):
            kt, (codes_ref, _, f_ref), _ = knowledge_case(n_u, n_r, n_c, triples, pairs, n_f, layers, seed)
            assert np.max(np.abs(kt.codes.data - codes_ref)) <= 1e-10
            assert np.max(np.abs(kt.filter_embs.data - f_ref)) <= 1e-10


def test_empty_code_map_gives_base_table():
    kt, _, codes = knowledge_case(5, 2, 4, [(0, 0, 1), (1, 1, 2)], [], 4, 1, 0)
    assert np.array_equal(kt.codes.data, codes)


def test_two_layers_equal_chained_single_layers():
    rng = np.random.default_rng(5)
    n_u, n_r, n_c, triples, pairs = random_graph(rng)
    idx = make_index(n_u, n_r, n_c, triples, pairs, 4)
    u0, rel, c0 = (Tensor(rng.normal(size=s)) for s in ((n_u, 4), (n_r, 4), (n_c, 4)))
    w = Tensor(rng.normal(size=(4, n_r)))
    f = filter_embeddings(w, rel)
    c1, u1 = aggregate_filter_layer(c0, u0, f, idx), aggregate_umls_layer(u0, rel, idx)
    c2 = aggregate_filter_layer(c1, u1, f, idx)
    kt = build_knowledge_tables(u0, rel, c0, w, idx, 2, {"diag": n_c, "proc": 0, "med": 0})
    assert np.array_equal(kt.codes.data, c2.data)


def test_filter_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    att = filter_attention(Tensor(rng.normal(size=(7, 5)) * 3), Tensor(rng.normal(size=(4, 5)))).data
    assert np.max(np.abs(att.sum(axis=1) - 1.0)) <= 1e-12


def test_knowledge_tables_split_by_type():
    rng = np.random.default_rng(0)
    idx = make_index(3, 1, 2 + 1 + 3, [(0, 0, 1)], [(0, 0), (3, 2)], 2)
    kt = build_knowledge_tables(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))),
                                Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(2, 1))),
                                idx, 1, {"diag": 2, "proc": 1, "med": 2})
    assert kt.diag.shape == (2, 4) and kt.proc.shape == (1, 4) and kt.med.shape == (3, 4)
    assert np.array_equal(np.concatenate([kt.diag.data, kt.proc.data, kt.med.data]), kt.codes.data)


# distance correlation ------------------------------------------------------

def test_dcor_of_identical_vectors_is_one():
    x = Tensor([0.3, -1.2, 2.0, 0.7, 5.0])
    assert distance_correlation(x, x).item() == pytest.approx(1.0, abs=1e-12)
    assert brute_dcor(x.data, x.data) == pytest.approx(1.0, abs=1e-12)


def test_dcor_constant_guard():
    x = Tensor([0.3, -1.2, 2.0, 0.7])
    assert distance_correlation(x, Tensor([2.0] * 4)).item() == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_dcor_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 16))
    x = rng.normal(size=n)
    y = x ** 2 + rng.normal(size=n) * rng.uniform(0, 2)
    got = distance_correlation(Tensor(x), Tensor(y)).item()
    assert 0.0 <= got <= 1.0 + 1e-12
    assert abs(got - brute_dcor(x, y)) <= 1e-10


def test_independence_loss_two_filters():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(2, 6))
    got = independence_loss(Tensor(f)).item()
    assert got == pytest.approx(2 * brute_dcor(f[0], f[1]), abs=1e-10)


def test_independence_loss_edge_cases():
    assert independence_loss(Tensor(np.ones((1, 5)))).item() == 0.0
    rng = np.random.default_rng(1)
    f = rng.normal(size=(4, 6))
    perm = [2, 0, 3, 1]
    assert independence_loss(Tensor(f)).item() == pytest.approx(independence_loss(Tensor(f[perm])).item(),
                                                                abs=1e-12)


def test_aggregation_gradients():
    rng = np.random.default_rng(11)
    n_u, n_r, n_c, triples, pairs = 8, 3, 6, [(0, 0, 1), (1, 1, 2), (2, 2, 0), (3, 0, 4), (0, 1, 5)], \
        [(0, 0), (1, 1), (1, 2), (3, 4), (5, 0)]
    idx = make_index(n_u, n_r, n_c, triples, pairs, 4)
    store = ParamStore({"u": rng.normal(size=(n_u, 5)), "r": rng.normal(size=(n_r, 5)),
                        "c": rng.normal(size=(n_c, 5)), "w": rng.normal(size=(4, n_r))})
    probe = rng.normal(size=(n_c, 5))

    def loss(p):
        kt = build_knowledge_tables(p["u"], p["r"], p["c"], p["w"], idx, 2, {"diag": n_c, "proc": 0, "med": 0})
        return T.reduce_sum(kt.codes * Tensor(probe)) + independence_loss(kt.filter_embs)

    checks = check_gradients(loss, store, n_coords=20, seed=0)
    assert max(c.rel_error for c in checks) <= 1e-4
