import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vidsgg.classifier import (ClassifierConfig, EntityEncoder, PredicateDecoder, RelationClassifier,
                               RoleAwareCrossAttention, SceneInput, build_prior, decoder_forward, double_softmax,
                               encoder_forward, predicate_probabilities, raca_forward, select_edges, top_candidates)
from vidsgg.features import spatial_feature
from vidsgg.graph import PredicateNode, TemporalBipartiteGraph, TimeSlot
from vidsgg.layers import zero_parameters
from vidsgg.matching import GtTargets, stage_loss

from conftest import make_tracklet
from fd import REL_TOL, check_param_grads


def _scalar_double_softmax(a1, a2):
    """Element-by-element evaluation with plain floats."""
    out = []
    for r, row in enumerate((a1, a2)):
        z = sum(math.exp(v) for v in row)
        out.append([math.exp(row[i]) / z * math.exp(row[i]) / (math.exp(a1[i]) + math.exp(a2[i]))
                    for i in range(len(row))])
    return out


def test_worked_example():
    expected = _scalar_double_softmax([2.0, 0.0], [0.0, 0.0])
    got = double_softmax(torch.tensor([[[2.0, 0.0]], [[0.0, 0.0]]], dtype=torch.float64))
    np.testing.assert_allclose(got[:, 0].numpy(), expected, atol=1e-12)
    np.testing.assert_allclose(got[:, 0].numpy(), [[0.7758, 0.0596], [0.0596, 0.25]], atol=1e-3)


def test_uniform_logits_and_single_entity():
    got = double_softmax(torch.zeros(2, 3, 5, dtype=torch.float64))
    assert torch.allclose(got, torch.full_like(got, 0.1))
    logits = torch.tensor([[[1.5]], [[-0.5]]], dtype=torch.float64)
    np.testing.assert_allclose(double_softmax(logits).reshape(-1).numpy(),
                               torch.softmax(logits.reshape(-1), 0).numpy(), atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_factor_normalization(m, n, seed):
    logits = torch.as_tensor(np.random.default_rng(seed).normal(scale=4, size=(2, m, n)))
    ent, role = torch.softmax(logits, -1), torch.softmax(logits, 0)
    att = double_softmax(logits)
    assert torch.allclose(ent.sum(-1), torch.ones(2, m, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(role.sum(0), torch.ones(m, n, dtype=torch.float64), atol=1e-6)
    assert torch.all(att > 0) and torch.all(att < 1)
    assert torch.all(att <= torch.minimum(ent, role) + 1e-15)


def test_select_edges():
    att = np.array([[[0.1, 0.7]], [[0.6, 0.2]]])
    assert select_edges(att).tolist() == [[1, 0]]
    assert select_edges(np.full((2, 1, 2), 0.5)).tolist() == [[0, 0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_select_edges_invariant_to_logit_scaling(m, n, seed, scale):
    logits = torch.as_tensor(np.random.default_rng(seed).normal(size=(2, m, n)))
    # role-axis factor changes with scale, so compare on each channel's entity softmax ordering
    a = select_edges(torch.softmax(logits, -1))
    b = select_edges(torch.softmax(logits * scale, -1))
    assert (a == b).all()


def test_predicate_probabilities():
    prior = torch.log(torch.tensor([0.7, 0.2, 0.1], dtype=torch.float64))
    np.testing.assert_allclose(predicate_probabilities(torch.zeros(3, dtype=torch.float64), prior).numpy(),
                               [0.7, 0.2, 0.1], atol=1e-12)
    np.testing.assert_allclose(predicate_probabilities(torch.zeros(4), torch.zeros(4)).numpy(), 0.25)


def _graph(triples, n_entities=3, cats=None):
    cats = cats or list(range(n_entities))
    ents = tuple(make_tracklet(i, cats[i], 0, 50) for i in range(n_entities))
    nodes = tuple(PredicateNode(p, (TimeSlot(0.0, 0.2),), s, o) for s, p, o in triples)
    return TemporalBipartiteGraph(ents, nodes)


def test_prior_arithmetic():
    # pair (0, 1): p0 three times, p1 once, across graphs
    graphs = [_graph([(0, 0, 1)]), _graph([(0, 0, 1), (0, 1, 1)]), _graph([(0, 0, 1)])]
    b = build_prior(graphs, 3, 2)
    np.testing.assert_allclose(b[0, 1], [math.log(3.001 / 4.002), math.log(1.001 / 4.002)], rtol=1e-12)
    assert b[1, 2, 0] == b[1, 2, 1]  # unseen pair is uniform
    assert b[0, 1].argmax() == 0


def test_prior_counts_node_once():
    ents = (make_tracklet(0, 0, 0, 50), make_tracklet(1, 1, 0, 50))
    node = PredicateNode(0, (TimeSlot(0.0, 0.1), TimeSlot(0.2, 0.3)), 0, 1)
    b = build_prior([TemporalBipartiteGraph(ents, (node,))], 2, 2)
    np.testing.assert_allclose(b[0, 1, 0], math.log(1.001 / 1.002))
    with pytest.raises(ValueError):
        build_prior([], 2, 2)


def _tiny_cfg(**kw):
    base = dict(num_entity_classes=4, num_predicate_classes=3, d_a=5, d_e=8, d_q=8, d_w=4, d_hidden=6,
                num_queries=4, enc_layers=1, dec_layers=1, heads=2, pool_len=2, seed=0)
    base.update(kw)
    return ClassifierConfig(**base)


def _scene(rng, n=3, d_a=5, lengths=None, cats=None):
    lengths = lengths or [int(x) for x in rng.integers(2, 7, size=n)]
    app = [torch.as_tensor(rng.normal(size=(l, d_a))) for l in lengths]
    spat = [torch.as_tensor(spatial_feature(np.sort(rng.uniform(size=(l, 4)), axis=1))) for l in lengths]
    cats = cats if cats is not None else rng.integers(0, 4, size=n)
    return SceneInput(app, spat, torch.as_tensor(cats, dtype=torch.long))


def test_encoder_zero_weights_reduces_to_double_layernorm():
    torch.manual_seed(0)
    enc = EntityEncoder(8, 1, 2, 6).double()
    zero_parameters(enc)
    h = torch.as_tensor(np.random.default_rng(0).normal(size=(3, 8)))
    ln = torch.nn.functional.layer_norm
    torch.testing.assert_close(encoder_forward(h, enc), ln(ln(h, (8,)), (8,)))
    with pytest.raises(ValueError):
        enc(torch.full((2, 8), float("nan"), dtype=torch.float64))


def test_encoder_and_decoder_permutation_equivariance():
    torch.manual_seed(1)
    enc = EntityEncoder(8, 2, 2, 6).double()
    dec = PredicateDecoder(4, 8, 8, 2, 2, 6).double()
    h = torch.as_tensor(np.random.default_rng(1).normal(size=(5, 8)))
    perm = torch.tensor([3, 0, 4, 1, 2])
    torch.testing.assert_close(enc(h)[perm], enc(h[perm]))
    q, att = decoder_forward(h, dec)
    q_p, att_p = decoder_forward(h[perm], dec)
    torch.testing.assert_close(q, q_p)
    torch.testing.assert_close(att[:, :, perm], att_p)


def test_raca_uniform_when_weights_zero():
    raca = RoleAwareCrossAttention(8, 8, 6).double()
    with torch.no_grad():
        raca.w_query.zero_()
    fused, att = raca_forward(torch.randn(3, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64), raca)
    assert fused.shape == (3, 8)
    torch.testing.assert_close(att, torch.full((2, 3, 4), 1 / 8, dtype=torch.float64))


def test_decoder_zero_weights_reduction():
    torch.manual_seed(2)
    dec = PredicateDecoder(3, 8, 8, 1, 2, 6).double()
    layer = dec.layers[0]
    with torch.no_grad():
        zero_parameters(layer.self_attn)
        zero_parameters(layer.ffn)
    h = torch.randn(4, 8, dtype=torch.float64)
    ln = torch.nn.functional.layer_norm
    q1 = ln(dec.query_embed, (8,))
    fused, _ = layer.raca(q1, h)
    expected = ln(ln(q1 + fused, (8,)), (8,))
    torch.testing.assert_close(dec(h)[0], expected)


def test_classifier_shapes_and_probabilities():
    model = RelationClassifier(_tiny_cfg())
    out = model(_scene(np.random.default_rng(0)))
    assert out.probs.shape == (4, 4) and out.attention.shape == (2, 4, 3) and out.edges.shape == (4, 2)
    torch.testing.assert_close(out.probs.sum(1), torch.ones(4, dtype=torch.float64), rtol=0, atol=1e-9)
    assert torch.all(out.probs > 0)


def test_unknown_category_rejected():
    model = RelationClassifier(_tiny_cfg())
    with pytest.raises(ValueError):
        model(_scene(np.random.default_rng(0), cats=[0, 1, 9]))


def test_seed_determinism():
    a, b = RelationClassifier(_tiny_cfg(seed=5)), RelationClassifier(_tiny_cfg(seed=5))
    for (_, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_full_stage_equivariance(seed):
    rng = np.random.default_rng(seed)
    prior = rng.normal(size=(4, 4, 3))
    model = RelationClassifier(_tiny_cfg(), prior)
    scene = _scene(rng, n=4)
    perm = rng.permutation(4)
    permuted = SceneInput([scene.appearance[i] for i in perm], [scene.spatial[i] for i in perm],
                          scene.categories[perm])
    out, out_p = model(scene), model(permuted)
    torch.testing.assert_close(out.probs, out_p.probs)
    # edges refer to the same underlying tracklets
    assert (perm[out_p.edges] == out.edges).all()


def test_top_candidates_filters_and_dedupes():
    ents = [make_tracklet(0, 0, 0, 30), make_tracklet(1, 1, 0, 30), make_tracklet(2, 2, 60, 30)]
    probs = torch.tensor([[0.5, 0.3, 0.1, 0.1], [0.6, 0.2, 0.1, 0.1], [0.1, 0.1, 0.7, 0.1], [0.9, 0.0, 0.0, 0.1]])
    edges = np.array([[0, 1], [0, 1], [0, 2], [1, 1]])

    class Out:
        pass

    out = Out()
    out.probs, out.edges = probs, edges
    cands = top_candidates(out, 2, ents)
    assert [(c.subject_idx, c.category, c.object_idx, c.prob) for c in cands] == [
        (0, 0, 1, pytest.approx(0.6)), (0, 1, 1, pytest.approx(0.3))]


def test_stage_gradients_finite_difference():
    rng = np.random.default_rng(7)
    model = RelationClassifier(_tiny_cfg(), rng.normal(size=(4, 4, 3)))
    scene = _scene(rng)
    adjacency = np.zeros((2, 2, 3))
    adjacency[0, 0, 0] = adjacency[0, 1, 2] = adjacency[1, 0, 1] = adjacency[1, 1, 0] = 1
    targets = GtTargets(np.array([1, 2]), adjacency)
    _, matching = stage_loss(model(scene).probs, model(scene).attention, targets)

    def loss():
        out = model(scene)
        return stage_loss(out.probs, out.attention, targets, matching=matching)[0]

    errors = check_param_grads(model, loss)
    assert max(errors.values()) <= REL_TOL, {k: v for k, v in errors.items() if v > REL_TOL}
