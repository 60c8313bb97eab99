import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vidsgg.graph import (InvalidGraphError, PredicateNode, RelationTriplet, TemporalBipartiteGraph, TimeSlot,
                          from_triplets, to_triplets, triplet_multiset, validate_graph)

from conftest import make_tracklet, random_graph


def test_empty_graph_is_valid():
    assert validate_graph(TemporalBipartiteGraph()).ok


def test_self_relation_reported():
    ents = (make_tracklet(0, 0, 0, 50), make_tracklet(1, 1, 0, 50))
    g = TemporalBipartiteGraph(ents, (PredicateNode(0, (TimeSlot(0.1, 0.2),), 0, 0),))
    report = validate_graph(g)
    assert not report.ok
    assert any("self-relation" in v for v in report.violations)


def test_slot_outside_overlap_reported():
    subj = make_tracklet(0, 0, 0, 50)  # span (0.0, 0.5)
    obj = make_tracklet(1, 1, 0, 100)
    g = TemporalBipartiteGraph((subj, obj), (PredicateNode(0, (TimeSlot(0.6, 0.9),), 0, 1),))
    assert any("slot outside overlap" in v for v in validate_graph(g).violations)


def test_invalid_slot_and_range_reported():
    ents = (make_tracklet(0, 0, 0, 100), make_tracklet(1, 1, 0, 100))
    g = TemporalBipartiteGraph(ents, (PredicateNode(0, (TimeSlot(0.5, 0.5),), 0, 1),
                                      PredicateNode(1, (TimeSlot(0.1, 0.2),), 0, 7)))
    v = validate_graph(g).violations
    assert any("invalid slot" in x for x in v)
    assert any("out of range" in x for x in v)


def test_to_triplets_expands_instances():
    ents = (make_tracklet(0, 0, 0, 100), make_tracklet(1, 1, 10, 80))
    node = PredicateNode(2, (TimeSlot(0.1, 0.3), TimeSlot(0.5, 0.8)), 0, 1, (0.4, 0.9))
    trips = to_triplets(TemporalBipartiteGraph(ents, (node,)))
    assert len(trips) == 2
    assert {t.categories for t in trips} == {(0, 2, 1)}
    assert [t.time_slot for t in trips] == [TimeSlot(0.5, 0.8), TimeSlot(0.1, 0.3)]  # by score
    assert trips[0].subject.start_fid == 50 and trips[0].subject.length == 30
    assert node.score == 0.9


def test_to_triplets_empty_and_invalid():
    ents = (make_tracklet(0, 0, 0, 100), make_tracklet(1, 1, 0, 100))
    assert to_triplets(TemporalBipartiteGraph(ents, ())) == []
    bad = TemporalBipartiteGraph(ents, (PredicateNode(0, (TimeSlot(0.1, 0.2),), 1, 1),))
    with pytest.raises(InvalidGraphError):
        to_triplets(bad)


def test_figure_two_graph_gives_five_triplets():
    # dog (0) and child (1); towards has two slots, behind / away / in-front-of one each
    dog, child = make_tracklet(0, 0, 0, 100), make_tracklet(1, 1, 0, 100)
    towards, behind, away, front = 0, 1, 2, 3
    nodes = (
        PredicateNode(towards, (TimeSlot(0.0, 0.2), TimeSlot(0.5, 0.7)), 0, 1),
        PredicateNode(behind, (TimeSlot(0.2, 0.5),), 0, 1),
        PredicateNode(away, (TimeSlot(0.7, 0.9),), 0, 1),
        PredicateNode(front, (TimeSlot(0.1, 0.4),), 1, 0),
    )
    assert len(to_triplets(TemporalBipartiteGraph((dog, child), nodes))) == 5


def test_from_triplets_merges_same_pair_and_category():
    ents = [make_tracklet(0, 0, 0, 100), make_tracklet(1, 1, 0, 100)]
    s1, s2 = TimeSlot(0.0, 0.3), TimeSlot(0.5, 0.8)
    trips = [RelationTriplet(ents[0].crop(s), 4, ents[1].crop(s), s, 1.0) for s in (s1, s2)]
    g = from_triplets(trips, ents)
    assert g.m == 1 and g.predicates[0].num_instances == 2


def test_from_triplets_keeps_categories_apart():
    ents = [make_tracklet(0, 0, 0, 100), make_tracklet(1, 1, 0, 100)]
    s = TimeSlot(0.0, 0.3)
    trips = [RelationTriplet(ents[0].crop(s), c, ents[1].crop(s), s, 1.0) for c in (0, 1)]
    assert from_triplets(trips, ents).m == 2


def test_from_triplets_unknown_id():
    ents = [make_tracklet(0, 0, 0, 100), make_tracklet(1, 1, 0, 100)]
    s = TimeSlot(0.0, 0.3)
    stranger = make_tracklet(9, 0, 0, 100)
    with pytest.raises(InvalidGraphError):
        from_triplets([RelationTriplet(stranger.crop(s), 0, ents[1].crop(s), s)], ents)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_preserves_triplet_multiset(seed):
    g = random_graph(np.random.default_rng(seed))
    assert validate_graph(g).ok
    trips = to_triplets(g)
    g2 = from_triplets(trips, g.entities)
    assert validate_graph(g2).ok
    assert sum(p.num_instances for p in g2.predicates) == len(trips)
    assert triplet_multiset(to_triplets(g2)) == triplet_multiset(trips)


def test_tracklet_is_immutable():
    t = make_tracklet(0, 0, 0, 10)
    with pytest.raises(ValueError):
        t.boxes[0, 0] = 5.0
