import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vidsgg.classifier import Candidate
from vidsgg.evaluation import tiou
from vidsgg.graph import TimeSlot
from vidsgg.grounding import (BinTargets, GroundedSlot, GroundingConfig, GroundingModel, HeadOutput, assign_bins,
                              bin_of, bin_targets, confidence_targets, decode_slots, grounding_loss, infer_pipeline,
                              multimodal_fuse, query_feature, snap_to_frames, temporal_nms, vidvrd_mode)

from conftest import make_tracklet
from fd import REL_TOL, check_param_grads


def _tiny(**kw):
    base = dict(num_entity_classes=4, num_predicate_classes=3, d_v=5, d_w=4, d=8, d_hidden=6, bins=3, heads=2)
    base.update(kw)
    return GroundingModel(GroundingConfig(**base))


def test_assign_bins_examples():
    assert bin_of(TimeSlot(0.25, 0.45), 5) == 1
    assert bin_of(TimeSlot(0.3, 0.5), 5) == 2
    assert bin_of(TimeSlot(0.9, 1.0), 5) == 4
    out = assign_bins([TimeSlot(0.0, 0.2), TimeSlot(0.3, 0.9), TimeSlot(0.5, 0.6)], 1)
    assert out == [TimeSlot(0.3, 0.9)]
    with pytest.raises(ValueError):
        assign_bins([], 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=6))
def test_assign_bins_roundtrip_for_distinct_bins(k, pairs):
    slots = [TimeSlot(min(a, b), max(a, b)) for a, b in pairs if abs(a - b) > 1e-6]
    bins = assign_bins(slots, k)
    assert len(bins) == k
    if len({bin_of(s, k) for s in slots}) == len(slots):
        assert sorted(s for s in bins if s is not None) == sorted(slots)
        for b, s in enumerate(bins):
            assert s is None or bin_of(s, k) == b


def _head(t=10, k=2):
    cls = torch.zeros(t, k, dtype=torch.float64)
    reg = torch.zeros(t, 2 * k, dtype=torch.float64)
    conf = torch.zeros(t, k, dtype=torch.float64)
    return HeadOutput(cls, reg, conf)


def test_decode_examples():
    h = _head()
    h.cls[5, 0], h.reg[5, 0:2], h.conf[5, 0] = 1.0, torch.tensor([0.1, 0.4], dtype=torch.float64), 0.8
    h.cls[2, 1], h.reg[2, 2:4], h.conf[2, 1] = 0.5, torch.tensor([0.9, 0.6], dtype=torch.float64), 0.5
    out = decode_slots(h)
    assert out[0] == GroundedSlot(TimeSlot(0.1, 0.4), 0.8, 0)
    assert out[1].slot == TimeSlot(0.6, 0.9) and out[1].score == 0.25
    h.reg[2, 2:4] = torch.tensor([0.5, 0.5], dtype=torch.float64)
    assert len(decode_slots(h)) == 1
    h.reg[5, 0:2] = torch.tensor([-0.2, 1.3], dtype=torch.float64)
    assert decode_slots(h)[0].slot == TimeSlot(0.0, 1.0)


def test_nms_worked_example():
    a = GroundedSlot(TimeSlot(0.0, 0.5), 0.9, 0)
    b = GroundedSlot(TimeSlot(0.05, 0.5), 0.8, 1)
    assert tiou(a.slot, b.slot) == pytest.approx(0.9)
    assert temporal_nms([b, a], 0.8) == [a]
    c = GroundedSlot(TimeSlot(0.6, 0.9), 0.1, 2)
    assert temporal_nms([c, a], 0.8) == [a, c]
    with pytest.raises(ValueError):
        temporal_nms([a], 0.0)


slot_st = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1)).filter(lambda x: abs(x[0] - x[1]) > 1e-3)


@settings(max_examples=200, deadline=None)
@given(st.lists(slot_st, max_size=12), st.floats(0.05, 1.0))
def test_nms_properties(raw, thr):
    slots = [GroundedSlot(TimeSlot(min(a, b), max(a, b)), s, i) for i, (a, b, s) in enumerate(raw)]
    kept = temporal_nms(slots, thr)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert tiou(kept[i].slot, kept[j].slot) <= thr
    assert [k.score for k in kept] == sorted((k.score for k in kept), reverse=True)
    assert temporal_nms(kept, thr) == kept


def test_bin_targets_and_perfect_head_loss():
    t, k = 10, 2
    bt = bin_targets([assign_bins([TimeSlot(0.1, 0.3), TimeSlot(0.6, 0.9)], k)], t)
    assert bt.positive[0, :, 0].tolist() == [0, 1, 1, 0, 0, 0, 0, 0, 0, 0]
    assert bt.positive[0, :, 1].tolist() == [0, 0, 0, 0, 0, 0, 1, 1, 1, 0]
    cls = bt.positive.clone()
    reg = torch.zeros(1, t, 2 * k, dtype=torch.float64)
    reg[..., 0::2] = bt.bounds[..., 0][:, None, :]
    reg[..., 1::2] = bt.bounds[..., 1][:, None, :]
    conf = torch.ones(1, t, k, dtype=torch.float64)
    head = HeadOutput(cls, reg, conf)
    torch.testing.assert_close(confidence_targets(head, bt)[bt.positive > 0], torch.ones(5, dtype=torch.float64))
    assert grounding_loss(head, bt).item() == pytest.approx(0.0, abs=1e-9)


def test_loss_without_targets_is_negative_cls_only():
    t, k = 6, 3
    bt = bin_targets([[None] * k], t)
    rng = np.random.default_rng(0)
    cls = torch.as_tensor(rng.uniform(0.1, 0.9, size=(1, t, k)))
    head = HeadOutput(cls, torch.as_tensor(rng.uniform(size=(1, t, 2 * k))), torch.as_tensor(rng.uniform(size=(1, t, k))))
    expected = -torch.log(1 - cls).mean()
    assert grounding_loss(head, bt).item() == pytest.approx(expected.item(), rel=1e-12)


def test_query_feature_time_branch():
    model = _tiny()
    a = query_feature((0, 1, 2), TimeSlot(0.1, 0.5), model)
    b = query_feature((0, 1, 2), TimeSlot(0.2, 0.7), model)
    assert a.shape == (3, 4) and not torch.allclose(a, b)
    with torch.no_grad():
        for p in model.mlp_t.parameters():
            p.zero_()
    tokens = torch.stack([model.entity_embeddings[0], model.predicate_embeddings[1], model.entity_embeddings[2]])
    torch.testing.assert_close(query_feature((0, 1, 2), TimeSlot(0.1, 0.5), model), model.mlp_w(tokens))


def test_fuse_single_frame_and_equivariance():
    model = _tiny(positions=False)
    q = query_feature((0, 1, 2), TimeSlot(0.1, 0.5), model)
    frames = torch.as_tensor(np.random.default_rng(0).normal(size=(7, 5)))
    assert multimodal_fuse(frames[:1], q, model).shape == (1, 8)
    perm = torch.as_tensor(np.random.default_rng(1).permutation(7))
    torch.testing.assert_close(multimodal_fuse(frames, q, model)[perm], multimodal_fuse(frames[perm], q, model))


def test_head_shapes_and_ranges():
    model = _tiny()
    frames = torch.as_tensor(np.random.default_rng(0).normal(size=(9, 5)))
    head = model(frames, torch.tensor([[0, 1, 2], [3, 0, 1]]), torch.tensor([[0.1, 0.5], [0.0, 1.0]], dtype=torch.float64))
    assert head.cls.shape == (2, 9, 3) and head.reg.shape == (2, 9, 6) and head.conf.shape == (2, 9, 3)
    assert torch.all((head.cls > 0) & (head.cls < 1)) and torch.all(head.reg[..., 0::2] <= head.reg[..., 1::2])
    assert len(decode_slots(head[0])) <= 3


def test_grounding_gradients_finite_difference():
    rng = np.random.default_rng(5)
    model = _tiny()
    frames = torch.as_tensor(rng.normal(size=(8, 5)))
    cats = torch.tensor([[0, 1, 2], [3, 2, 1]])
    overlaps = torch.tensor([[0.0, 0.9], [0.2, 1.0]], dtype=torch.float64)
    bt = bin_targets([assign_bins([TimeSlot(0.1, 0.3), TimeSlot(0.5, 0.8)], 3),
                      assign_bins([TimeSlot(0.4, 0.9)], 3)], 8)
    conf_target = confidence_targets(model(frames, cats, overlaps), bt)

    def loss():
        return grounding_loss(model(frames, cats, overlaps), bt, conf_target)

    errors = check_param_grads(model, loss)
    assert max(errors.values()) <= REL_TOL, {k: v for k, v in errors.items() if v > REL_TOL}


def _cands(*specs):
    return [Candidate(s, o, c, p, i) for i, (s, o, c, p) in enumerate(specs)]


def _ents():
    # 0 and 1 overlap on frames [20, 80); 2 lives on [85, 100)
    return [make_tracklet(0, 0, 10, 70), make_tracklet(1, 1, 20, 80), make_tracklet(2, 2, 85, 15)]


def test_pipeline_floor_and_overlap_slot():
    ents = _ents()
    cands = _cands((0, 1, 0, 0.9), (1, 0, 1, 0.5))
    grounded = [[GroundedSlot(TimeSlot(0.3, 0.4), 0.15, 0)],
                [GroundedSlot(TimeSlot(0.3, 0.4), 0.6, 0)]]
    out = infer_pipeline(ents, cands, grounded)
    # the first candidate's best grounded score is below the floor, so it is dropped entirely
    assert {t.predicate_category for t in out} == {1}
    slots = sorted((t.time_slot, t.score) for t in out)
    assert slots == [(TimeSlot(0.2, 0.8), 0.5), (TimeSlot(0.3, 0.4), pytest.approx(0.3))]


def test_pipeline_overlap_suppresses_near_duplicate():
    ents = [make_tracklet(0, 0, 0, 100), make_tracklet(1, 1, 0, 100)]
    cands = _cands((0, 1, 0, 1.0))
    near = GroundedSlot(TimeSlot(0.0, 0.9), 0.95, 0)
    out = infer_pipeline(ents, cands, [[near]])
    assert [(t.time_slot, t.score) for t in out] == [(TimeSlot(0.0, 1.0), 1.0)]


def test_pipeline_slots_inside_overlap_and_pairs_dropped():
    ents = _ents()
    cands = _cands((0, 1, 0, 0.9), (0, 2, 1, 0.8))
    grounded = [[GroundedSlot(TimeSlot(0.0, 0.5), 0.7, 0), GroundedSlot(TimeSlot(0.7, 0.95), 0.6, 1)], []]
    out = infer_pipeline(ents, cands, grounded)
    assert all(t.object.id == 1 for t in out)
    for t in out:
        assert 0.2 <= t.time_slot.start and t.time_slot.end <= 0.8
        assert t.subject.start_fid == t.object.start_fid and t.subject.length == t.object.length


def test_vidvrd_mode_equals_pipeline_without_grounding():
    ents = _ents()
    cands = _cands((0, 1, 0, 0.9), (1, 0, 2, 0.3), (2, 0, 0, 0.7))
    a = vidvrd_mode(ents, cands)
    b = infer_pipeline(ents, cands, [[] for _ in cands])
    assert [(t.categories, t.time_slot, t.score) for t in a] == [(t.categories, t.time_slot, t.score) for t in b]
    assert len(a) == 2 and all(t.time_slot == TimeSlot(0.2, 0.8) for t in a)


def test_snap_to_frames():
    assert snap_to_frames(TimeSlot(0.111, 0.456), 100, TimeSlot(0.2, 1.0)) == TimeSlot(0.2, 0.46)
    assert snap_to_frames(TimeSlot(0.0, 0.1), 100, TimeSlot(0.2, 1.0)) is None
