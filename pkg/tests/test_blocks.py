import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fba.autograd import F, Tape, Tensor, backward, detach
from fba.blocks import (
    BackboneSpec,
    BlockDesc,
    BlockError,
    StageSpec,
    build_aux,
    build_backbone,
    forward_module,
    partition,
    simplify,
    stage_tail,
)
from fba.tasks import ClsHead

SMALL = BackboneSpec((StageSpec(2, 8, 1), StageSpec(2, 16, 2)))


def test_build_structure():
    bb = build_backbone(SMALL, seed=0, dtype="f64")
    assert len(bb.blocks) == 4
    third = bb.blocks[2]
    assert third.desc.stride == 2 and third.desc.projection
    assert "bb.2.proj.w" in third.params
    assert not bb.blocks[3].desc.projection


def test_build_deterministic():
    a = build_backbone(SMALL, 7).params
    b = build_backbone(SMALL, 7).params
    c = build_backbone(SMALL, 8).params
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a if k.endswith(".w"))
    assert all(not a[k].data.any() for k in a if k.endswith(".b"))


def test_zero_input_zero_features():
    bb = build_backbone(SMALL, 0, "f64")
    out = bb.forward(Tensor(np.zeros((2, 3, 8, 8))))
    assert out.shape == (2, 16, 4, 4)
    assert not out.data.any()


def test_invalid_spec():
    with pytest.raises(BlockError):
        build_backbone(BackboneSpec(()), 0)
    with pytest.raises(BlockError):
        build_backbone(BackboneSpec((StageSpec(1, 8, 3),)), 0)


@pytest.mark.parametrize("n,K,sizes", [(4, 4, [1, 1, 1, 1]), (4, 1, [4]), (16, 16, [1] * 16),
                                       (7, 3, [3, 2, 2]), (8, 4, [2, 2, 2, 2])])
def test_partition_sizes(n, K, sizes):
    bb = build_backbone(BackboneSpec((StageSpec(n, 4, 1),)), 0)
    mods = partition(bb, K)
    assert [len(m.blocks) for m in mods] == sizes


def test_partition_errors():
    bb = build_backbone(SMALL, 0)
    with pytest.raises(BlockError):
        partition(bb, 5)
    with pytest.raises(BlockError):
        partition(bb, 0)


@given(n=st.integers(1, 12), data=st.data())
def test_partition_complete_and_balanced(n, data):
    K = data.draw(st.integers(1, n))
    bb = build_backbone(BackboneSpec((StageSpec(n, 2, 1),)), 0)
    mods = partition(bb, K)
    flat = [b for m in mods for b in m.blocks]
    assert flat == bb.blocks
    sizes = [len(m.blocks) for m in mods]
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


def test_stage_tail_lookup():
    bb = build_backbone(SMALL, 0)
    mods = partition(bb, 4)
    assert stage_tail(bb, mods[2]).out_channels == 16
    assert stage_tail(bb, mods[3]) == mods[3].blocks[-1].desc
    assert stage_tail(bb, mods[0]) == stage_tail(bb, mods[1])


def test_simplify_examples():
    d16 = BlockDesc(16, 16, 2)
    assert simplify(d16, 1) == d16
    r = simplify(d16, 2)
    assert r.width == 8 and r.kernel == 3 and r.stride == 2
    assert (r.in_channels, r.out_channels) == (16, 16)
    assert simplify(BlockDesc(3, 3), 2).width == 2
    with pytest.raises(BlockError):
        simplify(d16, 0.5)


def test_identity_block_passes_input_through():
    bb = build_backbone(BackboneSpec((StageSpec(1, 4, 1),), input_channels=4), 0, "f64")
    blk = bb.blocks[0]
    for k, v in blk.params.items():
        v.data = np.zeros_like(v.data)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 5, 5)))
    np.testing.assert_array_equal(forward_module(partition(bb, 1)[0], x).data, x.data)


def test_stride_two_halves():
    bb = build_backbone(SMALL, 0)
    mods = partition(bb, 2)
    y = forward_module(mods[1], forward_module(mods[0], Tensor(np.ones((1, 3, 8, 8), np.float32))))
    assert y.shape[2:] == (4, 4)


@given(K=st.sampled_from([1, 2, 3, 4]), seed=st.integers(0, 100))
def test_partitioned_forward_matches_whole(K, seed):
    spec = BackboneSpec((StageSpec(2, 4, 1), StageSpec(2, 8, 2)), stem_pool=2)
    bb = build_backbone(spec, seed, "f64")
    x = Tensor(np.random.default_rng(seed).standard_normal((2, 3, 16, 16)))
    whole = bb.forward(x).data
    h = x
    for m in partition(bb, K):
        h = detach(forward_module(m, h))
    np.testing.assert_array_equal(h.data, whole)


def _cls_aux(bb, m, K, reduction=1, shared=False):
    head = ClsHead("head", bb.blocks[-1].desc.out_channels, 3, 0)
    return build_aux(bb, m, lambda p, c: ClsHead(p, c, 3, 0), None, reduction, 0, is_last=m.index == K - 1,
                     genuine_head=head, shared_head=shared), head


@pytest.mark.parametrize("reduction", [1, 2])
def test_aux_accepts_module_output(reduction):
    bb = build_backbone(SMALL, 0)
    mods = partition(bb, 4)
    x = Tensor(np.ones((2, 3, 8, 8), np.float32))
    for m in mods:
        x = forward_module(m, x)
        aux, _ = _cls_aux(bb, m, 4, reduction)
        assert aux.forward(x).shape == (2, 3)


def test_last_aux_is_genuine_head():
    bb = build_backbone(SMALL, 0)
    mods = partition(bb, 2)
    aux, head = _cls_aux(bb, mods[1], 2)
    assert aux.is_genuine_head and aux.simplified_block is None and aux.head is head
    assert set(aux.params) == set(head.params)


def test_aux_params_disjoint():
    bb = build_backbone(SMALL, 0)
    mods = partition(bb, 4)
    seen = set(bb.params)
    for m in mods[:-1]:
        aux, _ = _cls_aux(bb, m, 4)
        assert not seen & set(aux.params)
        seen |= set(aux.params)


def test_shared_head_aliases_final_head():
    bb = build_backbone(SMALL, 0)
    mods = partition(bb, 4)
    aux, head = _cls_aux(bb, mods[0], 4, shared=True)
    assert aux.head is head
    assert set(head.params) <= set(aux.params)
    assert not (set(aux.params) - set(head.params)) & set(bb.params)


def test_aux_shape_mismatch_raises():
    bb = build_backbone(SMALL, 0)
    mods = partition(bb, 4)
    # module 0's tail stage emits 8 channels; pretend it emits 16
    mods[0].blocks = [bb.blocks[2]]
    with pytest.raises(BlockError):
        _cls_aux(bb, mods[0], 4)


def test_deployed_purity():
    """Every leaf reached by the inference forward is a backbone or head parameter."""
    bb = build_backbone(SMALL, 0, "f64")
    head = ClsHead("head", 16, 3, 0, "f64")
    for m in partition(bb, 4)[:-1]:
        build_aux(bb, m, lambda p, c: ClsHead(p, c, 3, 0, "f64"), None, 1, 0, dtype="f64")
    with Tape():
        out = head.forward(bb.forward(Tensor(np.ones((1, 3, 8, 8)))))
        reached = set(backward(F.mse(out, Tensor(np.zeros(out.shape)))))
    assert reached == set(bb.params) | set(head.params)
