import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fba.autograd import F, Tape, Tensor, backward, leaf
from fba.bank import (
    FULL_RES_MAP,
    GAP_VECTOR,
    SCALE_MAP,
    BankKey,
    BankLifecycleError,
    BankSchema,
    FeatureBank,
    Fusion,
    FusionError,
    SchemaError,
    fuse,
    resize_to,
)
from fba.blocks import partition
from fba.tasks import build_classification_task, build_detection_task, build_sr_task
from fba.trainer import Network


def det_schema():
    k4 = BankKey((0, 1), SCALE_MAP, 4)
    k8 = BankKey((1, 1), SCALE_MAP, 8)
    k16 = BankKey((2, 1), SCALE_MAP, 16)
    return BankSchema("detection", "fpn_topdown", {0: [k8, k16], 1: [k4, k16], 2: [k4, k8]}), (k4, k8, k16)


def test_register_and_slice_by_schema():
    schema, (k4, k8, k16) = det_schema()
    bank = FeatureBank(schema)
    bank.register((1, 1), SCALE_MAP, Tensor(np.ones((1, 2, 8, 8))), 0)
    assert [e.stride for e in bank.slice(0)] == [8]
    assert [e.stride for e in bank.slice(2)] == [8]
    assert bank.slice(1) == []


def test_register_detaches():
    bank = FeatureBank(BankSchema("c", "broadcast_add", {0: [BankKey((1, 0), GAP_VECTOR)]}))
    with Tape():
        w = leaf(np.ones((2, 3)), True, "w")
        y = F.matmul(Tensor(np.ones((1, 2))), w)
        assert y.node is not None
        bank.register((1, 0), GAP_VECTOR, y, 0)
    e = bank.slice(0)[0]
    assert e.tensor.detached and e.tensor.node is None


def test_last_write_wins():
    bank = FeatureBank(BankSchema("c", "broadcast_add", {0: [BankKey((1, 0), GAP_VECTOR)]}))
    bank.register((1, 0), GAP_VECTOR, Tensor(np.zeros((1, 2))), 0)
    bank.register((1, 0), GAP_VECTOR, Tensor(np.ones((1, 2))), 0)
    assert len(bank) == 1
    assert bank.slice(0)[0].tensor.data.sum() == 2


def test_undeclared_and_lifecycle():
    bank = FeatureBank(BankSchema("c", "broadcast_add", {0: [BankKey((1, 0), GAP_VECTOR)]}), strict=True)
    with pytest.raises(SchemaError):
        bank.register((0, 0), GAP_VECTOR, Tensor(np.zeros((1, 2))), 0)
    with pytest.raises(BankLifecycleError):
        bank.register((1, 0), GAP_VECTOR, Tensor(np.zeros((1, 2))), 5)
    bank.register((1, 0), GAP_VECTOR, Tensor(np.zeros((1, 2))), 0)
    bank.freeze()
    with pytest.raises(BankLifecycleError):
        bank.register((1, 0), GAP_VECTOR, Tensor(np.zeros((1, 2))), 0)
    bank.reset(1)
    with pytest.raises(BankLifecycleError):
        bank.slice(0)
    permissive = FeatureBank(bank.schema)
    permissive.reset(1)
    assert permissive.slice(0) == []


def test_reset_hides_previous_step():
    schema, _ = det_schema()
    bank = FeatureBank(schema)
    bank.register((0, 1), SCALE_MAP, Tensor(np.ones((1, 2, 16, 16))), 0)
    bank.reset(1)
    assert bank.slice(1) == [] and len(bank) == 0


def test_slice_order_stride_descending():
    schema, (k4, k8, k16) = det_schema()
    bank = FeatureBank(schema)
    for k, hw in [(k4, 16), (k16, 4), (k8, 8)]:
        bank.register(k.position, SCALE_MAP, Tensor(np.ones((1, 2, hw, hw))), 0)
    assert [e.stride for e in bank.slice(0)] == [16, 8]
    assert [e.stride for e in bank.slice(1)] == [16, 4]


def test_fuse_identity_and_unknown():
    x = Tensor(np.ones((1, 2, 3, 3)))
    assert fuse(x, [], "identity") is x
    with pytest.raises(FusionError):
        fuse(x, [], "attention")


def _entry(arr, tag=FULL_RES_MAP, pos=(0, 0)):
    bank = FeatureBank(BankSchema("t", "x", {9: [BankKey(pos, tag)]}))
    bank.register(pos, tag, Tensor(arr), 0)
    return bank.slice(9)


def test_broadcast_add_zero_init_is_identity():
    fu = Fusion("broadcast_add", "f", 4, [6], "f64")
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 3, 3)))
    out = fu.apply(x, _entry(np.ones((2, 6)), GAP_VECTOR, (1, 0)))
    np.testing.assert_array_equal(out.data, x.data)


def test_concat_project_shapes():
    fu = Fusion("concat_project", "f", 16, [8], "f64")
    x = Tensor(np.random.default_rng(0).standard_normal((1, 16, 8, 8)))
    out = fu.apply(x, _entry(np.ones((1, 8, 32, 32))))
    assert out.shape == (1, 16, 8, 8)
    assert fu.params["f.w"].shape == (16, 24, 1, 1)
    np.testing.assert_allclose(out.data, x.data)  # pass-through init


def test_concat_project_bad_resize():
    fu = Fusion("concat_project", "f", 4, [2], "f64")
    with pytest.raises(FusionError):
        fu.apply(Tensor(np.ones((1, 4, 6, 6))), _entry(np.ones((1, 2, 4, 4))))


@given(h=st.sampled_from([2, 4, 8]), eh=st.sampled_from([1, 2, 4, 8, 16]), c=st.integers(1, 5),
       ec=st.integers(1, 5))
def test_fusion_shape_law(h, eh, c, ec):
    x = Tensor(np.ones((2, c, h, h)))
    cp = Fusion("concat_project", "f", c, [ec], "f64").apply(x, _entry(np.ones((2, ec, eh, eh))))
    ba = Fusion("broadcast_add", "g", c, [ec], "f64").apply(x, _entry(np.ones((2, ec)), GAP_VECTOR, (1, 0)))
    assert cp.shape == x.shape == ba.shape


def test_resize_down_and_up():
    t = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    assert resize_to(t, 2, 2).data[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
    assert resize_to(t, 8, 8).shape == (1, 1, 8, 8)


def test_fusion_gradient_stops_at_entry():
    fu = Fusion("concat_project", "aux0.fuse", 2, [2], "f64")
    with Tape():
        w = leaf(np.ones((1, 2)), True, "producer")
        feat = F.matmul(Tensor(np.ones((4, 1))), w)  # attached producer output
        entry = _entry(feat.data.reshape(1, 2, 2, 2))
        local = leaf(np.ones((1, 2, 2, 2)), True, "local")
        out = fu.apply(local, entry)
        g = backward(F.mse(out, Tensor(np.zeros(out.shape))))
    assert "producer" not in g
    assert set(g) == {"local", "aux0.fuse.w", "aux0.fuse.b"}


# --- task schemas ---------------------------------------------------------------


TASKS = {
    "classification": build_classification_task,
    "detection": build_detection_task,
    "super_resolution": build_sr_task,
}


@pytest.mark.parametrize("kind", sorted(TASKS))
@pytest.mark.parametrize("K", [1, 2, 4])
def test_schema_slices_are_registered(kind, K):
    net = Network(TASKS[kind](), "local_fba", K)
    regs = set(net.schema.registrations)
    for j in range(K):
        assert set(net.schema.keys_for(j)) <= regs
    for key in regs:
        m = net.modules[key.position[0]]
        assert key.position[1] < len(m.blocks)
    if K == 1:
        assert regs == set()


def test_classification_schema_deepest_gap():
    net = Network(build_classification_task(), "local_fba", 4)
    (key,) = net.schema.registrations
    assert key.tag == GAP_VECTOR and key.position == (3, len(net.modules[3].blocks) - 1)
    assert all(net.schema.keys_for(j) == [key] for j in range(3))


def test_sr_schema_first_block():
    net = Network(build_sr_task(), "local_fba", 4)
    (key,) = net.schema.registrations
    assert key.tag == FULL_RES_MAP and key.position == (0, 0)


def test_detection_stride4_module_reads_coarser_maps():
    net = Network(build_detection_task(), "local_fba", 4)
    m0 = net.modules[0]
    assert net.task.module_stride(net.backbone, m0) == 4
    assert sorted(k.stride for k in net.schema.keys_for(0)) == [8, 16]
