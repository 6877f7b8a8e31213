import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fba.autograd import F, MemoryTrace, Tape, Tensor, backward, leaf
from fba.bank import FeatureBank
from fba.blocks import BackboneSpec, StageSpec
from fba.tasks import (
    build_classification_task,
    build_detection_task,
    build_sr_task,
    gen_classification_data,
    gen_detection_data,
    gen_sr_data,
)
from fba.trainer import (
    DivergenceError,
    GradientLeakError,
    Network,
    OptimizerConfig,
    OptimizerState,
    OwnershipError,
    Schedule,
    Trainer,
    TrainerConfig,
    TrainerError,
    cosine_lr,
    e2e_train_step,
    local_train_step,
    measure_peak_memory,
    optimizer_step,
    parallel_phase2,
    profile_step,
    resolve_workers,
)

SGD = OptimizerConfig("sgd", momentum=0.0, weight_decay=0.0)


def scalar_param(v, name="w"):
    return leaf(np.array([v], dtype=np.float64), True, name)


# --- optimizer ---------------------------------------------------------------------


def test_e2e_hand_example():
    w = scalar_param(1.0)
    with Tape():
        g = backward(F.mse(F.mul_scalar(w, 1.0), Tensor(np.zeros(1))))
    assert g["w"].data[0] == 2.0
    optimizer_step({"w": w}, g, OptimizerState(), "sgd", 0.1, momentum=0.0)
    assert w.data[0] == pytest.approx(0.8)


def test_plain_sgd_reduction():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal((3, 2))
    g = rng.standard_normal((3, 2))
    w = leaf(w0.copy(), True, "w")
    optimizer_step({"w": w}, {"w": Tensor(g)}, OptimizerState(), "sgd", 0.05, weight_decay=0.0, momentum=0.0)
    np.testing.assert_array_equal(w.data, w0 - 0.05 * g)


def test_nesterov_hand_rolled_three_steps():
    mu, lam, lr = 0.9, 1e-4, 0.1
    w = scalar_param(1.0)
    state = OptimizerState()
    ref_w, ref_v = 1.0, 0.0
    for g in (0.5, -0.2, 0.3):
        optimizer_step({"w": w}, {"w": Tensor(np.array([g]))}, state, "sgd_nesterov", lr, lam, mu)
        d = g + lam * ref_w
        ref_v = mu * ref_v + d
        ref_w = ref_w - lr * (d + mu * ref_v)
        assert w.data[0] == pytest.approx(ref_w, abs=1e-15)
        assert state.buffers["w"]["v"].shape == w.shape


def test_adam_zero_gradient_keeps_weights():
    w = leaf(np.array([0.3, -1.2]), True, "w")
    state = OptimizerState()
    for _ in range(5):
        optimizer_step({"w": w}, {"w": Tensor(np.zeros(2))}, state, "adam", 1e-3)
    np.testing.assert_array_equal(w.data, [0.3, -1.2])


def test_adam_first_step_is_signed_lr():
    w = leaf(np.array([0.0, 0.0]), True, "w")
    optimizer_step({"w": w}, {"w": Tensor(np.array([2.0, -0.5]))}, OptimizerState(), "adam", 1e-2, eps=0.0)
    np.testing.assert_allclose(w.data, [-1e-2, 1e-2])


def test_optimizer_shape_mismatch():
    w = leaf(np.zeros(2), True, "w")
    with pytest.raises(TrainerError):
        optimizer_step({"w": w}, {"w": Tensor(np.zeros(3))}, OptimizerState(), "sgd", 0.1)
    with pytest.raises(TrainerError):
        optimizer_step({"w": w}, {"w": Tensor(np.zeros(2))}, OptimizerState(), "sgd", -0.1)


# --- schedule ----------------------------------------------------------------------


def test_cosine_examples():
    s = Schedule(0.8, 105, 5)
    assert cosine_lr(0, s) == 0.0
    assert cosine_lr(5, s) == pytest.approx(0.8)
    assert cosine_lr(55, s) == pytest.approx(0.4)
    assert abs(cosine_lr(105, s)) < 1e-12
    with pytest.raises(TrainerError):
        cosine_lr(106, s)
    with pytest.raises(TrainerError):
        cosine_lr(-1, s)


@given(lr=st.floats(1e-4, 2.0), total=st.integers(2, 400), data=st.data())
def test_cosine_properties(lr, total, data):
    warm = data.draw(st.integers(0, total - 1))
    s = Schedule(lr, total, warm)
    vals = [cosine_lr(t, s) for t in range(total + 1)]
    assert min(vals) >= 0
    after = vals[warm:]
    assert all(b <= a + 1e-15 for a, b in zip(after, after[1:]))
    if warm:
        # the warmup ramp meets the cosine at the peak
        assert vals[warm] == pytest.approx(lr)
        assert abs(vals[warm - 1] - lr * (warm - 1) / warm) < 1e-12


def test_config_validation():
    with pytest.raises(TrainerError):
        TrainerConfig(mode="bogus").validate()
    with pytest.raises(TrainerError):
        TrainerConfig(eta_l=0).validate()
    with pytest.raises(TrainerError):
        TrainerConfig(K=0).validate()
    with pytest.raises(TrainerError):
        TrainerConfig(warmup_steps=10).validate(total_steps=10)
    assert TrainerConfig(eta_l=0.3).eta_a == 0.3


# --- local steps --------------------------------------------------------------------


def cls_setup(mode="local_fba", K=4, dtype="f64", opt=SGD, **kw):
    cfg = TrainerConfig(mode=mode, K=K, eta_l=0.05, optimizer=opt, dtype=dtype, **kw)
    net = Network(build_classification_task(), mode, K, seed=0, dtype=dtype)
    data = gen_classification_data(8, 0, dtype=dtype)
    return cfg, net, next(data.batches(8))


def test_k4_step_records_losses_and_isolation():
    cfg, net, batch = cls_setup()
    log = []
    m = local_train_step(net, batch, FeatureBank(net.schema), [OptimizerState() for _ in range(4)], cfg, 0.05,
                         grad_log=log)
    assert len(m.local_losses) == 4 and m.head_loss == m.local_losses[-1]
    assert all(math.isfinite(v) for v in m.local_losses)
    assert set(log[1]) == set(net.theta(1)) | set(net.gamma(1))
    for j, g in enumerate(log):
        assert set(g) == set(net.theta(j)) | set(net.gamma(j))


def test_bank_empty_after_step():
    cfg, net, batch = cls_setup()
    bank = FeatureBank(net.schema)
    local_train_step(net, batch, bank, [OptimizerState() for _ in range(4)], cfg, 0.05, step=3)
    assert len(bank) == 0 and bank.step == 4


def test_k1_local_matches_e2e_bitwise():
    cfg_l, net_l, batch = cls_setup("local_fba", K=1)
    cfg_e, net_e, _ = cls_setup("e2e")
    s_l, s_e = [OptimizerState()], OptimizerState()
    for step in range(3):
        a = local_train_step(net_l, batch, FeatureBank(net_l.schema), s_l, cfg_l, 0.05, step)
        b = e2e_train_step(net_e, batch, s_e, cfg_e, 0.05)
        assert a.local_losses == b.local_losses
    pe, pl = net_e.deployed_params(), net_l.deployed_params()
    assert set(pe) == set(pl)
    for k in pe:
        np.testing.assert_array_equal(pe[k].data, pl[k].data)


def test_zero_lr_leaves_parameters():
    cfg, net, batch = cls_setup("e2e")
    before = net.snapshot()
    e2e_train_step(net, batch, OptimizerState(), cfg, 0.0)
    after = net.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_e2e_deterministic():
    runs = []
    for _ in range(2):
        cfg, net, batch = cls_setup("e2e", dtype="f32", opt=OptimizerConfig("adam"))
        st_ = OptimizerState()
        runs.append([e2e_train_step(net, batch, st_, cfg, 1e-3) for _ in range(3)])
    assert runs[0] == runs[1]


def test_nobank_and_fba_same_theta_update_on_detection():
    task = build_detection_task()
    batch = next(gen_detection_data(4, 0, dtype="f64").batches(4))
    nets = {}
    for mode in ("local_fba", "local_nobank"):
        cfg = TrainerConfig(mode=mode, K=4, eta_l=1e-3, optimizer=OptimizerConfig("adam"), dtype="f64")
        net = Network(task, mode, 4, seed=0, dtype="f64")
        bank = FeatureBank(net.schema) if mode == "local_fba" else None
        local_train_step(net, batch, bank, [OptimizerState() for _ in range(4)], cfg, 1e-3)
        nets[mode] = net
    a, b = nets["local_fba"].backbone.params, nets["local_nobank"].backbone.params
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)


def test_gradient_leak_detected():
    cfg, net, batch = cls_setup()
    # an aux parameter that claims a name owned by the next module
    p = next(iter(net.gamma(0).values()))
    p.name = sorted(net.theta(1))[0]
    with pytest.raises(GradientLeakError):
        local_train_step(net, batch, FeatureBank(net.schema), [OptimizerState() for _ in range(4)], cfg, 0.05)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_module():
    cfg, net, batch = cls_setup()
    # an aux parameter: a backbone one would also poison the bank read by module 0
    p = net.gamma(2)["aux2.head.fc.w"]
    p.data = np.full_like(p.data, np.inf)
    with pytest.raises(DivergenceError) as ei:
        local_train_step(net, batch, FeatureBank(net.schema), [OptimizerState() for _ in range(4)], cfg, 0.05)
    assert ei.value.module == 2


def test_wrong_mode_rejected():
    cfg, net, batch = cls_setup("e2e")
    with pytest.raises(TrainerError):
        local_train_step(net, batch, None, [OptimizerState()], cfg, 0.1)
    cfg2, net2, _ = cls_setup()
    with pytest.raises(TrainerError):
        e2e_train_step(net2, batch, OptimizerState(), cfg2, 0.1)


# --- parallel phase 2 -----------------------------------------------------------------


def _run(parallel, workers=None, mode="local_fba", steps=2):
    cfg, net, batch = cls_setup(mode, dtype="f32", opt=OptimizerConfig("adam"))
    bank = FeatureBank(net.schema) if mode == "local_fba" else None
    states = [OptimizerState() for _ in range(4)]
    for step in range(steps):
        if parallel:
            parallel_phase2(net, batch, bank, states, cfg, 1e-3, step, workers=workers)
        else:
            local_train_step(net, batch, bank, states, cfg, 1e-3, step)
    return net.snapshot()


@pytest.mark.parametrize("workers", [1, 2, 4, 9])
@pytest.mark.parametrize("mode", ["local_fba", "local_nobank"])
def test_parallel_matches_sequential(workers, mode):
    seq = _run(False, mode=mode)
    par = _run(True, workers, mode=mode)
    for k in seq:
        np.testing.assert_array_equal(seq[k], par[k])


def test_parallel_rejects_shared_head():
    cfg, _, batch = cls_setup()
    net = Network(build_classification_task(), "local_fba", 4, dtype="f64", shared_head=True)
    with pytest.raises(OwnershipError):
        parallel_phase2(net, batch, FeatureBank(net.schema), [OptimizerState() for _ in range(4)], cfg, 0.1)


def test_worker_cap_from_env(monkeypatch):
    cfg = TrainerConfig(threads=8)
    monkeypatch.setenv("FBA_THREADS", "2")
    assert resolve_workers(cfg, 4) == 2
    monkeypatch.setenv("FBA_THREADS", "16")
    assert resolve_workers(cfg, 4) == 4
    monkeypatch.setenv("FBA_THREADS", "zero")
    with pytest.raises(TrainerError):
        resolve_workers(cfg, 4)


# --- memory ----------------------------------------------------------------------------


def test_empty_trace_rejected():
    with pytest.raises(TrainerError):
        measure_peak_memory(MemoryTrace("e2e"))


def _chain_task(blocks=4):
    return build_classification_task(backbone_spec=BackboneSpec((StageSpec(blocks, 8, 1),)))


def _block_cost(net, x):
    """Retained elements of each backbone block run alone on its input."""
    costs = []
    for b in net.backbone.blocks:
        with Tape() as tape:
            y = b(x)
            costs.append(tape.retained_total)
        x = Tensor(y.data)
    return costs


def test_e2e_peak_is_sum_of_blocks_plus_head():
    task = _chain_task()
    batch = next(gen_classification_data(2, 0, dtype="f64").batches(2))
    cfg = TrainerConfig(mode="e2e", dtype="f64", optimizer=SGD)
    net = Network(task, "e2e", dtype="f64")
    rep = profile_step(net, batch, cfg)
    blocks = sum(_block_cost(net, batch.inputs))
    with Tape() as tape:
        feats = net.backbone.forward(batch.inputs)
        base = tape.retained_total
        net.task.loss(net.head.forward(feats), batch)
        head = tape.retained_total - base
    assert rep.peak_retained_elements == blocks + head
    assert rep.bank_elements == 0 and rep.boundary_elements == 0


def test_local_k4_peak_below_e2e_and_k1_equal():
    task = _chain_task()
    batch = next(gen_classification_data(2, 0, dtype="f64").batches(2))
    peaks = {}
    for mode, K in [("e2e", 1), ("local_fba", 1), ("local_fba", 2), ("local_fba", 4)]:
        cfg = TrainerConfig(mode=mode, K=K, dtype="f64", optimizer=SGD)
        rep = profile_step(Network(task, mode, K, dtype="f64"), batch, cfg)
        assert rep.peak_retained_elements >= max(rep.per_module_peaks)
        assert min(rep.per_module_peaks) >= 0 and rep.bank_elements >= 0
        peaks[(mode, K)] = rep
    e2e = peaks[("e2e", 1)].peak_retained_elements
    assert peaks[("local_fba", 1)].peak_retained_elements == e2e
    assert peaks[("local_fba", 4)].peak_retained_elements < peaks[("local_fba", 2)].peak_retained_elements < e2e
    k4 = peaks[("local_fba", 4)]
    assert k4.bank_elements > 0 and k4.boundary_elements > 0


def test_profile_does_not_update():
    cfg, net, batch = cls_setup()
    before = net.snapshot()
    profile_step(net, batch, cfg)
    after = net.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_trainer_fit_rows():
    cfg = TrainerConfig(mode="local_fba", K=2, eta_l=1e-3, optimizer=OptimizerConfig("adam"), epochs=3,
                        batch_size=8, warmup_steps=1)
    tr = Trainer(build_classification_task(), cfg)
    rows = tr.fit(gen_classification_data(16, 0), gen_classification_data(8, 1))
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert all(len(r["module_losses"]) == 2 for r in rows)
    assert 0 <= rows[-1]["test_metric"] <= 1
