import numpy as np
import pytest

from fedcybgd import transport
from fedcybgd.compression import CompressorSpec
from fedcybgd.federation import (FederationConfig, ProtocolError, ServerState, apply_update,
                                 assign_blocks, block_epochs_per_round, dispatch, finish_round,
                                 plan_cycle, run_baseline, run_training, skip)
from fedcybgd.model import (DataBatch, ModelConfig, build_model, forward_loss, model_gradients,
                            owned_parameter_names)
from fedcybgd.optim import BlockDelta, OptimizerState, optimizer_update

CFG = ModelConfig(family="mlp", n_layers=4, width=6, input_dim=5, num_classes=3, dtype="float64")


def shard(n=16, seed=0):
    rng = np.random.default_rng(seed)
    return DataBatch(rng.standard_normal((n, 5)), rng.integers(0, 3, n))


def zero_delta(state, client, blocks):
    params = state.model.named_parameters()
    names = owned_parameter_names(state.model, blocks)
    return BlockDelta(client, state.round, tuple(blocks), {k: np.zeros_like(params[k]) for k in names})


def test_assign_examples():
    assert assign_blocks(4, 4).assignments == {i: (i,) for i in range(4)}
    assert assign_blocks(2, 4).assignments == {0: (0, 1), 1: (2, 3)}
    p = assign_blocks(32, 4)
    assert p.strategy == "many-clients-per-block"
    assert p.coverage() == {b: 8 for b in range(4)}
    assert sorted(c for b in range(4) for c in p.clients_for(b)) == list(range(32))


@pytest.mark.parametrize("m,b", [(1, 1), (1, 5), (3, 7), (5, 5), (7, 3), (9, 2)])
def test_every_block_covered(m, b):
    p = assign_blocks(m, b)
    assert all(v >= 1 for v in p.coverage().values()) and len(p.coverage()) == b


def test_assign_errors():
    with pytest.raises(ValueError):
        assign_blocks(0, 4)
    with pytest.raises(ValueError):
        assign_blocks(3, 4, "one-to-one")


def test_plan_cycle_single_and_deterministic():
    model = build_model(CFG, 0)
    st1 = ServerState(model, assign_blocks(1, 4))
    assert plan_cycle(st1) == [0]
    a = ServerState(model, assign_blocks(4, 4), seed=5)
    b = ServerState(model, assign_blocks(4, 4), seed=5)
    orders_a, orders_b = [], []
    for st_, out in ((a, orders_a), (b, orders_b)):
        for _ in range(5):
            out.append(plan_cycle(st_))
            st_.cursor = len(st_.plan)
            finish_round(st_)
    assert orders_a == orders_b
    assert len({tuple(o) for o in orders_a}) > 1


def test_plan_cycle_uniform_first_client():
    st_ = ServerState(build_model(CFG, 0), assign_blocks(4, 4), seed=0)
    counts = np.zeros(4)
    for _ in range(10_000):
        counts[plan_cycle(st_)[0]] += 1
        st_.cursor = len(st_.plan)
    assert np.all(np.abs(counts - 2500) <= 125)


def test_sequential_freshness_and_conservation():
    model = build_model(CFG, 0)
    st_ = ServerState(model, assign_blocks(4, 4), seed=3)
    order = plan_cycle(st_)
    rng = np.random.default_rng(0)
    for j, c in enumerate(order):
        view = dispatch(st_, c)
        fresh = [b for b in range(4) if view.stamp(b) == st_.round + 1]
        assert len(fresh) == j
        assert set(fresh) == set(order[:j]) == view.updated_set()
        if j == 0:
            assert view.updated_set() == set()
        before = st_.model.named_parameters()
        names = owned_parameter_names(st_.model, [c])
        delta = BlockDelta(c, 0, (c,), {k: rng.standard_normal(before[k].shape) for k in names})
        apply_update(st_, c, delta)
        after = st_.model.named_parameters()
        changed = {k for k in after if after[k].tobytes() != before[k].tobytes()}
        assert changed == set(names)
    assert st_.applied == {b: 1 for b in range(4)}
    finish_round(st_)
    assert st_.round == 1


def test_out_of_order_dispatch_rejected():
    st_ = ServerState(build_model(CFG, 0), assign_blocks(4, 4))
    order = plan_cycle(st_)
    with pytest.raises(ProtocolError, match="out-of-order"):
        dispatch(st_, order[1])
    with pytest.raises(ProtocolError):
        finish_round(st_)


def test_no_compression_view_is_full_size():
    model = build_model(CFG, 0)
    st_ = ServerState(model, assign_blocks(4, 4), compressor=CompressorSpec(0.0, prune_ratio=0.0))
    order = plan_cycle(st_)
    for c in order:
        assert dispatch(st_, c).num_params() == model.num_params()
        apply_update(st_, c, zero_delta(st_, c, [c]))


def test_zero_delta_bitwise_unchanged():
    model = build_model(CFG, 0)
    st_ = ServerState(model, assign_blocks(4, 4), lr=0.7)
    c = plan_cycle(st_)[0]
    dispatch(st_, c)
    apply_update(st_, c, zero_delta(st_, c, [c]))
    a, b = model.named_parameters(), st_.model.named_parameters()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def _grid(x):
    return np.round(x * 4096) / 4096


def test_unit_server_lr_is_replacement():
    model = build_model(CFG, 0)
    model = model.with_parameters({k: _grid(v) for k, v in model.named_parameters().items()})
    st_ = ServerState(model, assign_blocks(4, 4))
    c = plan_cycle(st_)[0]
    dispatch(st_, c)
    params = model.named_parameters()
    names = owned_parameter_names(model, [c])
    rng = np.random.default_rng(1)
    target = {k: _grid(rng.standard_normal(params[k].shape)) for k in names}
    apply_update(st_, c, BlockDelta(c, 0, (c,), {k: target[k] - params[k] for k in names}))
    new = st_.model.named_parameters()
    assert all(new[k].tobytes() == target[k].tobytes() for k in names)


def test_half_server_lr_scalar_check():
    model = build_model(CFG, 0)
    st_ = ServerState(model, assign_blocks(4, 4), lr=0.5)
    c = plan_cycle(st_)[0]
    dispatch(st_, c)
    params = model.named_parameters()
    names = owned_parameter_names(model, [c])
    d = {k: np.full(params[k].shape, 0.25) for k in names}
    apply_update(st_, c, BlockDelta(c, 0, (c,), d))
    new = st_.model.named_parameters()
    for k in names:
        old = float(params[k].ravel()[0])
        assert float(new[k].ravel()[0]) == old + 0.5 * 0.25


def test_shape_mismatch_aborts_round():
    model = build_model(CFG, 0)
    st_ = ServerState(model, assign_blocks(4, 4))
    order = plan_cycle(st_)
    c = order[0]
    dispatch(st_, c)
    bad = zero_delta(st_, c, [c])
    key = next(iter(bad.tensors))
    bad.tensors[key] = np.zeros(bad.tensors[key].shape + (2,))
    with pytest.raises(ProtocolError, match="rejected"):
        apply_update(st_, c, bad)
    assert st_.aborted
    with pytest.raises(ProtocolError, match="aborted"):
        dispatch(st_, order[1])
    a, b = model.named_parameters(), st_.model.named_parameters()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_missing_tensor_rejected():
    st_ = ServerState(build_model(CFG, 0), assign_blocks(4, 4))
    c = plan_cycle(st_)[0]
    dispatch(st_, c)
    d = zero_delta(st_, c, [c])
    d.tensors.pop(next(iter(d.tensors)))
    with pytest.raises(ProtocolError, match="missing"):
        apply_update(st_, c, d)


def test_zero_rounds_returns_initial_model():
    model = build_model(CFG, 0)
    res = run_training(model, [shard(seed=i) for i in range(4)], FederationConfig(rounds=0))
    assert res.model is model and res.records == []


def standalone_sgd(model, data, rounds, epochs, lr):
    names = list(model.named_parameters())
    losses = []
    for _ in range(rounds):
        opt = OptimizerState("sgd", lr=lr)
        for _ in range(epochs):
            loss, trace = forward_loss(model, data)
            upd = optimizer_update(opt, model.named_parameters(), model_gradients(model, trace, names))
            model = model.with_parameters({k: model.named_parameters()[k] + u for k, u in upd.items()})
        losses.append(float(forward_loss(model, data)[0]))
    return model, losses


def test_single_client_single_block_reduces_to_standalone():
    cfg1 = ModelConfig(family="mlp", n_layers=1, width=6, input_dim=5, num_classes=3, dtype="float64")
    model, data = build_model(cfg1, 4), shard(seed=9)
    fc = FederationConfig(rounds=4, local_epochs=2, optimizer=OptimizerState("sgd", lr=0.1))
    res = run_training(model, [data], fc, eval_batch=data)
    _, ref = standalone_sgd(model, data, 4, 2, 0.1)
    np.testing.assert_allclose([r.eval_loss for r in res.records], ref, rtol=1e-6)


def test_single_client_reduces_to_block_coordinate_descent():
    model, data = build_model(CFG, 2), shard(seed=1)
    fc = FederationConfig(rounds=3, local_epochs=1, optimizer=OptimizerState("adam", lr=0.01),
                          strategy="contiguous-groups", sequential_groups=True)
    res = run_training(model, [data], fc, eval_batch=data)
    ref = model
    for _ in range(3):
        for b in range(ref.n_blocks):
            names = owned_parameter_names(ref, [b])
            _, trace = forward_loss(ref, data)
            upd = optimizer_update(OptimizerState("adam", lr=0.01), ref.named_parameters(),
                                   model_gradients(ref, trace, names))
            ref = ref.with_parameters({k: ref.named_parameters()[k] + u for k, u in upd.items()})
    got, want = res.model.named_parameters(), ref.named_parameters()
    for k in want:
        np.testing.assert_allclose(got[k], want[k], rtol=1e-6, atol=1e-12)


def test_fed_full_single_client_is_standalone():
    model, data = build_model(CFG, 0), shard(seed=2)
    fc = FederationConfig(rounds=3, local_epochs=2, optimizer=OptimizerState("sgd", lr=0.1))
    res = run_baseline("fed-full", model, [data], fc, eval_batch=data)
    ref, losses = standalone_sgd(model, data, 3, 2, 0.1)
    np.testing.assert_allclose([r.eval_loss for r in res.records], losses, rtol=1e-6)


def test_fedbavg_identical_shards_average_to_single_delta():
    data = shard(seed=4)
    model = build_model(CFG, 1)
    fc = FederationConfig(rounds=2, optimizer=OptimizerState("adam", lr=0.01))
    many = run_baseline("fedbavg", model, [data] * 8, fc)
    one = run_baseline("fedbavg", model, [data] * 4, fc)
    a, b = many.model.named_parameters(), one.model.named_parameters()
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-6, atol=1e-12)


def test_fed_full_uploads_full_model_bytes():
    model = build_model(CFG, 0)
    shards = [shard(seed=i) for i in range(4)]
    res = run_baseline("fed-full", model, shards, FederationConfig(rounds=1))
    full = transport.model_bytes(model)
    assert [s.upload_bytes for s in res.ledger.sessions] == [full] * 4
    cy = run_training(model, shards, FederationConfig(rounds=1))
    assert max(s.upload_bytes for s in cy.ledger.sessions) < full


def test_centralized_cy_moves_no_bytes():
    res = run_baseline("centralized-cy", build_model(CFG, 0), [shard(seed=i) for i in range(3)],
                       FederationConfig(rounds=2))
    assert res.ledger.totals()["download_bytes"] == 0 and res.ledger.totals()["upload_bytes"] == 0
    assert len(res.ledger.sessions) == 2 * 4


def test_exactly_once_per_cycle_many_clients():
    model = build_model(CFG, 0)
    st_ = ServerState(model, assign_blocks(8, 4))
    for c in plan_cycle(st_):
        dispatch(st_, c)
        apply_update(st_, c, zero_delta(st_, c, list(st_.partition.assignments[c])))
    assert st_.applied == {b: 2 for b in range(4)}


def test_client_failure_skip_and_abort():
    model = build_model(CFG, 0)
    shards = [shard(seed=i) for i in range(4)]
    fail = lambda t, c: c == 2  # noqa: E731
    res = run_training(model, shards, FederationConfig(rounds=2), fail=fail)
    assert all(r.skipped == [2] for r in res.records)
    init, final = model.named_parameters(), res.model.named_parameters()
    assert all(init[k].tobytes() == final[k].tobytes() for k in owned_parameter_names(model, [2]))
    with pytest.raises(RuntimeError):
        run_training(model, shards, FederationConfig(rounds=1, on_client_failure="abort"), fail=fail)


def test_skip_out_of_turn_rejected():
    st_ = ServerState(build_model(CFG, 0), assign_blocks(4, 4))
    order = plan_cycle(st_)
    with pytest.raises(ProtocolError):
        skip(st_, order[2])


def test_rounds_records_and_budget_units():
    res = run_training(build_model(CFG, 0), [shard(seed=i) for i in range(4)], FederationConfig(rounds=3),
                       eval_batch=shard(seed=99))
    assert [r.round for r in res.records] == [0, 1, 2]
    assert all(sorted(r.client_order) == [0, 1, 2, 3] for r in res.records)
    fc = FederationConfig(local_epochs=2)
    assert block_epochs_per_round("fedcybgd", 8, 4, fc) == 16
    assert block_epochs_per_round("fed-full", 8, 4, fc) == 64
    assert block_epochs_per_round("centralized-cy", 8, 4, fc) == 8
    assert block_epochs_per_round("fedbavg", 2, 4, fc) == 8
