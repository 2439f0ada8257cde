import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedcybgd import transport, wire
from fedcybgd.costs import (CostModelConfig, CostReport, ModelShape, emit_cost_report,
                            estimate_flops, estimate_memory, expected_backward_ratio)
from fedcybgd.federation import FederationConfig, run_baseline, run_training
from fedcybgd.model import DataBatch, ModelConfig, build_model


def roundtrip(msg):
    data = wire.serialize_block(msg)
    back = wire.deserialize_block(data)
    return data, back


def same_tensors(a, b):
    return list(a) == list(b) and all(
        a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


def test_scalar_tensor_roundtrip():
    msg = wire.WireMessage(wire.KIND_DELTA, 3, 1, 2, tensors={"s": np.array(1.25, dtype=np.float32)})
    data, back = roundtrip(msg)
    assert back.tensors["s"].shape == () and same_tensors(msg.tensors, back.tensors)
    assert (back.kind, back.round, back.client, back.block) == (wire.KIND_DELTA, 3, 1, 2)


def test_fp16_payload_length():
    arr = np.arange(37, dtype=np.float16).reshape(37)
    msg = wire.WireMessage(wire.KIND_VIEW, tensors={"w": arr})
    fixed = wire.HEADER_SIZE + wire.CHECKSUM_SIZE + wire.tensor_record_overhead("w", 1)
    assert fixed == 30 + 4 + (2 + 1 + 2 + 4)
    assert len(wire.serialize_block(msg)) == 2 * 37 + fixed


def test_corrupted_bytes_rejected():
    msg = wire.WireMessage(wire.KIND_DELTA, tensors={"w": np.ones((3, 2))})
    data = bytearray(wire.serialize_block(msg))
    for pos, reason in ((len(data) - 1, "checksum"), (len(data) - 8, "checksum"), (0, "magic"), (4, "version")):
        bad = bytearray(data)
        bad[pos] ^= 0xFF
        with pytest.raises(wire.WireFormatError, match=reason) as exc:
            wire.deserialize_block(bytes(bad))
        assert exc.value.offset >= 0
    with pytest.raises(wire.WireFormatError, match="truncated|checksum"):
        wire.deserialize_block(bytes(data[:-6]))
    with pytest.raises(wire.WireFormatError, match="trailing"):
        wire.deserialize_block(bytes(data) + b"\0")


def test_thousand_random_tensors_roundtrip(rng):
    dtypes = [np.float16, np.float32, np.float64]
    tensors = {}
    for i in range(1000):
        shape = tuple(int(s) for s in rng.integers(0, 4, size=rng.integers(0, 4)))
        tensors[f"t{i}"] = rng.standard_normal(shape).astype(dtypes[i % 3])
    msg = wire.WireMessage(wire.KIND_CHECKPOINT, tensors=tensors)
    _, back = roundtrip(msg)
    assert same_tensors(tensors, back.tensors)


@settings(max_examples=150)
@given(arr=hnp.arrays(st.sampled_from([np.float16, np.float32, np.float64]),
                      hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
                      elements={"allow_nan": True, "allow_infinity": True}),
       rnd=st.integers(0, 2**32 - 1), client=st.integers(-1, 2**31 - 1), block=st.integers(-2, 1000))
def test_wire_roundtrip_property(arr, rnd, client, block):
    msg = wire.WireMessage(wire.KIND_VIEW, rnd, client, block, 0.5, wire.FLAG_PRESENT, {"x": arr})
    _, back = roundtrip(msg)
    assert same_tensors(msg.tensors, back.tensors)
    assert (back.round, back.client, back.block, back.scale) == (rnd, client, block, 0.5)


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(ModelConfig(n_layers=2, width=8, vocab_size=64, seq_len=4), 3)
    transport.save_checkpoint(model, tmp_path / "ck")
    assert (tmp_path / "ck" / "manifest.json").exists() and (tmp_path / "ck" / "blocks.bin").exists()
    back = transport.load_checkpoint(tmp_path / "ck")
    assert back.config == model.config
    assert same_tensors(model.named_parameters(), back.named_parameters())


def test_ledger_totals_equal_sum():
    lg = transport.CostLedger("x")
    transport.account_session(b"abc", 5, lg, round=0, client=1, forward_flops=2.0)
    transport.account_session(10, b"12", lg, round=1, client=0, backward_flops=3.0, peak_memory_bytes=7)
    tot = lg.totals()
    assert tot["download_bytes"] == 13 and tot["upload_bytes"] == 7 and tot["sessions"] == 2
    assert tot["forward_flops"] == 2.0 and tot["backward_flops"] == 3.0 and tot["peak_memory_bytes"] == 7
    assert lg.per_round()[1]["download_bytes"] == 10
    assert transport.CostLedger.from_dict(lg.to_dict()) == lg


def test_upload_per_session_is_quarter_of_blocks():
    cfg = ModelConfig(family="mlp", n_layers=4, width=8, input_dim=5, num_classes=3)
    model = build_model(cfg, 0)
    rng = np.random.default_rng(0)
    shards = [DataBatch(rng.standard_normal((6, 5)).astype(np.float32), rng.integers(0, 3, 6)) for _ in range(4)]
    res = run_training(model, shards, FederationConfig(rounds=1))
    ups = [s.upload_bytes for s in res.ledger.sessions]
    assert sum(ups) == transport.model_bytes(model)
    assert np.mean(ups) == transport.model_bytes(model) / 4
    # Middle blocks carry no embedding or head, so their uploads are identical.
    mids = sorted(ups)[:2]
    assert mids[0] == mids[1] <= transport.model_bytes(model) / 4 + wire.HEADER_SIZE


SHAPE = ModelShape((1000,) * 8, 50, 60, 16)


def test_optimizer_ratio_exactly_one_over_b():
    for b in (1, 2, 4, 8, 32):
        shape = ModelShape((1234,) * b, 0, 0, 16)
        full = estimate_memory(shape, "fed-full")["optimizer"]
        cy = estimate_memory(shape, "fedcybgd", responsible=(b // 2,))["optimizer"]
        assert cy / full == 1 / b


def test_zero_layer_model_is_params_only():
    shape = ModelShape((), 100, 0, 8)
    cfg = CostModelConfig(optimizer_moments=0)
    mem = estimate_memory(shape, "fedcybgd", cfg, responsible=())
    assert mem["total"] == mem["params"] == 100 * cfg.bytes_per_param


def test_memory_monotone_in_batch_and_trainable():
    totals = [estimate_memory(SHAPE, "fedcybgd", CostModelConfig(batch_size=b))["total"] for b in (1, 2, 4, 8)]
    assert totals == sorted(totals) and len(set(totals)) == 4
    by_set = [estimate_memory(SHAPE, "fedcybgd", responsible=r)["total"] for r in ((1,), (1, 2), (1, 2, 3))]
    assert by_set == sorted(by_set)
    assert by_set[-1] < estimate_memory(SHAPE, "fed-full")["total"]


def test_last_block_backward_near_one_over_b():
    cfg = CostModelConfig(checkpointing=False)
    full = estimate_flops(SHAPE, 100, "fed-full", cfg=cfg)[1]
    last = estimate_flops(SHAPE, 100, "fedcybgd", (7,), cfg)[1]
    ratio = last / full
    assert 1 / 8 <= ratio <= 1 / 8 + 0.02


def test_forward_identical_without_drop():
    for cfg in (CostModelConfig(), CostModelConfig(checkpointing=False)):
        assert estimate_flops(SHAPE, 64, "fed-full", cfg=cfg)[0] == estimate_flops(SHAPE, 64, "fedcybgd", (3,), cfg)[0]
        fwd, bwd = estimate_flops(SHAPE, 64, "fed-full", cfg=cfg)
        assert fwd == 2 * SHAPE.total_params * 64
        assert bwd >= 2 * fwd * 0.95


def test_expected_backward_ratio_regimes():
    big = ModelShape((1000,) * 64, 0, 0, 16)
    assert expected_backward_ratio(big, CostModelConfig()) == pytest.approx(2 / 3, abs=0.01)
    # Truncated sweep from block j: (B - j) activation-grad blocks plus one param-grad block, over 2B.
    b = 64
    exact = np.mean([(b - j + 1) / (2 * b) for j in range(b)])
    assert expected_backward_ratio(big, CostModelConfig(checkpointing=False)) == pytest.approx(exact, rel=1e-12)


def test_llama_shape_count():
    assert ModelShape.llama2_7b().total_params == 6_738_415_616


def _toy_ledgers():
    cfg = ModelConfig(family="mlp", n_layers=4, width=8, input_dim=5, num_classes=3)
    model = build_model(cfg, 0)
    rng = np.random.default_rng(1)
    shards = [DataBatch(rng.standard_normal((6, 5)).astype(np.float32), rng.integers(0, 3, 6)) for _ in range(4)]
    fc = FederationConfig(rounds=1)
    return {"fedcybgd": run_training(model, shards, fc).ledger,
            "fed-full": run_baseline("fed-full", model, shards, fc).ledger}


def test_report_rows_and_roundtrip():
    ledgers = _toy_ledgers()
    single = emit_cost_report({"fedcybgd": ledgers["fedcybgd"]})
    assert list(single.rows) == ["fedcybgd"] and len(single.to_text().splitlines()) == 3
    both = emit_cost_report(ledgers)
    assert both.rows["fedcybgd"]["upload"] < both.rows["fed-full"]["upload"]
    assert CostReport.from_json(both.to_json()) == both
    with pytest.raises(ValueError):
        emit_cost_report({})
