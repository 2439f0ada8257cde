"""Fast built-in invariant and oracle checks, run by ``fedcybgd verify``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import transport, wire
from .autodiff import finite_diff_grad
from .compression import NO_COMPRESSION, CompressorSpec, omega_estimate
from .federation import FederationConfig, run_training
from .model import DataBatch, ModelConfig, build_model, forward_loss, model_gradients
from .optim import OptimizerState, powersgd_grad


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _lm_batch(cfg, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, cfg.vocab_size, size=(n, cfg.seq_len))
    y = rng.integers(0, cfg.vocab_size, size=(n, cfg.seq_len))
    return DataBatch(x, y)


def gradient_check(model, batch) -> float:
    """max |fd - backward| / max |fd| over every parameter of ``model``."""
    params = model.named_parameters()
    _, trace = forward_loss(model, batch)
    grads = model_gradients(model, trace, list(params))
    num = den = 0.0
    for name, value in params.items():
        fd = finite_diff_grad(lambda v: forward_loss(model.with_parameters({name: v}), batch)[0], value)
        num = max(num, float(np.max(np.abs(fd - grads[name]))))
        den = max(den, float(np.max(np.abs(fd))))
    return num / den


def check_gradients() -> tuple[bool, str]:
    cfg = ModelConfig(n_layers=2, width=8, n_heads=2, vocab_size=16, seq_len=4, mlp_ratio=2, dtype="float64")
    model = build_model(cfg, 0)
    err = gradient_check(model, _lm_batch(cfg, 2, 1))
    return err < 1e-4, f"max relative error {err:.2e}"


def check_wire(n: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    for i in range(n):
        dt = [np.float16, np.float32, np.float64][i % 3]
        shape = tuple(rng.integers(0, 5, size=rng.integers(0, 4)))
        arr = rng.standard_normal(shape).astype(dt)
        msg = wire.WireMessage(wire.KIND_DELTA, i, i % 7, i % 5, tensors={"t": arr})
        raw = wire.serialize_block(msg)
        back = wire.deserialize_block(raw)
        if back.tensors["t"].tobytes() != arr.tobytes() or back.tensors["t"].shape != arr.shape:
            return False, f"round-trip mismatch on tensor {i}"
    bad = bytearray(raw)
    bad[-1] ^= 0xFF
    try:
        wire.deserialize_block(bytes(bad))
    except wire.WireFormatError:
        return True, f"{n} tensors round-trip; corrupted checksum rejected"
    return False, "corrupted checksum accepted"


def check_omega() -> tuple[bool, str]:
    theta = np.random.default_rng(1).standard_normal(256)
    bias, ratio = omega_estimate(CompressorSpec(0.5, scaled=True), theta, 2000, np.random.default_rng(2))
    rel = bias / np.linalg.norm(theta)
    ok = rel < 0.05 and abs(ratio - 1.0) < 0.1
    return ok, f"bias/||theta|| {rel:.3f}, second-moment ratio {ratio:.3f}"


def check_bcd_reduction() -> tuple[bool, str]:
    cfg = ModelConfig(n_layers=4, width=8, n_heads=2, vocab_size=16, seq_len=4, dtype="float64")
    model = build_model(cfg, 3)
    batch = _lm_batch(cfg, 8, 4)
    lr = 0.1
    fc = FederationConfig(rounds=3, optimizer=OptimizerState("sgd", lr=lr), compressor=NO_COMPRESSION,
                          strategy="contiguous-groups", sequential_groups=True, seed=0)
    fed = run_training(model, [batch], fc).model
    ref = model
    names_by_block = {}
    for name in ref.named_parameters():
        kind, rest = name.split(".", 1)
        b = 0 if kind == "embed" else (cfg.n_layers - 1 if kind == "head" else int(rest.split(".")[0]))
        names_by_block.setdefault(b, []).append(name)
    for _ in range(3):
        for b in range(cfg.n_layers):
            _, trace = forward_loss(ref, batch)
            g = model_gradients(ref, trace, names_by_block[b])
            p = ref.named_parameters()
            ref = ref.with_parameters({k: p[k] - lr * g[k] for k in g})
    a, r = fed.named_parameters(), ref.named_parameters()
    err = max(float(np.max(np.abs(a[k] - r[k])) / (np.max(np.abs(r[k])) + 1e-12)) for k in r)
    return err < 1e-6, f"max relative deviation {err:.2e} over 3 rounds"


def check_powersgd() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    u, v = rng.standard_normal((12, 1)), rng.standard_normal((9, 1))
    _, _, rec1, _ = powersgd_grad(u @ v.T, 1, rng=rng)
    full = rng.standard_normal((12, 9))
    _, _, rec2, _ = powersgd_grad(full, 9, rng=rng)
    e1 = np.max(np.abs(rec1 - u @ v.T))
    e2 = np.max(np.abs(rec2 - full))
    return bool(e1 < 1e-5 and e2 < 1e-5), f"rank-1 error {e1:.1e}, full-rank error {e2:.1e}"


def check_upload_bytes() -> tuple[bool, str]:
    cfg = ModelConfig(family="mlp", n_layers=4, width=8, input_dim=4, num_classes=3)
    model = build_model(cfg, 0)
    rng = np.random.default_rng(0)
    shards = [DataBatch(rng.standard_normal((6, 4)).astype(np.float32), rng.integers(0, 3, 6)) for _ in range(4)]
    fc = FederationConfig(rounds=1, optimizer=OptimizerState("sgd", lr=0.1), strategy="one-to-one")
    ledger = run_training(model, shards, fc).ledger
    full = transport.model_bytes(model)
    ups = [s.upload_bytes for s in ledger.sessions]
    ok = sum(ups) == full
    return ok, f"session uploads {ups} sum to {sum(ups)}; full model {full} bytes"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradients-vs-finite-differences": check_gradients,
    "wire-round-trip": check_wire,
    "omega-compression": check_omega,
    "bcd-reduction": check_bcd_reduction,
    "powersgd-recovery": check_powersgd,
    "upload-bytes": check_upload_bytes,
}


def run_checks(names=None) -> list[CheckResult]:
    out = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t))
    return out
