import numpy as np
import pytest

from mssl.model import ROLE_LEARNABLE, ROLE_STATISTIC
from mssl.momentum import (init_momentum, ema_update, Checkpoint,
                           save_checkpoint, load_checkpoint, MAGIC)
from mssl.errors import IncompatibleArchitecture, CorruptCheckpoint, \
    VersionMismatch, IoError

from conftest import random_param_map


# ---------------------------------------------------------------- EMA

def test_init_is_deep_copy():
    src = random_param_map(0)
    tracker = init_momentum(src, 0.95)
    assert tracker.alpha == 0.95
    assert tracker.updates == 0
    assert tracker.shadow.content_digest() == src.content_digest()
    src.entries[0].array[:] = 123.0
    assert tracker.shadow.content_digest() != src.content_digest()


def test_ema_direct_substitution():
    src = random_param_map(1)
    tracker = init_momentum(src, 0.95)
    for e in tracker.shadow.entries:
        e.array = np.ones_like(e.array)
    zeros = src.copy()
    for e in zeros.entries:
        e.array = np.zeros_like(e.array)
    ema_update(tracker, zeros)
    for e in tracker.shadow.entries:
        if e.role == ROLE_LEARNABLE:
            assert np.allclose(e.array, 0.95)  # 0.95*1 + 0.05*0
        else:
            assert np.all(e.array == 0.0)      # statistics copied from source
    assert tracker.updates == 1


def test_alpha_one_freezes_everything():
    src = random_param_map(2)
    tracker = init_momentum(src, 1.0)
    before = tracker.shadow.content_digest()
    other = random_param_map(3)
    other.arch_digest = src.arch_digest
    ema_update(tracker, other)
    assert tracker.shadow.content_digest() == before
    assert tracker.updates == 1


def test_alpha_zero_tracks_source():
    src = random_param_map(4)
    tracker = init_momentum(src, 0.0)
    other = random_param_map(5)
    other.arch_digest = src.arch_digest
    ema_update(tracker, other)
    assert tracker.shadow.content_digest() == other.content_digest()


def test_ema_incompatible_source():
    tracker = init_momentum(random_param_map(0), 0.9)
    other = random_param_map(0, shapes=((8, 4), (4,), (16,), (), (3,)))
    with pytest.raises(IncompatibleArchitecture):
        ema_update(tracker, other)


def test_ema_preserves_names_and_shapes():
    src = random_param_map(6)
    tracker = init_momentum(src, 0.5)
    ema_update(tracker, random_param_map(7))
    assert tracker.shadow.names() == src.names()
    for e1, e2 in zip(tracker.shadow.entries, src.entries):
        assert e1.array.shape == e2.array.shape
        assert e1.array.dtype == np.float32


def test_shadow_drift_identity():
    # ||shadow_t - shadow_{t-1}|| = (1-alpha) * ||source - shadow_{t-1}||
    src = random_param_map(8)
    tracker = init_momentum(src, 0.9)
    rng = np.random.default_rng(9)
    for _ in range(20):
        step = src.copy()
        for e in step.entries:
            e.array = rng.normal(size=e.array.shape).astype(np.float32)
        prev = tracker.shadow.copy()
        ema_update(tracker, step)
        for before, after, s in zip(prev.entries, tracker.shadow.entries, step.entries):
            if before.role != ROLE_LEARNABLE:
                continue
            drift = np.linalg.norm(after.array - before.array)
            gap = np.linalg.norm(s.array - before.array)
            assert drift == pytest.approx(0.1 * gap, rel=1e-5)


def test_closed_form_thousand_updates():
    src = random_param_map(10)
    tracker = init_momentum(src, 0.95)
    const = src.copy()
    rng = np.random.default_rng(11)
    for e in const.entries:
        e.array = rng.normal(size=e.array.shape).astype(np.float32)
    k = 1000
    for _ in range(k):
        ema_update(tracker, const)
    assert tracker.updates == k
    decay = 0.95 ** k
    for s0, sh, c in zip(src.entries, tracker.shadow.entries, const.entries):
        if s0.role == ROLE_LEARNABLE:
            expect = decay * s0.array.astype(np.float64) \
                + (1 - decay) * c.array.astype(np.float64)
        else:
            expect = c.array.astype(np.float64)
        err = np.linalg.norm(sh.array - expect) / max(np.linalg.norm(expect), 1e-12)
        assert err <= 1e-6


# ---------------------------------------------------------------- checkpoints

def _ckpt(seed=0):
    return Checkpoint(params=random_param_map(seed),
                      meta={"role": "momentum_teacher", "epoch": 3,
                            "config_digest": "deadbeef", "val_mDice": 0.77,
                            "alpha": 0.95})


def test_checkpoint_round_trip(tmp_path):
    ckpt = _ckpt()
    path = str(tmp_path / "c.mssl")
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.meta == ckpt.meta
    assert back.params.arch_digest == ckpt.params.arch_digest
    assert back.params.content_digest() == ckpt.params.content_digest()
    for e1, e2 in zip(ckpt.params.entries, back.params.entries):
        assert e1.name == e2.name and e1.role == e2.role
        assert e1.array.shape == e2.array.shape
        assert np.array_equal(e1.array, e2.array)


def test_checkpoint_magic(tmp_path):
    assert MAGIC == b"MSSL1"
    path = str(tmp_path / "c.mssl")
    save_checkpoint(_ckpt(), path)
    assert open(path, "rb").read(5) == b"MSSL1"


def test_corrupted_byte_detected(tmp_path):
    path = str(tmp_path / "c.mssl")
    save_checkpoint(_ckpt(), path)
    blob = bytearray(open(path, "rb").read())
    blob[len(blob) // 2] ^= 0xFF
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_truncated_and_bad_magic(tmp_path):
    path = str(tmp_path / "c.mssl")
    save_checkpoint(_ckpt(), path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:10])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    open(path, "wb").write(b"XXXX" + blob[4:])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    with pytest.raises(IoError):
        load_checkpoint(str(tmp_path / "missing.mssl"))


def test_version_mismatch(tmp_path):
    import hashlib
    path = str(tmp_path / "c.mssl")
    save_checkpoint(_ckpt(), path)
    blob = bytearray(open(path, "rb").read())
    body = blob[:-32]
    body[4:5] = b"2"  # MSSL2
    digest = hashlib.sha256(bytes(body)).digest()
    open(path, "wb").write(bytes(body) + digest)
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_checkpoint_into_wrong_architecture(tmp_path):
    from mssl.model import ArchSpec, build_model, named_parameters_map, load_parameters
    model = build_model(ArchSpec(family="tiny_unet", levels=2, base_width=4), seed=0)
    wider = named_parameters_map(
        build_model(ArchSpec(family="tiny_unet", levels=2, base_width=8), seed=0))
    path = str(tmp_path / "w.mssl")
    save_checkpoint(Checkpoint(params=wider, meta={"role": "teacher"}), path)
    with pytest.raises(IncompatibleArchitecture):
        load_parameters(model, load_checkpoint(path).params)
