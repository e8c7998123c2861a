import numpy as np
import pytest

from rlrc.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from rlrc.model import ModelConfig, forward, init_model, init_value_head
from rlrc.quant import quantize_model


def tiny_model(seed=0, **kw):
    base = dict(d_model=16, n_layers=2, n_heads_base=2, d_ff_base=24,
                observation_vocab=12, action_vocab=6, max_seq_len=16, seed=seed)
    base.update(kw)
    return init_model(ModelConfig(**base))


def test_roundtrip_bit_identical(tmp_path):
    m = tiny_model(seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, meta={"stage": "dense", "seed": 1})
    loaded = load_checkpoint(path)
    assert loaded.meta == {"stage": "dense", "seed": 1}
    for (name, a), (_, b) in zip(m.named_params(), loaded.model.named_params()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
    ctx = np.array([1, 2, 3, m.config.bos_action_id])
    la, _ = forward(m, ctx)
    lb, _ = forward(loaded.model, ctx)
    np.testing.assert_array_equal(la.data, lb.data)


def test_pruned_widths_restored(tmp_path):
    cfg = ModelConfig(d_model=16, n_layers=3, n_heads_base=2, d_ff_base=24,
                      observation_vocab=12, action_vocab=6, max_seq_len=16,
                      n_heads=[2, 1, 2], d_ff=[24, 7, 24])
    m = init_model(cfg, seed=0)
    path = tmp_path / "p.ckpt"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    assert loaded.model.config.n_heads == [2, 1, 2]
    assert loaded.model.config.d_ff == [24, 7, 24]
    assert loaded.model.layers[1].wup.data.shape == (16, 7)


def test_value_head_roundtrip(tmp_path):
    m = tiny_model()
    vh = init_value_head(m.config.d_model, seed=3)
    path = tmp_path / "v.ckpt"
    save_checkpoint(m, path, value_head=vh, meta={"stage": "rl"})
    loaded = load_checkpoint(path)
    assert loaded.value_head is not None
    for (n, a), (_, b) in zip(vh.named_params(), loaded.value_head.named_params()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=n)


def test_quantized_roundtrip(tmp_path):
    m = tiny_model(seed=2)
    qm = quantize_model(m, bits=4, block_size=16)
    path = tmp_path / "q.ckpt"
    save_checkpoint(qm, path, meta={"stage": "quant"})
    loaded = load_checkpoint(path)
    ctx = np.array([[1, 2, 3, m.config.bos_action_id]])
    np.testing.assert_array_equal(qm.logits_last(ctx), loaded.model.logits_last(ctx))
    assert loaded.model.bits == 4
    for (n, a), (_, b) in zip(qm.named_quant_tensors(), loaded.model.named_quant_tensors()):
        np.testing.assert_array_equal(a.packed, b.packed, err_msg=n)
        np.testing.assert_array_equal(a.scales, b.scales, err_msg=n)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch_rejected(tmp_path):
    m = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    m = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_corrupt_header_rejected(tmp_path):
    m = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = bytearray(path.read_bytes())
    raw[12] = ord("X")  # clobber the JSON header start
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
