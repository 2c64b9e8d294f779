import math

import numpy as np
import pytest

from krls_lab import autodiff as ad
from krls_lab.model import (CheckpointError, CheckpointVersionError, ModelConfig, NotACheckpointError,
                            PolicyModel, TruncatedCheckpointError, VocabHashMismatchError,
                            forward_next_word_dists, load_checkpoint, save_checkpoint, sl_loss)

from conftest import tiny_model


def _ids(rng, V, n):
    return rng.integers(4, V, size=n)


def test_config_rejects_bad_heads():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)


def test_dists_shape_and_normalisation(rng):
    m = tiny_model(vocab_size=20)
    d = forward_next_word_dists(m, _ids(rng, 20, 5), _ids(rng, 20, 7))
    assert d.shape == (7, 20)
    np.testing.assert_allclose(d.sum(-1), 1.0, atol=1e-9)


def test_zero_head_gives_uniform_rows(rng):
    m = tiny_model(vocab_size=15)
    m.params["head.w"].data[:] = 0
    m.params["head.b"].data[:] = 0
    d = forward_next_word_dists(m, _ids(rng, 15, 4), _ids(rng, 15, 6))
    np.testing.assert_allclose(d, 1 / 15, atol=1e-15)


def test_rows_match_truncated_inputs(rng):
    m = tiny_model(vocab_size=16)
    ctx, gold = _ids(rng, 16, 5), _ids(rng, 16, 6)
    full = forward_next_word_dists(m, ctx, gold)
    for t in range(len(gold)):
        # feed only the gold prefix up to t; its last row predicts token t
        part = forward_next_word_dists(m, ctx, np.concatenate([gold[:t], [0]]))
        np.testing.assert_allclose(part[-1], full[t], atol=1e-12, rtol=0)


def test_causality_exact(rng):
    m = tiny_model(vocab_size=16)
    ids = rng.integers(0, 16, size=(1, 10))
    base = m.logits(ids).data
    for t in range(10):
        pert = ids.copy()
        pert[0, t] = (pert[0, t] + 1) % 16
        out = m.logits(pert).data
        assert np.array_equal(out[0, :t], base[0, :t])


def test_forward_deterministic(rng):
    m = tiny_model(vocab_size=16)
    ids = rng.integers(0, 16, size=(2, 9))
    assert np.array_equal(m.logits(ids).data, m.logits(ids).data)


def test_overlength_and_unknown_ids_rejected(rng):
    m = tiny_model(vocab_size=16, max_len=10)
    with pytest.raises(ValueError):
        forward_next_word_dists(m, _ids(rng, 16, 6), _ids(rng, 16, 6))
    with pytest.raises(IndexError):
        m.logits(np.array([[1, 99]]))


def test_sl_loss_uniform_is_log_v():
    m = PolicyModel(ModelConfig(vocab_size=200, d_model=16, n_layers=1, n_heads=2, d_ff=32))
    m.params["head.w"].data[:] = 0
    m.params["head.b"].data[:] = 0
    rng = np.random.default_rng(0)
    loss = sl_loss(m, [_ids(rng, 200, 5)], [_ids(rng, 200, 9)]).item()
    assert loss == pytest.approx(math.log(200), abs=1e-12)
    assert loss == pytest.approx(5.2983, abs=1e-4)


def test_sl_loss_zero_for_certain_model(rng):
    m = tiny_model(vocab_size=12)
    ctx, gold = _ids(rng, 12, 3), np.array([7, 7, 7, 7])
    m.params["head.w"].data[:] = 0
    m.params["head.b"].data[:] = -1e4
    m.params["head.b"].data[7] = 1e4
    assert sl_loss(m, [ctx], [gold]).item() == pytest.approx(0.0, abs=1e-12)


def test_sl_loss_matches_manual_sum(rng):
    m = tiny_model(vocab_size=14)
    ctxs = [_ids(rng, 14, 4), _ids(rng, 14, 6)]
    golds = [_ids(rng, 14, 5), _ids(rng, 14, 3)]
    total = n = 0
    for c, g in zip(ctxs, golds):
        d = forward_next_word_dists(m, c, g)
        total -= sum(math.log(d[t, g[t]]) for t in range(len(g)))
        n += len(g)
    assert sl_loss(m, ctxs, golds).item() == pytest.approx(total / n, abs=1e-12)


def test_full_model_gradcheck(rng):
    m = tiny_model(vocab_size=12, d_model=8, n_layers=2)
    ctxs = [_ids(rng, 12, 3), _ids(rng, 12, 2)]
    golds = [_ids(rng, 12, 4), _ids(rng, 12, 3)]
    err = ad.gradcheck(lambda: sl_loss(m, ctxs, golds), m.parameters(), coords_per_param=6, rng=rng)
    assert err < 1e-4


def test_forward_counter_counts_sequences(rng):
    m = tiny_model(vocab_size=12)
    m.logits(rng.integers(0, 12, size=(3, 5)))
    assert m.forward_count == 3


# ---------------------------------------------------------------- checkpoints

def test_roundtrip_bit_exact(tmp_path, rng):
    m = tiny_model(vocab_size=13, vocab_hash=bytes(range(32)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path, expected_vocab_hash=bytes(range(32)))
    ids = rng.integers(0, 13, size=(2, 7))
    assert np.array_equal(back.logits(ids).data, m.logits(ids).data)
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()
    assert back.config == m.config


def test_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(NotACheckpointError):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_hash_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(vocab_hash=b"\x01" * 32), path)
    with pytest.raises(VocabHashMismatchError):
        load_checkpoint(path, expected_vocab_hash=b"\x02" * 32)


@pytest.mark.parametrize("cut", [5, 100, 33])
def test_truncation(tmp_path, cut):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-cut] if cut != 5 else raw[:cut + 8])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_file_layout(tmp_path):
    m = tiny_model(vocab_hash=b"\x07" * 32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw[:4] == b"KRLS"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(m.params)
    assert raw[-32:] == b"\x07" * 32
    assert (tmp_path / "m.ckpt.json").is_file()
