import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_tinynet.exceptions import BadMagic, CrcMismatch, NameSetMismatch
from ecg_tinynet.model import build, canonical_names, forward, tiny_config, variant
from ecg_tinynet.weights import decode, encode, load_weights, save_weights

CFG = tiny_config(1, 3, width=4, hidden=4)


def _trained_like(seed=0, dtype=np.float32):
    params = build(CFG, seed, dtype)
    rng = np.random.default_rng(seed)
    for st_ in params.bn.values():
        st_.running_mean[:] = rng.normal(size=st_.running_mean.shape)
        st_.running_var[:] = rng.uniform(0.5, 2, size=st_.running_var.shape)
        st_.num_batches_tracked = 17
    return params


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_bitwise(tmp_path, dtype):
    params = _trained_like(1, dtype)
    size = save_weights(params, tmp_path / "w.ecgw")
    assert size == (tmp_path / "w.ecgw").stat().st_size
    back = load_weights(tmp_path / "w.ecgw")
    assert back.config == params.config
    a, b = params.state_dict(), back.state_dict()
    assert set(a) == set(b) == set(canonical_names(CFG))
    for name in a:
        assert a[name].dtype == b[name].dtype and a[name].tobytes() == b[name].tobytes(), name


def test_forward_identical_after_round_trip():
    params = _trained_like(2)
    back = decode(encode(params))
    x = np.random.default_rng(0).normal(size=(3, 1, 32)).astype(np.float32)
    assert forward(params, x).probs.data.tobytes() == forward(back, x).probs.data.tobytes()


_BLOB = encode(_trained_like(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, len(_BLOB) - 1), st.integers(1, 255))
def test_any_single_byte_corruption_rejected(pos, flip):
    bad = bytearray(_BLOB)
    bad[pos] ^= flip
    with pytest.raises(CrcMismatch):
        decode(bytes(bad))


def test_bad_magic_and_truncation():
    with pytest.raises(BadMagic):
        decode(b"ECG")
    with pytest.raises(CrcMismatch):
        decode(_BLOB[:-1])


def test_variant_name_set_mismatch():
    cnn = build(variant(CFG, "cnn"), 0)
    with pytest.raises(NameSetMismatch):
        decode(encode(cnn), expected=variant(CFG, "full"))
    assert decode(encode(cnn), expected=variant(CFG, "cnn")).config == variant(CFG, "cnn")
