import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from mcgen.checkpoint import (
    KIND_F32,
    KIND_TEXT,
    decode_container,
    decode_tensor,
    encode_container,
    encode_tensor,
    load,
    load_model,
    save_model,
)
from mcgen.codebook import one_hot
from mcgen.data import SyntheticSpec, make_synthetic
from mcgen.errors import FormatError
from mcgen.models import McGan, McVae
from mcgen.rng import Stream
from mcgen.training import TrainConfig, Trainer


def test_tensor_payload_by_hand():
    kind, payload = encode_tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert kind == KIND_F32
    assert payload == bytes.fromhex(
        "02000000"  # rank
        "0100000000000000"  # dim 0
        "0300000000000000"  # dim 1
        "0000803f" "00000040" "00004040"  # 1.0, 2.0, 3.0
    )


def test_container_by_hand():
    blob = encode_container([("a", KIND_TEXT, b"hi")])
    entry = struct.pack("<H", 1) + b"a" + struct.pack("<BQQ", 3, 32, 2)
    assert blob == b"MCGM" + struct.pack("<II", 1, 1) + entry + b"hi"
    assert decode_container(blob) == {"a": (KIND_TEXT, b"hi")}


@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_tensor_round_trip(arr):
    back = decode_tensor(*reversed(encode_tensor(arr)))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_payload_errors():
    _, payload = encode_tensor(np.zeros((2, 2), dtype=np.float32))
    for bad in (payload[:2], payload[:10], payload[:-1]):
        with pytest.raises(FormatError):
            decode_tensor(bad, KIND_F32)
    with pytest.raises(FormatError):
        encode_tensor(np.zeros(2, dtype=np.int32))


def _blob():
    return encode_container([("w", *encode_tensor(np.ones(3))), ("note", KIND_TEXT, b"x")])


def test_bad_magic():
    blob = bytearray(_blob())
    blob[0] ^= 0xFF
    with pytest.raises(FormatError, match="magic"):
        decode_container(bytes(blob))


def test_unknown_version():
    blob = bytearray(_blob())
    blob[4] = 9
    with pytest.raises(FormatError, match="version"):
        decode_container(bytes(blob))


def test_manifest_overflow():
    blob = _blob()
    with pytest.raises(FormatError, match="overflow"):
        decode_container(blob[:-1])
    too_many = bytearray(blob)
    too_many[8] = 200
    with pytest.raises(FormatError, match="overflow|overlaps"):
        decode_container(bytes(too_many))


def test_duplicate_section():
    with pytest.raises(FormatError, match="duplicate"):
        encode_container([("a", KIND_TEXT, b""), ("a", KIND_TEXT, b"")])
    blob = encode_container([("a", KIND_TEXT, b"1"), ("b", KIND_TEXT, b"2")])
    patched = blob.replace(b"\x01\x00b", b"\x01\x00a", 1)
    with pytest.raises(FormatError, match="duplicate"):
        decode_container(patched)


def test_overlapping_sections():
    blob = bytearray(encode_container([("a", KIND_TEXT, b"12"), ("b", KIND_TEXT, b"34")]))
    # point b's offset at a's payload
    pos = blob.index(b"\x01\x00b") + 3
    off_a = struct.unpack_from("<Q", blob, blob.index(b"\x01\x00a") + 4)[0]
    struct.pack_into("<BQQ", blob, pos, KIND_TEXT, off_a + 1, 2)
    with pytest.raises(FormatError, match="overlaps"):
        decode_container(bytes(blob))


def test_unknown_kind():
    blob = bytearray(_blob())
    blob[12 + 2 + 1] = 7
    with pytest.raises(FormatError, match="kind"):
        decode_container(bytes(blob))


# -- models and trainers ----------------------------------------------------------

def _assert_same_model(a, b):
    assert type(a) is type(b) and a.config == b.config
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    assert pa.keys() == pb.keys()
    for k in pa:
        assert pa[k].data.dtype == pb[k].data.dtype and pa[k].data.tobytes() == pb[k].data.tobytes(), k
    ba, bb = dict(a.named_buffers()), dict(b.named_buffers())
    assert ba.keys() == bb.keys()
    for k in ba:
        assert np.asarray(ba[k]).tobytes() == np.asarray(bb[k]).tobytes(), k
    assert a.codebooks() == b.codebooks()


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_fresh_mcvae_round_trip(tmp_path, dtype):
    m = McVae(8, seed=3, dtype=dtype)
    save_model(m, tmp_path / "m.mcgm")
    _assert_same_model(m, load_model(tmp_path / "m.mcgm"))


def test_trained_state_round_trip(tmp_path):
    m = McGan(3, size=8, g_widths=(8, 4), d_widths=(4, 8), seed=1, dtype="f64")
    rng = np.random.default_rng(0)
    for p in m.parameters():
        p.data[...] = rng.standard_normal(p.data.shape)
    m.losses(rng.uniform(0, 1, (4, 1, 8, 8)), one_hot([0, 1, 2, 0], 3), Stream(0))
    save_model(m, tmp_path / "g.mcgm")
    back = load_model(tmp_path / "g.mcgm")
    _assert_same_model(m, back)
    h = one_hot([2, 1], 3)
    assert np.array_equal(m.generate(h, Stream(5)), back.generate(h, Stream(5)))


@pytest.fixture(scope="module")
def tiny():
    return make_synthetic(SyntheticSpec(num_modes=3, samples_per_mode=12, image_size=8, seed=4))


@pytest.mark.parametrize("model_id", ["mcvae", "mcgan"])
def test_resume_matches_uninterrupted_training(tiny, tmp_path, model_id):
    args = {"mcvae": {"latent_dim": 4, "widths": (4, 6, 8)}, "mcgan": {"latent_dim": 4, "g_widths": (8, 4), "d_widths": (4, 8)}}[model_id]
    cfg = TrainConfig.for_model(model_id, epochs=2, batch_size=8, dtype="f64", seed=2, model_args=args)
    Trainer(cfg, tiny).fit(2, checkpoint_path=tmp_path / "straight.mcgm")
    Trainer(cfg, tiny).fit(1, checkpoint_path=tmp_path / "half.mcgm")
    Trainer.resume(tmp_path / "half.mcgm", tiny).fit(2, checkpoint_path=tmp_path / "half.mcgm")
    assert (tmp_path / "straight.mcgm").read_bytes() == (tmp_path / "half.mcgm").read_bytes()
    ckpt = load(tmp_path / "half.mcgm")
    assert ckpt.epoch == 2 and len(ckpt.curve) == 2 and ckpt.config == cfg
    assert all(opt["t"] > 0 for opt in ckpt.optimizers.values())


def test_model_only_checkpoint_cannot_resume(tiny, tmp_path):
    save_model(McVae(3, size=8, widths=(4, 6, 8), latent_dim=4), tmp_path / "m.mcgm")
    with pytest.raises(FormatError):
        Trainer.resume(tmp_path / "m.mcgm", tiny)


def test_save_is_atomic(tmp_path):
    path = tmp_path / "m.mcgm"
    save_model(McVae(2, size=8, widths=(4, 6, 8), latent_dim=4), path)
    assert [p.name for p in tmp_path.iterdir()] == ["m.mcgm"]
