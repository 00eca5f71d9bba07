import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from basis_irl import checkpoint as C
from basis_irl import irl as I
from basis_irl.model import BasisModel, IRLModel
from basis_irl.oracle import small_model


class TestRoundTrip:
    def test_bit_exact(self, rng, tmp_path):
        m = small_model(rng)
        path = tmp_path / "m.ckpt"
        C.save_checkpoint(path, m, {"note": "x", "n": 3})
        back, meta = C.load_checkpoint(path)
        assert type(back) is BasisModel and back.spec == m.spec
        np.testing.assert_array_equal(back.params.data, m.params.data)
        assert meta == {"note": "x", "n": 3}
        obs = rng.normal(size=(3, m.spec.obs_dim))
        np.testing.assert_array_equal(back.successor(obs), m.successor(obs))

    def test_irl_kind_preserved(self, rng):
        irl = I.init_from_checkpoint(small_model(rng))
        back, _ = C.decode(C.encode(irl))
        assert isinstance(back, IRLModel)

    def test_save_is_deterministic(self, rng):
        m = small_model(rng)
        assert C.encode(m, {"a": 1}) == C.encode(m.copy(), {"a": 1})

    @given(st.integers(0, 10_000))
    def test_reencode_is_stable(self, seed):
        m = small_model(np.random.default_rng(seed))
        raw = C.encode(m)
        back, _ = C.decode(raw)
        assert C.encode(back) == raw


class TestCorruption:
    @given(st.integers(0, 10_000), st.integers(1, 255))
    def test_any_flipped_byte_is_caught(self, pos, flip):
        raw = bytearray(C.encode(small_model(np.random.default_rng(0))))
        raw[pos % len(raw)] ^= flip
        with pytest.raises(C.CheckpointError):
            C.decode(bytes(raw))

    def test_truncation(self, rng):
        raw = C.encode(small_model(rng))
        with pytest.raises(C.CheckpointError):
            C.decode(raw[:-20])
        with pytest.raises(C.CheckpointError):
            C.decode(raw[:5])

    def test_checksum_error_type(self, rng):
        raw = bytearray(C.encode(small_model(rng)))
        raw[-30] ^= 1
        with pytest.raises(C.ChecksumError):
            C.decode(bytes(raw))

    def _resealed(self, payload: bytes) -> bytes:
        return payload + C._digest(payload)

    def test_version_mismatch(self, rng):
        raw = C.encode(small_model(rng))
        payload = bytearray(raw[: -C._DIGEST])
        payload[len(C.MAGIC)] = 2
        with pytest.raises(C.VersionError):
            C.decode(self._resealed(bytes(payload)))

    def test_block_table_mismatch(self, rng):
        raw = C.encode(small_model(rng))
        payload = raw[: -C._DIGEST].replace(b'"trunk/W0"', b'"trunk/Wx"')
        with pytest.raises(C.CheckpointError, match="block table"):
            C.decode(self._resealed(payload))

    def test_bad_magic(self):
        with pytest.raises(C.CheckpointError, match="magic"):
            C.decode(b"NOTACKPT" + bytes(40))
