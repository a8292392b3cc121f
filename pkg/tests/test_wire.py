"""Wire codec framing and round-trip exactness."""

import struct

import numpy as np
import pytest

from splitfed import wire
from splitfed.errors import BadType, LengthMismatch, PayloadTooLarge, Truncated
from splitfed.wire import WireMessage, decode, encode


class TestFraming:
    def test_empty_control_is_13_bytes(self):
        frame = encode(WireMessage(wire.MSG_CONTROL, 0, 0))
        assert len(frame) == 13
        (total,) = struct.unpack(">I", frame[:4])
        assert total == 9

    def test_length_field_covers_rest_of_frame(self):
        msg = WireMessage(wire.MSG_SMASHED, 3, 1, [("acts", np.arange(6.0).reshape(2, 3))])
        frame = encode(msg)
        (total,) = struct.unpack(">I", frame[:4])
        assert total == len(frame) - 4

    def test_header_fields(self):
        frame = encode(WireMessage(wire.MSG_GLOBAL_MODEL, 513, 77))
        assert frame[4] == wire.MSG_GLOBAL_MODEL
        assert struct.unpack(">I", frame[5:9])[0] == 513
        assert struct.unpack(">I", frame[9:13])[0] == 77


class TestRoundTrip:
    def test_random_messages_bit_exact(self):
        rng = np.random.Generator(np.random.PCG64(99))
        for _ in range(300):
            records = []
            for r in range(rng.integers(0, 4)):
                rank = int(rng.integers(0, 4))
                shape = tuple(int(rng.integers(1, 5)) for _ in range(rank))
                name = ("_" if rng.random() < 0.5 else "") + f"r{r}"
                records.append((name, rng.normal(size=shape)))
            msg = WireMessage(
                int(rng.choice([1, 2, 3, 4, 5])),
                int(rng.integers(0, 2**31)),
                int(rng.integers(0, 2**16)),
                records,
            )
            back = decode(encode(msg))
            assert back.msg_type == msg.msg_type
            assert back.round == msg.round
            assert back.client_id == msg.client_id
            assert len(back.records) == len(msg.records)
            for (na, va), (nb, vb) in zip(msg.records, back.records):
                assert na == nb
                assert va.shape == vb.shape
                assert np.array_equal(va, vb)

    def test_scalar_record(self):
        msg = WireMessage(wire.MSG_CONTROL, 0, 0, [("_n", np.asarray(7.0))])
        back = decode(encode(msg))
        assert back.get("_n").shape == ()
        assert back.get("_n") == 7.0


class TestDecodeErrors:
    def test_short_read_truncated(self):
        frame = encode(WireMessage(wire.MSG_SMASHED, 1, 2, [("acts", np.ones(3))]))
        with pytest.raises(Truncated):
            decode(frame[:-4])

    def test_extra_bytes_length_mismatch(self):
        frame = encode(WireMessage(wire.MSG_CONTROL, 1, 2))
        with pytest.raises(LengthMismatch):
            decode(frame + b"x")

    def test_corrupt_type_byte(self):
        frame = bytearray(encode(WireMessage(wire.MSG_CONTROL, 1, 2)))
        frame[4] = 0xEE
        with pytest.raises(BadType):
            decode(bytes(frame))

    def test_record_cut_mid_payload(self):
        frame = bytearray(encode(WireMessage(wire.MSG_SMASHED, 1, 2, [("acts", np.ones(3))])))
        # shrink the declared and actual payload to cut a record in half
        cut = frame[: 13 + 10]
        struct.pack_into(">I", cut, 0, len(cut) - 4)
        with pytest.raises(Truncated):
            decode(bytes(cut))


class TestElementCounting:
    def test_aux_records_not_counted(self):
        msg = WireMessage(
            wire.MSG_SMASHED,
            0,
            0,
            [("acts", np.ones((4, 5))), ("_labels", np.ones(4)), ("_n", np.asarray([4.0]))],
        )
        assert msg.counted_elements() == 20
        assert msg.aux_elements() == 5

    def test_oversize_frame_rejected(self):
        # 2**28 float64 elements > 2**31 - 1 bytes; the size check runs
        # before packing and zeros() stays virtual, so this is cheap
        with pytest.raises(PayloadTooLarge):
            encode(WireMessage(wire.MSG_SMASHED, 0, 0, [("acts", np.zeros(2**28))]))
