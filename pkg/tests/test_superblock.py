from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cassandra_sd.container import MODE_MX, MODE_UNARY, encode_tensor
from cassandra_sd.decoder_sim import MAX_BUFFER_BYTES, streaming_decode
from cassandra_sd.errors import FormatError
from cassandra_sd.superblock import (
    BLOCK_BITS,
    BLOCK_BYTES,
    PAD_TAG,
    VIEW_TYPES,
    StreamType,
    Superblock,
    consumption,
    deserialize,
    pack,
    schedule,
    section_lengths,
    serialize,
    unpack,
)

from conftest import bf16_arrays, gaussian_bf16


@st.composite
def containers(draw, max_size=3000):
    size = draw(st.integers(1, max_size))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    if draw(st.booleans()):
        values = gaussian_bf16(rng, size)
    else:
        values = draw(bf16_arrays(size, size)) if size <= 300 else gaussian_bf16(rng, size, 3.0)
    keep = rng.random(size) < draw(st.sampled_from([1.0, 0.7, 0.4]))
    keep[0] = True
    mode = draw(st.sampled_from([MODE_UNARY, MODE_MX]))
    return encode_tensor(values, keep, mode, draw(st.integers(0, 7)))


def oracle_order(t, view):
    """Replay element steps one by one; send block b of a stream once its
    consumed bits pass b * BLOCK_BITS."""
    cum = consumption(t, view)
    sent = {}
    events = []
    for ty in VIEW_TYPES[view]:
        nbytes = t.section(ty.section).nbytes
        if nbytes:
            events.append((ty, 0))
            sent[ty] = (1, -(-nbytes // BLOCK_BYTES))
    for step in range(t.n):
        for ty in VIEW_TYPES[view]:
            if ty not in sent:
                continue
            nxt, total = sent[ty]
            while nxt < total and cum[ty][step] > nxt * BLOCK_BITS:
                events.append((ty, nxt))
                nxt += 1
            sent[ty] = (nxt, total)
    return events


class TestPack:
    @given(containers(), st.sampled_from(["draft", "target"]), st.integers(1, 12))
    def test_round_trip(self, t, view, bps):
        sbs = pack(t, view, bps)
        streams = unpack(sbs, section_lengths(t, view))
        for ty in VIEW_TYPES[view]:
            assert streams.get(ty, b"") == t.section(ty.section).data
        assert [sb.index for sb in sbs] == list(range(len(sbs)))

    @given(containers(max_size=1500), st.sampled_from(["draft", "target"]))
    def test_order_matches_step_replay(self, t, view):
        assert [(ty, b) for _, ty, b in schedule(t, view)] == oracle_order(t, view)

    @given(containers(), st.sampled_from(["draft", "target"]))
    def test_no_stall_and_bounded_buffers(self, t, view):
        res = streaming_decode(pack(t, view), t.header, view)
        assert max(res.max_buffered_bytes.values()) <= MAX_BUFFER_BYTES

    @given(containers(), st.sampled_from(["draft", "target"]))
    def test_density(self, t, view):
        sbs = pack(t, view)
        blocks = [b for sb in sbs for b in sb.blocks]
        real = [b for b in blocks if not b.is_pad]
        stream_bytes = sum(t.section(ty.section).nbytes for ty in VIEW_TYPES[view])
        assert len(real) * BLOCK_BYTES <= stream_bytes + 6 * (BLOCK_BYTES - 1)
        # only the last superblock may carry padding
        for sb in sbs[:-1]:
            assert not any(b.is_pad for b in sb.blocks)

    def test_single_block_per_stream(self, rng):
        v = gaussian_bf16(rng, 50)
        t = encode_tensor(v, rng.random(50) < 0.5, MODE_UNARY, 3)
        sbs = pack(t, "target")
        assert len(sbs) == 1
        tags = [b.tag for b in sbs[0].blocks if not b.is_pad]
        assert tags == [int(ty) for ty in StreamType]

    def test_keep_all_has_no_pruned_blocks(self, rng):
        t = encode_tensor(gaussian_bf16(rng, 5000), np.ones(5000, bool), MODE_UNARY, 0)
        tags = {b.tag for sb in pack(t, "target") for b in sb.blocks}
        assert int(StreamType.PRUNED) not in tags
        assert int(StreamType.MANTISSA_LOW) not in tags

    def test_draft_view_has_no_verification_bytes(self, rng):
        t = encode_tensor(gaussian_bf16(rng, 5000), rng.random(5000) < 0.6, MODE_UNARY, 4)
        sbs = pack(t, "draft")
        tags = {b.tag for sb in sbs for b in sb.blocks if not b.is_pad}
        assert tags <= {int(ty) for ty in VIEW_TYPES["draft"]}
        real = sum(1 for sb in sbs for b in sb.blocks if not b.is_pad)
        spec_bytes = sum(t.section(ty.section).nbytes for ty in VIEW_TYPES["draft"])
        assert real == sum(-(-t.section(ty.section).nbytes // BLOCK_BYTES) for ty in VIEW_TYPES["draft"])
        assert real * BLOCK_BYTES < spec_bytes + 4 * BLOCK_BYTES

    def test_bad_args(self, rng):
        t = encode_tensor(gaussian_bf16(rng, 5), np.ones(5, bool))
        with pytest.raises(ValueError):
            pack(t, "target", 0)
        with pytest.raises(ValueError):
            schedule(t, "both")


class TestUnpack:
    def test_missing_index(self, rng):
        t = encode_tensor(gaussian_bf16(rng, 6000), np.ones(6000, bool))
        sbs = pack(t, "target")
        with pytest.raises(FormatError, match="missing"):
            unpack([sbs[0]] + sbs[2:])

    def test_duplicate_index(self, rng):
        t = encode_tensor(gaussian_bf16(rng, 6000), np.ones(6000, bool))
        sbs = pack(t, "target")
        with pytest.raises(FormatError, match="duplicate"):
            unpack([sbs[0], sbs[1], sbs[1]] + sbs[2:])

    def test_truncated_sequence(self, rng):
        t = encode_tensor(gaussian_bf16(rng, 6000), np.ones(6000, bool))
        sbs = pack(t, "target")
        with pytest.raises(FormatError, match="truncated"):
            unpack(sbs[:-1], section_lengths(t, "target"))

    def test_unknown_tag(self):
        from cassandra_sd.superblock import CacheBlock

        with pytest.raises(FormatError, match="unknown block tag"):
            unpack([Superblock(0, (CacheBlock(9, bytes(BLOCK_BYTES)),))])


class TestSerialize:
    @given(containers(max_size=1500), st.sampled_from(["draft", "target"]))
    def test_round_trip(self, t, view):
        sbs = pack(t, view)
        got_view, back = deserialize(serialize(sbs, view))
        assert got_view == view and back == sbs

    def test_pad_tag(self, rng):
        t = encode_tensor(gaussian_bf16(rng, 10), np.ones(10, bool))
        data = serialize(pack(t, "target"), "target")
        assert data.count(bytes([PAD_TAG])) >= 1

    @pytest.mark.parametrize("cut", [3, 10, -1])
    def test_corrupt(self, rng, cut):
        t = encode_tensor(gaussian_bf16(rng, 10), np.ones(10, bool))
        data = serialize(pack(t, "target"), "target")
        with pytest.raises(FormatError):
            deserialize(data[:cut])
