"""Descriptor compression codecs."""

from __future__ import annotations

import numpy as np
import pytest

from tokenrank.engine.quantize import (
    MultiVectorStore,
    build_multivector_store,
    int8_encode,
    parse_codec,
    quantize_store,
)
from tokenrank.engine.scoring import late_interaction_score
from tokenrank.errors import ValidationError
from tokenrank.store import TokenSet

from conftest import unit_rows


def store_from(rng, n_images=10, k_tokens=6, d=16):
    sets = [
        TokenSet.from_matrix(f"im{i:03d}", unit_rows(rng, k_tokens, d))
        for i in range(n_images)
    ]
    return build_multivector_store(sets)


class TestCodecParsing:
    def test_known_codecs(self):
        assert parse_codec("f32") == ("f32", None)
        assert parse_codec("fp16") == ("fp16", None)
        assert parse_codec("int8") == ("int8", None)
        assert parse_codec("pq:96") == ("pq", 96)

    def test_unknown_codec_rejected(self):
        with pytest.raises(ValidationError):
            parse_codec("int4")


class TestInt8:
    def test_roundtrip_error_within_half_scale(self, rng):
        tokens = unit_rows(rng, 200, 32)
        codes, scales = int8_encode(tokens)
        decoded = codes.astype(np.float32) * scales[:, None]
        err = np.abs(decoded - tokens)
        assert np.all(err <= scales[:, None] / 2 + 1e-9)

    def test_bytes_per_token_matches_layout(self, rng):
        store = store_from(rng, d=384)
        q = quantize_store(store, "int8")
        assert q.bytes_per_token == 388  # 384 code bytes + 4-byte scale

    def test_zero_vector_is_safe(self):
        tokens = np.zeros((1, 8), dtype=np.float32)
        codes, scales = int8_encode(tokens)
        assert scales[0] == 0
        assert np.all(codes == 0)

    def test_li_score_delta_small_on_unit_tokens(self, rng):
        store = store_from(rng, n_images=30, k_tokens=8, d=48)
        q8 = quantize_store(store, "int8")
        for i in range(5):
            tq = unit_rows(rng, 8, 48)
            a = late_interaction_score(tq, store.decode_image(i))
            b = late_interaction_score(tq, q8.decode_image(i))
            assert abs(a - b) <= 0.01


class TestFp16:
    def test_round_to_nearest_even(self):
        x = np.array([[1.0009765625]], dtype=np.float32)  # exactly between f16 steps
        store = MultiVectorStore(
            codec="f32", image_ids=["a"], offsets=np.array([0, 1], dtype=np.int64),
            dim=1, tokens_f32=x,
        )
        q = quantize_store(store, "fp16")
        assert q.tokens_f16[0, 0] == np.float16(1.0009765625)

    def test_decode_error_bounded(self, rng):
        store = store_from(rng, d=32)
        q = quantize_store(store, "fp16")
        flat, _ = store.decode_all()
        flat16, _ = q.decode_all()
        assert np.max(np.abs(flat - flat16)) < 1e-3


class TestPq:
    def test_dim_not_divisible_rejected(self, rng):
        store = store_from(rng, d=30)
        with pytest.raises(ValidationError, match="divisible"):
            quantize_store(store, "pq:7")

    def test_insufficient_training_rejected(self, rng):
        store = store_from(rng, n_images=4, k_tokens=4, d=16)
        with pytest.raises(ValidationError, match="training sample"):
            quantize_store(store, "pq:4")

    def test_lossless_when_support_fits_codebook(self, rng):
        # every 1-wide sub-vector takes one of <=256 distinct values
        values = np.linspace(-1, 1, 11, dtype=np.float32)
        tokens = values[rng.integers(0, 11, size=(300, 8))]
        store = MultiVectorStore(
            codec="f32", image_ids=[f"im{i}" for i in range(10)],
            offsets=np.arange(0, 301, 30, dtype=np.int64), dim=8,
            tokens_f32=tokens,
        )
        q = quantize_store(store, "pq:8", rng_seed=0)
        flat, _ = store.decode_all()
        qflat, _ = q.decode_all()
        np.testing.assert_array_equal(qflat, flat)

    def test_bytes_per_token(self, rng):
        store = store_from(rng, n_images=48, k_tokens=6, d=16)
        q = quantize_store(store, "pq:4")
        assert q.bytes_per_token == 4
        assert q.pq_codes.shape == (store.total_tokens, 4)

    def test_deterministic_given_seed(self, rng):
        store = store_from(rng, n_images=48, k_tokens=6, d=16)
        a = quantize_store(store, "pq:4", rng_seed=5)
        b = quantize_store(store, "pq:4", rng_seed=5)
        assert a.pq_codes.tobytes() == b.pq_codes.tobytes()
        assert a.pq_codebooks.tobytes() == b.pq_codebooks.tobytes()


class TestStorePersistence:
    @pytest.mark.parametrize("codec", ["f32", "fp16", "int8", "pq:4"])
    def test_save_load_round_trip(self, rng, tmp_path, codec):
        store = store_from(rng, n_images=48, k_tokens=6, d=16)
        q = quantize_store(store, codec)
        path = tmp_path / "store.mvq"
        q.save(path)
        back = MultiVectorStore.load(path)
        assert back.codec == q.codec
        assert back.image_ids == q.image_ids
        flat_a, off_a = q.decode_all()
        flat_b, off_b = back.decode_all()
        assert off_a.tolist() == off_b.tolist()
        assert flat_a.tobytes() == flat_b.tobytes()

    def test_decode_rows_subset(self, rng):
        store = store_from(rng, n_images=12, k_tokens=5, d=8)
        flat, offsets = store.decode_rows([3, 7])
        assert offsets.tolist() == [0, 5, 10]
        np.testing.assert_array_equal(flat[:5], store.decode_image(3))
        np.testing.assert_array_equal(flat[5:], store.decode_image(7))
