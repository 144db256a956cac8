"""Codebook training, VLAD encoding, and PCA whitening."""

from __future__ import annotations

import numpy as np
import pytest

from tokenrank.clustering import kmeans
from tokenrank.codebooks import (
    Codebook,
    PcaModel,
    fit_pca,
    sample_tokens,
    train_codebook,
    vlad_encode,
)
from tokenrank.errors import (
    DegenerateDescriptorWarning,
    ValidationError,
)
from tokenrank.store import TokenSet

from conftest import unit_rows


def token_set(tokens, image_id="img"):
    return TokenSet.from_matrix(image_id, np.asarray(tokens, dtype=np.float32))


class TestTrainCodebook:
    def test_k_distinct_points_recovered(self, rng):
        sample = unit_rows(rng, 5, 8)
        cb = train_codebook(sample, 5, rng_seed=1)
        got = {tuple(np.round(c, 5)) for c in cb.centroids}
        want = {tuple(np.round(c, 5)) for c in sample}
        assert got == want

    def test_sse_non_increasing(self, rng):
        sample = rng.standard_normal((300, 8))
        _, _, history = kmeans(sample, 10, 25, np.random.default_rng(3))
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_seed_controls_result(self, rng):
        sample = rng.standard_normal((200, 6)).astype(np.float32)
        a = train_codebook(sample, 8, rng_seed=1)
        b = train_codebook(sample, 8, rng_seed=1)
        c = train_codebook(sample, 8, rng_seed=2)
        assert a.centroids.tobytes() == b.centroids.tobytes()
        assert a.centroids.tobytes() != c.centroids.tobytes()

    def test_sample_smaller_than_k_rejected(self, rng):
        with pytest.raises(ValidationError):
            train_codebook(unit_rows(rng, 3, 4), 4)

    def test_save_load_round_trip(self, rng, tmp_path):
        cb = train_codebook(unit_rows(rng, 50, 8), 4, rng_seed=0)
        cb.save(tmp_path / "cb.bin")
        back = Codebook.load(tmp_path / "cb.bin")
        assert back.centroids.tobytes() == cb.centroids.tobytes()
        assert back.meta["rng_seed"] == 0

    def test_sample_tokens_budget(self, rng):
        records = [token_set(unit_rows(rng, 20, 6), f"im{i}") for i in range(10)]
        sample = sample_tokens(records, budget=50, rng_seed=1)
        assert sample.shape == (50, 6)
        again = sample_tokens(records, budget=50, rng_seed=1)
        assert sample.tobytes() == again.tobytes()


class TestVladEncode:
    def test_hard_assignment_matches_brute_force(self, rng):
        cb = train_codebook(unit_rows(rng, 500, 8), 6, rng_seed=0)
        ts = token_set(unit_rows(rng, 64, 8))
        out = vlad_encode(ts, cb, mode="mv")
        # brute-force residual accumulation by nearest (cosine) centroid
        cn = cb.centroids / np.linalg.norm(cb.centroids, axis=1, keepdims=True)
        residuals = np.zeros((6, 8))
        for t in ts.tokens.astype(np.float64):
            c = int(np.argmax(cn @ t))
            residuals[c] += t - cb.centroids[c]
        for j in range(6):
            n = np.linalg.norm(residuals[j])
            if n > 1e-12:
                residuals[j] /= n
        np.testing.assert_allclose(out.vectors, residuals, atol=1e-6)

    def test_residual_blocks_unit_or_zero(self, rng):
        cb = train_codebook(unit_rows(rng, 300, 8), 5, rng_seed=0)
        ts = token_set(unit_rows(rng, 40, 8))
        out = vlad_encode(ts, cb, mode="mv")
        norms = np.linalg.norm(out.vectors.astype(np.float64), axis=1)
        assert np.all((np.abs(norms - 1) < 1e-5) | (norms < 1e-12))

    def test_single_cluster_two_tokens(self, rng):
        t1, t2 = unit_rows(rng, 2, 6).astype(np.float64)
        centroid = unit_rows(rng, 1, 6)[0].astype(np.float64) * 0.5
        cb = Codebook(centroids=centroid[None, :].astype(np.float32))
        ts = token_set(np.stack([t1, t2]).astype(np.float32))
        out = vlad_encode(ts, cb, mode="mv")
        expect = (t1 - centroid) + (t2 - centroid)
        expect /= np.linalg.norm(expect)
        np.testing.assert_allclose(out.vectors[0], expect, atol=1e-6)

    def test_zero_residuals_warn_and_placeholder(self, rng):
        centroids = unit_rows(rng, 3, 6)
        cb = Codebook(centroids=centroids)
        ts = token_set(centroids.copy())  # every token == its centroid
        with pytest.warns(DegenerateDescriptorWarning):
            out = vlad_encode(ts, cb, mode="mv")
        norms = np.linalg.norm(out.vectors.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_soft_assignment_weights(self, rng):
        cb = train_codebook(unit_rows(rng, 200, 8), 4, rng_seed=0)
        ts = token_set(unit_rows(rng, 30, 8))
        out = vlad_encode(ts, cb, mode="mv", soft_alpha=10.0)
        # soft residuals: brute force
        cn = cb.centroids.astype(np.float64)
        cn_unit = cn / np.linalg.norm(cn, axis=1, keepdims=True)
        logits = 10.0 * (ts.tokens.astype(np.float64) @ cn_unit.T)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        residuals = np.zeros((4, 8))
        for i, t in enumerate(ts.tokens.astype(np.float64)):
            for c in range(4):
                residuals[c] += w[i, c] * (t - cn[c])
        for c in range(4):
            n = np.linalg.norm(residuals[c])
            if n > 1e-12:
                residuals[c] /= n
        np.testing.assert_allclose(out.vectors, residuals, atol=1e-6)

    def test_sv_mode_output_dim_and_norm(self, rng):
        cb = train_codebook(unit_rows(rng, 400, 16), 8, rng_seed=0)
        records = [token_set(unit_rows(rng, 32, 16), f"g{i}") for i in range(40)]
        raw = [vlad_encode(ts, cb, mode="raw") for ts in records]
        pca = fit_pca(np.stack(raw), out_dim=24)
        desc = vlad_encode(records[0], cb, mode="sv", pca=pca)
        assert desc.vector.shape == (24,)
        assert abs(np.linalg.norm(desc.vector) - 1.0) < 1e-5

    def test_sv_without_pca_rejected(self, rng):
        cb = train_codebook(unit_rows(rng, 100, 8), 4, rng_seed=0)
        with pytest.raises(ValidationError):
            vlad_encode(token_set(unit_rows(rng, 10, 8)), cb, mode="sv")

    def test_dim_mismatch_rejected(self, rng):
        cb = train_codebook(unit_rows(rng, 100, 8), 4, rng_seed=0)
        with pytest.raises(ValidationError):
            vlad_encode(token_set(unit_rows(rng, 10, 16)), cb, mode="mv")


class TestFitPca:
    def test_whitened_covariance_near_identity(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((10000, 12))
        pca = fit_pca(x, out_dim=12)
        y = pca.transform(x)
        cov = np.cov(y, rowvar=False)
        off = cov - np.eye(12)
        assert np.max(np.abs(off)) < 0.05

    def test_full_rank_lossless(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((500, 10)) @ rng.standard_normal((10, 10))
        pca = fit_pca(x, out_dim=10)
        back = pca.inverse_transform(pca.transform(x))
        assert np.max(np.abs(back - x)) < 1e-5

    def test_rank_deficient_stays_finite(self):
        rng = np.random.default_rng(9)
        base = rng.standard_normal((200, 3))
        x = np.concatenate([base, base @ rng.standard_normal((3, 5))], axis=1)
        pca = fit_pca(x, out_dim=8)
        y = pca.transform(x)
        assert np.all(np.isfinite(y))

    def test_deterministic_sign_convention(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((300, 6))
        a = fit_pca(x, out_dim=6)
        b = fit_pca(x.copy(), out_dim=6)
        assert a.projection.tobytes() == b.projection.tobytes()
        idx = np.argmax(np.abs(a.projection * np.sqrt(a.eigenvalues + a.floor)), axis=0)
        vals = (a.projection * np.sqrt(a.eigenvalues + a.floor))[idx, np.arange(6)]
        assert np.all(vals >= 0)

    def test_too_few_samples_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValidationError):
            fit_pca(rng.standard_normal((5, 10)), out_dim=8)

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        pca = fit_pca(rng.standard_normal((100, 8)), out_dim=4)
        pca.save(tmp_path / "pca.bin")
        back = PcaModel.load(tmp_path / "pca.bin")
        x = rng.standard_normal((3, 8))
        np.testing.assert_allclose(back.transform(x), pca.transform(x), rtol=1e-4, atol=1e-4)
