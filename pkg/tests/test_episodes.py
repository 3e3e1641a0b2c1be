import json
from dataclasses import replace

import numpy as np
import pytest

from otat.episodes import (
    EpisodeSpec,
    GenerationError,
    export_episode,
    generate_episode,
    mnn_alignment,
    text_nn_accuracy,
)
from otat.golden import read_bundle
from otat.numeric import DegenerateInputError


def brute_mnn(a, b):
    def cos(u, v):
        return u @ v / (np.linalg.norm(u) * np.linalg.norm(v))

    n = len(a)
    hits = 0
    for i in range(n):
        best_t = max(range(n), key=lambda j: (cos(a[i], b[j]), -j))
        best_i = max(range(n), key=lambda j: (cos(a[j], b[i]), -j))
        hits += best_t == i and best_i == i
    return hits / n


class TestGenerate:
    def test_counts_and_shapes(self):
        spec = EpisodeSpec(n_classes=4, shots=3, queries=2)
        ep = generate_episode(spec, 0)
        assert ep.support_x.shape == (12, 16, 16)
        assert ep.query_x.shape == (8, 16, 16)
        assert ep.text.shape == (4, 6, 16)
        assert np.bincount(ep.support_y).tolist() == [3] * 4
        assert np.bincount(ep.query_y).tolist() == [2] * 4
        assert len(ep.support) == 12 and ep.support[0][0].shape == (16, 16)

    def test_one_shot_no_queries(self):
        ep = generate_episode(EpisodeSpec(shots=1, queries=0), 1)
        assert len(ep.support) == 5 and len(ep.query) == 0

    def test_deterministic(self):
        a, b = generate_episode(EpisodeSpec(), 7), generate_episode(EpisodeSpec(), 7)
        for name in ("support_x", "query_x", "text", "latents"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
        assert not np.array_equal(a.support_x, generate_episode(EpisodeSpec(), 8).support_x)

    def test_latents_separated(self):
        ep = generate_episode(EpisodeSpec(n_classes=10), 3)
        sims = ep.latents @ ep.latents.T
        assert np.allclose(np.diag(sims), 1.0)
        assert sims[~np.eye(10, dtype=bool)].max() < 0.8

    def test_impossible_separation(self):
        with pytest.raises(GenerationError):
            generate_episode(EpisodeSpec(n_classes=40, latent_dim=1, dim=16, gap_rank=1), 0)

    def test_noiseless_full_rank_text_is_nearest(self):
        spec = EpisodeSpec(visual_noise=0.0, text_noise=0.0, gap_rank=8, clutter=0.0)
        for seed in range(5):
            assert text_nn_accuracy(generate_episode(spec, seed)) == 1.0

    def test_gap_rank_never_adds_text_information(self):
        base = EpisodeSpec(visual_noise=0.0, text_noise=0.0, clutter=0.0)
        for seed in range(5):
            accs = [text_nn_accuracy(generate_episode(replace(base, gap_rank=k), seed)) for k in range(1, 9)]
            assert all(a <= b for a, b in zip(accs, accs[1:])), accs

    @pytest.mark.parametrize("bad", [
        dict(n_classes=0), dict(shots=0), dict(gap_rank=9), dict(gap_rank=0),
        dict(visual_tokens=4, text_tokens=4), dict(dim=4), dict(visual_noise=-1.0), dict(clutter=1.0),
    ])
    def test_spec_validation(self, bad):
        with pytest.raises(ValueError):
            EpisodeSpec(**bad)

    def test_export(self, tmp_path):
        ep = generate_episode(EpisodeSpec(n_classes=2, shots=1, queries=1), 4)
        export_episode(ep, tmp_path)
        tensors, manifest = read_bundle(tmp_path)
        assert manifest["seed"] == 4
        assert manifest["spec"]["n_classes"] == 2
        assert manifest["support_y"] == [0, 1]
        assert np.array_equal(tensors["support_x"], ep.support_x)
        assert np.array_equal(tensors["text"], ep.text)
        json.dumps(manifest)


class TestMnn:
    def test_perfect_pairing(self, rng):
        a = rng.normal(size=(6, 4))
        assert mnn_alignment(a, a) == 1.0

    def test_adversarial_constant_text(self, rng):
        n = 5
        a = np.zeros((n, 2 * n))
        a[:, :n] = rng.normal(size=(n, n))
        b = np.zeros((n, 2 * n))
        b[:, n] = 1.0
        score = mnn_alignment(a, b)
        assert score <= 1 / n
        assert score == brute_mnn(a, b)

    def test_brute_force(self, rng):
        for _ in range(20):
            a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
            assert mnn_alignment(a, b) == brute_mnn(a, b)

    def test_symmetric(self, rng):
        for _ in range(10):
            a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
            assert mnn_alignment(a, b) == mnn_alignment(b, a)

    def test_ties_go_to_lowest_index(self):
        a = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert mnn_alignment(a, a) == 0.5

    def test_empty(self):
        with pytest.raises(DegenerateInputError):
            mnn_alignment(np.zeros((0, 3)), np.zeros((0, 3)))
