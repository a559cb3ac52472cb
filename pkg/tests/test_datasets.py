"""Synthetic task generator and dataset invariants."""

import numpy as np
import pytest

from kdtrain.datasets import (
    FrameDataset,
    SynthTaskSpec,
    Utterance,
    generate_synth,
    validate_soft_targets,
)
from kdtrain.distill import SoftTargetSet
from kdtrain.errors import InvalidArgumentError, ShapeError


class TestFrameDataset:
    def test_partition_must_be_exact(self):
        feats = np.zeros((10, 2))
        labels = np.zeros(10, dtype=int)
        with pytest.raises(ShapeError):
            FrameDataset([Utterance(0, 0, 4), Utterance(1, 5, 5)], feats, labels, 3)
        with pytest.raises(ShapeError):
            FrameDataset([Utterance(0, 0, 4), Utterance(1, 4, 4)], feats, labels, 3)

    def test_label_range_checked(self):
        feats = np.zeros((4, 2))
        with pytest.raises(ShapeError):
            FrameDataset([Utterance(0, 0, 4)], feats, np.array([0, 1, 2, 5]), 3)

    def test_utterance_slice(self):
        ds = FrameDataset(
            [Utterance(0, 0, 3), Utterance(1, 3, 2)],
            np.arange(10).reshape(5, 2).astype(float),
            np.zeros(5, dtype=int),
            2,
        )
        assert ds.utterance_slice(1) == slice(3, 5)
        assert ds.total_frames == 5
        assert ds.feature_dim == 2


class TestSynthTaskSpec:
    def test_degenerate_rejected(self):
        with pytest.raises(InvalidArgumentError):
            SynthTaskSpec(num_classes=1)
        with pytest.raises(InvalidArgumentError):
            SynthTaskSpec(feature_dim=0)
        with pytest.raises(InvalidArgumentError):
            SynthTaskSpec(noise_corr=1.0)

    def test_transition_rows_must_normalize(self):
        bad = np.full((3, 3), 0.4)
        with pytest.raises(InvalidArgumentError):
            SynthTaskSpec(num_classes=3, transitions=bad)


def small_spec(**kw):
    base = dict(
        num_classes=4, feature_dim=3, train_utterances=12, cv_utterances=4,
        test_utterances=4, min_frames=10, max_frames=20,
    )
    base.update(kw)
    return SynthTaskSpec(**base)


class TestGenerateSynth:
    def test_deterministic_given_seed(self):
        a = generate_synth(small_spec(), 123)
        b = generate_synth(small_spec(), 123)
        np.testing.assert_array_equal(a.train.features, b.train.features)
        np.testing.assert_array_equal(a.train.labels, b.train.labels)
        np.testing.assert_array_equal(a.test.features, b.test.features)

    def test_different_seed_differs(self):
        a = generate_synth(small_spec(), 123)
        b = generate_synth(small_spec(), 124)
        assert not np.array_equal(a.train.features, b.train.features)

    def test_zero_noise_zero_blend_gives_exact_centroids(self):
        """Features are the 32-bit-rounded class centroids."""
        s = generate_synth(small_spec(noise_scale=0.0, blend_frames=0), 7)
        spec_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(7)))
        centroids = spec_rng.normal(0.0, 1.0, size=(4, 3))
        want = centroids.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(s.train.features, want[s.train.labels])

    def test_self_loop_one_keeps_one_class_per_utterance(self):
        s = generate_synth(small_spec(self_loop=1.0), 11)
        for ds in (s.train, s.cv, s.test):
            for i in range(len(ds.utterances)):
                labels = ds.labels[ds.utterance_slice(i)]
                assert np.all(labels == labels[0])

    def test_disjoint_utterance_ids(self):
        s = generate_synth(small_spec(), 13)
        ids = [u.uid for ds in (s.train, s.cv, s.test) for u in ds.utterances]
        assert len(ids) == len(set(ids))

    def test_empirical_transitions_match_matrix(self):
        """Counted class-transition frequencies over ~1e5 frames agree
        with the chain's transition matrix within 0.02 per entry."""
        spec = SynthTaskSpec(train_utterances=1800, cv_utterances=1, test_utterances=1)
        s = generate_synth(spec, 17)
        ds = s.train
        assert ds.total_frames >= 90_000
        k = spec.num_classes
        counts = np.zeros((k, k))
        for i in range(len(ds.utterances)):
            labels = ds.labels[ds.utterance_slice(i)]
            np.add.at(counts, (labels[:-1], labels[1:]), 1.0)
        empirical = counts / counts.sum(axis=1, keepdims=True)
        off = (1.0 - spec.self_loop) / (k - 1)
        expected = np.full((k, k), off)
        np.fill_diagonal(expected, spec.self_loop)
        assert np.abs(empirical - expected).max() < 0.02

    def test_boundary_frames_are_convex_blends(self):
        """With zero noise, frames near a transition sit strictly between
        the two adjacent centroids."""
        s = generate_synth(small_spec(noise_scale=0.0, blend_frames=2, self_loop=0.6), 19)
        ds = s.train
        spec_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(19)))
        centroids = spec_rng.normal(0.0, 1.0, size=(4, 3))
        checked = 0
        for i in range(len(ds.utterances)):
            sl = ds.utterance_slice(i)
            labels = ds.labels[sl]
            feats = ds.features[sl]
            changes = np.flatnonzero(labels[1:] != labels[:-1]) + 1
            for j in changes:
                a, b = labels[j - 1], labels[j]
                # frame just left of the boundary: 0.625 own + 0.375 next
                want = 0.625 * centroids[a] + 0.375 * centroids[b]
                got = feats[j - 1]
                if np.array_equal(
                    got, (0.625 * centroids[a] + 0.375 * centroids[b])
                    .astype(np.float32).astype(np.float64)
                ):
                    checked += 1
        assert checked > 10

    def test_noise_corr_makes_consecutive_noise_similar(self):
        flat = generate_synth(small_spec(noise_corr=0.0, blend_frames=0), 21)
        corr = generate_synth(small_spec(noise_corr=0.95, blend_frames=0), 21)

        def mean_step(ds):
            deltas = []
            for i in range(len(ds.utterances)):
                f = ds.features[ds.utterance_slice(i)]
                deltas.append(np.mean(np.sum(np.diff(f, axis=0) ** 2, axis=1)))
            return np.mean(deltas)

        assert mean_step(corr.train) < 0.5 * mean_step(flat.train)


class TestValidateSoftTargets:
    def _dataset(self):
        return generate_synth(small_spec(), 23).train

    def test_matching_pair_is_ok(self):
        ds = self._dataset()
        soft = SoftTargetSet(1.0, np.full((ds.total_frames, 4), 0.25))
        assert validate_soft_targets(soft, ds) == []

    def test_frame_count_mismatch(self):
        ds = self._dataset()
        soft = SoftTargetSet(1.0, np.full((ds.total_frames - 1, 4), 0.25))
        violations = validate_soft_targets(soft, ds)
        assert any("frame count mismatch" in v for v in violations)

    def test_class_count_mismatch(self):
        ds = self._dataset()
        soft = SoftTargetSet(1.0, np.full((ds.total_frames, 5), 0.2))
        assert any("class count" in v for v in validate_soft_targets(soft, ds))

    def test_off_normalized_row_named(self):
        ds = self._dataset()
        rows = np.full((ds.total_frames, 4), 0.25)
        rows[7] = [0.3, 0.3, 0.2, 0.1]
        rows[7] *= 0.9
        violations = validate_soft_targets(SoftTargetSet(1.0, rows), ds)
        assert any("row 7" in v for v in violations)
