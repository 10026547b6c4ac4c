"""Tests for the synthetic speaker world and dataset persistence."""

import numpy as np
import pytest

from stylesync import face3dmm as fm
from stylesync import synthworld as sw
from stylesync.errors import ConfigError, FormatError


@pytest.fixture(scope="module")
def basis():
    return fm.make_synthetic_basis(seed=0)


@pytest.fixture(scope="module")
def speakers():
    return sw.draw_speakers(seed=0, count=8)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestSpeakers:
    def test_same_seed_identical(self):
        a = sw.sample_speaker(42)
        b = sw.sample_speaker(42)
        assert np.array_equal(a.style_map, b.style_map)
        assert np.array_equal(a.appearance, b.appearance)

    def test_pairwise_style_separation(self, speakers):
        for i in range(len(speakers)):
            for j in range(i + 1, len(speakers)):
                assert sw.style_map_distance(speakers[i], speakers[j]) >= 0.2

    def test_appearances_differ(self, speakers):
        for i in range(len(speakers)):
            for j in range(i + 1, len(speakers)):
                assert not np.array_equal(speakers[i].appearance, speakers[j].appearance)


class TestSynthUtterance:
    def test_audio_speaker_independent_mouth_not(self, speakers):
        ids = rng(1).integers(0, sw.PHONEME_COUNT, size=50)
        a = sw.synth_utterance(speakers[0], ids, noise_sigma=0.0)
        b = sw.synth_utterance(speakers[1], ids, noise_sigma=0.0)
        np.testing.assert_array_equal(a.audio_features, b.audio_features)
        assert np.abs(a.mouth_params - b.mouth_params).max() > 1e-3

    def test_constant_phoneme_converges_geometrically(self, speakers):
        spk = speakers[0]
        ids = np.full(40, 7)
        clip = sw.synth_utterance(spk, ids, noise_sigma=0.0)
        target = spk.style_map @ sw.PHONEME_EMBEDDINGS[7] + spk.style_bias
        # closed form for the one-pole recursion with zero initial state
        for t in [0, 3, 10, 30]:
            expected = target * (1.0 - sw.COARTICULATION ** (t + 1))
            np.testing.assert_allclose(clip.mouth_params[t], expected, atol=1e-5)

    def test_audio_distance_matches_embedding_map(self):
        spk = sw.sample_speaker(3)
        p, q = 2, 11
        a = sw.synth_utterance(spk, np.full(4, p), noise_seed=1).audio_features
        b = sw.synth_utterance(spk, np.full(4, q), noise_seed=2).audio_features
        expected = np.linalg.norm(
            sw.AUDIO_MAP @ (sw.PHONEME_EMBEDDINGS[p] - sw.PHONEME_EMBEDDINGS[q])
        )
        got = np.linalg.norm(a[0] - b[0])
        slack = 3 * sw.AUDIO_NOISE_SIGMA * np.sqrt(2 * sw.AUDIO_DIM)
        assert abs(got - expected) <= slack

    def test_invalid_phoneme_rejected(self, speakers):
        with pytest.raises(ConfigError):
            sw.synth_utterance(speakers[0], np.array([0, sw.PHONEME_COUNT]))

    def test_unsmooth_inverts_smoothing(self, speakers):
        ids = rng(2).integers(0, sw.PHONEME_COUNT, size=64)
        clip = sw.synth_utterance(speakers[2], ids, noise_sigma=0.0)
        targets = (sw.PHONEME_EMBEDDINGS[ids] @ speakers[2].style_map.T
                   + speakers[2].style_bias)
        recovered = sw.unsmooth_mouth(clip.mouth_params.astype(np.float64))
        np.testing.assert_allclose(recovered, targets, atol=1e-5)


class TestStyleRecoverability:
    def test_least_squares_recovers_style_map(self, speakers):
        spk = speakers[3]
        ids = rng(3).integers(0, sw.PHONEME_COUNT, size=64)
        clip = sw.synth_utterance(spk, ids, noise_sigma=0.0)
        targets = sw.unsmooth_mouth(clip.mouth_params.astype(np.float64))
        design = np.hstack([sw.PHONEME_EMBEDDINGS[ids], np.ones((64, 1))])
        sol, *_ = np.linalg.lstsq(design, targets, rcond=None)
        w_rec = sol[:-1].T
        rel = np.linalg.norm(w_rec - spk.style_map) / np.linalg.norm(spk.style_map)
        assert rel < 0.1


class TestAudioStyleIndependence:
    def test_linear_probe_at_chance(self, speakers):
        # ridge probe from audio features to speaker one-hots
        train_x, train_y, test_x, test_y = [], [], [], []
        for k, spk in enumerate(speakers):
            ids = rng(100 + k).integers(0, sw.PHONEME_COUNT, size=256)
            clip = sw.synth_utterance(spk, ids, noise_seed=200 + k)
            train_x.append(clip.audio_features[:192])
            test_x.append(clip.audio_features[192:])
            train_y.append(np.full(192, k))
            test_y.append(np.full(64, k))
        X = np.vstack(train_x)
        Y = np.eye(len(speakers))[np.concatenate(train_y)]
        Xb = np.hstack([X, np.ones((len(X), 1))])
        W = np.linalg.solve(Xb.T @ Xb + 1e-3 * np.eye(Xb.shape[1]), Xb.T @ Y)
        Xt = np.hstack([np.vstack(test_x), np.ones((64 * len(speakers), 1))])
        acc = np.mean(np.argmax(Xt @ W, axis=1) == np.concatenate(test_y))
        assert abs(acc - 1.0 / len(speakers)) <= 0.10


class TestRenderFrame:
    def test_deterministic(self, speakers, basis):
        a = sw.render_frame(speakers[0], np.zeros(13), None, basis)
        b = sw.render_frame(speakers[0], np.zeros(13), None, basis)
        assert np.array_equal(a, b)

    def test_mouth_changes_lower_half_only(self, speakers, basis):
        m2 = np.zeros(13)
        m2[12] = 0.5  # broadest-support dimension: a large opening-like change
        a = sw.render_frame(speakers[0], np.zeros(13), None, basis)
        b = sw.render_frame(speakers[0], m2, None, basis)
        assert np.abs(a[:, 16:, :] - b[:, 16:, :]).sum() > 0
        np.testing.assert_array_equal(a[:, :16, :], b[:, :16, :])

    def test_speakers_differ_in_upper_half(self, speakers, basis):
        a = sw.render_frame(speakers[0], np.zeros(13), None, basis)
        b = sw.render_frame(speakers[1], np.zeros(13), None, basis)
        assert np.abs(a[:, :16, :] - b[:, :16, :]).sum() > 0

    def test_values_in_unit_range(self, speakers, basis):
        img = sw.render_frame(speakers[0], rng(5).normal(size=13) * 0.2, None, basis)
        assert img.min() >= 0.0 and img.max() <= 1.0 and img.dtype == np.float32

    def test_rotation_moves_polygon(self, speakers, basis):
        m = np.zeros(13)
        m[6] = 0.4
        a = sw.render_frame(speakers[0], m, np.array([0.0, 0.0, 0.0]), basis)
        b = sw.render_frame(speakers[0], m, np.array([0.0, 0.0, 0.5]), basis)
        assert np.abs(a - b).sum() > 0

    def test_collinear_fallback_renders_line(self, basis, speakers):
        # degenerate basis path: force collinear lips via a custom mesh is
        # awkward, so call the internal fallback directly
        poly = np.stack([np.linspace(2, 20, 8), np.full(8, 7.0)], axis=1)
        cov = sw._fallback_line(poly, 16, 32)
        assert cov.sum() > 0 and cov.max() == 1.0


class TestDataset:
    def test_round_trip_and_split_disjointness(self, tmp_path):
        info = sw.make_dataset(
            num_speakers=3, frames_per_speaker=256, seed=5,
            out_dir=tmp_path / "ds", style_ref_len=16, style_frames=32,
            test_frames=64, write_frames=True,
        )
        loaded = sw.load_dataset(tmp_path / "ds")
        assert loaded.num_speakers == 3
        assert loaded.frames_per_speaker == 256
        for split in loaded.splits:
            s, tr, te = split.style, split.train, split.test
            assert s[1] <= tr[0] and tr[1] <= te[0]
            assert (s[1] - s[0]) + (tr[1] - tr[0]) + (te[1] - te[0]) == 256
        clip = sw.read_clip(loaded.clip_files[0])
        assert len(clip) == 256
        assert clip.frames.shape == (256, 3, 32, 32)
        assert clip.audio_features.dtype == np.float32

    def test_byte_identical_regeneration(self, tmp_path):
        for d in ("a", "b"):
            sw.make_dataset(
                num_speakers=2, frames_per_speaker=224, seed=9,
                out_dir=tmp_path / d, style_ref_len=16, style_frames=32,
                test_frames=32, write_frames=True,
            )
        assert sw.dataset_digest(tmp_path / "a") == sw.dataset_digest(tmp_path / "b")

    def test_insufficient_frames_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            sw.make_dataset(
                num_speakers=1, frames_per_speaker=100, seed=0,
                out_dir=tmp_path / "x", style_ref_len=32,
            )

    def test_clip_magic_checked(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXX" + b"\0" * 64)
        with pytest.raises(FormatError):
            sw.read_clip(bad)

    def test_ppm_export(self, tmp_path, speakers, basis):
        img = sw.render_frame(speakers[0], np.zeros(13), None, basis)
        out = tmp_path / "f.ppm"
        sw.write_ppm(out, img)
        blob = out.read_bytes()
        assert blob.startswith(b"P6\n32 32\n255\n")
        assert len(blob) == len(b"P6\n32 32\n255\n") + 32 * 32 * 3
