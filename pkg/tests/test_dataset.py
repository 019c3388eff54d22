import numpy as np
import pytest

from mgfusion.dataset import (Corpus, FormatError, SamplingError, Segment, SyntheticSpec,
                              VideoFeatures, generate_synthetic_corpus, load_corpus,
                              load_feature_file, resample_or_pad, sample_triplet, save_corpus,
                              save_feature_file)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(SyntheticSpec(num_classes=4, train_classes=2, val_classes=1,
                                                   test_classes=1, videos_per_class=4, seed=11))


def test_degenerate_spec_identical_subaction_frames():
    spec = SyntheticSpec(num_classes=2, train_classes=2, test_classes=0, videos_per_class=3,
                         noise_sigma=0.0, permutation_probability=0.0, speed_jitter_range=(1.0, 1.0),
                         action_length_range=(9, 9), video_length_range=(20, 30), seed=3)
    c = generate_synthetic_corpus(spec)
    a, b = [v for v in c.videos if v.class_label == "class00"][:2]
    sa, sb = a.annotations[0], b.annotations[0]
    np.testing.assert_array_equal(a.frames[sa.start:sa.end], b.frames[sb.start:sb.end])


def test_same_seed_bitwise(corpus):
    again = generate_synthetic_corpus(SyntheticSpec(num_classes=4, train_classes=2, val_classes=1,
                                                    test_classes=1, videos_per_class=4, seed=11))
    assert again.fingerprint() == corpus.fingerprint()
    assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(again.videos, corpus.videos))


def test_full_permutation_reorders_but_keeps_prototypes():
    spec = SyntheticSpec(num_classes=2, train_classes=2, test_classes=0, videos_per_class=8,
                         noise_sigma=0.0, permutation_probability=1.0, speed_jitter_range=(1.0, 1.0),
                         action_length_range=(12, 12), video_length_range=(20, 20), seed=5)
    c = generate_synthetic_corpus(spec)
    clips = [v.frames[v.annotations[0].start:v.annotations[0].end] for v in c.videos
             if v.class_label == "class00"]

    def multiset(clip):
        return sorted(map(tuple, np.unique(clip, axis=0)))

    assert all(multiset(x) == multiset(clips[0]) for x in clips)
    assert any(not np.array_equal(x, clips[0]) for x in clips[1:])


def test_annotations_fit(corpus):
    for v in corpus.videos:
        for seg in v.annotations:
            assert 0 <= seg.start < seg.end <= v.length


def test_splits_disjoint(corpus):
    sets = [set(corpus.classes(s)) for s in ("train", "val", "test")]
    assert sets[0] and sets[2]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])


def test_invalid_spec_names_field():
    with pytest.raises(ValueError, match="video_length_range"):
        generate_synthetic_corpus(SyntheticSpec(video_length_range=(30, 10)))
    with pytest.raises(ValueError, match="permutation_probability"):
        generate_synthetic_corpus(SyntheticSpec(permutation_probability=1.5))


class TestResample:
    def test_identity(self):
        f = np.arange(12.0).reshape(4, 3)
        out, n = resample_or_pad(f, 4)
        np.testing.assert_array_equal(out, f)
        assert n == 4

    def test_pad(self):
        f = np.array([[1.0, 2.0], [3.0, 4.0]])
        out, n = resample_or_pad(f, 4)
        np.testing.assert_array_equal(out, [[1, 2], [3, 4], [0, 0], [0, 0]])
        assert n == 2

    def test_even_indices(self):
        # round(i * 78 / 39) = 2i
        f = np.arange(79.0)[:, None]
        out, n = resample_or_pad(f, 40)
        np.testing.assert_array_equal(out[:, 0], np.arange(0, 79, 2))
        assert n == 40

    def test_keeps_endpoints(self):
        rng = np.random.default_rng(0)
        for L, T in [(10, 3), (50, 7), (17, 16), (5, 2)]:
            f = rng.standard_normal((L, 2))
            out, _ = resample_or_pad(f, T)
            np.testing.assert_array_equal(out[0], f[0])
            np.testing.assert_array_equal(out[-1], f[-1])

    def test_T1(self):
        out, n = resample_or_pad(np.arange(6.0).reshape(3, 2), 1)
        np.testing.assert_array_equal(out, [[0, 1]])


class TestTriplets:
    def test_two_class_negative(self, corpus):
        rng = np.random.default_rng(0)
        for _ in range(30):
            t = sample_triplet(corpus, rng, T=8)
            assert t.p_video.class_label == t.query_video.class_label != t.n_video.class_label
            assert t.p_video.id != t.query_video.id
            assert t.q.shape == (8, corpus.dim)
            assert corpus.splits[t.n_video.class_label] == "train"

    def test_replay(self, corpus):
        a = [sample_triplet(corpus, np.random.default_rng(4), 8) for _ in range(1)]
        r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
        s1 = [sample_triplet(corpus, r1, 8) for _ in range(10)]
        s2 = [sample_triplet(corpus, r2, 8) for _ in range(10)]
        assert [(t.query_video.id, t.p_video.id, t.n_video.id) for t in s1] == \
               [(t.query_video.id, t.p_video.id, t.n_video.id) for t in s2]
        assert all(x.q.tobytes() == y.q.tobytes() for x, y in zip(s1, s2))
        assert a

    def test_insufficient(self):
        v = VideoFeatures("a", "c0", np.ones((4, 2)), [Segment(0, 2)])
        with pytest.raises(SamplingError):
            sample_triplet(Corpus([v], {"c0": "train"}), np.random.default_rng(0), 4)


class TestFeatureFiles:
    def test_roundtrip(self, tmp_path, corpus):
        v = corpus.videos[0]
        save_feature_file(v, tmp_path / f"{v.id}.feat")
        back = load_feature_file(tmp_path / f"{v.id}.feat")
        assert back.id == v.id and back.class_label == v.class_label
        assert back.annotations == v.annotations
        assert back.frames.tobytes() == v.frames.tobytes()

    def test_short_file_names_missing_row(self, tmp_path):
        p = tmp_path / "bad.feat"
        p.write_text("3 2\nclass x\nannotations 0 1\n1 2\n3 4\n")
        with pytest.raises(FormatError, match="row 3"):
            load_feature_file(p)

    def test_row_length_mismatch(self, tmp_path):
        p = tmp_path / "bad.feat"
        p.write_text("2 2\nclass x\nannotations\n1 2\n3\n")
        with pytest.raises(FormatError, match="line 5"):
            load_feature_file(p)

    def test_unparsable(self, tmp_path):
        p = tmp_path / "bad.feat"
        p.write_text("1 2\nclass x\nannotations\n1 zz\n")
        with pytest.raises(FormatError, match="line 4"):
            load_feature_file(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.feat"
        p.write_text("two 2\nclass x\nannotations\n")
        with pytest.raises(FormatError, match="line 1"):
            load_feature_file(p)

    def test_empty_annotations(self, tmp_path):
        v = VideoFeatures("ref", "c", np.eye(3))
        save_feature_file(v, tmp_path / "ref.feat")
        assert load_feature_file(tmp_path / "ref.feat").annotations == []

    def test_corpus_manifest_roundtrip(self, tmp_path, corpus):
        manifest = save_corpus(corpus, tmp_path)
        back = load_corpus(manifest)
        assert back.fingerprint() == corpus.fingerprint()
        assert back.splits == corpus.splits
