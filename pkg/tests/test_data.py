import numpy as np
import pytest

from pspav.data import (
    ChecksumError,
    ConfigError,
    FeatureFileError,
    GeneratorConfig,
    HeaderError,
    LabelError,
    TruncatedFileError,
    VideoSample,
    class_prototypes,
    event_relevance_labels,
    generate_dataset,
    generate_video,
    load_features,
    load_manifest,
    save_features,
    split_indices,
    weak_label_from_full,
    write_manifest,
)


def one_hot(classes, C):
    out = np.zeros((len(classes), C))
    out[np.arange(len(classes)), classes] = 1
    return out


class TestLabels:
    def test_weak_two_rows(self):
        np.testing.assert_array_equal(weak_label_from_full([[1, 0], [0, 1]]), [0.5, 0.5])

    def test_weak_constant(self):
        np.testing.assert_array_equal(weak_label_from_full(one_hot([1] * 6, 4)), [0, 1, 0, 0])

    def test_weak_counts(self):
        np.testing.assert_allclose(weak_label_from_full(one_hot([0] * 3 + [1] * 7, 2)), [0.3, 0.7])

    def test_weak_rejects_non_one_hot(self):
        with pytest.raises(LabelError):
            weak_label_from_full([[1, 1], [0, 1]])
        with pytest.raises(LabelError):
            weak_label_from_full([[0.5, 0.5]])

    def test_relevance_all_background(self):
        np.testing.assert_array_equal(event_relevance_labels(one_hot([3] * 5, 4), 3), np.zeros(5))

    def test_relevance_no_background(self):
        np.testing.assert_array_equal(event_relevance_labels(one_hot([0, 1, 2, 0], 4), 3), np.ones(4))

    def test_relevance_bus_example(self):
        # event only in the third and fourth of four segments
        np.testing.assert_array_equal(event_relevance_labels(one_hot([1, 1, 0, 0], 2), 1), [0, 0, 1, 1])

    def test_relevance_bad_background_index(self):
        with pytest.raises(LabelError):
            event_relevance_labels(one_hot([0, 1], 2), 2)


class TestGenerator:
    def test_deterministic(self):
        cfg = GeneratorConfig(seed=11)
        assert generate_video(cfg, 5) == generate_video(cfg, 5)
        a, b = generate_video(cfg, 5), generate_video(cfg, 6)
        assert not np.array_equal(a.audio, b.audio)

    def test_zero_noise_exact_prototypes(self):
        cfg = GeneratorConfig(noise_std=0.0, desync_prob=0.0, seed=3)
        proto_a, proto_v = class_prototypes(cfg)
        bg = cfg.background_index
        for seed in range(20):
            s = generate_video(cfg, seed)
            cls = s.labels_full.argmax(axis=1)
            event = [c for c in cls if c != bg]
            for t in range(cfg.T):
                np.testing.assert_array_equal(s.audio[t], proto_a[cls[t]].astype(np.float32))
                active = np.any(s.visual[t] != 0, axis=1)
                assert active.sum() == cfg.active_cells
                np.testing.assert_array_equal(s.visual[t][active], np.tile(proto_v[cls[t]].astype(np.float32), (cfg.active_cells, 1)))
                if cls[t] == bg and event:
                    # the event prototype never leaks outside the span
                    assert not np.allclose(s.audio[t], proto_a[event[0]])

    def test_span_lengths_over_1000_seeds(self):
        cfg = GeneratorConfig(T=10, span_min=2, span_max=6, seed=1)
        seen = set()
        for seed in range(1000):
            s = generate_video(cfg, seed)
            rel = event_relevance_labels(s.labels_full, cfg.background_index)
            n = int(rel.sum())
            assert cfg.span_min <= n <= cfg.span_max
            if n:
                idx = np.flatnonzero(rel)
                assert idx[-1] - idx[0] + 1 == n  # contiguous
            seen.add(n)
        assert seen == set(range(2, 7))

    def test_weak_labels_match_full(self):
        for s in generate_dataset(GeneratorConfig(seed=2), 30):
            np.testing.assert_array_equal(s.labels_weak, weak_label_from_full(s.labels_full))
            assert np.isclose(s.labels_weak.sum(), 1.0)

    def test_desync_only_touches_one_modality(self):
        cfg = GeneratorConfig(noise_std=0.0, desync_prob=1.0, span_min=1, span_max=3, seed=4)
        proto_a, proto_v = class_prototypes(cfg)
        for seed in range(20):
            s = generate_video(cfg, seed)
            cls = s.labels_full.argmax(axis=1)
            event = [c for c in cls if c != cfg.background_index][0]
            for t in np.flatnonzero(cls == cfg.background_index):
                audio_event = np.array_equal(s.audio[t], proto_a[event].astype(np.float32))
                vis_event = np.any(np.all(s.visual[t] == proto_v[event].astype(np.float32), axis=1))
                assert audio_event != vis_event

    def test_nearest_prototype_solves_noise_free_data(self):
        cfg = GeneratorConfig(noise_std=0.0, desync_prob=0.0, seed=9)
        proto_a, proto_v = class_prototypes(cfg)
        correct = total = 0
        for s in generate_dataset(cfg, 100):
            for t in range(cfg.T):
                ca = np.argmin(((proto_a - s.audio[t]) ** 2).sum(axis=1))
                strongest = s.visual[t][np.argmax(np.abs(s.visual[t]).sum(axis=1))]
                cv = np.argmin(((proto_v - strongest) ** 2).sum(axis=1))
                pred = ca if ca == cv else cfg.background_index
                correct += pred == s.labels_full[t].argmax()
                total += 1
        assert correct == total

    @pytest.mark.parametrize(
        "kwargs",
        [dict(T=0), dict(C=1), dict(span_min=5, span_max=3), dict(span_max=11), dict(desync_prob=1.5),
         dict(noise_std=-1.0), dict(background_index=7)],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            GeneratorConfig(**kwargs)

    def test_split_is_70_10_20_and_stable(self):
        tr, va, te = split_indices(714, 3)
        assert (len(tr), len(va), len(te)) == (500, 71, 143)
        assert sorted(np.concatenate([tr, va, te])) == list(range(714))
        np.testing.assert_array_equal(split_indices(714, 3)[0], tr)


class TestFeatureFiles:
    @pytest.fixture
    def sample(self):
        return generate_video(GeneratorConfig(T=4, N=3, d_v=5, d_a=2, C=3, span_max=3, seed=0), 1, video_id="clip01")

    def test_round_trip(self, sample, tmp_path):
        path = tmp_path / "clip01.avef"
        save_features(sample, path)
        back = load_features(path)
        assert back == sample
        assert back.visual.dtype == np.float32

    def test_zero_T_rejected(self, tmp_path):
        empty = VideoSample(np.zeros((0, 3, 5), np.float32), np.zeros((0, 2), np.float32), np.zeros((0, 3), np.float32))
        path = tmp_path / "empty.avef"
        save_features(empty, path)
        with pytest.raises(HeaderError):
            load_features(path)

    def test_truncation_detected_at_random_offsets(self, sample, tmp_path):
        path = tmp_path / "clip01.avef"
        save_features(sample, path)
        raw = path.read_bytes()
        rng = np.random.default_rng(0)
        for cut in rng.integers(26, len(raw), size=25):
            path.write_bytes(raw[:cut])
            with pytest.raises(TruncatedFileError):
                load_features(path)

    def test_short_header(self, sample, tmp_path):
        path = tmp_path / "x.avef"
        path.write_bytes(b"AVEF\x01")
        with pytest.raises(HeaderError):
            load_features(path)

    def test_bad_magic(self, sample, tmp_path):
        path = tmp_path / "clip01.avef"
        save_features(sample, path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(HeaderError):
            load_features(path)

    def test_flipped_payload_byte(self, sample, tmp_path):
        path = tmp_path / "clip01.avef"
        save_features(sample, path)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_features(path)

    def test_error_types_are_distinct(self):
        assert len({HeaderError, TruncatedFileError, ChecksumError}) == 3
        for e in (HeaderError, TruncatedFileError, ChecksumError):
            assert issubclass(e, FeatureFileError)

    def test_manifest(self, tmp_path):
        cfg = GeneratorConfig(T=3, N=2, d_v=4, d_a=3, C=3, span_max=3, seed=5)
        samples = generate_dataset(cfg, 4)
        paths = []
        for s in samples:
            p = tmp_path / "feats" / f"{s.video_id}.avef"
            p.parent.mkdir(exist_ok=True)
            save_features(s, p)
            paths.append(p)
        write_manifest(paths, tmp_path / "manifest.txt")
        assert (tmp_path / "manifest.txt").read_text().splitlines()[0] == "feats/vid00000.avef"
        assert load_manifest(tmp_path / "manifest.txt") == samples
