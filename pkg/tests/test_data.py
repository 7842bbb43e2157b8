import json

import numpy as np
import pytest

from tmkt import data
from tmkt.errors import ConfigError, DataError, FormatError, PairingError


class TestTensorFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((3, 2, 5, 4)).astype(np.float32)
        path = tmp_path / "a.seq"
        data.save_tensor(path, arr)
        back = data.load_tensor(path)
        assert back.dtype == np.float32
        assert back.tobytes() == arr.tobytes()

    def test_round_trip_scalar_rank(self, tmp_path):
        path = tmp_path / "v.seq"
        data.save_tensor(path, np.arange(6, dtype=np.float32))
        np.testing.assert_array_equal(data.load_tensor(path), np.arange(6))

    def test_bad_magic_offset_in_message(self, tmp_path):
        path = tmp_path / "bad.seq"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError, match="offset 0"):
            data.load_tensor(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.seq"
        import struct
        path.write_bytes(data.SEQ_MAGIC + struct.pack("<HH", 99, 1) + struct.pack("<I", 0))
        with pytest.raises(FormatError, match="version 99"):
            data.load_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.seq"
        data.save_tensor(path, np.ones((2, 3), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="size mismatch"):
            data.load_tensor(path)

    def test_too_short_for_header(self, tmp_path):
        path = tmp_path / "s.seq"
        path.write_bytes(b"TMK")
        with pytest.raises(FormatError, match="short"):
            data.load_tensor(path)


class TestFrameSeq:
    def test_shape_validation(self):
        with pytest.raises(DataError):
            data.FrameSeq(np.zeros((3, 2, 4)), np.zeros(3, np.uint8), 0)
        with pytest.raises(DataError):
            data.FrameSeq(np.zeros((3, 2, 4, 4)), np.zeros(2, np.uint8), 0)

    def test_seq_round_trip_preserves_modality_and_label(self, tmp_path):
        seq = data.FrameSeq(np.random.default_rng(1).random((4, 2, 3, 3)),
                            np.ones(4, np.uint8), 2)
        path = tmp_path / "seq.seq"
        data.save_seq(path, seq)
        back = data.load_seq(path, data.STATIC, 2)
        assert back.label == 2
        assert (back.modality == data.STATIC).all()
        np.testing.assert_array_equal(back.data, seq.data)


class TestEncodeStatic:
    def test_value_channel_is_max_rgb(self):
        img = np.zeros((2, 2, 3), dtype=np.float32)
        img[0, 0] = [0.2, 0.9, 0.4]
        img[1, 1] = [0.5, 0.1, 0.3]
        out = data.encode_static(img, 3)
        assert out.shape == (3, 2, 2, 2)
        for t in range(3):
            for c in range(2):
                assert out[t, c, 0, 0] == pytest.approx(0.9)
                assert out[t, c, 1, 1] == pytest.approx(0.5)

    def test_constant_over_time_and_channels(self):
        img = np.random.default_rng(2).random((5, 5, 3)).astype(np.float32)
        out = data.encode_static(img, 4)
        for t in range(1, 4):
            np.testing.assert_array_equal(out[t], out[0])
        np.testing.assert_array_equal(out[:, 0], out[:, 1])

    def test_out_of_range_warns_and_clamps(self):
        img = np.full((2, 2, 3), 1.5, dtype=np.float32)
        with pytest.warns(UserWarning, match="clamped"):
            out = data.encode_static(img, 1)
        assert out.max() == 1.0

    def test_rejects_non_rgb(self):
        with pytest.raises(DataError):
            data.encode_static(np.zeros((4, 4)), 2)


class TestEventSimulation:
    def test_frames_are_binary(self):
        ev = data.simulate_events("circle", (10.0, 10.0), (1.0, 0.0), 4.0, 24, 24, 6)
        assert set(np.unique(ev).tolist()) <= {0.0, 1.0}

    def test_static_scene_emits_nothing(self):
        ev = data.simulate_events("square", (12.0, 12.0), (0.0, 0.0), 4.0, 24, 24, 5)
        assert ev.sum() == 0

    def test_events_match_frame_difference_oracle(self):
        # recompute the per-step brightness difference straight from the
        # renderer and compare against the emitted ON/OFF masks
        args = ("square", (8.0, 12.0), (0.9, -0.3), 4.0, 24, 24)
        ev = data.simulate_events(*args, timesteps=5, contrast=0.1)
        prev = data.render_shape("square", 8.0, 12.0, 4.0, 24, 24)
        for t in range(1, 6):
            cur = data.render_shape("square", 8.0 + 0.9 * t, 12.0 - 0.3 * t, 4.0, 24, 24)
            diff = cur - prev
            np.testing.assert_array_equal(ev[t - 1, 0], (diff > 0.1).astype(np.float32))
            np.testing.assert_array_equal(ev[t - 1, 1], (diff < -0.1).astype(np.float32))
            prev = cur

    def test_translating_square_events_concentrate_at_edges(self):
        # a rigid translation only changes brightness near the silhouette
        # boundary, so every event pixel must sit within ~2px of the
        # square's edge at one of the two times
        cx, cy, size = 10.0, 12.0, 4.0
        ev = data.simulate_events("square", (cx, cy), (1.0, 0.0), size, 24, 24, 1)
        yy, xx = np.mgrid[0:24, 0:24].astype(np.float64)

        def edge_dist(cx_):
            return np.abs(np.maximum(np.abs(xx - cx_), np.abs(yy - cy)) - size)

        near_edge = np.minimum(edge_dist(cx), edge_dist(cx + 1.0)) <= 2.0
        fired = ev[0].any(axis=0)
        assert fired.sum() > 0
        assert (near_edge | ~fired).all()

    def test_unknown_family_rejected(self):
        with pytest.raises(ConfigError):
            data.render_shape("hexagon", 5, 5, 3, 16, 16)


class TestDatasetGeneration:
    def test_generation_deterministic_bit_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        man_a = data.gen_paired_dataset(a, classes=3, per_class=2, size=16, timesteps=4, seed=7)
        man_b = data.gen_paired_dataset(b, classes=3, per_class=2, size=16, timesteps=4, seed=7)
        assert man_a["samples"] == man_b["samples"]
        for entry in man_a["samples"]:
            for key in ("static", "event"):
                assert (a / entry[key]).read_bytes() == (b / entry[key]).read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        a = data.gen_paired_dataset(tmp_path / "a", classes=2, per_class=2,
                                    size=16, timesteps=4, seed=0)
        data.gen_paired_dataset(tmp_path / "b", classes=2, per_class=2,
                                size=16, timesteps=4, seed=1)
        name = a["samples"][0]["static"]
        assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()

    def test_load_round_trip(self, tmp_path):
        data.gen_paired_dataset(tmp_path, classes=2, per_class=3, size=16, timesteps=4, seed=3)
        static, event, labels, manifest = data.load_dataset(tmp_path / "manifest.json")
        assert static.shape == (6, 4, 2, 16, 16)
        assert event.shape == (6, 4, 2, 16, 16)
        np.testing.assert_array_equal(labels, [0, 0, 0, 1, 1, 1])
        assert manifest["classes"] == ["square", "circle"]

    def test_event_sparsity(self, tmp_path):
        data.gen_paired_dataset(tmp_path, classes=5, per_class=4, size=24, timesteps=8, seed=5)
        _, event, _, _ = data.load_dataset(tmp_path / "manifest.json")
        frac = event.mean()
        assert 0.0 < frac <= 0.20

    def test_manifest_shape_mismatch_detected(self, tmp_path):
        data.gen_paired_dataset(tmp_path, classes=1, per_class=1, size=16, timesteps=4, seed=0)
        manifest_path = tmp_path / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["samples"][0]["shape"] = [4, 2, 32, 32]
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError, match="manifest shape"):
            data.load_dataset(manifest_path)

    def test_pair_shape_mismatch_detected(self, tmp_path):
        data.gen_paired_dataset(tmp_path, classes=1, per_class=1, size=16, timesteps=4, seed=0)
        bad = np.zeros((3, 2, 16, 16), dtype=np.float32)
        data.save_tensor(tmp_path / "event_0000.seq", bad)
        with pytest.raises(PairingError):
            data.load_dataset(tmp_path / "manifest.json")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            data.load_dataset(tmp_path / "nope.json")

    def test_config_validation(self, tmp_path):
        with pytest.raises(ConfigError):
            data.gen_paired_dataset(tmp_path, classes=9)
        with pytest.raises(ConfigError):
            data.gen_paired_dataset(tmp_path, size=4)
