"""Dataset generator: checksum primitives, generative semantics (including the
closed-form Bayes posterior the construction implies), the on-disk format and
its failure taxonomy, and augmentation statistics."""

import json

import numpy as np
import pytest

from conftest import small_generator_config
from sctfusion.configs import AugmentConfig, GeneratorConfig, default_generator_config
from sctfusion.crc32c import crc32c, crc32c_hex
from sctfusion.datagen import (
    augment_sample,
    generate_arrays,
    generate_dataset,
    load_dataset,
    manifest_checksum,
)
from sctfusion.errors import (
    ChecksumMismatchError,
    ConfigError,
    ManifestConsistencyError,
    TruncatedPayloadError,
)


def crc32c_reference(data: bytes) -> int:
    """Bitwise per-byte loop straight from the CRC definition."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0x82F63B78 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


class TestCrc32c:
    def test_known_vectors(self):
        assert crc32c(b"") == 0
        assert crc32c(b"a") == 0xC1D04330
        assert crc32c(b"123456789") == 0xE3069283
        assert crc32c(b"\x00" * 32) == 0x8A9136AA
        assert crc32c(b"\xff" * 32) == 0x62A8AB43

    def test_matches_reference_loop_across_lengths(self):
        rng = np.random.default_rng(0)
        for n in list(range(0, 40)) + [63, 64, 65, 255, 256, 1000, 4097]:
            data = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
            assert crc32c(data) == crc32c_reference(data), f"length {n}"

    def test_chunking_is_transparent(self):
        import sctfusion.crc32c as mod

        rng = np.random.default_rng(1)
        data = rng.integers(0, 256, 3 * mod._CHUNK + 17, dtype=np.uint8).tobytes()
        whole = crc32c(data)
        # chained calls over arbitrary splits agree
        a, b = data[: mod._CHUNK // 3 + 1], data[mod._CHUNK // 3 + 1 :]
        assert crc32c(b, crc32c(a)) == whole

    def test_hex_format(self):
        assert crc32c_hex(b"123456789") == "e3069283"


class TestGeneratorConfig:
    def test_capacity_error_for_oversized_label_count(self):
        """200 labels on a 30x30 image: 15px cells leave only a 2x2 grid."""
        cfg = default_generator_config().model_dump()
        cfg["num_labels"] = 200
        cfg["groups"] = {"first_only": 66, "second_only": 66, "joint": 68}
        with pytest.raises(ValueError, match="capacity"):
            GeneratorConfig(**cfg)

    def test_cell_does_not_fit_error(self):
        cfg = default_generator_config().model_dump()
        cfg["num_labels"] = 1600  # 40px cells on a 30x30 image
        cfg["groups"] = {"first_only": 533, "second_only": 533, "joint": 534}
        with pytest.raises(ValueError, match="cell"):
            GeneratorConfig(**cfg)

    def test_group_split_must_cover_labels(self):
        cfg = default_generator_config().model_dump()
        cfg["groups"] = {"first_only": 1, "second_only": 1, "joint": 1}
        with pytest.raises(ValueError, match="groups"):
            GeneratorConfig(**cfg)

    def test_default_is_valid_desk_scale(self):
        cfg = default_generator_config()
        assert cfg.num_samples == 2500
        assert cfg.num_labels == 12
        assert cfg.cell_side == 4


class TestGenerateArrays:
    def test_clean_single_group1_class(self):
        """sigma=0, q=0: a present first-group class paints exactly one
        amplitude-A cell in modality 0 and nothing in modality 1."""
        cfg = small_generator_config(
            noise_sigma=0.0, decoy_prob=0.0, num_samples=64, seed=5
        )
        images, labels = generate_arrays(cfg)
        k = 0  # first-group class
        side = cfg.cell_side
        for i in range(64):
            others = [j for j in range(cfg.num_labels) if j != k]
            if labels[i, k] == 1 and not labels[i, others].any():
                assert images[0][i].sum() == side * side * cfg.amplitude
                assert np.count_nonzero(images[0][i]) == side * side
                assert not images[1][i].any()
                break
        else:
            pytest.fail("no sample with exactly this class present")

    def test_no_decoys_make_joint_classes_single_modality_inferable(self):
        """q=0: pattern in either modality <=> label on, for joint classes."""
        cfg = small_generator_config(noise_sigma=0.0, decoy_prob=0.0, num_samples=128)
        images, labels = generate_arrays(cfg)
        k = cfg.num_labels - 1  # a joint class
        from sctfusion.datagen import _class_cell

        for j in (0, 1):
            rows, cols, ch = _class_cell(cfg, k, j)
            present = images[j][:, rows, cols, ch].max(axis=(1, 2)) > cfg.amplitude / 2
            np.testing.assert_array_equal(present, labels[:, k] == 1)

    def test_joint_observation_fully_determining_with_decoys(self):
        """sigma=0, q>0: both modalities showing the pattern <=> label on
        (a decoy stamps exactly one modality)."""
        cfg = small_generator_config(noise_sigma=0.0, decoy_prob=0.7, num_samples=256)
        images, labels = generate_arrays(cfg)
        from sctfusion.datagen import _class_cell

        k = cfg.num_labels - 1
        hits = []
        for j in (0, 1):
            rows, cols, ch = _class_cell(cfg, k, j)
            hits.append(images[j][:, rows, cols, ch].max(axis=(1, 2)) > cfg.amplitude / 2)
        np.testing.assert_array_equal(hits[0] & hits[1], labels[:, k] == 1)

    def test_single_modality_bayes_posterior(self):
        """The construction implies P(y=1 | pattern in modality 0) =
        pi / (pi + (1-pi) q / 2) for a joint class: with pi=0.3, q=0.5 this is
        12/19 = 0.6315..., verified empirically."""
        pi, q = 0.3, 0.5
        posterior = pi / (pi + (1 - pi) * q / 2)
        assert posterior == pytest.approx(12 / 19, abs=1e-12)

        cfg = small_generator_config(
            noise_sigma=0.0, decoy_prob=q, presence_prior=pi, num_samples=20_000, seed=2
        )
        images, labels = generate_arrays(cfg)
        from sctfusion.datagen import _class_cell

        k = cfg.num_labels - 1
        rows, cols, ch = _class_cell(cfg, k, 0)
        pattern = images[0][:, rows, cols, ch].max(axis=(1, 2)) > cfg.amplitude / 2
        empirical = labels[pattern, k].mean()
        assert empirical == pytest.approx(posterior, abs=0.02)

    def test_group2_leaves_modality0_untouched(self):
        cfg = small_generator_config(noise_sigma=0.0, decoy_prob=0.0, num_samples=64, seed=7)
        images, labels = generate_arrays(cfg)
        k = cfg.groups.first_only  # first second-group class
        from sctfusion.datagen import _class_cell

        rows, cols, ch = _class_cell(cfg, k, 0)
        cell = images[0][:, rows, cols, ch]
        present = labels[:, k] == 1
        assert not cell[present].any()

    def test_determinism(self):
        cfg = small_generator_config()
        a_images, a_labels = generate_arrays(cfg)
        b_images, b_labels = generate_arrays(cfg)
        np.testing.assert_array_equal(a_labels, b_labels)
        for a, b in zip(a_images, b_images):
            np.testing.assert_array_equal(a, b)


class TestDiskFormat:
    def test_roundtrip_bitwise(self, tmp_path):
        cfg = small_generator_config()
        images, labels = generate_arrays(cfg)
        generate_dataset(cfg, tmp_path / "ds")
        ds = load_dataset(tmp_path / "ds")
        np.testing.assert_array_equal(ds.labels, labels)
        for a, b in zip(ds.images, images):
            np.testing.assert_array_equal(a, b)
        assert ds.modality_names == ["m0", "m1"]
        assert len(ds) == cfg.num_samples

    def test_identical_config_gives_identical_files(self, tmp_path):
        cfg = small_generator_config()
        generate_dataset(cfg, tmp_path / "a")
        generate_dataset(cfg, tmp_path / "b")
        assert manifest_checksum(tmp_path / "a") == manifest_checksum(tmp_path / "b")
        for name in ("modality_0.bin", "modality_1.bin", "labels.bin", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_payload_layout_is_sample_major_row_major(self, tmp_path):
        cfg = small_generator_config(num_samples=3)
        images, _ = generate_arrays(cfg)
        generate_dataset(cfg, tmp_path / "ds")
        raw = np.frombuffer((tmp_path / "ds" / "modality_0.bin").read_bytes(), dtype="<f4")
        np.testing.assert_array_equal(raw, images[0].reshape(-1))

    def test_labels_are_bytes(self, tmp_path):
        cfg = small_generator_config(num_samples=4)
        generate_dataset(cfg, tmp_path / "ds")
        raw = (tmp_path / "ds" / "labels.bin").read_bytes()
        assert len(raw) == 4 * cfg.num_labels
        assert set(raw) <= {0, 1}

    def test_truncated_modality_payload(self, tmp_path):
        cfg = small_generator_config(num_samples=8)
        generate_dataset(cfg, tmp_path / "ds")
        f = tmp_path / "ds" / "modality_1.bin"
        f.write_bytes(f.read_bytes()[:-1])
        with pytest.raises(TruncatedPayloadError):
            load_dataset(tmp_path / "ds")

    def test_corrupted_payload_checksum(self, tmp_path):
        cfg = small_generator_config(num_samples=8)
        generate_dataset(cfg, tmp_path / "ds")
        f = tmp_path / "ds" / "modality_0.bin"
        raw = bytearray(f.read_bytes())
        raw[10] ^= 0xFF
        f.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatchError):
            load_dataset(tmp_path / "ds")

    def test_label_count_disagreement_is_consistency_error(self, tmp_path):
        cfg = small_generator_config(num_samples=8)
        generate_dataset(cfg, tmp_path / "ds")
        manifest_path = tmp_path / "ds" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["num_labels"] += 1
        manifest["label_names"].append("extra")
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(ManifestConsistencyError):
            load_dataset(tmp_path / "ds")

    def test_missing_payload_file(self, tmp_path):
        cfg = small_generator_config(num_samples=8)
        generate_dataset(cfg, tmp_path / "ds")
        (tmp_path / "ds" / "labels.bin").unlink()
        with pytest.raises(ManifestConsistencyError):
            load_dataset(tmp_path / "ds")

    def test_subset_and_modality_selection(self, tmp_path):
        cfg = small_generator_config(num_samples=10)
        generate_dataset(cfg, tmp_path / "ds")
        ds = load_dataset(tmp_path / "ds")
        sub = ds.subset(2, 7)
        assert len(sub) == 5
        np.testing.assert_array_equal(sub.labels, ds.labels[2:7])
        picked = ds.select_modalities(["m1"])
        assert picked.modality_names == ["m1"]
        np.testing.assert_array_equal(picked.images[0], ds.images[1])
        with pytest.raises(ConfigError):
            ds.select_modalities(["nope"])


class TestAugmentations:
    def _ones_sample(self, n=2, h=8, w=8):
        return [np.ones((h, w, 1 + j), dtype=np.float32) for j in range(n)]

    def test_identity_configuration(self):
        cfg = AugmentConfig(sensor_drop_prob=0.0, flip=False, max_shift=0)
        rng = np.random.default_rng(0)
        images = [np.arange(64, dtype=np.float32).reshape(8, 8, 1)]
        out = augment_sample(images, cfg, rng)
        np.testing.assert_array_equal(out[0], images[0])

    def test_drop_all_retains_exactly_one(self):
        cfg = AugmentConfig(sensor_drop_prob=1.0, flip=False, max_shift=0)
        rng = np.random.default_rng(1)
        for _ in range(50):
            out = augment_sample(self._ones_sample(), cfg, rng)
            alive = [bool(o.any()) for o in out]
            assert sum(alive) == 1

    def test_drop_rate_matches_retain_one_adjusted_expectation(self):
        """Monte-Carlo: per-modality drop frequency p*(1 - p/2) +- 0.01 for
        N=2 at p=0.25."""
        p = 0.25
        cfg = AugmentConfig(sensor_drop_prob=p, flip=False, max_shift=0)
        rng = np.random.default_rng(2)
        n_trials = 100_000
        drops = np.zeros(2)
        sample = self._ones_sample(h=2, w=2)
        for _ in range(n_trials):
            out = augment_sample(sample, cfg, rng)
            for j in range(2):
                drops[j] += not out[j].any()
        expected = p * (1 - p / 2)
        assert abs(drops[0] / n_trials - expected) < 0.01
        assert abs(drops[1] / n_trials - expected) < 0.01

    def test_flips_are_exact_reflections(self):
        cfg = AugmentConfig(sensor_drop_prob=0.0, flip=True, max_shift=0)
        image = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
        seen = set()
        rng = np.random.default_rng(3)
        for _ in range(100):
            out = augment_sample([image], cfg, rng)[0]
            for name, variant in {
                "id": image,
                "h": image[:, ::-1],
                "v": image[::-1, :],
                "hv": image[::-1, ::-1],
            }.items():
                if np.array_equal(out, variant):
                    seen.add(name)
        assert seen == {"id", "h", "v", "hv"}

    def test_shift_zero_pads(self):
        cfg = AugmentConfig(sensor_drop_prob=0.0, flip=False, max_shift=2)
        image = np.ones((5, 5, 1), dtype=np.float32)
        rng = np.random.default_rng(4)
        total = image.sum()
        shifted_seen = False
        for _ in range(50):
            out = augment_sample([image], cfg, rng)[0]
            assert out.shape == image.shape
            assert out.sum() <= total
            if out.sum() < total:
                shifted_seen = True
                assert set(np.unique(out)) <= {0.0, 1.0}
        assert shifted_seen

    def test_oversized_shift_rejected(self):
        cfg = AugmentConfig(sensor_drop_prob=0.0, flip=False, max_shift=8)
        with pytest.raises(ConfigError):
            augment_sample([np.ones((8, 8, 1), dtype=np.float32)], cfg,
                           np.random.default_rng(0))

    def test_modalities_augmented_independently(self):
        cfg = AugmentConfig(sensor_drop_prob=0.0, flip=True, max_shift=0)
        image = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
        rng = np.random.default_rng(5)
        differs = False
        for _ in range(50):
            out = augment_sample([image, image.copy()], cfg, rng)
            if not np.array_equal(out[0], out[1]):
                differs = True
                break
        assert differs
