import numpy as np
import pytest

from tractfusion.dataset import (
    dataset_hash,
    load_dataset,
    load_features,
    prepare_features,
    write_dataset,
    zscore_rows,
)
from tractfusion.errors import DataError
from tractfusion.fmri import denoise
from tractfusion.streamlines import Streamline


class TestZscore:
    def test_constant_rows_map_to_zero(self):
        out = zscore_rows(np.array([[3.0] * 5, [0.0] * 5, [1e9] * 5]))
        np.testing.assert_array_equal(out, 0)

    def test_moments(self, rng):
        out = zscore_rows(rng.normal(4, 3, size=(6, 50)))
        np.testing.assert_allclose(out.mean(1), 0, atol=1e-12)
        np.testing.assert_allclose(out.std(1), 1, atol=1e-12)


class TestFeatures:
    def test_shapes(self, tiny_feats, tiny_phantom):
        n = len(tiny_phantom[0])
        assert tiny_feats.points.shape == (n, 25, 3)
        assert tiny_feats.neighbor_idx.shape == (n, 6)
        assert tiny_feats.endpoints.shape == (n, 6)
        assert tiny_feats.frames == 32
        np.testing.assert_array_equal(tiny_feats.ids, np.arange(n))

    def test_orientation_invariant(self, tiny_phantom, tiny_feats):
        bundle, grid, mask = tiny_phantom
        flipped = prepare_features([s.reversed() for s in bundle], grid, mask, k=6)
        for name in ("points", "neighbor_idx", "neighbor_flip", "endpoints", "sig_a", "sig_b"):
            np.testing.assert_array_equal(getattr(flipped, name), getattr(tiny_feats, name))

    def test_neighbor_inputs_flipped_to_target(self, tiny_feats):
        from tractfusion.streamlines import fit_normalization
        tf = fit_normalization(tiny_feats.points)
        x = tiny_feats.backbone_inputs(np.arange(4), tf)
        for b in range(4):
            for k in range(tiny_feats.k):
                j = tiny_feats.neighbor_idx[b, k]
                pts = tiny_feats.points[j][::-1] if tiny_feats.neighbor_flip[b, k] \
                    else tiny_feats.points[j]
                np.testing.assert_allclose(x["neighbors"][b, k], tf.apply(pts), atol=1e-12)

    def test_denoise_not_repeated(self, tiny_phantom, tiny_feats):
        bundle, grid, mask = tiny_phantom
        pre = prepare_features(bundle, denoise(grid, mask), mask, k=6)
        np.testing.assert_array_equal(pre.sig_a, tiny_feats.sig_a)

    def test_unlabeled(self, tiny_phantom):
        bundle, grid, mask = tiny_phantom
        bare = [Streamline(s.id, s.points) for s in bundle]
        feats = prepare_features(bare, grid, mask, k=6)
        assert feats.labels is None
        with pytest.raises(DataError, match="unlabeled"):
            feats.require_labels()

    def test_empty(self, tiny_phantom):
        with pytest.raises(DataError, match="empty"):
            prepare_features([], tiny_phantom[1], tiny_phantom[2])


class TestDirectory:
    def test_roundtrip(self, tiny_phantom, tiny_feats, tmp_path):
        write_dataset(tmp_path / "d", *tiny_phantom, provenance={"x": 1})
        raw = load_dataset(tmp_path / "d")
        assert len(raw.bundle) == len(tiny_phantom[0])
        bundle, grid, mask = tiny_phantom
        # grids are stored as f32
        as_f32 = grid.replace(grid.data.astype(np.float32))
        np.testing.assert_array_equal(raw.grid.data, as_f32.data)
        feats = load_features(tmp_path / "d", k=6)
        ref = prepare_features(bundle, as_f32, mask, k=6)
        np.testing.assert_array_equal(feats.sig_a, ref.sig_a)
        np.testing.assert_array_equal(feats.points, ref.points)
        np.testing.assert_allclose(feats.sig_a, tiny_feats.sig_a, atol=1e-5)

    def test_hash_stable_and_sensitive(self, tiny_phantom, tmp_path):
        write_dataset(tmp_path / "a", *tiny_phantom)
        write_dataset(tmp_path / "b", *tiny_phantom)
        assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")
        (tmp_path / "b" / "streamlines.jsonl").write_text(
            (tmp_path / "a" / "streamlines.jsonl").read_text().replace('"id": 0,', '"id": 999,'))
        assert dataset_hash(tmp_path / "a") != dataset_hash(tmp_path / "b")

    def test_missing(self, tmp_path):
        with pytest.raises(DataError, match="streamlines.jsonl"):
            load_dataset(tmp_path)
