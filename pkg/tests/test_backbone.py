import numpy as np
import pytest

from tractfusion.autonet import model_gradcheck
from tractfusion.backbone import GLOBAL_DIM, Backbone, pairwise_features
from tractfusion.errors import ShapeError


def batch(rng, b=3, k=4, p=6):
    return {"target": rng.normal(size=(b, p, 3)), "neighbors": rng.normal(size=(b, k, p, 3))}


class TestPairwiseFeatures:
    def test_index_oracle(self, rng):
        x = batch(rng)
        out = pairwise_features(x["target"], x["neighbors"])
        assert out.shape == (3, 4, 6, 6)
        for b in range(3):
            for k in range(4):
                for i in range(6):
                    np.testing.assert_array_equal(out[b, k, i, :3], x["target"][b, i])
                    np.testing.assert_array_equal(out[b, k, i, 3:], x["neighbors"][b, k, i])

    def test_identical_neighbor(self, rng):
        t = rng.normal(size=(2, 5, 3))
        out = pairwise_features(t, np.repeat(t[:, None], 3, axis=1))
        np.testing.assert_array_equal(out[..., :3], out[..., 3:])

    def test_zero_target(self, rng):
        out = pairwise_features(np.zeros((1, 5, 3)), rng.normal(size=(1, 2, 5, 3)))
        np.testing.assert_array_equal(out[..., :3], 0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError, match="pairwise_features"):
            pairwise_features(rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 3, 4, 3)))


class TestBackbone:
    def test_widths(self, rng):
        m = Backbone("tractcloud", rng)
        g, logits = m.encode(**batch(rng))
        assert g.shape == (3, GLOBAL_DIM) and logits.shape == (3, 4)
        names = [p.name for p in m.store["backbone"]]
        assert names[0].startswith("pair.0") and names[-1].startswith("head.2")

    def test_neighbor_permutation_exact(self, rng):
        m = Backbone("tractcloud", rng)
        x = batch(rng, k=7)
        perm = rng.permutation(7)
        a = m.forward(**x)
        b = m.forward(x["target"], x["neighbors"][:, perm])
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("kind", ["tractcloud", "pointnet"])
    def test_global_feature_point_permutation(self, rng, kind):
        m = Backbone(kind, rng)
        x = batch(rng)
        perm = rng.permutation(6)
        g1, _ = m.encode(**x)
        g2, _ = m.encode(x["target"][:, perm], x["neighbors"][:, :, perm])
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-12)

    def test_pointnet_ignores_neighbors(self, rng):
        m = Backbone("pointnet", rng)
        t = rng.normal(size=(2, 5, 3))
        ref = m.forward(t)
        np.testing.assert_array_equal(m.forward(t, np.full((2, 4, 5, 3), np.nan)), ref)
        assert not m.uses_neighbors

    @pytest.mark.parametrize("kind", ["tractcloud", "pointnet"])
    def test_deterministic(self, kind):
        x = batch(np.random.default_rng(5))
        a = Backbone(kind, np.random.default_rng(1)).forward(**x)
        b = Backbone(kind, np.random.default_rng(1)).forward(**x)
        assert np.all(np.isfinite(a))
        np.testing.assert_array_equal(a, b)

    def test_untrained_loss_near_uniform(self, rng):
        from tractfusion.autonet import softmax_xent
        m = Backbone("tractcloud", rng)
        loss, _ = softmax_xent(m.forward(**batch(rng, b=16)), np.arange(16) % 4, None)
        assert abs(loss - np.log(4)) < 0.2

    def test_errors(self, rng):
        m = Backbone("tractcloud", rng)
        with pytest.raises(ShapeError, match="neighbors required"):
            m.forward(rng.normal(size=(2, 5, 3)))
        with pytest.raises(ShapeError, match="target shape"):
            m.forward(rng.normal(size=(2, 5, 2)), rng.normal(size=(2, 3, 5, 2)))
        with pytest.raises(ValueError, match="unknown backbone"):
            Backbone("dgcnn")


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["tractcloud", "pointnet"])
def test_backbone_gradcheck(kind, seed):
    rng = np.random.default_rng(seed)
    m = Backbone(kind, rng)
    # nonzero biases so ReLU kinks are not hit at exactly zero
    for p in m.store["backbone"]:
        if p.name.endswith(".b"):
            p.value[:] = rng.normal(0, 0.05, size=p.shape)
    x = batch(rng, b=2, k=3, p=4)
    if kind == "pointnet":
        x.pop("neighbors")
    stats = {}
    err = model_gradcheck(m, x, rng.integers(0, 4, 2), rng.uniform(0.5, 2, 4), rng=rng,
                          stats=stats)
    assert err < 1e-4
    assert stats["skipped"] <= 0.1 * (stats["checked"] + stats["skipped"])
