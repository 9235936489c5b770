import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mifmatch.corpus import procedural_corpus
from mifmatch.estimator import BaseKnnMatcher, MIFNetMatcher
from mifmatch.geometry import compose_homography, warp_points
from mifmatch.training import warp_image

TINY = dict(image_size=64, max_kpts=24, feature_dim=16, layers=2, semantic_dim=8, gmm_k=2, epochs=1, batch_size=2)


@pytest.fixture(scope="module")
def images():
    return procedural_corpus(3, size=64, seed=33)


@pytest.fixture(scope="module")
def fitted(images):
    return MIFNetMatcher(config=TINY).fit(images)


def test_base_self_pair_identity():
    img = procedural_corpus(1, size=128, seed=2)[0]
    h, pm, mask = BaseKnnMatcher(max_kpts=128).fit().estimate(img, img)
    np.testing.assert_allclose(h, np.eye(3), atol=1e-6)
    assert mask.sum() == len(pm.matches) > 4


def test_base_recovers_small_rotation():
    img = procedural_corpus(1, size=128, seed=3)[0]
    gt = compose_homography((128, 128), angle_deg=8.0)
    warped = warp_image(img, gt)
    h, _, mask = BaseKnnMatcher(max_kpts=200).estimate(img, warped)
    probe = np.array([[40.0, 40.0], [90.0, 60.0], [64.0, 100.0]])
    assert mask.sum() >= 8
    np.testing.assert_allclose(warp_points(h, probe), warp_points(gt, probe), atol=2.0)


def test_params_round_trip():
    est = BaseKnnMatcher(ratio=0.6, max_kpts=50)
    assert est.get_params() == {"ratio": 0.6, "max_kpts": 50, "nms_radius": 4}
    assert clone(est).get_params() == est.get_params()
    assert set(MIFNetMatcher().get_params()) == {"config", "p_threshold", "min_matchability"}


def test_unfitted_network_raises(images):
    with pytest.raises(NotFittedError):
        MIFNetMatcher(config=TINY).match(images[0], images[1])


def test_fit_transform_predict(fitted, images):
    assert len(fitted.history_) > 0
    fa, fb = fitted.transform((images[0], images[1]))
    assert fa.dtype == np.float64 and fa.shape[1] == TINY["feature_dim"] == fb.shape[1]
    out = fitted.predict([(images[0], images[0]), (images[0], images[1])])
    assert len(out) == 2
    for matches in out:
        assert len({i for i, _, _ in matches}) == len(matches)


def test_save_load_same_matches(fitted, images, tmp_path):
    fitted.save(tmp_path / "m.ckpt")
    loaded = MIFNetMatcher.load(tmp_path / "m.ckpt")
    assert loaded.config_hash == fitted.config_hash
    a, b = fitted.transform((images[1], images[2])), loaded.transform((images[1], images[2]))
    np.testing.assert_array_equal(a[0], b[0])
    assert fitted.predict([(images[1], images[2])]) == loaded.predict([(images[1], images[2])])


def test_bad_image_rejected():
    with pytest.raises(ValueError):
        BaseKnnMatcher().match(np.zeros((4, 4, 3, 2)), np.zeros((8, 8)))
