import numpy as np
import numpy.testing as npt
import pytest

from orion3d.layers import softmax
from orion3d.model import HeadOutputs, OrientationScheme, build_network, grids_to_batch
from orion3d.voting import VoteResult, vote_classify
from orion3d.voxel import GridSpec, rotate_points, voxelize

SMALL = GridSpec(total=16, object_extent=12, padding=2)


class FakeNet:
    """Returns scripted class probabilities row by row (as log-probs)."""

    def __init__(self, prob_rows):
        self.rows = np.asarray(prob_rows, dtype=np.float64)
        self.dtype = np.dtype(np.float32)
        self.calls = 0

    def forward(self, x, mode="eval", rng=None, retain=False):
        n = x.shape[0]
        logits = np.log(self.rows[:n])
        self.calls += 1
        return HeadOutputs(logits.astype(np.float32), None)


def small_net(seed=0):
    scheme = OrientationScheme.from_levels([12, 6, 1])
    return build_network("baseline", 3, scheme, seed=seed, grid_extent=16)


def cloud(seed=0, n=120):
    return np.random.default_rng(seed).standard_normal((n, 3)) * [2.0, 1.0, 0.5]


def test_single_rotation_equals_plain_classification():
    net = small_net()
    c = cloud()
    result = vote_classify(net, c, rotations=1, grid_spec=SMALL)
    grid = voxelize(rotate_points(c, 0.0), SMALL)
    heads = net.forward(grids_to_batch([grid], net.dtype), mode="eval")
    probs = softmax(heads.class_logits.astype(np.float64))[0]
    npt.assert_array_equal(result.summed_scores, probs)
    assert result.final_class == int(np.argmax(probs))


def test_score_sum_arithmetic():
    fake = FakeNet([[0.6, 0.4], [0.3, 0.7]])
    result = vote_classify(fake, cloud(), rotations=2, grid_spec=SMALL)
    npt.assert_allclose(result.summed_scores, [0.9, 1.1], rtol=1e-6)
    assert result.final_class == 1
    npt.assert_array_equal(result.per_rotation_argmax, [0, 1])


def test_rotation_order_permutation_invariant_bitwise():
    net = small_net()
    c = cloud(3)
    angles = [0.0, np.pi / 2, np.pi, 3 * np.pi / 2]
    a = vote_classify(net, c, rotations=angles, grid_spec=SMALL)
    b = vote_classify(net, c, rotations=angles[::-1], grid_spec=SMALL)
    cidx = vote_classify(net, c, rotations=[angles[i] for i in (2, 0, 3, 1)],
                         grid_spec=SMALL)
    npt.assert_array_equal(a.summed_scores, b.summed_scores)
    npt.assert_array_equal(a.summed_scores, cidx.summed_scores)
    assert a.final_class == b.final_class == cidx.final_class


def test_monotonicity_unanimous_winner():
    fake = FakeNet([[0.1, 0.2, 0.7], [0.2, 0.3, 0.5], [0.05, 0.35, 0.6]])
    result = vote_classify(fake, cloud(), rotations=3, grid_spec=SMALL)
    assert result.final_class == 2
    assert np.all(result.per_rotation_argmax == 2)


def test_tie_breaks_toward_lower_index():
    fake = FakeNet([[0.5, 0.5]])
    result = vote_classify(fake, cloud(), rotations=1, grid_spec=SMALL)
    assert result.final_class == 0


def test_rejects_zero_rotations():
    with pytest.raises(ValueError, match="rotation"):
        vote_classify(small_net(), cloud(), rotations=0, grid_spec=SMALL)
    with pytest.raises(ValueError, match="rotation"):
        vote_classify(small_net(), cloud(), rotations=[], grid_spec=SMALL)


def test_uniform_angles_span_circle():
    net = small_net()
    result = vote_classify(net, cloud(5), rotations=6, grid_spec=SMALL)
    npt.assert_allclose(result.angles, np.arange(6) * np.pi / 3, rtol=1e-12)
    assert isinstance(result, VoteResult)
