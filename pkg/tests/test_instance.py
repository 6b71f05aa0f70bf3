import numpy as np
import pytest

from ssnet.errors import ConfigurationError, DimensionError
from ssnet.gradcheck import interior_offsets
from ssnet.igum import IgumConfig
from ssnet.instance import (
    L1,
    L2,
    QUANTIZE_SUM,
    SMOOTH_L1,
    CentroidTargets,
    CoordinateMap,
    InstanceLabeling,
    centroid_targets,
    coordinate_grid,
    diffuse,
    extract_instances,
    fuse_semantic,
    instance_confidences,
    instance_loss,
    relabel_by_area,
    scaled_area_threshold,
    upsample_instance_output,
)
from ssnet.metrics import meanshift_labeling
from ssnet.sampler import BILINEAR, NEAREST, GuidanceOffsetTable, normalize
from ssnet.tensor import Tape, Tensor, grad_check, mul


def toward_centres(instances: np.ndarray) -> tuple[np.ndarray, dict[int, tuple[int, int]]]:
    """Unit pixel steps from every instance pixel toward its instance's centre pixel."""
    height, width = instances.shape
    offsets = np.zeros((1, 2, height, width))
    centres = {}
    for instance_id in range(1, int(instances.max()) + 1):
        rows, cols = np.nonzero(instances == instance_id)
        cy, cx = int(round(rows.mean())), int(round(cols.mean()))
        centres[instance_id] = (cy, cx)
        step_x = np.sign(cx - cols) * (2.0 / (width - 1))
        step_y = np.sign(cy - rows) * (2.0 / (height - 1))
        offsets[0, 0, rows, cols] = step_x
        offsets[0, 1, rows, cols] = step_y
    return offsets, centres


def holding_centre(final: np.ndarray, instances: np.ndarray, instance_id: int, centre: tuple[int, int]) -> np.ndarray:
    height, width = instances.shape
    cx = normalize(np.array(float(centre[1])), width)
    cy = normalize(np.array(float(centre[0])), height)
    return (instances == instance_id) & np.isclose(final[0, 0], cx, atol=1e-12) & np.isclose(final[0, 1], cy, atol=1e-12)


class TestInstanceLabeling:
    def test_counts_and_areas(self):
        labels = InstanceLabeling.single(np.array([[0, 1, 1], [2, 2, 2]]))
        assert labels.count() == 2
        np.testing.assert_array_equal(labels.areas(), [2, 3])

    def test_ids_must_be_dense(self):
        with pytest.raises(DimensionError):
            InstanceLabeling.single(np.array([[0, 1, 3]]))


class TestCentroidTargets:
    def test_block_centre(self):
        labels = np.zeros((9, 9), dtype=np.int64)
        labels[2:5, 2:5] = 1
        targets = centroid_targets(InstanceLabeling.single(labels))
        expected = normalize(np.array(3.0), 9)
        np.testing.assert_allclose(targets.centers[0, :, 3, 3], [expected, expected])
        np.testing.assert_allclose(targets.centers[0, :, 2, 4], [expected, expected])
        assert targets.labeled_pixels == 9

    def test_symmetric_instance(self):
        labels = np.zeros((7, 7), dtype=np.int64)
        labels[1:6, 3] = 1
        labels[3, 1:6] = 1
        targets = centroid_targets(InstanceLabeling.single(labels))
        assert targets.centers[0, 0, 3, 3] == pytest.approx(0.0)
        assert targets.centers[0, 1, 1, 3] == pytest.approx(0.0)

    def test_background_only(self):
        targets = centroid_targets(InstanceLabeling.single(np.zeros((4, 4), dtype=np.int64)))
        assert targets.labeled_pixels == 0
        assert not targets.centers.any()

    def test_lower_resolution_frame(self):
        # column 3.5 of an 8-wide row lands on column 0.5 of a 2-wide frame
        labels = np.zeros((1, 8), dtype=np.int64)
        labels[0, 2:6] = 1
        targets = centroid_targets(InstanceLabeling.single(labels), frame_shape=(1, 2))
        assert targets.centers[0, 0, 0, 2] == pytest.approx(normalize(np.array(0.5), 2))

    def test_mask_is_binary(self):
        labels = np.zeros((5, 5), dtype=np.int64)
        labels[1:3, 1:4] = 1
        labels[4, :] = 2
        mask = centroid_targets(InstanceLabeling.single(labels)).mask
        assert set(np.unique(mask)) == {0.0, 1.0}
        np.testing.assert_array_equal(mask[0, 0], labels > 0)


class TestDiffuse:
    def test_zero_steps_and_zero_offsets_keep_grid(self, rng):
        grid = coordinate_grid(2, 5, 6).values.data
        random = GuidanceOffsetTable(Tensor(rng.uniform(-1, 1, (2, 2, 5, 6))))
        for mode in (NEAREST, BILINEAR):
            assert np.array_equal(diffuse(random, 0, mode).values.data, grid)
            assert np.array_equal(diffuse(GuidanceOffsetTable.zeros(2, 5, 6), 7, mode).values.data, grid)

    def test_unit_steps_reach_centre_in_radius_steps(self):
        instances = np.ones((1, 8), dtype=np.int64)
        offsets = np.zeros((1, 2, 1, 8))
        offsets[0, 0] = np.sign(3 - np.arange(8)) * (2.0 / 7)
        final = diffuse(GuidanceOffsetTable(Tensor(offsets)), 4, NEAREST).values.data
        np.testing.assert_array_equal(final[0, 0, 0], np.full(8, normalize(np.array(3.0), 8)))
        assert holding_centre(final, instances, 1, (0, 3)).all()

    def test_coverage_grows_monotonically(self):
        instances = np.zeros((16, 16), dtype=np.int64)
        instances[1:8, 2:9] = 1
        instances[10:15, 6:15] = 2
        offsets, centres = toward_centres(instances)
        table = GuidanceOffsetTable(Tensor(offsets))
        previous = {1: 0, 2: 0}
        for t in range(8):
            final = diffuse(table, t, NEAREST).values.data
            for instance_id, centre in centres.items():
                covered = holding_centre(final, instances, instance_id, centre).sum()
                assert covered >= previous[instance_id]
                previous[instance_id] = covered
        # Chebyshev radii are 3 and 4 pixels
        assert previous == {1: 49, 2: 45}

    def test_point_at_centre_single_step(self):
        height, width = 5, 5
        offsets = np.empty((1, 2, height, width))
        grid = coordinate_grid(1, height, width).values.data
        offsets[0, 0] = 0.0 - grid[0, 0]
        offsets[0, 1] = 0.0 - grid[0, 1]
        final = diffuse(GuidanceOffsetTable(Tensor(offsets)), 1, BILINEAR).values.data
        np.testing.assert_allclose(final, 0.0, atol=1e-15)

    def test_gradient_through_two_shared_steps(self, rng):
        offsets = Tensor(interior_offsets(rng, 4, 5))
        weights = Tensor(rng.normal(size=(1, 2, 4, 5)))
        program = lambda v: mul(diffuse(GuidanceOffsetTable(v), 2, BILINEAR).values, weights).sum()  # noqa: E731
        assert grad_check(program, offsets) < 1e-4

    def test_grid_gets_no_gradient(self, rng):
        raw = Tensor(interior_offsets(rng, 3, 3), requires_grad=True)
        with Tape() as tape:
            tape.backward(diffuse(GuidanceOffsetTable(raw), 3, BILINEAR).values.sum())
        assert raw.grad is not None
        assert len(tape.nodes) == 4

    def test_negative_steps(self):
        with pytest.raises(ConfigurationError):
            diffuse(GuidanceOffsetTable.zeros(1, 2, 2), -1, NEAREST)


class TestInstanceLoss:
    def one_pixel(self, error):
        pred = np.zeros((1, 2, 2, 2))
        pred[0, :, 0, 0] = error
        mask = np.zeros((1, 1, 2, 2))
        mask[0, 0, 0, 0] = 1.0
        return CoordinateMap(Tensor(pred)), CentroidTargets(np.zeros((1, 2, 2, 2)), mask)

    def test_zero_when_exact(self, rng):
        centres = rng.uniform(-1, 1, (1, 2, 3, 3))
        targets = CentroidTargets(centres, np.ones((1, 1, 3, 3)))
        for kind in (L2, L1, SMOOTH_L1):
            assert instance_loss(CoordinateMap(Tensor(centres)), targets, kind).item() == 0.0

    def test_three_four_five(self):
        pred, targets = self.one_pixel([0.3, 0.4])
        assert instance_loss(pred, targets, L2).item() == pytest.approx(0.5)
        assert instance_loss(pred, targets, L1).item() == pytest.approx(0.7)
        assert instance_loss(pred, targets, SMOOTH_L1).item() == pytest.approx(0.5 * (0.09 + 0.16))

    def test_empty_mask_is_zero(self):
        pred = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        targets = CentroidTargets(np.zeros((1, 2, 2, 2)), np.zeros((1, 1, 2, 2)))
        with Tape() as tape:
            loss = instance_loss(CoordinateMap(pred), targets)
            tape.backward(loss)
        assert loss.item() == 0.0
        assert not pred.grad.any()

    def test_smooth_l1_never_exceeds_l1(self, rng):
        pred = CoordinateMap(Tensor(rng.uniform(-1, 1, (2, 2, 6, 6))))
        mask = np.ones((2, 1, 6, 6))
        for _ in range(5):
            targets = CentroidTargets(rng.uniform(-1, 1, (2, 2, 6, 6)), mask)
            assert instance_loss(pred, targets, SMOOTH_L1).item() <= instance_loss(pred, targets, L1).item()

    @pytest.mark.parametrize("kind", [L2, L1, SMOOTH_L1])
    def test_gradients(self, rng, kind):
        pred = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        mask = np.zeros((1, 1, 4, 4))
        mask[0, 0, 1:3] = 1.0
        targets = CentroidTargets(rng.uniform(-1, 1, (1, 2, 4, 4)), mask)
        assert grad_check(lambda v: instance_loss(CoordinateMap(v), targets, kind), pred) < 1e-4

    def test_unknown_kind(self):
        pred, targets = self.one_pixel([0.1, 0.1])
        with pytest.raises(ConfigurationError):
            instance_loss(pred, targets, "huber")


class TestExtractInstances:
    def test_area_threshold(self):
        values = coordinate_grid(1, 1, 43).values.data.copy()
        values[0, :, 0, :40] = values[0, :, 0, 5][:, None]
        values[0, :, 0, 40:] = values[0, :, 0, 41][:, None]
        labels = extract_instances(CoordinateMap(Tensor(values)), area_threshold=5)
        assert labels.count() == 1
        assert (labels.labels[0, 0, :40] == 1).all()
        assert (labels.labels[0, 0, 40:] == 0).all()

    def test_undiffused_map_has_no_instances(self):
        labels = extract_instances(coordinate_grid(1, 6, 6), area_threshold=2)
        assert labels.count() == 0

    def test_ids_ordered_by_area(self):
        values = coordinate_grid(1, 1, 10).values.data.copy()
        values[0, :, 0, :3] = values[0, :, 0, 0][:, None]
        values[0, :, 0, 3:] = values[0, :, 0, 9][:, None]
        labels = extract_instances(CoordinateMap(Tensor(values)), area_threshold=1).labels[0, 0]
        np.testing.assert_array_equal(labels, [2] * 3 + [1] * 7)

    def test_perfect_diffusion_recovers_rectangles(self):
        instances = np.zeros((16, 16), dtype=np.int64)
        instances[1:8, 2:9] = 1
        instances[10:15, 6:15] = 2
        offsets, _ = toward_centres(instances)
        final = diffuse(GuidanceOffsetTable(Tensor(offsets)), 6, NEAREST)
        labels = extract_instances(final, area_threshold=10, mask=(instances > 0)[None]).labels[0]
        # ids are assigned by area, instance 1 (49 px) is the larger one
        np.testing.assert_array_equal(labels, instances)

    def test_sum_quantization_merges_diagonal_neighbours(self):
        values = coordinate_grid(1, 2, 2).values.data
        pixel = extract_instances(CoordinateMap(Tensor(values)), area_threshold=1)
        summed = extract_instances(CoordinateMap(Tensor(values)), area_threshold=1, quantization=QUANTIZE_SUM)
        assert pixel.count() == 4
        assert summed.count() == 3

    def test_agrees_with_meanshift_on_clusters(self, rng):
        height, width = 12, 12
        for _ in range(10):
            centres = [(2, 2), (2, 8), (8, 5)]
            assignment = rng.integers(0, 3, (height, width))
            jitter = rng.uniform(-0.45, 0.45, (2, height, width))
            cx = np.array([centres[k][1] for k in assignment.ravel()]).reshape(height, width) + jitter[0]
            cy = np.array([centres[k][0] for k in assignment.ravel()]).reshape(height, width) + jitter[1]
            values = np.stack([normalize(cx, width), normalize(cy, height)])[None]
            final = CoordinateMap(Tensor(values))
            mask = np.ones((1, height, width), dtype=bool)
            grouped = extract_instances(final, area_threshold=1).labels[0]
            clustered = meanshift_labeling(final, bandwidth=1.5, mask=mask).labels[0]
            pairs = set(zip(grouped.ravel().tolist(), clustered.ravel().tolist()))
            assert len(pairs) == len(set(grouped.ravel())) == len(set(clustered.ravel()))

    def test_mask_shape(self):
        with pytest.raises(DimensionError):
            extract_instances(coordinate_grid(1, 3, 3), mask=np.ones((1, 3, 4), dtype=bool))


class TestFuseAndConfidence:
    def test_fuse_keeps_thing_pixels_and_assigns_majority(self):
        labeling = InstanceLabeling.single(np.array([[1, 1, 1, 2], [1, 1, 2, 2]]))
        semantic = np.array([[[2, 2, 0, 3], [2, 3, 3, 3]]])
        fused, categories = fuse_semantic(labeling, semantic, thing_classes=(2, 3), area_threshold=1)
        np.testing.assert_array_equal(fused.labels[0], [[1, 1, 0, 2], [1, 1, 2, 2]])
        assert categories[0].tolist() == [2, 3]

    def test_fuse_applies_area_threshold(self):
        labeling = InstanceLabeling.single(np.array([[1, 1, 2]]))
        fused, categories = fuse_semantic(labeling, np.array([[[2, 2, 2]]]), (2,), area_threshold=2)
        np.testing.assert_array_equal(fused.labels[0], [[1, 1, 0]])
        assert categories[0].tolist() == [2]

    def test_confidence_is_relative_area(self):
        labeling = InstanceLabeling.single(np.array([[1, 1, 1, 1, 2, 2]]))
        np.testing.assert_allclose(instance_confidences(labeling)[0], [1.0, 0.5])

    def test_relabel_by_area_ties_break_on_key(self):
        np.testing.assert_array_equal(relabel_by_area(np.array([7, 7, 3, 3, -1]), 1), [2, 2, 1, 1, 0])

    def test_scaled_threshold(self):
        assert scaled_area_threshold(64, 8) == 1
        assert scaled_area_threshold(64, 2) == 16


class TestUpsampleInstanceOutput:
    def test_nearest_zero_offsets_preserves_values(self, rng):
        lowres = CoordinateMap(Tensor(rng.uniform(-1, 1, (1, 2, 3, 3))))
        out = upsample_instance_output(lowres, Tensor.zeros((1, 2, 3, 3)), IgumConfig(4, NEAREST))
        assert out.spatial_shape == (12, 12)
        assert set(out.values.data[0, 0].ravel()) == set(lowres.values.data[0, 0].ravel())

    def test_bilinear_matches_nearest_inside_constant_region(self):
        values = np.zeros((1, 2, 4, 4))
        values[0, 0] = 0.25
        values[0, 1] = -0.5
        lowres = CoordinateMap(Tensor(values))
        raw = Tensor(np.full((1, 2, 4, 4), 0.1))
        near = upsample_instance_output(lowres, raw, IgumConfig(4, NEAREST)).values.data
        bili = upsample_instance_output(lowres, raw, IgumConfig(4, BILINEAR)).values.data
        np.testing.assert_allclose(bili, near, atol=1e-15)
