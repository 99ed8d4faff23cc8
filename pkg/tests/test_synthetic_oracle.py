import numpy as np
import pytest
from pydantic import ValidationError as PydanticValidationError

from src.semantic_mapper.tools.exceptions import FormatError, ValidationError
from src.semantic_mapper.tools.geometry_map import Pose, voxel_centers
from src.semantic_mapper.tools.labels import Label
from src.semantic_mapper.tools.semantic_fusion import project_point
from src.semantic_mapper.tools.synthetic_oracle import (
    NoiseSpec,
    Primitive,
    SceneFile,
    SceneSpec,
    SensorSpec,
    SyntheticFrameSource,
    frame_surface_samples,
    generate_ground_truth,
    load_scene,
    moving_trace_keys,
    simulate_frame,
    straight_trajectory,
    write_scene,
)


def inside(points: np.ndarray, box: Primitive) -> np.ndarray:
    return np.all((points >= np.asarray(box.minimum)) & (points < np.asarray(box.maximum)), axis=1)


class TestPrimitives:
    """シーン要素のテスト"""

    def test_empty_box_rejected(self):
        """体積0の箱は ValidationError"""
        with pytest.raises(ValidationError):
            Primitive(Label.Road, (0.0, 0.0, 0.0), (1.0, 0.0, 1.0))

    def test_unknown_label_rejected(self):
        """Unknown ラベルの箱は作れない"""
        with pytest.raises(ValidationError):
            Primitive(Label.Unknown, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def test_scene_needs_trajectory(self):
        """軌跡が空のシーンは ValidationError"""
        with pytest.raises(ValidationError):
            SceneSpec([], [], [])

    def test_straight_trajectory_heading(self):
        """yaw の向きで step ずつ進む"""
        poses = straight_trajectory(3, start=(0.0, 0.0, 1.7), step=(1.0, 0.0, 0.0), yaw=np.pi / 2)
        assert [pose.frame_index for pose in poses] == [0, 1, 2]
        np.testing.assert_allclose(poses[2].translation, [2.0, 0.0, 1.7])
        np.testing.assert_allclose(poses[0].apply(np.array([1.0, 0.0, 0.0])), [[0.0, 1.0, 1.7]], atol=1e-12)
        with pytest.raises(ValidationError):
            straight_trajectory(0)

    def test_noise_pairs_validated(self):
        """同じラベル同士や重複したペアは不可"""
        with pytest.raises(PydanticValidationError):
            NoiseSpec(confusion_pairs=[(Label.Road, Label.Road)])
        with pytest.raises(PydanticValidationError):
            NoiseSpec(confusion_pairs=[(Label.Road, Label.Sidewalk), (Label.Road, Label.Building)])


class TestGroundTruth:
    """正解マップのテスト"""

    def test_unit_cube(self):
        """[0,1)^3 の箱は 0.2m ボクセルで 5x5x5"""
        scene = SceneSpec([Primitive(Label.Road, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))], [], [Pose.identity()])
        truth = generate_ground_truth(scene, 0.2)
        assert len(truth) == 125
        assert truth.label_counts()[Label.Road] == 125
        cell = next(iter(truth.cells.values()))
        assert cell.distribution[int(Label.Road)] == 1.0

    def test_later_box_wins_overlap(self):
        """重なる部分は後の箱のラベル"""
        scene = SceneSpec(
            [
                Primitive(Label.Road, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
                Primitive(Label.Vehicle, (0.4, 0.4, 0.4), (1.0, 1.0, 1.0)),
            ],
            [],
            [Pose.identity()],
        )
        counts = generate_ground_truth(scene, 0.2).label_counts()
        assert counts[Label.Vehicle] == 27
        assert counts[Label.Road] == 125 - 27

    def test_moving_objects_not_in_truth(self, moving_scene):
        """移動物体の軌跡は正解マップに含まれない"""
        truth = generate_ground_truth(moving_scene, 0.2)
        trace = moving_trace_keys(moving_scene, SensorSpec())
        assert trace
        assert not (trace & truth.keys())


class TestSensorSimulation:
    """合成センサのテスト"""

    def test_samples_respect_box_and_range(self, tiny_scene, small_sensor):
        """サンプルのボクセル中心は属する箱の内部、距離は max_range 以内"""
        samples = frame_surface_samples(tiny_scene, 0, small_sensor)
        assert samples.keys.shape[0] > 0
        centers = voxel_centers(samples.keys, small_sensor.voxel_size)
        for index, box in enumerate(tiny_scene.boxes_at(0)):
            mine = samples.primitive == index
            assert np.all(inside(centers[mine], box))
        origin = tiny_scene.trajectory[0].translation
        assert np.all(np.linalg.norm(samples.world - origin, axis=1) <= small_sensor.max_range + 1e-4)

    def test_frame_index_out_of_range(self, tiny_scene, small_sensor):
        """軌跡外のフレーム番号は ValidationError"""
        with pytest.raises(ValidationError):
            frame_surface_samples(tiny_scene, 5, small_sensor)

    def test_deterministic_per_frame(self, tiny_scene, small_sensor):
        """同じフレームは生成順に関係なく同じ結果"""
        noise = NoiseSpec(confusion_rate=0.3)
        direct = simulate_frame(tiny_scene, 1, small_sensor, noise)
        simulate_frame(tiny_scene, 0, small_sensor, noise)
        again = simulate_frame(tiny_scene, 1, small_sensor, noise)
        np.testing.assert_array_equal(direct.cloud.points, again.cloud.points)
        np.testing.assert_array_equal(direct.segmentation.scores, again.segmentation.scores)

        from_source = SyntheticFrameSource(tiny_scene, small_sensor, noise).get_frame(1)
        np.testing.assert_array_equal(from_source.segmentation.scores, direct.segmentation.scores)

    def test_cloud_is_in_sensor_frame(self, tiny_scene, small_sensor):
        """点群はセンサ座標で、姿勢で戻すと箱の近くに来る"""
        frame = simulate_frame(tiny_scene, 1, small_sensor)
        world = frame.pose.apply(frame.cloud.points)
        near_any = np.zeros(len(world), dtype=bool)
        for box in tiny_scene.primitives:
            lo = np.asarray(box.minimum) - 1e-3
            hi = np.asarray(box.maximum) + 1e-3
            near_any |= np.all((world >= lo) & (world <= hi), axis=1)
        assert near_any.all()

    def test_noise_free_scores_are_one_hot(self, tiny_scene, small_sensor):
        """ノイズ無し・softmax_sharpness=inf なら描画された画素は one-hot"""
        noise = NoiseSpec(confusion_rate=0.0, softmax_sharpness=float("inf"))
        scores = simulate_frame(tiny_scene, 0, small_sensor, noise).segmentation.scores
        peaks = scores.max(axis=2)
        assert np.all(np.isclose(peaks, 0.2, atol=1e-6) | (peaks == 1.0))
        assert (peaks == 1.0).any()

    def test_confusion_swaps_pair_labels(self, tiny_scene, small_sensor):
        """混同率1なら建物の画素は植生として観測される"""
        noise = NoiseSpec(confusion_rate=1.0, softmax_sharpness=float("inf"))
        seg = simulate_frame(tiny_scene, 0, small_sensor, noise).segmentation
        winners = np.argmax(seg.scores, axis=2)
        labelled = seg.scores.max(axis=2) == 1.0
        assert not (winners[labelled] == int(Label.Building)).any()
        assert (winners[labelled] == int(Label.Vegetation)).any()

    def test_raycast_hides_occluded_boxes(self, small_sensor):
        """raycast では壁の裏の箱がサンプルされず、splat では残る"""
        wall = Primitive(Label.Building, (10.0, -20.0, -10.0), (10.4, 20.0, 10.0))
        hidden = Primitive(Label.Vegetation, (12.0, -2.0, -1.0), (13.0, 2.0, 1.0))
        scene = SceneSpec([wall, hidden], [], [Pose.identity()])

        raycast = simulate_frame(scene, 0, small_sensor.model_copy(update={"visibility": "raycast"}))
        assert not inside(raycast.cloud.points, hidden).any()
        center = project_point(small_sensor.camera(), np.array([11.0, 0.0, 0.0]))
        column, row = int(center[0]), int(center[1])
        assert int(np.argmax(raycast.segmentation.scores[column, row])) == int(Label.Building)

        splat = simulate_frame(scene, 0, small_sensor)
        assert inside(splat.cloud.points, hidden).any()


class TestSceneFile:
    """シーンファイルのテスト"""

    def test_demo_scene(self, demo_scene_file):
        """同梱のデモシーンを読み込める"""
        scene, noise, sensor = load_scene(demo_scene_file)
        assert len(scene.primitives) == 5
        assert len(scene.moving_objects) == 1
        assert scene.moving_objects[0].velocity == (2.0, 0.0, 0.0)
        assert len(scene.trajectory) == 6
        np.testing.assert_array_equal(scene.trajectory[3].translation, [3.0, 0.0, 1.7])
        assert noise.confusion_rate == 0.1
        assert noise.confusion_pairs == [(Label.Building, Label.Vegetation)]
        assert sensor.voxel_size == 0.2
        assert sensor.visibility == "splat"

    def test_write_then_load(self, temp_dir, moving_scene):
        """書き出したシーンファイルを読み戻すと同じ内容"""
        original = SceneFile(moving_scene, NoiseSpec(confusion_rate=0.25), SensorSpec(max_range=30.0))
        path = temp_dir / "scene.txt"
        write_scene(original, path)
        scene, noise, sensor = load_scene(path)
        assert scene.primitives == moving_scene.primitives
        assert scene.moving_objects == moving_scene.moving_objects
        assert scene.seed == moving_scene.seed
        for loaded, expected in zip(scene.trajectory, moving_scene.trajectory):
            np.testing.assert_array_equal(loaded.as_matrix(), expected.as_matrix())
        assert noise == original.noise
        assert sensor == original.sensor

    @pytest.mark.parametrize(
        "text, line_number",
        [
            ("[scene]\nseed = 1\n[primitives]\nRoad 0 0 0 1 1\n", 4),
            ("[bogus]\n", 1),
            ("seed = 1\n", 1),
            ("[primitives]\nBicycle 0 0 0 1 1 1\n", 2),
            ("[trajectory]\n1 0 0 0 0 1 0 0 0 0 1 0\n[noise]\nconfusion_rate = 2\n", 3),
            ("[scene]\nseed = 1.5\n[trajectory]\n1 0 0 0 0 1 0 0 0 0 1 0\n", 2),
            ("[trajectory]\n1 0 0 0 0 1 0 0 0 0 1 0\n[noise]\nsharpness = 4\n", 3),
        ],
    )
    def test_errors_carry_line_numbers(self, temp_dir, text, line_number):
        """不正なシーンファイルは行番号付きの FormatError"""
        path = temp_dir / "scene.txt"
        path.write_text(text)
        with pytest.raises(FormatError) as exc_info:
            load_scene(path)
        assert exc_info.value.line_number == line_number
