import os
from unittest.mock import MagicMock, patch

import pytest

from src.semantic_mapper.cli import EXIT_CODES, build_parser, demo_scene_path, main
from src.semantic_mapper.nodes import MappingPipelineNodes
from src.semantic_mapper.tools.io_formats import deserialize_map, serialize_map
from src.semantic_mapper.tools.semantic_fusion import SemanticVoxelMap
from src.semantic_mapper.tools.synthetic_oracle import NoiseSpec, SceneFile, write_scene


@pytest.fixture
def scene_path(temp_dir, tiny_scene, small_sensor):
    """小さなシーンファイル"""
    path = temp_dir / "scene.txt"
    write_scene(SceneFile(tiny_scene, NoiseSpec(confusion_rate=0.1), small_sensor), path)
    return path


@pytest.fixture
def clean_env():
    """SEMMAP_* を取り除いた環境変数"""
    env = {key: value for key, value in os.environ.items() if not key.startswith("SEMMAP_")}
    with patch.dict(os.environ, env, clear=True):
        yield


def run_chain(root, workers: int) -> dict:
    """synth → build → refine → evaluate を実行して各出力のバイト列を返す"""
    data = root / "data"
    outputs = {
        "map": root / "map.txt",
        "refined": root / "refined.txt",
        "report": root / "report.txt",
    }
    scene = root.parent / "scene.txt"
    common = ["--workers", str(workers)]
    assert main(["synth", "--scene", str(scene), "--output-dir", str(data), *common]) == 0
    assert main(["build", "--input-dir", str(data), "--output", str(outputs["map"]), *common]) == 0
    assert main(["refine", "--input", str(outputs["map"]), "--output", str(outputs["refined"]), *common]) == 0
    assert main(
        [
            "evaluate",
            "--prediction", str(outputs["refined"]),
            "--truth", str(data / "ground_truth.map"),
            "--count-unmatched",
            "--observed-only",
            "--report", str(outputs["report"]),
        ]
    ) == 0
    return {name: path.read_bytes() for name, path in outputs.items()}


class TestParser:
    """引数定義のテスト"""

    def test_refine_defaults(self, clean_env):
        """後処理パラメータの既定値"""
        args = build_parser().parse_args(["refine", "--input", "a", "--output", "b"])
        assert args.eta_d == 1500
        assert args.eta_l == 6.0
        assert args.dbscan_eps == 0.6
        assert args.dbscan_min_pts == 10
        assert args.footprint_dilation == 1
        assert args.workers == 1

    def test_help_documents_default_sources(self, clean_env, capsys):
        """--help は各パラメータの既定値と出典を表示する"""
        with pytest.raises(SystemExit) as exc_info:
            main(["run", "--help"])
        assert exc_info.value.code == 0
        # 折り返し位置に依存しないよう空白を除いて比較する
        text = "".join(capsys.readouterr().out.split())
        expected = [
            "--voxel-sizeVOXEL_SIZEボクセルサイズ[m]（既定0.2、文献値）",
            "--prob-floorPROB_FLOOR融合後のラベル確率の下限、0で無効（既定0.001、本実装の既定値）",
            "--eta-dETA_D静止クラスタのボクセル数の閾値（既定1500、文献値）",
            "--eta-lETA_L静止クラスタの水平長さの閾値[m]（既定6.0、文献値）",
            "--dbscan-epsDBSCAN_EPSDBSCANの近傍半径[m]（既定0.6:ボクセル3個分、本実装の既定値）",
            "--dbscan-min-ptsDBSCAN_MIN_PTSDBSCANのコア点に必要な近傍数（既定10、本実装の既定値）",
            "--footprint-dilationFOOTPRINT_DILATION道路フットプリントの膨張セル数、0で道路列のみ（既定1、本実装の既定値）",
        ]
        for fragment in expected:
            assert fragment in text
        assert "既定値の出典" in text

    def test_workers_from_environment(self, clean_env):
        """SEMMAP_WORKERS が --workers の既定値になる"""
        with patch.dict(os.environ, {"SEMMAP_WORKERS": "3"}):
            args = build_parser().parse_args(["export-ply", "--input", "a", "--output", "b"])
        assert args.workers == 3

    def test_demo_scene_is_bundled(self):
        """同梱のデモシーンが見つかる"""
        assert demo_scene_path().exists()


class TestCommands:
    """サブコマンドのテスト"""

    @pytest.mark.slow
    def test_chain_is_reproducible(self, clean_env, temp_dir, scene_path, capsys):
        """同じ入力なら並列数に関係なく同一バイトの出力"""
        first_root = temp_dir / "first"
        second_root = temp_dir / "second"
        first_root.mkdir()
        second_root.mkdir()
        first = run_chain(first_root, workers=1)
        second = run_chain(second_root, workers=2)
        assert first == second

        report = first["report"].decode()
        assert "accuracy.Road=" in report
        out = capsys.readouterr().out
        assert "frames: 2" in out
        assert "Road:" in out

    def test_build_emits_ply(self, clean_env, temp_dir, scene_path, capsys):
        """--emit-ply で同名の .ply を出力する"""
        data = temp_dir / "data"
        assert main(["synth", "--scene", str(scene_path), "--output-dir", str(data)]) == 0
        output = temp_dir / "map.txt"
        assert main(["build", "--input-dir", str(data), "--output", str(output), "--emit-ply"]) == 0
        assert output.with_suffix(".ply").read_text().startswith("ply\n")
        assert len(deserialize_map(output)) > 0
        assert "voxels:" in capsys.readouterr().out

    def test_export_ply(self, clean_env, temp_dir, capsys):
        """マップを PLY へ変換する"""
        source = temp_dir / "map.txt"
        serialize_map(SemanticVoxelMap(0.2), source)
        target = temp_dir / "map.ply"
        assert main(["export-ply", "--input", str(source), "--output", str(target)]) == 0
        assert "element vertex 0" in target.read_text()

    def test_run_passes_no_refine(self, clean_env, scene_path, mocker):
        """--no-refine は refine=False で実行する"""
        result = MagicMock()
        result.refined_report = None
        pipeline = mocker.patch("src.semantic_mapper.cli.run_synthetic_pipeline", return_value=result)
        assert main(["run", "--scene", str(scene_path), "--no-refine", "--seed", "11"]) == 0
        args, kwargs = pipeline.call_args
        assert kwargs["refine"] is False
        assert args[0].seed == 11

    def test_run_passes_workers_to_nodes(self, clean_env, scene_path, mocker):
        """--workers はパイプラインのノードの設定まで届く"""
        configs = []

        class RecordingNodes(MappingPipelineNodes):
            def __init__(self, config=None):
                configs.append(config)
                super().__init__(config)

        mocker.patch("src.semantic_mapper.pipeline.MappingPipelineNodes", RecordingNodes)
        assert main(["run", "--scene", str(scene_path), "--workers", "2", "--no-refine"]) == 0
        assert [config.workers for config in configs] == [2]

    def test_run_prints_reports(self, clean_env, scene_path, capsys):
        """run は後処理前と後の表を表示する"""
        assert main(["run", "--scene", str(scene_path)]) == 0
        out = capsys.readouterr().out
        assert "=== unrefined ===" in out
        assert "=== refined ===" in out
        assert "Average" in out


class TestErrors:
    """エラー時の終了コードのテスト"""

    def test_missing_file_is_io_error(self, clean_env, temp_dir, capsys):
        """存在しないファイルは io"""
        code = main(["export-ply", "--input", str(temp_dir / "missing.txt"), "--output", str(temp_dir / "x.ply")])
        assert code == EXIT_CODES["io"]
        assert capsys.readouterr().err.startswith("error category=io message=")

    def test_missing_build_inputs(self, clean_env, temp_dir, capsys):
        """入力パスが足りなければ configuration"""
        code = main(["build", "--poses", str(temp_dir / "poses.txt"), "--output", str(temp_dir / "m.txt")])
        assert code == EXIT_CODES["configuration"]
        assert "--velodyne" in capsys.readouterr().err

    def test_voxel_size_mismatch(self, clean_env, temp_dir, capsys):
        """ボクセルサイズの違うマップの評価は configuration"""
        prediction, truth = temp_dir / "p.txt", temp_dir / "t.txt"
        serialize_map(SemanticVoxelMap(0.2), prediction)
        serialize_map(SemanticVoxelMap(0.1), truth)
        code = main(["evaluate", "--prediction", str(prediction), "--truth", str(truth)])
        assert code == 2
        assert "category=configuration" in capsys.readouterr().err

    def test_bad_scene_line(self, clean_env, temp_dir, capsys):
        """シーンファイルの不正な行は format、行番号付き"""
        scene = temp_dir / "bad.txt"
        scene.write_text("[primitives]\nRoad 0 0 0 1 1\n")
        code = main(["synth", "--scene", str(scene), "--output-dir", str(temp_dir / "out")])
        assert code == 3
        err = capsys.readouterr().err
        assert "(line 2)" in err
        assert len(err.strip().splitlines()) == 1

    def test_bad_map_value(self, clean_env, temp_dir, capsys):
        """マップの不正な分布は data"""
        path = temp_dir / "bad.map"
        path.write_text("voxel_size 0.2\n0 0 0 Road 0.9 0.9 0.0 0.0 0.0 1\n")
        code = main(["export-ply", "--input", str(path), "--output", str(temp_dir / "x.ply")])
        assert code == EXIT_CODES["data"]

    def test_invalid_workers_environment(self, clean_env, temp_dir, capsys):
        """SEMMAP_WORKERS が整数でなければ configuration"""
        with patch.dict(os.environ, {"SEMMAP_WORKERS": "abc"}):
            code = main(["export-ply", "--input", "a", "--output", "b"])
        assert code == 2
        assert "SEMMAP_WORKERS" in capsys.readouterr().err

    def test_invalid_refine_parameter(self, clean_env, temp_dir, capsys):
        """範囲外の後処理パラメータは parameter"""
        source = temp_dir / "map.txt"
        serialize_map(SemanticVoxelMap(0.2), source)
        code = main(["refine", "--input", str(source), "--output", str(temp_dir / "o.txt"), "--eta-d", "0"])
        assert code == EXIT_CODES["parameter"]

    @pytest.mark.parametrize(
        "argv",
        [
            ["export-ply", "--input", "a", "--output", "b", "--unknown-flag"],
            ["export-ply", "--input", "a"],
            ["export-ply", "--input", "a", "--output", "b", "--workers", "0"],
            ["refine", "--input", "a", "--output", "b", "--eta-d", "many"],
            [],
        ],
    )
    def test_usage_errors_are_single_line(self, clean_env, argv, capsys):
        """引数の誤りも usage カテゴリの1行エラーになる"""
        code = main(argv)
        assert code == EXIT_CODES["usage"] == 2
        captured = capsys.readouterr()
        assert captured.err.startswith("error category=usage message=")
        assert len(captured.err.strip().splitlines()) == 1
        assert captured.out == ""
