"""
セマンティック3Dマッピングのバッチ用コマンドライン

サブコマンド:
    build       フレーム列から（後処理前の）セマンティックマップを作る
    refine      マップに柱ラベル補正と移動物体除去を適用する
    evaluate    予測マップを正解マップで評価する
    synth       合成シーンのフレームと正解マップをファイルに書き出す
    export-ply  マップを色付き PLY に変換する
    run         合成シーンでパイプライン全体を実行して評価を表示する
"""

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, NoReturn, Optional

from .config import PipelineConfig, configure_logging, load_environment
from .pipeline import SemanticMappingPipeline
from .tools.evaluation import MetricsReport, evaluate
from .tools.exceptions import ConfigurationError, UsageError, error_category
from .tools.geometry_map import DEFAULT_VOXEL_SIZE
from .tools.io_formats import (
    CalibrationSet,
    FileFrameSource,
    deserialize_map,
    serialize_map,
    write_calibration,
    write_ply,
    write_pose_file,
    write_score_map,
    write_velodyne_bin,
)
from .tools.labels import SEMANTIC_LABELS
from .tools.refinement import RefineParams, refine
from .tools.semantic_fusion import DEFAULT_PROB_FLOOR
from .tools.synthetic_oracle import (
    SceneFile,
    SensorSpec,
    generate_ground_truth,
    load_scene,
    run_synthetic_pipeline,
    simulate_frame,
)

logger = logging.getLogger(__name__)

EXIT_CODES = {
    "usage": 2,
    "configuration": 2,
    "format": 3,
    "data": 4,
    "validation": 5,
    "sequencing": 6,
    "parameter": 7,
    "degenerate-evidence": 8,
    "io": 9,
}
EXIT_OTHER = 1


def demo_scene_path() -> Path:
    """同梱のデモシーン（インストール時はパッケージ内、開発時は src/structure）"""
    here = Path(__file__).resolve().parent
    packaged = here / "structure" / "demo_scene.txt"
    if packaged.exists():
        return packaged
    return here.parent / "structure" / "demo_scene.txt"


# ----------------------------------------------------------------------
# 引数定義

PARAMETER_SOURCES = (
    "既定値の出典: 「文献値」は公表されている評価条件で使われた値、"
    "「本実装の既定値」は公表値が無く本実装で定めた値。"
)


class CliArgumentParser(argparse.ArgumentParser):
    """引数の誤りを UsageError として送出し、main の1行エラー出力に載せる"""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def _add_fusion_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--voxel-size", type=float, default=DEFAULT_VOXEL_SIZE,
        help=f"ボクセルサイズ [m]（既定 {DEFAULT_VOXEL_SIZE}、文献値）",
    )
    parser.add_argument(
        "--prob-floor", type=float, default=DEFAULT_PROB_FLOOR,
        help=f"融合後のラベル確率の下限、0 で無効（既定 {DEFAULT_PROB_FLOOR:g}、本実装の既定値）",
    )
    parser.add_argument(
        "--depth-buffer", action="store_true",
        help="同じ画素に写るボクセルのうち最も手前のものだけ更新する（既定は無効: 全ボクセルを更新）",
    )


def _add_refine_args(parser: argparse.ArgumentParser) -> None:
    defaults = RefineParams()
    parser.add_argument(
        "--eta-d", type=int, default=defaults.eta_d,
        help=f"静止クラスタのボクセル数の閾値（既定 {defaults.eta_d}、文献値）",
    )
    parser.add_argument(
        "--eta-l", type=float, default=defaults.eta_l,
        help=f"静止クラスタの水平長さの閾値 [m]（既定 {defaults.eta_l}、文献値）",
    )
    parser.add_argument(
        "--dbscan-eps", type=float, default=defaults.dbscan_eps,
        help=f"DBSCAN の近傍半径 [m]（既定 {defaults.dbscan_eps}: ボクセル3個分、本実装の既定値）",
    )
    parser.add_argument(
        "--dbscan-min-pts", type=int, default=defaults.dbscan_min_pts,
        help=f"DBSCAN のコア点に必要な近傍数（既定 {defaults.dbscan_min_pts}、本実装の既定値）",
    )
    parser.add_argument(
        "--footprint-dilation", type=int, default=defaults.footprint_dilation,
        help=f"道路フットプリントの膨張セル数、0 で道路列のみ（既定 {defaults.footprint_dilation}、本実装の既定値）",
    )


def _refine_params(args: argparse.Namespace) -> RefineParams:
    return RefineParams(
        eta_d=args.eta_d,
        eta_l=args.eta_l,
        dbscan_eps=args.dbscan_eps,
        dbscan_min_pts=args.dbscan_min_pts,
        footprint_dilation=args.footprint_dilation,
    )


def build_parser() -> argparse.ArgumentParser:
    """コマンドライン引数のパーサーを作成する"""
    settings = load_environment()

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--workers", type=int, default=settings.workers,
        help="フレーム読み込み・生成の並列数（既定は SEMMAP_WORKERS または 1）",
    )
    common.add_argument(
        "--log-level", default=settings.log_level,
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="ログレベル（既定は SEMMAP_LOG_LEVEL または WARNING）",
    )

    parser = CliArgumentParser(
        prog="semantic-mapper",
        description="Lidar 点群と画像セグメンテーションから3Dセマンティックマップを作成する",
        epilog=PARAMETER_SOURCES,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    build = subparsers.add_parser(
        "build", parents=[common], epilog=PARAMETER_SOURCES, help="セマンティックマップを作成する"
    )
    build.add_argument("--input-dir", type=Path, help="synth の出力形式のディレクトリ")
    build.add_argument("--poses", type=Path, help="姿勢ファイル（KITTI poses 形式）")
    build.add_argument("--velodyne", type=Path, help="点群ディレクトリ（NNNNNN.bin）")
    build.add_argument("--scores", type=Path, help="スコアマップディレクトリ（NNNNNN.sscr）")
    build.add_argument("--calib", type=Path, help="キャリブレーションファイル")
    build.add_argument("--output", type=Path, required=True, help="出力マップファイル")
    build.add_argument("--emit-ply", action="store_true", help="同名の .ply も出力する")
    _add_fusion_args(build)
    build.set_defaults(handler=cmd_build)

    refine_cmd = subparsers.add_parser(
        "refine", parents=[common], epilog=PARAMETER_SOURCES, help="3D後処理を適用する"
    )
    refine_cmd.add_argument("--input", type=Path, required=True, help="入力マップファイル")
    refine_cmd.add_argument("--output", type=Path, required=True, help="出力マップファイル")
    refine_cmd.add_argument("--emit-ply", action="store_true", help="同名の .ply も出力する")
    _add_refine_args(refine_cmd)
    refine_cmd.set_defaults(handler=cmd_refine)

    evaluate_cmd = subparsers.add_parser("evaluate", parents=[common], help="マップを評価する")
    evaluate_cmd.add_argument("--prediction", type=Path, required=True, help="予測マップファイル")
    evaluate_cmd.add_argument("--truth", type=Path, required=True, help="正解マップファイル")
    evaluate_cmd.add_argument(
        "--count-unmatched", action="store_true",
        help="予測にだけ存在するボクセルを FP として数える（正解が完全な合成シーン向け）",
    )
    evaluate_cmd.add_argument(
        "--observed-only", action="store_true", help="正解を予測に存在するボクセルへ限定する",
    )
    evaluate_cmd.add_argument("--report", type=Path, help="key=value 形式のレポート出力先")
    evaluate_cmd.set_defaults(handler=cmd_evaluate)

    synth = subparsers.add_parser("synth", parents=[common], help="合成シーンのフレームを書き出す")
    synth.add_argument("--scene", type=Path, default=None, help="シーンファイル（既定は同梱のデモシーン）")
    synth.add_argument("--output-dir", type=Path, required=True, help="出力ディレクトリ")
    synth.add_argument("--seed", type=int, default=None, help="乱数シード（シーンファイルの値を上書き）")
    synth.add_argument("--voxel-size", type=float, default=None, help="ボクセルサイズ [m]（シーンファイルの値を上書き）")
    synth.set_defaults(handler=cmd_synth)

    export = subparsers.add_parser("export-ply", parents=[common], help="マップを PLY に変換する")
    export.add_argument("--input", type=Path, required=True, help="入力マップファイル")
    export.add_argument("--output", type=Path, required=True, help="出力 PLY ファイル")
    export.set_defaults(handler=cmd_export_ply)

    run = subparsers.add_parser(
        "run", parents=[common], epilog=PARAMETER_SOURCES, help="合成シーンでパイプライン全体を実行する"
    )
    run.add_argument("--scene", type=Path, default=None, help="シーンファイル（既定は同梱のデモシーン）")
    run.add_argument("--seed", type=int, default=None, help="乱数シード（シーンファイルの値を上書き）")
    run.add_argument("--no-refine", action="store_true", help="3D後処理を行わない")
    _add_fusion_args(run)
    _add_refine_args(run)
    run.set_defaults(handler=cmd_run)

    return parser


# ----------------------------------------------------------------------
# サブコマンド

def _load_scene_file(args: argparse.Namespace, voxel_size: Optional[float] = None) -> SceneFile:
    scene_file = load_scene(args.scene or demo_scene_path())
    scene, noise, sensor = scene_file
    if args.seed is not None:
        scene = dataclasses.replace(scene, seed=args.seed)
    if voxel_size is not None:
        sensor = SensorSpec.model_validate({**sensor.model_dump(), "voxel_size": voxel_size})
    return SceneFile(scene, noise, sensor)


def _print_report(title: str, report: MetricsReport) -> None:
    print(f"=== {title} ===")
    print(report.format_table())
    print(f"voxels: truth={report.n_truth} predicted={report.n_predicted}")


def cmd_build(args: argparse.Namespace) -> int:
    """フレーム列からマップを作成して保存する"""
    if args.input_dir is not None:
        source = FileFrameSource.from_directory(args.input_dir)
    else:
        paths = {"--poses": args.poses, "--velodyne": args.velodyne, "--scores": args.scores, "--calib": args.calib}
        missing = [flag for flag, value in paths.items() if value is None]
        if missing:
            raise ConfigurationError(f"入力パスが指定されていません: {', '.join(missing)}")
        source = FileFrameSource(args.poses, args.velodyne, args.scores, args.calib)

    config = PipelineConfig(
        voxel_size=args.voxel_size,
        prob_floor=args.prob_floor,
        depth_buffer=args.depth_buffer,
        refine=False,
        workers=args.workers,
    )
    state = SemanticMappingPipeline(config).run(source)
    semantic_map = state["unrefined_map"]
    serialize_map(semantic_map, args.output)
    if args.emit_ply:
        write_ply(semantic_map, args.output.with_suffix(".ply"))

    print(f"frames: {state['frame_count']}")
    print(f"voxels: {len(semantic_map)}")
    for label, count in semantic_map.label_counts().items():
        print(f"  {label.name}: {count}")
    print(f"output: {args.output}")
    return 0


def cmd_refine(args: argparse.Namespace) -> int:
    """保存済みマップに3D後処理を適用する"""
    semantic_map = deserialize_map(args.input)
    refined = refine(semantic_map, _refine_params(args))
    serialize_map(refined, args.output)
    if args.emit_ply:
        write_ply(refined, args.output.with_suffix(".ply"))

    before = semantic_map.label_counts()
    after = refined.label_counts()
    print(f"voxels: {len(semantic_map)} -> {len(refined)}")
    for label in SEMANTIC_LABELS:
        delta = after.get(label, 0) - before.get(label, 0)
        print(f"  {label.name}: {before.get(label, 0)} -> {after.get(label, 0)} ({delta:+d})")
    print(f"output: {args.output}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    """予測マップを正解マップで評価して表示する"""
    prediction = deserialize_map(args.prediction)
    truth = deserialize_map(args.truth)
    report = evaluate(prediction, truth, args.count_unmatched, args.observed_only)
    _print_report("evaluation", report)
    if args.report is not None:
        args.report.write_text("\n".join(report.to_key_values()) + "\n")
        print(f"report: {args.report}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    """合成シーンのフレーム一式と正解マップを書き出す"""
    scene, noise, sensor = _load_scene_file(args, args.voxel_size)
    output_dir: Path = args.output_dir
    (output_dir / "velodyne").mkdir(parents=True, exist_ok=True)
    (output_dir / "scores").mkdir(parents=True, exist_ok=True)

    camera = sensor.camera()
    write_calibration(CalibrationSet(camera.projection, camera.width, camera.height), output_dir / "calib.txt")
    write_pose_file(scene.trajectory, output_dir / "poses.txt")

    def _write_frame(index: int) -> int:
        frame = simulate_frame(scene, index, sensor, noise)
        write_velodyne_bin(frame.cloud, output_dir / "velodyne" / f"{index:06d}.bin")
        write_score_map(frame.segmentation, output_dir / "scores" / f"{index:06d}.sscr")
        return len(frame.cloud)

    frame_indices = range(len(scene.trajectory))
    with ThreadPoolExecutor(max_workers=args.workers) as executor:
        point_counts = list(executor.map(_write_frame, frame_indices))

    truth = generate_ground_truth(scene, sensor.voxel_size)
    serialize_map(truth, output_dir / "ground_truth.map")

    print(f"frames: {len(point_counts)}")
    print(f"points: {sum(point_counts)}")
    print(f"ground truth voxels: {len(truth)}")
    print(f"output: {output_dir}")
    return 0


def cmd_export_ply(args: argparse.Namespace) -> int:
    """マップを PLY に変換する"""
    semantic_map = deserialize_map(args.input)
    write_ply(semantic_map, args.output)
    print(f"voxels: {len(semantic_map)}")
    print(f"output: {args.output}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    """合成シーンでパイプライン全体を実行して評価を表示する"""
    scene, noise, sensor = _load_scene_file(args, args.voxel_size)
    result = run_synthetic_pipeline(
        scene,
        noise,
        sensor,
        _refine_params(args),
        refine=not args.no_refine,
        prob_floor=args.prob_floor,
        depth_buffer=args.depth_buffer,
        workers=args.workers,
    )
    _print_report("unrefined", result.unrefined_report)
    if result.refined_report is not None:
        _print_report("refined", result.refined_report)
    return 0


# ----------------------------------------------------------------------
# エントリーポイント

def _single_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: Optional[List[str]] = None) -> int:
    """
    コマンドラインのエントリーポイント

    Returns:
        終了コード（成功時0、失敗時はエラーカテゴリごとの値）
    """
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        configure_logging(args.log_level)
        if args.workers < 1:
            raise UsageError(f"--workers は1以上が必要です: {args.workers}")
        return args.handler(args)
    except Exception as e:
        category = error_category(e)
        logger.debug("コマンドが失敗しました", exc_info=True)
        print(f"error category={category} message={_single_line(e)}", file=sys.stderr)
        return EXIT_CODES.get(category, EXIT_OTHER)


if __name__ == "__main__":
    sys.exit(main())
