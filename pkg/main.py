import argparse
import sys
from pathlib import Path

# 親ディレクトリをパスに追加（相対インポート用）
sys.path.append(str(Path(__file__).parent))

from loguru import logger

from config import VARIANTS, apply_overrides, ensure_dirs, load_config
from exceptions import ConfigError, PipelineError
from logger_config import setup_logger
import pipeline


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="設定ファイル（既定は config.json）")
    common.add_argument("--seed", type=int, default=None, help="全体シード")
    common.add_argument("--variant", choices=VARIANTS, default=None, help="base / tts / one-stage")
    common.add_argument("--force", action="store_true", help="完了済みのフェーズも再実行する")
    common.add_argument("--out", type=Path, default=None, help="出力ルート")
    common.add_argument("--no-propagation", action="store_true", help="擬似結果を伝播せず観測結果で全段を学習する")
    common.add_argument("--log-level", default="INFO", help="コンソールのログレベル")

    parser = argparse.ArgumentParser(description="多段テキスト書き換えの方策学習パイプライン")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="学習用と評価用の軌跡を生成")
    sub.add_parser("train-repeat", parents=[common], help="Repeatモデルの学習")
    sub.add_parser("train-fluency", parents=[common], help="流暢さモデルの学習")
    sub.add_parser("train-q", parents=[common], help="後ろ向き帰納で段ごとの分類器を学習")
    refine = sub.add_parser("refine", parents=[common], help="評価用の軌跡を書き換え")
    refine.add_argument("--input", type=Path, default=None, help="書き換える軌跡ファイル（既定は評価用の軌跡）")
    sub.add_parser("eval", parents=[common], help="書き換え結果の自動評価")
    sub.add_parser("report", parents=[common], help="バリアント比較表の作成")
    cv = sub.add_parser("cv", parents=[common], help="k分割の交差検証")
    cv.add_argument("--folds", type=int, default=None, help="分割数（既定は設定の cv_folds）")
    return parser


def run(args: argparse.Namespace) -> pipeline.PhaseResult:
    cfg = apply_overrides(load_config(args.config), seed=args.seed, variant=args.variant, out=args.out)
    if args.no_propagation:
        cfg = cfg.copy(update={"propagate_pseudo_outcomes": False})
    if getattr(args, "folds", None) is not None:
        if args.folds < 2:
            raise ConfigError(f"--folds は2以上を指定してください: {args.folds}")
        cfg = cfg.copy(update={"evaluation": cfg.evaluation.copy(update={"cv_folds": args.folds})})
    ensure_dirs(cfg)
    setup_logger(cfg.paths.logs_dir, args.log_level)
    logger.info(f"{args.command} を実行します (variant={cfg.variant}, seed={cfg.seed})")

    commands = {
        "gen-data": lambda: pipeline.cmd_gen_data(cfg, args.force),
        "train-repeat": lambda: pipeline.cmd_train_repeat(cfg, args.force),
        "train-fluency": lambda: pipeline.cmd_train_fluency(cfg, args.force),
        "train-q": lambda: pipeline.cmd_train_q(cfg, args.force),
        "refine": lambda: pipeline.cmd_refine(cfg, args.input, args.force),
        "eval": lambda: pipeline.cmd_eval(cfg, args.force),
        "report": lambda: pipeline.cmd_report(cfg, args.force),
        "cv": lambda: pipeline.cmd_cv(cfg, args.force),
    }
    return commands[args.command]()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except PipelineError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"予期しないエラーが発生しました: {e}")
        return 1

    print(result.message)
    for artifact in result.artifacts:
        print(f"  {artifact}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
