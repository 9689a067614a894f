import hashlib
import json
import platform
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pydantic
from loguru import logger
from pydantic import BaseModel

from action_optimizer import RefinementResult, refine_action, tts_refine, write_refinement_report
from checkpoint import file_sha256, read_manifest, write_manifest
from config import PipelineConfig, config_hash
from evaluator import (EvalClassifier, MetricReport, RefinementScorer, format_metric, load_eval_classifier,
                       read_report, train_eval_classifier, write_report)
from exceptions import ConfigError, DataError, PipelineError
from fluency_model import FluencyModel, load_fluency_model, perplexity, save_fluency_model, train_fluency
from induction import parallel_map, run_backward_induction
from numerics import SeededRng, derive_seed
from q_learner import StageClassifier, load_stage_classifier
from repeat_model import (EncoderDecoderModel, load_repeat_model, reconstruction_rate, save_repeat_model,
                          train_repeat)
from signal_grammar import SignalGrammar, generate_corpus, load_grammar
from trajectory import (History, StageRecord, Trajectory, assemble_trajectories, build_test_set, kfold_split,
                        read_trajectories, write_trajectories)
from vocabulary import SEP, Vocabulary, build_vocab, tokenize

# 各フェーズの結果が依存する設定項目（ハッシュの対象）
_MODELS = ["grammar", "data", "repeat_model", "repeat_training", "fluency_model", "fluency_training", "seed"]
PHASE_SECTIONS: Dict[str, List[str]] = {
    "gen-data": ["grammar", "data", "seed"],
    "eval-classifier": ["grammar", "data", "repeat_model", "repeat_training", "eval_classifier", "seed"],
    "train-repeat": ["grammar", "data", "repeat_model", "repeat_training", "seed"],
    "train-fluency": ["grammar", "data", "repeat_model", "repeat_training", "fluency_model", "fluency_training", "seed"],
    "train-q": _MODELS + ["classifier", "ascent", "propagate_pseudo_outcomes", "evaluation"],
    "refine": _MODELS + ["classifier", "eval_classifier", "ascent", "propagate_pseudo_outcomes", "evaluation", "variant"],
    "eval": _MODELS + ["classifier", "eval_classifier", "ascent", "propagate_pseudo_outcomes", "evaluation", "variant"],
    "cv": _MODELS + ["classifier", "eval_classifier", "ascent", "propagate_pseudo_outcomes", "evaluation", "variant"],
}
# 再構成率を測る文の最大トークン数
RECONSTRUCTION_MAX_TOKENS = 24
RECONSTRUCTION_SAMPLES = 200


class PhaseRecord(BaseModel):
    config_hash: str
    started_at: str
    finished_at: str
    artifacts: List[str]
    status: str = "success"


class RunManifest(BaseModel):
    """実行済みフェーズと成果物の一覧"""
    phases: Dict[str, PhaseRecord] = {}
    versions: Dict[str, str] = {}

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        if not Path(path).exists():
            return cls()
        return cls(**read_manifest(path))

    def save(self, path: Path) -> Path:
        return write_manifest(path, self.dict())

    def is_complete(self, key: str, digest: str) -> bool:
        record = self.phases.get(key)
        return (
            record is not None
            and record.status == "success"
            and record.config_hash == digest
            and all(Path(a).exists() for a in record.artifacts)
        )


class PhaseResult(BaseModel):
    """フェーズの実行結果"""
    phase: str
    skipped: bool = False
    artifacts: List[str] = []
    message: str = ""


class ArtifactPaths:
    """設定から決まる成果物のパス"""

    def __init__(self, cfg: PipelineConfig):
        paths = cfg.paths
        self.data_tag = "one-stage" if cfg.variant == "one-stage" else f"T{cfg.data.num_stages}"
        suffix = "" if cfg.propagate_pseudo_outcomes else "-noprop"
        self.q_label = f"{self.data_tag}{suffix}"
        self.label = f"{cfg.variant}{suffix}"

        self.train_file = paths.data_dir / f"train_{self.data_tag}.jsonl"
        self.test_file = paths.data_dir / f"test_{self.data_tag}.jsonl"
        self.refined_file = paths.data_dir / f"refined_{self.label}.jsonl"
        self.repeat_dir = paths.checkpoint_dir
        self.qf_dir = paths.checkpoint_dir / f"qf_{self.q_label}"
        self.eval_classifier = paths.checkpoint_dir / f"eval_{self.data_tag}.ntck"
        self.train_report_dir = paths.report_dir / f"train_{self.q_label}"
        self.refine_report_dir = paths.report_dir / self.label
        self.metrics = paths.report_dir / f"metrics_{self.label}.json"
        self.signals = paths.report_dir / f"signal_{self.label}.json"
        self.table = paths.report_dir / "table.csv"
        self.cv_dir = paths.report_dir / f"cv_{self.label}"
        self.manifest = paths.checkpoint_dir / "run_manifest.json"


def _now() -> str:
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def _versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "pydantic": str(pydantic.VERSION),
    }


def append_run_log(logs_dir: Path, phase: str, digest: str, status: str, message: str) -> Path:
    """
    実行ログCSVに1行追記する
    Args:
        logs_dir: ログディレクトリ
        phase: フェーズ名
        digest: 設定ハッシュ
        status: success / skipped / failed
        message: メッセージ
    Returns:
        Path: ログファイルのパス
    """
    logs_dir = Path(logs_dir)
    logs_dir.mkdir(exist_ok=True, parents=True)
    log_path = logs_dir / f"run_log_{datetime.now().strftime('%Y%m%d')}.csv"
    row = pd.DataFrame([{
        "datetime": _now(),
        "phase": phase,
        "config_hash": digest[:12],
        "status": status,
        "message": message,
    }])
    try:
        row.to_csv(log_path, mode="a", header=not log_path.exists(), index=False, encoding="utf-8")
        logger.debug(f"実行ログに記録しました: {log_path}")
    except OSError as e:
        logger.error(f"実行ログの記録中にエラーが発生しました: {e}")
    return log_path


def run_phase(cfg: PipelineConfig, phase: str, key: str, force: bool,
              body: Callable[[], Tuple[List[Path], str]], digest: Optional[str] = None) -> PhaseResult:
    """
    フェーズを実行する（同じ設定で完了済みなら何もしない）
    Args:
        cfg: 設定
        phase: フェーズ名（ハッシュ対象の決定に使う）
        key: マニフェスト上のキー（バリアントごとに分かれるもの）
        force: Trueなら完了済みでも再実行する
        body: 実行本体。(成果物のパス, メッセージ) を返す
        digest: 完了判定に使うハッシュ（省略時は phase の設定項目から計算）
    Returns:
        PhaseResult: 実行結果
    """
    paths = ArtifactPaths(cfg)
    digest = digest or config_hash(cfg, PHASE_SECTIONS[phase])
    manifest = RunManifest.load(paths.manifest)

    if not force and manifest.is_complete(key, digest):
        message = f"{key} は同じ設定で実行済みのためスキップします（再実行は --force）"
        logger.info(message)
        return PhaseResult(phase=key, skipped=True, artifacts=manifest.phases[key].artifacts, message=message)

    started_at = _now()
    logger.info(f"{key} を開始します")
    try:
        artifacts, message = body()
    except PipelineError as e:
        logger.error(f"{key} でエラーが発生しました: {e}")
        append_run_log(cfg.paths.logs_dir, key, digest, "failed", str(e))
        raise

    manifest = RunManifest.load(paths.manifest)
    manifest.phases[key] = PhaseRecord(
        config_hash=digest,
        started_at=started_at,
        finished_at=_now(),
        artifacts=[str(a) for a in artifacts],
    )
    manifest.versions = _versions()
    manifest.save(paths.manifest)
    append_run_log(cfg.paths.logs_dir, key, digest, "success", message)
    logger.success(f"{key} が完了しました: {message}")
    return PhaseResult(phase=key, artifacts=[str(a) for a in artifacts], message=message)


# 共通の読み込み

def _grammar(cfg: PipelineConfig) -> SignalGrammar:
    return load_grammar(cfg.paths.grammar_path, cfg.grammar.mode)


def grammar_vocabulary(grammar: SignalGrammar) -> Vocabulary:
    """文法が生成しうる全単語からなる語彙"""
    return build_vocab([" ".join(grammar.all_words())])


def _require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise DataError(f"ファイルが見つかりません: {path}（{hint}）")
    return Path(path)


def load_models(cfg: PipelineConfig) -> Tuple[EncoderDecoderModel, FluencyModel]:
    paths = ArtifactPaths(cfg)
    _require(paths.repeat_dir / "repeat_manifest.json", "先に train-repeat を実行してください")
    _require(paths.repeat_dir / "fluency_manifest.json", "先に train-fluency を実行してください")
    repeat_model = load_repeat_model(paths.repeat_dir)
    return repeat_model, load_fluency_model(paths.repeat_dir, repeat_model.vocab)


def sentence_corpus(cfg: PipelineConfig, grammar: SignalGrammar) -> Tuple[List[str], List[str]]:
    """
    Repeat・流暢さモデル共通の文コーパスを (学習用, 評価用) に分ける
    評価用の文と同じ文は学習用から除く
    """
    rng = SeededRng(derive_seed(cfg.seed, 201))
    sentences = [s.text for s in generate_corpus(grammar, cfg.data.repeat_corpus_size, rng)]
    n_holdout = max(1, int(len(sentences) * cfg.data.holdout_fraction))
    holdout = sentences[:n_holdout]
    held = set(holdout)
    return [s for s in sentences[n_holdout:] if s not in held], holdout


def stage_texts(cfg: PipelineConfig, grammar: SignalGrammar) -> List[str]:
    """分類器の入力と同じ形 "H_t SEP a_t" の文（decode_splitがSEPを復元できるように学習させる）"""
    num_stages = cfg.data.num_stages
    x = max(1, cfg.data.repeat_corpus_size // (4 * 2 ** num_stages))
    trajectories = assemble_trajectories(grammar, x, num_stages, SeededRng(derive_seed(cfg.seed, 202)))
    texts = []
    for trajectory in trajectories:
        for stage in range(1, num_stages + 1):
            flat = trajectory.history(stage).flatten()
            texts.append(" ".join(t for t in (flat, SEP, trajectory.stages[stage - 1].action) if t))
    return texts


# フェーズ

def training_x_per_combo(cfg: PipelineConfig) -> int:
    """
    学習用軌跡の組み合わせごとの本数
    one-stage は T段の学習データと同じ文数 (2^T * x * T) になるように増やす
    """
    x = cfg.data.x_per_combo
    if cfg.variant != "one-stage":
        return x
    num_stages = cfg.data.num_stages
    return x * 2 ** (num_stages - 1) * num_stages


def cmd_gen_data(cfg: PipelineConfig, force: bool = False) -> PhaseResult:
    """学習用と評価用の軌跡ファイルを作る"""
    paths = ArtifactPaths(cfg)

    def _body():
        grammar = _grammar(cfg)
        rng = SeededRng(derive_seed(cfg.seed, 101))
        train = assemble_trajectories(grammar, training_x_per_combo(cfg), cfg.stage_count(), rng.derive(1))
        test = build_test_set(grammar, cfg.data.test_negatives, cfg.data.num_stages, rng.derive(2),
                              one_stage=cfg.variant == "one-stage")
        write_trajectories(paths.train_file, train)
        write_trajectories(paths.test_file, test)
        return [paths.train_file, paths.test_file], f"学習用 {len(train)}本, 評価用 {len(test)}本"

    return run_phase(cfg, "gen-data", f"gen-data:{paths.data_tag}", force, _body)


def cmd_train_repeat(cfg: PipelineConfig, force: bool = False) -> PhaseResult:
    """Repeatモデルを学習し、保持した文での再構成率を報告する"""
    paths = ArtifactPaths(cfg)

    def _body():
        grammar = _grammar(cfg)
        vocab = grammar_vocabulary(grammar)
        train, holdout = sentence_corpus(cfg, grammar)
        corpus = train + stage_texts(cfg, grammar)

        model = EncoderDecoderModel(vocab, cfg.repeat_model, seed=cfg.repeat_training.seed)
        model, curve = train_repeat(model, corpus, cfg.repeat_training)

        samples = [s for s in holdout if len(tokenize(s, vocab)) <= RECONSTRUCTION_MAX_TOKENS][:RECONSTRUCTION_SAMPLES]
        rate = reconstruction_rate(model, samples, beam=cfg.ascent.beam_size, max_len=cfg.ascent.max_decode_len)
        manifest = save_repeat_model(model, paths.repeat_dir, cfg.repeat_training.seed, metrics={
            "reconstruction_rate": rate,
            "holdout_sentences": len(samples),
            "final_loss": curve[-1],
        })
        artifacts = [paths.repeat_dir / "repeat.ntck", paths.repeat_dir / "vocab.json", manifest]
        return artifacts, f"再構成率 {rate:.4f} ({len(samples)}文, 語彙 {len(vocab)}語)"

    return run_phase(cfg, "train-repeat", "train-repeat", force, _body)


def cmd_train_fluency(cfg: PipelineConfig, force: bool = False) -> PhaseResult:
    """流暢さモデルを学習し、学習文と保持した文のパープレキシティを報告する"""
    paths = ArtifactPaths(cfg)

    def _body():
        vocab = Vocabulary.load(_require(paths.repeat_dir / "vocab.json", "先に train-repeat を実行してください"))
        grammar = _grammar(cfg)
        train, holdout = sentence_corpus(cfg, grammar)

        model = FluencyModel(vocab, cfg.fluency_model, seed=cfg.fluency_training.seed)
        model, curve = train_fluency(model, train, cfg.fluency_training)
        train_ppl = float(np.mean([perplexity(model, s) for s in train[:RECONSTRUCTION_SAMPLES]]))
        holdout_ppl = float(np.mean([perplexity(model, s) for s in holdout[:RECONSTRUCTION_SAMPLES]]))
        manifest = save_fluency_model(model, paths.repeat_dir, cfg.fluency_training.seed, metrics={
            "train_perplexity": train_ppl,
            "holdout_perplexity": holdout_ppl,
            "final_loss": curve[-1],
        })
        return [paths.repeat_dir / "fluency.ntck", manifest], \
            f"パープレキシティ 学習 {train_ppl:.3f} / 保持 {holdout_ppl:.3f}"

    return run_phase(cfg, "train-fluency", "train-fluency", force, _body)


def _threshold(cfg: PipelineConfig, num_stages: int) -> Optional[int]:
    if cfg.data.success_threshold is None:
        return None
    return min(cfg.data.success_threshold, num_stages)


def cmd_train_q(cfg: PipelineConfig, force: bool = False) -> PhaseResult:
    """後ろ向き帰納で段ごとの分類器を学習する"""
    paths = ArtifactPaths(cfg)

    def _body():
        trajectories = read_trajectories(_require(paths.train_file, "先に gen-data を実行してください"))
        repeat_model, fluency = load_models(cfg)
        num_stages = trajectories[0].num_stages if trajectories else cfg.stage_count()
        state = run_backward_induction(
            trajectories, repeat_model, fluency, cfg.classifier, cfg.ascent,
            propagate=cfg.propagate_pseudo_outcomes,
            threshold=_threshold(cfg, num_stages),
            checkpoint_dir=paths.qf_dir,
            report_dir=paths.train_report_dir,
            workers=cfg.evaluation.workers,
        )
        artifacts = [paths.qf_dir / f"qf_stage{s}.ntck" for s in state.stage_order]
        artifacts.append(paths.qf_dir / "induction_manifest.json")
        artifacts += [paths.train_report_dir / f"refine_stage{s}.jsonl" for s in state.refinements]
        summary = ", ".join(
            f"段{s}: 精度 {state.summaries[s].fit.accuracy:.3f}, Ỹ平均 {state.summaries[s].mean_pseudo_value:.3f}"
            for s in state.stage_order
        )
        return artifacts, f"段の順序 {state.stage_order} ({summary})"

    return run_phase(cfg, "train-q", f"train-q:{paths.q_label}", force, _body)


def load_stage_classifiers(cfg: PipelineConfig, qf_dir: Path, input_dim: int) -> Dict[int, StageClassifier]:
    """帰納マニフェストに記録された全段の分類器を読み込む"""
    manifest = read_manifest(_require(Path(qf_dir) / "induction_manifest.json", "先に train-q を実行してください"))
    stages = manifest["stage_order"]
    if sorted(stages, reverse=True) != stages or len(stages) != manifest["num_stages"]:
        raise DataError(f"帰納が途中で止まっています（完了した段: {stages}）", context=str(qf_dir))
    return {stage: load_stage_classifier(qf_dir, stage, input_dim, cfg.classifier) for stage in stages}


def eval_classifier_digest(cfg: PipelineConfig) -> str:
    """評価用分類器が依存する設定項目とRepeatモデルの重みから決まるハッシュ"""
    paths = ArtifactPaths(cfg)
    weights = _require(paths.repeat_dir / "repeat.ntck", "先に train-repeat を実行してください")
    body = config_hash(cfg, PHASE_SECTIONS["eval-classifier"]) + file_sha256(weights)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def ensure_eval_classifier(cfg: PipelineConfig, repeat_model: EncoderDecoderModel,
                           force: bool = False) -> EvalClassifier:
    """
    評価用分類器を読み込む
    設定かRepeatモデルの重みが変わっていれば（または force なら）学習用の文で学習し直して保存する
    """
    paths = ArtifactPaths(cfg)
    key = f"eval-classifier:{paths.data_tag}"
    digest = eval_classifier_digest(cfg)
    if not force and RunManifest.load(paths.manifest).is_complete(key, digest):
        return load_eval_classifier(paths.eval_classifier, repeat_model, cfg.eval_classifier)

    started_at = _now()
    trajectories = read_trajectories(_require(paths.train_file, "先に gen-data を実行してください"))
    classifier = train_eval_classifier(trajectories, repeat_model, cfg.eval_classifier)
    classifier.save(paths.eval_classifier)

    manifest = RunManifest.load(paths.manifest)
    manifest.phases[key] = PhaseRecord(config_hash=digest, started_at=started_at, finished_at=_now(),
                                       artifacts=[str(paths.eval_classifier)])
    manifest.save(paths.manifest)
    return classifier


def refine_trajectories(trajectories: Sequence[Trajectory], classifiers: Dict[int, StageClassifier],
                        repeat_model: EncoderDecoderModel, fluency: FluencyModel, scope_classifier: EvalClassifier,
                        cfg: PipelineConfig) -> Tuple[List[Trajectory], List[RefinementResult]]:
    """
    学習した方策を段 1 から T へ順に適用する（H_t には書き換え済みの行動が入る）
    Args:
        trajectories: 評価用の軌跡
        classifiers: 段 -> 分類器
        repeat_model: Repeatモデル
        fluency: 流暢さモデル
        scope_classifier: 書き換え対象（否定と判定された段）を決める分類器
        cfg: 設定
    Returns:
        (書き換え後の軌跡, 書き換え対象だった段の結果)
    """
    for trajectory in trajectories:
        missing = [s for s in range(1, trajectory.num_stages + 1) if s not in classifiers]
        if missing:
            raise DataError(f"段{missing}の分類器がありません ({trajectory.id})")

    routine = tts_refine if cfg.variant == "tts" else refine_action
    sources = [stage.source for t in trajectories for stage in t.stages]
    if cfg.evaluation.refine_all_stages:
        targets = np.ones(len(sources), dtype=bool)
    else:
        targets = ~scope_classifier.is_positive(sources)
    offsets = np.cumsum([0] + [t.num_stages for t in trajectories])
    scopes = [targets[offsets[i]: offsets[i + 1]].tolist() for i in range(len(trajectories))]

    def _apply(index: int, trajectory: Trajectory) -> Tuple[Trajectory, List[RefinementResult]]:
        stages = [StageRecord(source=s.source, action=s.action, label=s.label) for s in trajectory.stages]
        results = []
        for stage in range(1, len(stages) + 1):
            if not scopes[index][stage - 1]:
                continue
            record = stages[stage - 1]
            seed = derive_seed(cfg.ascent.seed, index, stage) % (2 ** 63)
            try:
                result = routine(classifiers[stage], repeat_model, fluency, History(stages, stage), record.action,
                                 cfg.ascent, stage=stage, seed=seed, trajectory_id=trajectory.id)
            except (PipelineError, ValueError, ArithmeticError) as e:
                logger.error(f"{trajectory.id} 段{stage}の書き換えに失敗しました: {e}")
                result = RefinementResult(trajectory_id=trajectory.id, stage=stage, original=record.action,
                                          refined=record.action, p_before=0.0, p_after=0.0, edit_distance=0,
                                          iterations=0, seed=seed, error=str(e))
            stages[stage - 1] = StageRecord(source=record.source, action=result.refined, label=record.label)
            results.append(result)
        return Trajectory(id=trajectory.id, stages=stages, outcome=trajectory.outcome), results

    applied = parallel_map(list(trajectories), _apply, cfg.evaluation.workers, desc=f"refine {cfg.variant}")
    refined = [t for t, _ in applied]
    results = [r for _, rs in applied for r in rs]
    failed = sum(r.error is not None for r in results)
    if failed:
        logger.warning(f"{failed}件の書き換えに失敗したため元の文のまま残しました")
    return refined, results


def write_stage_reports(report_dir: Path, results: Sequence[RefinementResult]) -> List[Path]:
    written = []
    for stage in sorted({r.stage for r in results}):
        written.append(write_refinement_report(Path(report_dir) / f"refine_stage{stage}.jsonl",
                                               [r for r in results if r.stage == stage]))
    return written


def cmd_refine(cfg: PipelineConfig, input_path: Optional[Path] = None, force: bool = False) -> PhaseResult:
    """評価用の軌跡に方策を適用して書き換える"""
    paths = ArtifactPaths(cfg)

    def _body():
        source = _require(Path(input_path) if input_path else paths.test_file, "先に gen-data を実行してください")
        trajectories = read_trajectories(source)
        repeat_model, fluency = load_models(cfg)
        classifiers = load_stage_classifiers(cfg, paths.qf_dir, repeat_model.dim)
        scope = ensure_eval_classifier(cfg, repeat_model, force)

        refined, results = refine_trajectories(trajectories, classifiers, repeat_model, fluency, scope, cfg)
        for stale in paths.refine_report_dir.glob("refine_stage*.jsonl"):
            stale.unlink()
        reports = write_stage_reports(paths.refine_report_dir, results)
        write_trajectories(paths.refined_file, refined)
        changed = sum(r.changed for r in results)
        return [paths.refined_file, paths.eval_classifier] + reports, \
            f"{len(refined)}本中 {len(results)}段を対象に {changed}件書き換え"

    key = f"refine:{paths.label}" + (f":{Path(input_path).name}" if input_path else "")
    return run_phase(cfg, "refine", key, force, _body)


def read_refinement_results(report_dir: Path) -> List[RefinementResult]:
    results = []
    for path in sorted(Path(report_dir).glob("refine_stage*.jsonl")):
        with open(path, "r", encoding="utf-8") as f:
            results.extend(RefinementResult(**json.loads(line)) for line in f if line.strip())
    return results


def score_results(results: Sequence[RefinementResult], scorer: RefinementScorer):
    if not results:
        raise DataError("評価する書き換え結果がありません")
    return scorer.score([r.original for r in results], [r.refined for r in results], [r.stage for r in results])


def format_row(label: str, report: MetricReport) -> str:
    """比較表の1行"""
    return (f"{label}: similarity {report.similarity:.1f} | strength {report.strength:.1f} | "
            f"fluency {report.fluency:.1f} | GM {format_metric(report.gm)} | HM {format_metric(report.hm)} | "
            f"n={report.n}")


def cmd_eval(cfg: PipelineConfig, force: bool = False) -> PhaseResult:
    """書き換え結果の自動評価"""
    paths = ArtifactPaths(cfg)

    def _body():
        results = read_refinement_results(_require(paths.refine_report_dir, "先に refine を実行してください"))
        repeat_model, fluency = load_models(cfg)
        classifier = ensure_eval_classifier(cfg, repeat_model, force)
        scorer = RefinementScorer(classifier, repeat_model, fluency, _grammar(cfg))
        report, signals = score_results(results, scorer)
        write_report(paths.metrics, report)
        write_report(paths.signals, signals)
        return [paths.metrics, paths.signals], \
            f"{format_row(paths.label, report)} | converted {signals.converted:.3f} | deleted {signals.deleted:.3f}"

    return run_phase(cfg, "eval", f"eval:{paths.label}", force, _body)


def cmd_report(cfg: PipelineConfig, force: bool = False) -> PhaseResult:
    """metrics_*.json を集めてバリアント比較表（CSV）を作る（入力が変わっていなければ何もしない）"""
    paths = ArtifactPaths(cfg)
    files = sorted(cfg.paths.report_dir.glob("metrics_*.json"))
    if not files:
        raise DataError(f"評価レポートがありません: {cfg.paths.report_dir}")
    listing = "".join(f"{f.name}:{file_sha256(f)}\n" for f in files)
    digest = hashlib.sha256(listing.encode("utf-8")).hexdigest()

    def _body():
        columns = {f.stem[len("metrics_"):]: read_report(f) for f in files}
        table = pd.DataFrame(columns).reindex(["similarity", "strength", "fluency", "gm", "hm", "n"]).astype(float)
        paths.table.parent.mkdir(exist_ok=True, parents=True)
        table.to_csv(paths.table, encoding="utf-8")
        return [paths.table], f"比較表 ({len(columns)}列)\n{table.round(1).to_string()}"

    return run_phase(cfg, "report", "report", force, _body, digest=digest)


def cmd_cv(cfg: PipelineConfig, force: bool = False) -> PhaseResult:
    """学習用の軌跡をk分割して train-q -> refine -> eval を繰り返す"""
    paths = ArtifactPaths(cfg)

    def _body():
        trajectories = read_trajectories(_require(paths.train_file, "先に gen-data を実行してください"))
        repeat_model, fluency = load_models(cfg)
        eval_classifier = ensure_eval_classifier(cfg, repeat_model, force)
        scorer = RefinementScorer(eval_classifier, repeat_model, fluency, _grammar(cfg))
        try:
            folds = kfold_split(trajectories, cfg.evaluation.cv_folds, SeededRng(derive_seed(cfg.seed, 301)))
        except ValueError as e:
            raise ConfigError(f"交差検証の分割数が不正です: {e}")

        rows = []
        artifacts: List[Path] = []
        for k, (train, held_out) in enumerate(folds, start=1):
            logger.info(f"交差検証 fold {k}/{len(folds)}: 学習 {len(train)}本, 評価 {len(held_out)}本")
            state = run_backward_induction(
                train, repeat_model, fluency, cfg.classifier, cfg.ascent,
                propagate=cfg.propagate_pseudo_outcomes,
                threshold=_threshold(cfg, train[0].num_stages),
                workers=cfg.evaluation.workers,
            )
            _, results = refine_trajectories(held_out, state.classifiers, repeat_model, fluency, eval_classifier, cfg)
            report, signals = score_results(results, scorer)
            artifacts.append(write_report(paths.cv_dir / f"fold{k}_metrics.json", report))
            artifacts.append(write_report(paths.cv_dir / f"fold{k}_signal.json", signals))
            rows.append({"fold": k, **report.dict(exclude={"gm_hm_undefined"}), "converted": signals.converted,
                         "deleted": signals.deleted})

        # GM/HMが未定義の分割はNaNとして平均から除く
        table = pd.DataFrame(rows).set_index("fold").astype(float)
        table.loc["mean"] = table.mean()
        summary = paths.cv_dir / "summary.csv"
        table.to_csv(summary, encoding="utf-8")
        artifacts.append(summary)
        mean = table.loc["mean"]
        return artifacts, f"{len(folds)}分割の平均: GM {mean['gm']:.1f}, HM {mean['hm']:.1f}, converted {mean['converted']:.3f}"

    return run_phase(cfg, "cv", f"cv:{paths.label}", force, _body)
