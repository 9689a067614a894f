import itertools
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from loguru import logger
from pydantic import BaseModel
from tqdm import tqdm

from action_optimizer import RefinementResult, choose_from_candidates, refine_action, write_refinement_report
from checkpoint import write_manifest
from config import AscentConfig, ClassifierTrainConfig
from exceptions import DataError, PipelineError
from fluency_model import FluencyModel
from numerics import derive_seed
from q_learner import (FitReport, StageClassifier, binarize_outcome, build_stage_input, fit_stage_classifier,
                       predict_q_batch, save_stage_classifier)
from repeat_model import EncoderDecoderModel
from trajectory import StageDataset, StageRow, Trajectory


class StageSummary(BaseModel):
    stage: int
    seed: int
    fit: FitReport
    mean_pseudo_value: float
    mean_q_original: Optional[float] = None
    mean_q_refined: Optional[float] = None
    changed: int = 0


class InductionState(BaseModel):
    """後ろ向き帰納の途中経過と結果"""
    num_stages: int
    stage_order: List[int] = []
    classifiers: Dict[int, StageClassifier] = {}
    pseudo_values: Dict[int, List[float]] = {}
    optimal_actions: Dict[int, List[str]] = {}
    refinements: Dict[int, List[RefinementResult]] = {}
    summaries: Dict[int, StageSummary] = {}

    class Config:
        arbitrary_types_allowed = True


def _stage_dataset(trajectories: Sequence[Trajectory], stage: int, values: np.ndarray) -> StageDataset:
    rows = [
        StageRow(
            trajectory_id=t.id,
            history=t.history(stage),
            action=t.stages[stage - 1].action,
            pseudo_label=int(v >= 0.5),
            pseudo_value=float(np.clip(v, 0.0, 1.0)),
        )
        for t, v in zip(trajectories, values)
    ]
    return StageDataset(stage=stage, rows=rows)


Item = TypeVar("Item")
Output = TypeVar("Output")


def parallel_map(items: Sequence[Item], fn: Callable[[int, Item], Output], workers: int = 1,
                 desc: str = "refine") -> List[Output]:
    """
    例ごとの処理をスレッドで並列に行う（結果は入力順）
    """
    indexed = list(enumerate(items))
    if workers <= 1:
        return [fn(i, item) for i, item in tqdm(indexed, desc=desc, leave=False)]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(tqdm(executor.map(lambda pair: fn(*pair), indexed), total=len(indexed), desc=desc, leave=False))


def run_backward_induction(trajectories: Sequence[Trajectory], repeat_model: EncoderDecoderModel,
                           fluency: FluencyModel, classifier_cfg: ClassifierTrainConfig, ascent_cfg: AscentConfig,
                           propagate: bool = True, threshold: Optional[int] = None,
                           checkpoint_dir: Optional[Path] = None, report_dir: Optional[Path] = None,
                           workers: int = 1, candidates: Optional[Dict[int, Sequence[str]]] = None) -> InductionState:
    """
    段 T から 1 へ向かって分類器を学習し、擬似結果を伝播する
    Args:
        trajectories: 学習用の軌跡（段数は全て同じ）
        repeat_model: Repeatモデル
        fluency: 流暢さモデル
        classifier_cfg: 分類器の学習設定
        ascent_cfg: 勾配上昇の設定
        propagate: Falseなら全段を観測結果で学習し、最大化と伝播を行わない
        threshold: 二値化の閾値（既定は T）
        checkpoint_dir: 段ごとの分類器の保存先（完了した段は失敗時も残る）
        report_dir: refine_stage{t}.jsonl の出力先
        workers: 書き換えの並列数
        candidates: 段ごとの行動候補（指定した段は上昇の代わりに候補からQ最大のものを選ぶ）
    Returns:
        InductionState: 学習済み分類器、擬似結果、最適行動
    """
    if not trajectories:
        raise DataError("学習用の軌跡がありません")
    num_stages = trajectories[0].num_stages
    if any(t.num_stages != num_stages for t in trajectories):
        raise DataError("軌跡の段数が揃っていません")

    observed = np.array([binarize_outcome(t.outcome, num_stages, threshold) for t in trajectories], dtype=np.float64)
    values = observed.copy()
    state = InductionState(num_stages=num_stages)
    input_dim = repeat_model.dim
    logger.info(f"後ろ向き帰納を開始します: T={num_stages}, {len(trajectories)}本, 伝播={'あり' if propagate else 'なし'}")

    for stage in range(num_stages, 0, -1):
        try:
            dataset = _stage_dataset(trajectories, stage, values)
            inputs = [build_stage_input(repeat_model, row.history, row.action) for row in dataset.rows]
            stage_seed = derive_seed(classifier_cfg.seed, stage) % (2 ** 31)
            stage_cfg = classifier_cfg.copy(update={"seed": stage_seed})
            # 最終段より前はソフトターゲット（設定で無効化できる）
            if stage == num_stages or not propagate:
                stage_cfg = stage_cfg.copy(update={"soft_targets": False})
            classifier, fit = fit_stage_classifier(dataset, [i.block for i in inputs], stage_cfg, input_dim)
        except PipelineError as e:
            e.context = e.context or f"stage {stage}"
            raise

        state.stage_order.append(stage)
        state.classifiers[stage] = classifier
        state.pseudo_values[stage] = [row.pseudo_value for row in dataset.rows]
        summary = StageSummary(stage=stage, seed=stage_seed, fit=fit,
                               mean_pseudo_value=float(np.mean(state.pseudo_values[stage])))
        if checkpoint_dir is not None:
            save_stage_classifier(classifier, checkpoint_dir, stage)

        if propagate:
            q_original = predict_q_batch(classifier, [i.block for i in inputs])

            def _refine(index: int, row: StageRow) -> RefinementResult:
                if candidates and stage in candidates:
                    return choose_from_candidates(classifier, repeat_model, row.history, row.action, candidates[stage],
                                                  stage=stage, trajectory_id=row.trajectory_id)
                seed = derive_seed(ascent_cfg.seed, stage, index) % (2 ** 63)
                return refine_action(classifier, repeat_model, fluency, row.history, row.action, ascent_cfg,
                                     stage=stage, seed=seed, trajectory_id=row.trajectory_id)

            results = parallel_map(dataset.rows, _refine, workers, desc=f"refine stage{stage}")
            q_refined = np.where([r.changed for r in results], [r.p_after for r in results], q_original)
            state.refinements[stage] = results
            state.optimal_actions[stage] = [r.refined for r in results]
            summary.mean_q_original = float(q_original.mean())
            summary.mean_q_refined = float(q_refined.mean())
            summary.changed = sum(r.changed for r in results)
            logger.info(f"段{stage}: Q(元の行動) 平均 {summary.mean_q_original:.3f} -> "
                        f"Q(最適行動) 平均 {summary.mean_q_refined:.3f} ({summary.changed}件書き換え)")
            if report_dir is not None:
                write_refinement_report(Path(report_dir) / f"refine_stage{stage}.jsonl", results)
            # 次に学習する段の擬似結果 Ỹ_{t-1} = Q_t(H_t, a*_t)
            values = np.clip(q_refined, 0.0, 1.0)
        else:
            state.optimal_actions[stage] = [row.action for row in dataset.rows]
            values = observed

        state.summaries[stage] = summary
        if checkpoint_dir is not None:
            write_induction_manifest(Path(checkpoint_dir) / "induction_manifest.json", state, propagate)

    logger.success(f"後ろ向き帰納が完了しました: 段の順序 {state.stage_order}")
    return state


def write_induction_manifest(path: Path, state: InductionState, propagate: bool) -> Path:
    stats = {}
    for stage, values in state.pseudo_values.items():
        stats[str(stage)] = {"min": float(np.min(values)), "max": float(np.max(values)), "mean": float(np.mean(values))}
    return write_manifest(path, {
        "num_stages": state.num_stages,
        "stage_order": state.stage_order,
        "propagate": propagate,
        "checkpoints": {str(s): f"qf_stage{s}.ntck" for s in state.stage_order},
        "pseudo_value_stats": stats,
        "stages": {str(s): summary.dict() for s, summary in state.summaries.items()},
    })


def tabular_backward_induction(samples: Sequence[Tuple[Tuple[int, ...], int]], num_stages: int,
                               num_actions: int = 2) -> Tuple[Dict[Tuple[int, ...], int], Tuple[int, ...]]:
    """
    行動が離散のときの後ろ向き帰納（Qは経験平均）
    Args:
        samples: (行動列, 二値結果) の観測
        num_stages: 段数
        num_actions: 各段の候補数
    Returns:
        (履歴 -> 最適行動 の方策, 方策に従った行動列)
    """
    sums: Dict[Tuple[int, ...], float] = {}
    counts: Dict[Tuple[int, ...], int] = {}
    for actions, outcome in samples:
        sums[tuple(actions)] = sums.get(tuple(actions), 0.0) + outcome
        counts[tuple(actions)] = counts.get(tuple(actions), 0) + 1

    # 最終段の Q は観測結果の平均、それ以前は次段の最適値
    value: Dict[Tuple[int, ...], float] = {
        seq: sums.get(seq, 0.0) / counts[seq] if counts.get(seq) else 0.0
        for seq in itertools.product(range(num_actions), repeat=num_stages)
    }
    policy: Dict[Tuple[int, ...], int] = {}
    for stage in range(num_stages, 0, -1):
        next_value: Dict[Tuple[int, ...], float] = {}
        for history in itertools.product(range(num_actions), repeat=stage - 1):
            q = [value[history + (a,)] for a in range(num_actions)]
            policy[history] = int(np.argmax(q))
            next_value[history] = max(q)
        value = next_value

    sequence: Tuple[int, ...] = ()
    for _ in range(num_stages):
        sequence = sequence + (policy[sequence],)
    return policy, sequence


def exhaustive_optimum(outcome_probability: Dict[Tuple[int, ...], float]) -> Tuple[int, ...]:
    """全行動列を列挙した最適解"""
    return max(sorted(outcome_probability), key=lambda seq: outcome_probability[seq])
