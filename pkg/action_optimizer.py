import json
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel

import numerics as nx
from config import AscentConfig
from edit_distance import edit_distance
from fluency_model import FluencyModel, nll
from numerics import NumericalError, SeededRng, Tape, Tensor, derive_seed
from q_learner import POSITIVE_CLASS, StageClassifier, StageInput, build_stage_input, predict_q, predict_q_batch
from repeat_model import EncoderDecoderModel, decode_split
from trajectory import History

# TTSで確率が同点とみなす幅
TIE_TOLERANCE = 1e-4


class AscentSnapshot(BaseModel):
    iteration: int
    block: np.ndarray
    p_positive: float

    class Config:
        arbitrary_types_allowed = True


class AscentTrace(BaseModel):
    """勾配上昇の各反復（0番目は元の埋め込み）"""
    snapshots: List[AscentSnapshot]
    truncated: bool = False

    @property
    def initial(self) -> AscentSnapshot:
        return self.snapshots[0]


class Candidate(BaseModel):
    iteration: int
    text: str
    p_positive: float
    nll: float
    no_eos: bool = False
    no_sep: bool = False


class CandidateChoice(BaseModel):
    """候補選択の結果（改善なしの場合は元のテキスト）"""
    iteration: int
    text: str
    p_positive: float
    candidates: List[Candidate] = []
    no_improvement: bool = False
    no_eos: bool = False
    no_sep: bool = False


class RefinementResult(BaseModel):
    """1つの行動の書き換え結果（フィールド順はレポートの列順）"""
    trajectory_id: str = ""
    stage: int = 1
    original: str
    refined: str
    p_before: float
    p_after: float
    nll: Optional[float] = None
    edit_distance: int
    iterations: int
    chosen_iteration: int = 0
    seed: int = 0
    tts_run: int = 0
    no_eos: bool = False
    no_sep: bool = False
    no_improvement: bool = False
    truncated: bool = False
    error: Optional[str] = None

    @property
    def changed(self) -> bool:
        return self.refined != self.original


def _log_prob_positive(f: StageClassifier, prefix: np.ndarray, action: Tensor, suffix: np.ndarray) -> Tensor:
    rows = [Tensor._wrap(prefix), action]
    if suffix.shape[0]:
        rows.append(Tensor._wrap(suffix))
    block = nx.concat(rows, axis=0)
    logits = f.logits(nx.reshape(block, (1,) + block.shape))
    return nx.log_softmax(logits, axis=-1)[0, POSITIVE_CLASS]


def ascend(f: StageClassifier, stage_input: StageInput, cfg: AscentConfig, iterations: int,
           rng: Optional[SeededRng] = None) -> AscentTrace:
    """
    行動部分の行だけを e <- e + η ∇ log P(y+) で更新する（履歴の行は固定）
    Args:
        f: 段の分類器
        stage_input: 入力列と行動範囲
        cfg: 上昇の設定
        iterations: 反復回数
        rng: 1回目の更新に加える揺らぎの乱数（Noneなら揺らぎなし）
    Returns:
        AscentTrace: 全反復のスナップショット
    """
    start, end = stage_input.span
    if not 0 < start <= end <= stage_input.block.shape[0]:
        raise nx.ContractError(f"行動範囲が不正です: {stage_input.span}")
    f.eval()
    prefix = stage_input.block[:start]
    suffix = stage_input.block[end:]
    current = stage_input.action_rows.copy()
    trace = AscentTrace(snapshots=[
        AscentSnapshot(iteration=0, block=current.copy(), p_positive=predict_q(f, stage_input.block)),
    ])
    if end == start:
        return trace

    for iteration in range(1, iterations + 1):
        try:
            action = Tensor(current, requires_grad=True)
            with Tape() as tape:
                loss = -_log_prob_positive(f, prefix, action, suffix)
            tape.backward(loss, [action])
            step = -action.grad
            updated = current + cfg.step_size * step
            if iteration == 1 and rng is not None and cfg.init_noise > 0:
                updated = updated + rng.normal(current.shape, scale=cfg.init_noise)
            updated = updated.astype(nx.DEFAULT_DTYPE)
            if not np.all(np.isfinite(updated)):
                raise NumericalError("更新後の埋め込みに非有限値が含まれます")
            p = predict_q(f, np.concatenate([prefix, updated, suffix], axis=0))
        except NumericalError as e:
            logger.warning(f"勾配上昇を{iteration - 1}回目で打ち切りました: {e}")
            trace.truncated = True
            break
        current = updated
        trace.snapshots.append(AscentSnapshot(iteration=iteration, block=current.copy(), p_positive=p))
    return trace


def select_candidate(trace: AscentTrace, stage_input: StageInput, f: StageClassifier, repeat_model: EncoderDecoderModel,
                     fluency: FluencyModel, history: History, original: str, cfg: AscentConfig) -> CandidateChoice:
    """
    確率が上がった反復を復号し、NLLが最小のものを選ぶ
    復号後のテキストを再エンコードしても確率が上がらないものは候補から外す
    Returns:
        CandidateChoice: 選ばれた候補（候補なしなら元のテキスト、no_improvement）
    """
    if not trace.snapshots:
        raise nx.ContractError("トレースが空です")
    p_before = trace.initial.p_positive
    improving = [s for s in trace.snapshots[1:] if s.p_positive > p_before]
    if cfg.selection_mode == "last-iterate":
        improving = improving[-1:] if improving and improving[-1] is trace.snapshots[-1] else []

    candidates: List[Candidate] = []
    for snapshot in improving:
        split = decode_split(repeat_model, stage_input.history_rows, snapshot.block,
                             beam=cfg.beam_size, max_len=cfg.max_decode_len)
        text = split.action_text
        if not text or text == original:
            continue
        p_text = predict_q(f, build_stage_input(repeat_model, history, text))
        if p_text <= p_before:
            continue
        candidates.append(Candidate(
            iteration=snapshot.iteration,
            text=text,
            p_positive=p_text,
            nll=nll(fluency, text),
            no_eos=split.no_eos,
            no_sep=split.no_sep,
        ))

    if not candidates:
        return CandidateChoice(iteration=0, text=original, p_positive=p_before, no_improvement=True)

    best = min(candidates, key=lambda c: (c.nll, c.iteration))
    return CandidateChoice(
        iteration=best.iteration,
        text=best.text,
        p_positive=best.p_positive,
        candidates=candidates,
        no_eos=best.no_eos,
        no_sep=best.no_sep,
    )


def refine_action(f: StageClassifier, repeat_model: EncoderDecoderModel, fluency: FluencyModel, history: History,
                  action: str, cfg: AscentConfig, stage: int = 1, seed: Optional[int] = None,
                  trajectory_id: str = "") -> RefinementResult:
    """
    入力作成 -> 勾配上昇 -> 候補選択 をまとめて1つの行動を書き換える
    Args:
        f: 段の分類器
        repeat_model: Repeatモデル
        fluency: 流暢さモデル
        history: 履歴
        action: 元の行動テキスト
        cfg: 上昇の設定
        stage: 段番号（反復回数の決定に使う）
        seed: 揺らぎの乱数シード（省略時は cfg.seed）
    Returns:
        RefinementResult: 書き換え結果
    """
    seed = cfg.seed if seed is None else seed
    iterations = cfg.iterations_for(stage)
    stage_input = build_stage_input(repeat_model, history, action)
    trace = ascend(f, stage_input, cfg, iterations, SeededRng(seed))
    choice = select_candidate(trace, stage_input, f, repeat_model, fluency, history, action, cfg)
    if choice.no_improvement:
        logger.debug(f"{trajectory_id} 段{stage}: 確率が上がる候補がありませんでした")

    return RefinementResult(
        trajectory_id=trajectory_id,
        stage=stage,
        original=action,
        refined=choice.text,
        p_before=trace.initial.p_positive,
        p_after=choice.p_positive,
        nll=nll(fluency, choice.text) if choice.text.strip() else None,
        edit_distance=edit_distance(action, choice.text),
        iterations=len(trace.snapshots) - 1,
        chosen_iteration=choice.iteration,
        seed=seed,
        no_eos=choice.no_eos,
        no_sep=choice.no_sep,
        no_improvement=choice.no_improvement,
        truncated=trace.truncated,
    )


def choose_from_candidates(f: StageClassifier, repeat_model: EncoderDecoderModel, history: History, action: str,
                           candidates: Sequence[str], stage: int = 1, trajectory_id: str = "") -> RefinementResult:
    """
    行動の候補が有限のとき、f_t が最も高い候補を選ぶ（上昇は行わない）
    元の行動より確率が上がらなければ元の行動のまま
    """
    if not candidates:
        raise nx.ContractError("候補が空です")
    blocks = [build_stage_input(repeat_model, history, text).block for text in [action, *candidates]]
    scores = predict_q_batch(f, blocks)
    best = int(np.argmax(scores[1:]))
    improved = scores[1 + best] > scores[0]
    refined = candidates[best] if improved else action
    return RefinementResult(
        trajectory_id=trajectory_id,
        stage=stage,
        original=action,
        refined=refined,
        p_before=float(scores[0]),
        p_after=float(scores[1 + best]) if improved else float(scores[0]),
        edit_distance=edit_distance(action, refined),
        iterations=0,
        no_improvement=not improved,
    )


def better_result(first: RefinementResult, second: RefinementResult) -> RefinementResult:
    """確率が高い方、同点なら編集距離が小さい方、それも同じなら1回目"""
    if abs(first.p_after - second.p_after) > TIE_TOLERANCE:
        return first if first.p_after > second.p_after else second
    if second.edit_distance < first.edit_distance:
        return second
    return first


def tts_refine(f: StageClassifier, repeat_model: EncoderDecoderModel, fluency: FluencyModel, history: History,
               action: str, cfg: AscentConfig, stage: int = 1, seed: Optional[int] = None,
               trajectory_id: str = "") -> RefinementResult:
    """シードを変えて2回書き換え、良い方を返す"""
    seed = cfg.seed if seed is None else seed
    first = refine_action(f, repeat_model, fluency, history, action, cfg, stage, seed, trajectory_id)
    second = refine_action(f, repeat_model, fluency, history, action, cfg, stage,
                           derive_seed(seed, 1) % (2 ** 63), trajectory_id)
    second.tts_run = 1
    return better_result(first, second)


def write_refinement_report(path: Path, results: Sequence[RefinementResult]) -> Path:
    """書き換え結果を1行1件のJSONで書き出す"""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for result in results:
            f.write(json.dumps(result.dict(), ensure_ascii=False) + "\n")
    logger.debug(f"書き換えレポートを書き出しました: {path} ({len(results)}件)")
    return path
