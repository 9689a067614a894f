import itertools
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from loguru import logger
from pydantic import BaseModel, StrictInt, ValidationError, validator

from exceptions import TrajectoryFormatError, TrajectoryValidationError
from numerics import SeededRng
from signal_grammar import NEGATIVE, POSITIVE, SignalGrammar, generate_sentence


class StageRecord(BaseModel):
    """1段分のテキスト（元文 L_t と編集後 A_t）"""
    source: str
    action: str
    label: Optional[StrictInt] = None

    @validator('label')
    def label_must_be_binary(cls, v):
        if v is not None and v not in (0, 1):
            raise ValueError('labelは0か1である必要があります')
        return v


class Trajectory(BaseModel):
    """多段エピソード"""
    id: str
    stages: List[StageRecord]
    outcome: StrictInt

    @validator('stages')
    def stages_must_exist(cls, v):
        if not v:
            raise ValueError('stagesは1つ以上必要です')
        return v

    @validator('outcome')
    def outcome_must_be_in_range(cls, v, values):
        stages = values.get('stages')
        if stages is not None and not 0 <= v <= len(stages):
            raise ValueError(f'outcomeは0から{len(stages)}の間である必要があります: {v}')
        return v

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def history(self, stage: int) -> "History":
        return History(self.stages, stage)


class History:
    """
    段 t で行動を選ぶ前に見えている履歴 (L_1, A_1, ..., L_t)
    軌跡の先頭部分へのビューで、テキストは複製しない
    """

    def __init__(self, stages: Sequence[StageRecord] = (), stage: int = 0):
        if not 0 <= stage <= len(stages):
            raise ValueError(f"stageが範囲外です: {stage}")
        self._stages = stages
        self.stage = stage

    @classmethod
    def empty(cls) -> "History":
        return cls((), 0)

    def items(self) -> List[str]:
        texts: List[str] = []
        for i in range(self.stage):
            texts.append(self._stages[i].source)
            if i < self.stage - 1:
                texts.append(self._stages[i].action)
        return texts

    def flatten(self) -> str:
        return " ".join(t for t in self.items() if t)

    def __len__(self) -> int:
        return len(self.items())


class StageRow(BaseModel):
    """段ごとの学習行"""
    trajectory_id: str
    history: History
    action: str
    pseudo_label: int
    pseudo_value: float

    class Config:
        arbitrary_types_allowed = True

    @validator('pseudo_value')
    def value_must_be_probability(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f'pseudo_valueは[0,1]である必要があります: {v}')
        return v


class StageDataset(BaseModel):
    stage: int
    rows: List[StageRow]

    class Config:
        arbitrary_types_allowed = True


def label_patterns(num_stages: int) -> List[Tuple[int, ...]]:
    """全ラベル組み合わせ（T=2なら (+,+),(+,-),(-,+),(-,-)）"""
    return list(itertools.product((1, 0), repeat=num_stages))


def assemble_trajectories(grammar: SignalGrammar, x_per_combo: int, num_stages: int,
                          rng: SeededRng) -> List[Trajectory]:
    """
    ラベル組み合わせごとに x 本ずつ軌跡を組み立てる
    Args:
        grammar: 文法
        x_per_combo: 組み合わせごとの本数
        num_stages: 段数 T
        rng: 乱数
    Returns:
        List[Trajectory]: 2^T * x 本（行動は元文で初期化、結果は正ラベル数）
    """
    if x_per_combo < 1:
        raise ValueError("x_per_comboは1以上である必要があります")

    drafts = []
    for pattern in label_patterns(num_stages):
        for _ in range(x_per_combo):
            stages = []
            for label in pattern:
                sentence = generate_sentence(grammar, POSITIVE if label else NEGATIVE, rng)
                stages.append(StageRecord(source=sentence.text, action=sentence.text, label=sentence.label))
            drafts.append(stages)

    order = rng.permutation(len(drafts))
    trajectories = [
        Trajectory(id=f"t-{i:06d}", stages=drafts[j], outcome=sum(s.label for s in drafts[j]))
        for i, j in enumerate(order)
    ]
    logger.info(f"軌跡を{len(trajectories)}本組み立てました (T={num_stages}, x={x_per_combo})")
    return trajectories


def build_test_set(grammar: SignalGrammar, num_negatives: int, num_stages: int, rng: SeededRng,
                   one_stage: bool = False) -> List[Trajectory]:
    """
    テスト用の軌跡を作る（否定文を1本につき1つ、ランダムな段に置く）
    one_stage の場合は全否定文を1段の軌跡に置く
    """
    trajectories = []
    for i in range(num_negatives):
        stages_here = 1 if one_stage else num_stages
        negative_at = 0 if one_stage else int(rng.integers(0, stages_here))
        stages = []
        for k in range(stages_here):
            sentence = generate_sentence(grammar, NEGATIVE if k == negative_at else POSITIVE, rng)
            stages.append(StageRecord(source=sentence.text, action=sentence.text, label=sentence.label))
        trajectories.append(Trajectory(id=f"test-{i:06d}", stages=stages, outcome=sum(s.label for s in stages)))
    logger.info(f"テスト軌跡を{len(trajectories)}本作成しました (one_stage={one_stage})")
    return trajectories


def kfold_split(trajectories: Sequence[Trajectory], k: int,
                rng: SeededRng) -> List[Tuple[List[Trajectory], List[Trajectory]]]:
    """互いに素なk分割で (学習, 評価) の組を返す"""
    if not 2 <= k <= len(trajectories):
        raise ValueError(f"kは2から{len(trajectories)}の間である必要があります: {k}")
    order = rng.permutation(len(trajectories))
    folds = [[trajectories[j] for j in order[f::k]] for f in range(k)]
    return [
        ([t for g, fold in enumerate(folds) if g != f for t in fold], folds[f])
        for f in range(k)
    ]


def _to_record(trajectory: Trajectory) -> Dict:
    # フィールド順は固定（バイト単位で安定させる）
    stages = []
    for stage in trajectory.stages:
        item = {"source": stage.source, "action": stage.action}
        if stage.label is not None:
            item["label"] = stage.label
        stages.append(item)
    return {"id": trajectory.id, "stages": stages, "outcome": trajectory.outcome}


def write_trajectories(path: Path, trajectories: Sequence[Trajectory]) -> Path:
    """軌跡をJSON Linesで書き出す"""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for trajectory in trajectories:
            f.write(json.dumps(_to_record(trajectory), ensure_ascii=False) + "\n")
    logger.debug(f"軌跡を書き出しました: {path} ({len(trajectories)}本)")
    return path


def read_trajectories(path: Path) -> List[Trajectory]:
    """
    JSON Linesの軌跡ファイルを読み込む
    Args:
        path: ファイルパス
    Returns:
        List[Trajectory]: 検証済みの軌跡
    """
    path = Path(path)
    if not path.exists():
        raise TrajectoryFormatError(0, f"ファイルが見つかりません: {path}")

    trajectories = []
    with open(path, 'rb') as f:
        for line_number, raw in enumerate(f, start=1):
            try:
                line = raw.decode('utf-8')
            except UnicodeDecodeError as e:
                raise TrajectoryFormatError(line_number, f"UTF-8として読めません: {e}")
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise TrajectoryFormatError(line_number, f"JSONとして読めません: {e}")

            # 必要なキーがあるか確認
            if not isinstance(record, dict):
                raise TrajectoryFormatError(line_number, "オブジェクトではありません")
            missing = [key for key in ("id", "stages", "outcome") if key not in record]
            if missing:
                raise TrajectoryFormatError(line_number, f"必要なキーがありません: {', '.join(missing)}")

            try:
                trajectories.append(Trajectory(**record))
            except ValidationError as e:
                raise TrajectoryValidationError(f"{line_number}行目: {e}")

    logger.info(f"軌跡を読み込みました: {path} ({len(trajectories)}本)")
    return trajectories
