from pathlib import Path
from typing import Dict, Optional, Sequence
import hashlib
import json
from pydantic import BaseModel, ValidationError, validator
from loguru import logger

from exceptions import ConfigError
from numerics import derive_seed

# プロジェクトルートディレクトリの取得
ROOT_DIR = Path(__file__).parent

VARIANTS = ("base", "tts", "one-stage")
GRAMMAR_MODES = ("one-pair", "two-pairs")
SELECTION_MODES = ("nll-best", "last-iterate")


class PathsConfig(BaseModel):
    data_dir: Path = ROOT_DIR / "data"
    checkpoint_dir: Path = ROOT_DIR / "checkpoints"
    report_dir: Path = ROOT_DIR / "reports"
    logs_dir: Path = ROOT_DIR / "logs"
    grammar_path: Path = ROOT_DIR / "grammar" / "signal_grammar.json"


class GrammarConfig(BaseModel):
    mode: str = "one-pair"

    @validator('mode')
    def mode_must_be_known(cls, v):
        if v not in GRAMMAR_MODES:
            raise ValueError(f'grammar.modeは {GRAMMAR_MODES} のいずれかを設定してください')
        return v


class DataConfig(BaseModel):
    num_stages: int = 2
    x_per_combo: int = 250
    test_negatives: int = 500
    repeat_corpus_size: int = 4000
    holdout_fraction: float = 0.05
    success_threshold: Optional[int] = None

    @validator('num_stages', 'x_per_combo', 'test_negatives', 'repeat_corpus_size')
    def must_be_positive(cls, v):
        if v < 1:
            raise ValueError('1以上の値を設定してください')
        return v

    @validator('holdout_fraction')
    def fraction_must_be_valid(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError('holdout_fractionは0から1の間で設定してください')
        return v

    def threshold(self) -> int:
        return self.success_threshold if self.success_threshold is not None else self.num_stages


class TransformerConfig(BaseModel):
    dim: int = 128
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_dim: int = 512
    dropout: float = 0.0
    max_len: int = 256

    @validator('dim', 'num_heads', 'ff_dim', 'max_len')
    def must_be_positive(cls, v):
        if v < 1:
            raise ValueError('1以上の値を設定してください')
        return v


class TrainConfig(BaseModel):
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 4
    max_grad_norm: float = 1.0
    seed: int = 11

    @validator('lr', 'max_grad_norm')
    def must_be_positive(cls, v):
        if v <= 0:
            raise ValueError('正の値を設定してください')
        return v

    @validator('batch_size')
    def batch_must_be_positive(cls, v):
        if v < 1:
            raise ValueError('batch_sizeは1以上を設定してください')
        return v

    @validator('epochs')
    def epochs_must_be_valid(cls, v):
        if v < 0:
            raise ValueError('epochsは0以上を設定してください')
        return v


class ClassifierTrainConfig(TrainConfig):
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 15
    dropout: float = 0.1
    hidden: int = 128
    num_heads: int = 8
    num_layers: int = 3
    soft_targets: bool = True
    imbalance_threshold: float = 0.9
    seed: int = 23

    @validator('dropout')
    def dropout_must_be_valid(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError('dropoutは0以上1未満を設定してください')
        return v


class AscentConfig(BaseModel):
    stage_iterations: Dict[int, int] = {2: 10, 1: 15}
    default_iterations: int = 10
    step_size: float = 0.5
    selection_mode: str = "nll-best"
    init_noise: float = 0.05
    beam_size: int = 3
    max_decode_len: int = 256
    seed: int = 37

    @validator('step_size')
    def step_must_be_positive(cls, v):
        if v <= 0:
            raise ValueError('step_sizeは正の値を設定してください')
        return v

    @validator('init_noise')
    def noise_must_be_valid(cls, v):
        if v < 0:
            raise ValueError('init_noiseは0以上を設定してください')
        return v

    @validator('default_iterations')
    def iterations_must_be_valid(cls, v):
        if v < 0:
            raise ValueError('iterationsは0以上を設定してください')
        return v

    @validator('stage_iterations')
    def stage_iterations_must_be_valid(cls, v):
        if any(n < 0 for n in v.values()):
            raise ValueError('stage_iterationsは0以上を設定してください')
        return v

    @validator('selection_mode')
    def selection_must_be_known(cls, v):
        if v not in SELECTION_MODES:
            raise ValueError(f'selection_modeは {SELECTION_MODES} のいずれかを設定してください')
        return v

    @validator('beam_size', 'max_decode_len')
    def decode_must_be_positive(cls, v):
        if v < 1:
            raise ValueError('1以上の値を設定してください')
        return v

    def iterations_for(self, stage: int) -> int:
        return self.stage_iterations.get(stage, self.default_iterations)


class EvalConfig(BaseModel):
    refine_all_stages: bool = False
    workers: int = 4
    cv_folds: int = 5

    @validator('workers')
    def workers_must_be_positive(cls, v):
        if v < 1:
            raise ValueError('workersは1以上を設定してください')
        return v

    @validator('cv_folds')
    def folds_must_be_valid(cls, v):
        if v < 2:
            raise ValueError('cv_foldsは2以上を設定してください')
        return v


class PipelineConfig(BaseModel):
    paths: PathsConfig = PathsConfig()
    grammar: GrammarConfig = GrammarConfig()
    data: DataConfig = DataConfig()
    repeat_model: TransformerConfig = TransformerConfig()
    repeat_training: TrainConfig = TrainConfig(lr=1e-3, epochs=6, seed=11)
    fluency_model: TransformerConfig = TransformerConfig(encoder_layers=0, decoder_layers=2)
    fluency_training: TrainConfig = TrainConfig(lr=1e-3, epochs=4, seed=13)
    classifier: ClassifierTrainConfig = ClassifierTrainConfig()
    eval_classifier: ClassifierTrainConfig = ClassifierTrainConfig(epochs=5, seed=29)
    ascent: AscentConfig = AscentConfig()
    evaluation: EvalConfig = EvalConfig()
    variant: str = "base"
    propagate_pseudo_outcomes: bool = True
    seed: int = 20240601

    class Config:
        arbitrary_types_allowed = True

    @validator('variant')
    def variant_must_be_known(cls, v):
        if v not in VARIANTS:
            raise ValueError(f'variantは {VARIANTS} のいずれかを設定してください')
        return v

    def stage_count(self) -> int:
        # one-stage は全ての否定文を1段に置く
        return 1 if self.variant == "one-stage" else self.data.num_stages


def config_hash(cfg: PipelineConfig, keys: Optional[Sequence[str]] = None) -> str:
    """設定内容のハッシュ（キー順を固定したJSONから計算、keysを渡すとその項目だけ）"""
    data = cfg.dict()
    if keys is not None:
        data = {key: data[key] for key in keys}
    body = json.dumps(data, sort_keys=True, default=str, ensure_ascii=False)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def load_config(path: Optional[Path] = None) -> PipelineConfig:
    """設定ファイルを読み込む"""
    config_path = Path(path) if path else ROOT_DIR / "config.json"

    if not config_path.exists():
        if path:
            raise ConfigError(f"設定ファイルが見つかりません: {config_path}")
        # デフォルト設定を作成
        default_config = json.loads(PipelineConfig().json())
        with open(config_path, 'w', encoding='utf-8') as f:
            json.dump(default_config, f, indent=4, ensure_ascii=False)

        logger.info(f"デフォルト設定ファイルを作成しました: {config_path}")

    # 設定ファイル読み込み
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config_data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"設定ファイルの形式が不正です: {config_path}: {e}")

    # 相対パスは設定ファイルの場所を基準にする
    paths = config_data.get('paths', {})
    for key, value in list(paths.items()):
        if value:
            p = Path(value)
            paths[key] = p if p.is_absolute() else (config_path.parent / p)

    try:
        return PipelineConfig(**config_data)
    except ValidationError as e:
        raise ConfigError(f"設定値が不正です: {e}")


def apply_overrides(cfg: PipelineConfig, seed: Optional[int] = None, variant: Optional[str] = None,
                    out: Optional[Path] = None) -> PipelineConfig:
    """
    コマンドライン引数で設定を上書きする
    Args:
        cfg: 元の設定
        seed: 全体シード（各部品のシードもここから導出する）
        variant: base / tts / one-stage
        out: 出力ルート（data, checkpoints, reports, logs をこの下に置く）
    Returns:
        PipelineConfig: 上書き後の設定
    """
    data = cfg.dict()
    if seed is not None:
        data['seed'] = seed
        for i, key in enumerate(['repeat_training', 'fluency_training', 'classifier', 'eval_classifier', 'ascent']):
            data[key]['seed'] = derive_seed(seed, i + 1) % (2 ** 31)
    if variant is not None:
        data['variant'] = variant
    if out is not None:
        out = Path(out)
        data['paths'].update({
            'data_dir': out / "data",
            'checkpoint_dir': out / "checkpoints",
            'report_dir': out / "reports",
            'logs_dir': out / "logs",
        })
    try:
        return PipelineConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"設定値が不正です: {e}")


def ensure_dirs(cfg: PipelineConfig) -> None:
    for dir_path in [cfg.paths.data_dir, cfg.paths.checkpoint_dir, cfg.paths.report_dir, cfg.paths.logs_dir]:
        dir_path.mkdir(exist_ok=True, parents=True)


# 設定の初期化
config = load_config()
