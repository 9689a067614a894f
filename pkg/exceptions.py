from typing import Optional


class PipelineError(Exception):
    """パイプライン全体で使う例外の基底クラス"""

    exit_code = 1

    def __init__(self, message: str, context: Optional[str] = None):
        self.message = message
        self.context = context
        super().__init__(f"[{context}] {message}" if context else message)


class ConfigError(PipelineError):
    """設定ファイルの不備"""

    exit_code = 2


class DataError(PipelineError):
    """入力データの不備"""

    exit_code = 3


class TrainingDivergenceError(PipelineError):
    """学習の発散（損失がNaN/Inf）"""

    exit_code = 4


class OOVError(DataError):
    """語彙にない単語"""

    def __init__(self, word: str):
        self.word = word
        super().__init__(f"語彙にない単語です: '{word}'")


class TrajectoryFormatError(DataError):
    """軌跡ファイルの行が壊れている"""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"{line_number}行目: {message}")


class TrajectoryValidationError(DataError):
    """軌跡の不変条件違反"""
