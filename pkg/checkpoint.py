import hashlib
import json
import struct
from datetime import datetime
from pathlib import Path
from typing import Any, Dict

import numpy as np
from loguru import logger

from exceptions import DataError

MAGIC = b"NTCK1"


def save_tensors(path: Path, tensors: Dict[str, np.ndarray]) -> Path:
    """
    テンソル群をNTCK1形式で保存する
    Args:
        path: 保存先
        tensors: 名前 -> 配列（名前順に書き込む）
    Returns:
        Path: 保存先
    """
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            array = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(array.tobytes(order="C"))
    logger.debug(f"チェックポイントを保存しました: {path} ({len(tensors)}個)")
    return path


def load_tensors(path: Path) -> Dict[str, np.ndarray]:
    """NTCK1形式のチェックポイントを読み込む"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"チェックポイントが見つかりません: {path}")

    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise DataError(f"NTCK1形式ではありません: {path}")

    offset = len(MAGIC)

    def _read(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise DataError(f"チェックポイントが途中で切れています: {path}")
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (count,) = _read("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = _read("<I")
        name = data[offset: offset + name_length].decode("utf-8")
        offset += name_length
        (rank,) = _read("<I")
        shape = _read(f"<{rank}I") if rank else ()
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + n_bytes > len(data):
            raise DataError(f"チェックポイントが途中で切れています: {path} ({name})")
        array = np.frombuffer(data, dtype="<f4", count=n_bytes // 4, offset=offset).reshape(shape)
        offset += n_bytes
        tensors[name] = array.astype(np.float32)
    return tensors


def namespaced(prefix: str, tensors: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{name}": value for name, value in tensors.items()}


def strip_namespace(prefix: str, tensors: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    head = f"{prefix}/"
    return {name[len(head):]: value for name, value in tensors.items() if name.startswith(head)}


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: Path, payload: Dict[str, Any]) -> Path:
    """マニフェストJSONを書き出す（キー順固定）"""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    body = dict(payload)
    body.setdefault("written_at", datetime.now().strftime("%Y-%m-%d %H:%M:%S"))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(body, f, ensure_ascii=False, indent=2, sort_keys=True, default=str)
    return path


def read_manifest(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"マニフェストが見つかりません: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"マニフェストの形式が不正です: {path}: {e}")


def save_module(module, path: Path, prefix: str) -> Path:
    """モジュールのパラメータを名前空間つきで保存する"""
    return save_tensors(path, namespaced(prefix, module.state_dict()))


def load_module(module, path: Path, prefix: str):
    """
    名前空間つきのパラメータをモジュールに読み込む
    Args:
        module: 読み込み先（同じ構造で初期化済みのもの）
        path: チェックポイント
        prefix: 名前空間（"repeat" / "fluency" / "qf/stage2" など）
    Returns:
        読み込み後のモジュール
    """
    state = strip_namespace(prefix, load_tensors(path))
    if not state:
        raise DataError(f"名前空間 '{prefix}' のテンソルがありません: {path}")
    try:
        module.load_state_dict(state)
    except ValueError as e:
        raise DataError(f"チェックポイントがモデル構造と一致しません: {path}: {e}")
    module.eval()
    return module
