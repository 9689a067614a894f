import numpy as np


def edit_distance(a: str, b: str) -> int:
    """
    文字単位のレーベンシュタイン距離（挿入・削除・置換がコスト1）
    Args:
        a: 文字列
        b: 文字列
    Returns:
        int: 距離
    """
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)

    # 1行ずつ更新する
    previous = np.arange(len(b) + 1)
    for i, ca in enumerate(a, start=1):
        current = np.empty_like(previous)
        current[0] = i
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            current[j] = min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + cost)
        previous = current
    return int(previous[-1])
