import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

# 32bit浮動小数点で統一
DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    """形状の不一致"""


class ContractError(ValueError):
    """呼び出し規約違反"""


class NumericalError(ArithmeticError):
    """NaN/Infの発生"""


_state = threading.local()


def _tape_stack() -> List[Optional["Tape"]]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> Optional["Tape"]:
    """現在のスレッドで有効なテープ（なければNone）"""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """勾配の記録を一時的に止める"""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} で非有限値(NaN/Inf)が発生しました")


class Tensor:
    """自動微分付きの密テンソル"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out.op = "leaf"
        out._parents = ()
        out._backward_fn = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self, params: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, params)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # 演算子
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(value: Union[Tensor, ArrayLike], dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


class Tape:
    """
    順伝播ごとに作り直す演算記録
    記録順がそのまま評価順になるため、逆順に辿れば位相順になる
    """

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def record(self, node: Tensor) -> None:
        node._tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
        """
        損失からの逆伝播
        Args:
            loss: スカラーの損失テンソル
            params: 勾配を受け取るパラメータ（関与しないものはゼロ勾配になる）
        """
        if loss.data.size != 1:
            raise ContractError(f"backwardはスカラーにのみ適用できます: shape={loss.shape}")
        if loss._tape is not self:
            raise ContractError("lossがこのテープに記録されていません")

        for p in params or []:
            p.grad = np.zeros_like(p.data)

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            parent_grads = node._backward_fn(grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                _check_finite(parent_grad, f"{node.op}.backward")
                if parent.is_leaf:
                    if parent.grad is None:
                        parent.grad = np.array(parent_grad, dtype=parent.data.dtype)
                    else:
                        parent.grad = parent.grad + parent_grad
                else:
                    key = id(parent)
                    grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """lossが記録されたテープ上で逆伝播を行う"""
    if loss.data.size != 1:
        raise ContractError(f"backwardはスカラーにのみ適用できます: shape={loss.shape}")
    if loss._tape is None:
        raise ContractError("lossがテープに記録されていません（Tapeの外で計算された可能性があります）")
    loss._tape.backward(loss, params)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        out.op = op
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # ブロードキャストで増えた軸を畳み込む
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# 要素ごとの演算

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericalError("ゼロ除算が発生しました")
    return _make(
        a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericalError("logの引数が正ではありません")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.data.dtype)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


# 形状操作

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    行列積（先頭の軸はバッチとしてブロードキャスト）
    Args:
        a: (..., n, k)
        b: (..., k, m)
    Returns:
        Tensor: (..., n, m)
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmulには2次元以上が必要です: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"内側の次元が一致しません: {a.shape} @ {b.shape}")

    def _backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), _backward, "matmul")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def index(x: Tensor, key) -> Tensor:
    def _backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _make(np.array(x.data[key]), (x,), _backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concatには1つ以上のテンソルが必要です")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _backward, "concat")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """埋め込み表の行を引く（逆伝播は同じ行へ加算）"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"埋め込みIDが範囲外です: 0..{weight.shape[0] - 1}")

    def _backward(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _make(weight.data[ids], (weight,), _backward, "embedding")


# 集約

def reduce_sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _make(np.asarray(out, dtype=x.data.dtype), (x,), _backward, "sum")


def reduce_mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# 確率

def _softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """最大値を引いてから指数を取る安定なsoftmax"""
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"axisが不正です: {axis} (ndim={x.ndim})")
    out = _softmax_array(x.data, axis)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), _backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - logsum
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), _backward, "log_softmax")


def cross_entropy(
    logits: Tensor,
    targets: Union[int, np.ndarray],
    weights: Optional[np.ndarray] = None,
) -> Tensor:
    """
    交差エントロピー損失（行の加重平均）
    Args:
        logits: (..., C) のロジット
        targets: クラス番号（スカラーまたは (...) の整数配列）、または (..., C) の確率分布（ソフトターゲット）
        weights: (...) の行ごとの重み。0の行は損失に寄与しない（PADの除外など）
    Returns:
        Tensor: スカラー損失
    """
    num_classes = logits.shape[-1]
    flat = logits.data.reshape(-1, num_classes)
    rows = flat.shape[0]

    target_array = np.asarray(targets)
    if np.issubdtype(target_array.dtype, np.integer):
        target_index = target_array.reshape(-1)
        if target_index.size != rows:
            raise DimensionError(f"ターゲット数が一致しません: {target_index.size} != {rows}")
        if target_index.size and (target_index.min() < 0 or target_index.max() >= num_classes):
            raise ContractError(f"ターゲットのクラス番号が範囲外です: 0..{num_classes - 1}")
        q = np.zeros_like(flat)
        q[np.arange(rows), target_index] = 1.0
    else:
        q = target_array.astype(flat.dtype).reshape(-1, num_classes)
        if q.shape[0] != rows:
            raise DimensionError(f"ソフトターゲットの形状が一致しません: {q.shape}")

    w = np.ones(rows, dtype=flat.dtype) if weights is None else np.asarray(weights, dtype=flat.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ContractError("有効な行がありません（重みの合計が0）")

    shifted = flat - flat.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    row_loss = -(q * log_probs).sum(axis=1)
    loss = np.asarray((w * row_loss).sum() / total, dtype=flat.dtype)
    probs = np.exp(log_probs)

    def _backward(g):
        grad = (probs * q.sum(axis=1, keepdims=True) - q) * (w / total)[:, None]
        return ((g * grad).reshape(logits.shape).astype(logits.data.dtype),)

    return _make(loss, (logits,), _backward, "cross_entropy")


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """最終軸の正規化（アフィン変換前）"""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("layernormには最終軸の長さが1以上必要です")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd

    def _backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - g_mean - xhat * gx_mean),)

    return _make(xhat.astype(x.data.dtype), (x,), _backward, "layernorm")


def dropout(x: Tensor, p: float, rng: Optional["SeededRng"], training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor._wrap(keep))


# 最適化

class OptimizerState:
    """Adamのモーメント蓄積"""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ContractError(f"学習率は正である必要があります: {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}


def optimizer_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    max_grad_norm: Optional[float] = None,
) -> Tuple[Dict[str, Tensor], OptimizerState]:
    """
    バイアス補正付きAdamの1ステップ（パラメータはその場で更新）
    Args:
        params: 名前 -> パラメータ
        grads: 名前 -> 勾配（ないものはゼロ扱い）
        state: オプティマイザ状態
        max_grad_norm: 指定時は全体のノルムでクリップ
    Returns:
        更新後のパラメータと状態
    """
    for name, grad in grads.items():
        if name in params and grad.shape != params[name].shape:
            raise DimensionError(f"勾配の形状が一致しません: {name} {grad.shape} != {params[name].shape}")

    scale = 1.0
    if max_grad_norm is not None and grads:
        total_norm = float(np.sqrt(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads.values()])))
        if total_norm > max_grad_norm:
            scale = max_grad_norm / (total_norm + 1e-12)

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name in sorted(params):
        param = params[name]
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        elif scale != 1.0:
            grad = grad * scale
        m = state.first_moment.setdefault(name, np.zeros_like(param.data))
        v = state.second_moment.setdefault(name, np.zeros_like(param.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        param.data = (param.data - update).astype(param.data.dtype)
        _check_finite(param.data, f"optimizer_step({name})")
    return params, state


class AdamOptimizer:
    """名前付きパラメータ群に対するAdam"""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: Optional[float] = 1.0):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.max_grad_norm = max_grad_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        optimizer_step(self.params, grads, self.state, self.max_grad_norm)


# 乱数

_UINT64_MASK = (1 << 64) - 1


def derive_seed(seed: int, *keys: int) -> int:
    """(seed, keys) から決定的に64bitシードを導出する"""
    words = np.random.SeedSequence([int(seed) & _UINT64_MASK, *[int(k) & _UINT64_MASK for k in keys]])
    state = words.generate_state(2, np.uint32)
    return (int(state[0]) << 32) | int(state[1])


class SeededRng:
    """
    Philox（カウンタ方式）による決定的な乱数列
    同じシードなら環境によらず同じ系列になる
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _UINT64_MASK
        self.generator = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, *keys: int) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *keys))

    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, items: Sequence):
        return items[int(self.generator.integers(0, len(items)))]

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


# 勾配検査

def gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-3,
) -> float:
    """
    解析勾配と中心差分の相対誤差（64bitで評価）
    Args:
        fn: Tensorを受け取りスカラーTensorを返す関数
        inputs: 入力配列
        h: 差分幅
    Returns:
        float: 全入力での最大相対誤差
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    tape.backward(loss, tensors)

    worst = 0.0
    with no_grad():
        for i, array in enumerate(arrays):
            numeric = np.zeros_like(array)
            for idx in np.ndindex(array.shape):
                original = array[idx]
                array[idx] = original + h
                plus = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).item()
                array[idx] = original - h
                minus = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).item()
                array[idx] = original
                numeric[idx] = (plus - minus) / (2.0 * h)
            analytic = tensors[i].grad
            denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-8)
            error = float(np.linalg.norm(analytic - numeric) / denom)
            worst = max(worst, error)
    logger.debug(f"勾配検査: 最大相対誤差 {worst:.2e}")
    return worst
