import math
from typing import Dict, List, Optional

import numpy as np

import numerics as nx
from numerics import SeededRng, Tensor

# アテンションで使うマスク値（-infは有限性チェックに掛かるため使わない）
MASK_VALUE = -1e9


class Module:
    """パラメータを持つ層の基底クラス"""

    def __init__(self):
        self.training = False

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for attr in sorted(vars(self)):
            value = getattr(self, attr)
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[name] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{name}."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    params.update(child.named_parameters(f"{name}.{i}."))
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def children(self) -> List["Module"]:
        found = []
        for value in vars(self).values():
            if isinstance(value, Module):
                found.append(value)
            elif isinstance(value, list):
                found.extend(v for v in value if isinstance(v, Module))
        return found

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        パラメータを読み込む
        Args:
            state: 名前 -> 配列（過不足があればエラー）
        """
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise nx.ContractError(f"パラメータが一致しません: 不足={missing[:5]} 余分={unexpected[:5]}")
        for name, param in params.items():
            if state[name].shape != param.shape:
                raise nx.DimensionError(f"{name} の形状が一致しません: {state[name].shape} != {param.shape}")
            param.data = np.array(state[name], dtype=param.data.dtype)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _init_param(rng: SeededRng, shape, scale: float) -> Tensor:
    return Tensor(rng.normal(shape, scale=scale), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: SeededRng, bias: bool = True):
        super().__init__()
        self.weight = _init_param(rng, (in_features, out_features), 1.0 / math.sqrt(in_features))
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = nx.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: SeededRng):
        super().__init__()
        self.weight = _init_param(rng, (num_embeddings, dim), 1.0 / math.sqrt(dim))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return nx.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layernorm(x, self.eps) * self.gamma + self.beta


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """正弦波の位置エンコーディング (length, dim)"""
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2, dtype=np.float64) / dim))
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return table.astype(nx.DEFAULT_DTYPE)


def padding_mask(pad_flags: np.ndarray) -> np.ndarray:
    """(B, L) のPADフラグ -> (B, 1, 1, L) の加算マスク"""
    return np.where(pad_flags, MASK_VALUE, 0.0).astype(nx.DEFAULT_DTYPE)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    """未来位置を隠す (1, 1, L, L) の加算マスク"""
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(upper, MASK_VALUE, 0.0).astype(nx.DEFAULT_DTYPE)[None, None, :, :]


class MultiHeadAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: SeededRng, dropout: float = 0.0):
        super().__init__()
        if dim % num_heads != 0:
            raise nx.DimensionError(f"次元 {dim} がヘッド数 {num_heads} で割り切れません")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.dropout = dropout
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return nx.transpose(nx.reshape(x, (batch, length, self.num_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor, mask: Optional[np.ndarray] = None,
                 rng: Optional[SeededRng] = None) -> Tensor:
        batch, length, dim = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(memory))
        v = self._split(self.value(memory))
        scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + Tensor._wrap(mask)
        weights = nx.dropout(nx.softmax(scores, axis=-1), self.dropout, rng, self.training)
        context = nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3))
        return self.output(nx.reshape(context, (batch, length, dim)))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: SeededRng, dropout: float = 0.0):
        super().__init__()
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: Optional[SeededRng] = None) -> Tensor:
        hidden = nx.dropout(nx.relu(self.inner(x)), self.dropout, rng, self.training)
        return self.outer(hidden)


class EncoderLayer(Module):
    """Pre-LN のエンコーダ層"""

    def __init__(self, dim: int, num_heads: int, ff_dim: int, rng: SeededRng, dropout: float = 0.0):
        super().__init__()
        self.attention = MultiHeadAttention(dim, num_heads, rng, dropout)
        self.feed_forward = FeedForward(dim, ff_dim, rng, dropout)
        self.norm_attention = LayerNorm(dim)
        self.norm_feed_forward = LayerNorm(dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None, rng: Optional[SeededRng] = None) -> Tensor:
        h = self.norm_attention(x)
        x = x + nx.dropout(self.attention(h, h, mask, rng), self.dropout, rng, self.training)
        h = self.norm_feed_forward(x)
        return x + nx.dropout(self.feed_forward(h, rng), self.dropout, rng, self.training)


class DecoderLayer(Module):
    """自己アテンション（因果マスク）＋クロスアテンションのデコーダ層"""

    def __init__(self, dim: int, num_heads: int, ff_dim: int, rng: SeededRng, dropout: float = 0.0,
                 cross_attention: bool = True):
        super().__init__()
        self.self_attention = MultiHeadAttention(dim, num_heads, rng, dropout)
        self.cross_attention = MultiHeadAttention(dim, num_heads, rng, dropout) if cross_attention else None
        self.feed_forward = FeedForward(dim, ff_dim, rng, dropout)
        self.norm_self = LayerNorm(dim)
        self.norm_cross = LayerNorm(dim) if cross_attention else None
        self.norm_feed_forward = LayerNorm(dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, memory: Optional[Tensor], self_mask: np.ndarray,
                 memory_mask: Optional[np.ndarray] = None, rng: Optional[SeededRng] = None) -> Tensor:
        h = self.norm_self(x)
        x = x + nx.dropout(self.self_attention(h, h, self_mask, rng), self.dropout, rng, self.training)
        if self.cross_attention is not None:
            h = self.norm_cross(x)
            x = x + nx.dropout(self.cross_attention(h, memory, memory_mask, rng), self.dropout, rng, self.training)
        h = self.norm_feed_forward(x)
        return x + nx.dropout(self.feed_forward(h, rng), self.dropout, rng, self.training)


class EncoderStack(Module):
    """エンコーダ層の積み重ね（最後にLayerNormで単位スケールに揃える）"""

    def __init__(self, dim: int, num_heads: int, ff_dim: int, num_layers: int, rng: SeededRng, dropout: float = 0.0):
        super().__init__()
        self.layers = [EncoderLayer(dim, num_heads, ff_dim, rng, dropout) for _ in range(num_layers)]
        self.final_norm = LayerNorm(dim)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None, rng: Optional[SeededRng] = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask, rng)
        return self.final_norm(x)


class DecoderStack(Module):
    def __init__(self, dim: int, num_heads: int, ff_dim: int, num_layers: int, rng: SeededRng,
                 dropout: float = 0.0, cross_attention: bool = True):
        super().__init__()
        self.layers = [
            DecoderLayer(dim, num_heads, ff_dim, rng, dropout, cross_attention) for _ in range(num_layers)
        ]
        self.final_norm = LayerNorm(dim)

    def __call__(self, x: Tensor, memory: Optional[Tensor], self_mask: np.ndarray,
                 memory_mask: Optional[np.ndarray] = None, rng: Optional[SeededRng] = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory, self_mask, memory_mask, rng)
        return self.final_norm(x)
