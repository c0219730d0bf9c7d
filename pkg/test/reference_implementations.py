import numpy as np
from typing_extensions import List, Optional, Sequence

from switch_attention.model.transformer import SwiAttnModel


def rms_norm(x: np.ndarray, scale: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x**2, axis=-1, keepdims=True) + epsilon) * scale


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def rotate(x: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """
    Rotary encoding of one head vector, pair by pair, written with complex numbers.
    """
    head_dim = x.shape[-1]
    result = np.empty_like(x)
    for i in range(head_dim // 2):
        angle = position * base ** (-2.0 * i / head_dim)
        rotated = complex(x[2 * i], x[2 * i + 1]) * complex(np.cos(angle), np.sin(angle))
        result[2 * i], result[2 * i + 1] = rotated.real, rotated.imag
    return result


def attention(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    output: np.ndarray,
    window: Optional[int] = None,
) -> np.ndarray:
    """
    Loop-by-loop causal attention of one sequence.

    :param queries: (T, n_heads, head_dim), already rotated.
    :param keys: (T, n_kv_heads, head_dim), already rotated.
    :param values: (T, n_kv_heads, head_dim).
    :param output: The output projection (n_heads * head_dim, d_model).
    :param window: None for full attention.
    """
    length, n_heads, head_dim = queries.shape
    group = n_heads // keys.shape[1]
    merged = np.zeros((length, n_heads * head_dim))
    for t in range(length):
        start = 0 if window is None else max(0, t - window + 1)
        for h in range(n_heads):
            kv = h // group
            scores = np.array([queries[t, h] @ keys[s, kv] / np.sqrt(head_dim) for s in range(start, t + 1)])
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            merged[t, h * head_dim : (h + 1) * head_dim] = sum(
                w * values[s, kv] for w, s in zip(weights, range(start, t + 1))
            )
    return merged @ output


def forward(model: SwiAttnModel, tokens: Sequence[int], gates: List[np.ndarray]) -> np.ndarray:
    """
    Logits of one sequence with the branch of every (layer, token) given explicitly.
    Only the selected branch of a token is evaluated.
    """
    config = model.config
    a = config.attention
    tokens = np.asarray(tokens)
    hidden = model.embedding.data[tokens]
    for layer, layer_gates in zip(model.layers, gates):
        normalized = rms_norm(hidden, layer.attention_norm.data)
        p = layer.projection
        q = (normalized @ p.query.data).reshape(len(tokens), a.n_heads, a.head_dim)
        k = (normalized @ p.key.data).reshape(len(tokens), a.n_kv_heads, a.head_dim)
        v = (normalized @ p.value.data).reshape(len(tokens), a.n_kv_heads, a.head_dim)
        q = np.array([[rotate(q[t, h], t, a.rope_base) for h in range(a.n_heads)] for t in range(len(tokens))])
        k = np.array([[rotate(k[t, h], t, a.rope_base) for h in range(a.n_kv_heads)] for t in range(len(tokens))])
        full = attention(q, k, v, p.output.data)
        swa = attention(q, k, v, p.output.data, a.window)
        mixed = np.where(np.asarray(layer_gates)[:, None] == 1.0, full, swa)
        hidden = hidden + mixed
        f = layer.feed_forward
        normalized = rms_norm(hidden, layer.ffn_norm.data)
        hidden = hidden + (silu(normalized @ f.gate.data) * (normalized @ f.up.data)) @ f.down.data
    return rms_norm(hidden, model.final_norm.data) @ model.embedding.data.T


def next_token_nll(logits: np.ndarray, tokens: Sequence[int]) -> np.ndarray:
    nll = []
    for t in range(len(tokens) - 1):
        row = logits[t] - logits[t].max()
        nll.append(np.log(np.exp(row).sum()) - row[tokens[t + 1]])
    return np.array(nll)
