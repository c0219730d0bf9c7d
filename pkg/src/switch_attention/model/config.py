from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from random_events.utils import SubclassJSONSerializer
from typing_extensions import Any, Dict, List, Optional, Self

from ..exceptions import ConfigurationError


class AttentionMode(Enum):
    """
    How a model chooses between the full and the sliding-window branch.
    """

    SWIATTN = "swiattn"
    """
    A learned router decides per token and per layer.
    """

    FULL_ONLY = "full_only"
    SWA_ONLY = "swa_only"

    STATIC_HYBRID = "static_hybrid"
    """
    A fixed per-layer pattern of branches.
    """


class Branch(Enum):
    FULL = "full"
    SWA = "swa"

    @property
    def gate(self) -> float:
        return 1.0 if self is Branch.FULL else 0.0


def default_static_hybrid_pattern(n_layers: int) -> List[Branch]:
    """
    One full attention layer after every three sliding-window layers.
    """
    return [Branch.FULL if (i + 1) % 4 == 0 else Branch.SWA for i in range(n_layers)]


@dataclass
class AttentionConfig(SubclassJSONSerializer):
    """
    Shape of the shared query/key/value projection and of the two attention branches of one layer.
    """

    d_model: int = 128
    n_heads: int = 4
    n_kv_heads: int = 2
    """
    Number of key/value heads. Every key/value head serves n_heads / n_kv_heads query heads.
    """

    head_dim: int = 32
    window: int = 16
    """
    Number of most recent tokens, the current one included, the sliding-window branch attends to.
    """

    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_kv_heads", "head_dim", "window"):
            if getattr(self, name) < 1:
                raise ConfigurationError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigurationError(
                "n_kv_heads", f"n_heads={self.n_heads} is not a multiple of n_kv_heads={self.n_kv_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigurationError("head_dim", f"rotary encoding needs an even head_dim, got {self.head_dim}")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_json(self) -> Dict[str, Any]:
        return {
            **super().to_json(),
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "window": self.window,
            "rope_base": self.rope_base,
        }

    @classmethod
    def _from_json(cls, data: Dict[str, Any], **kwargs) -> Self:
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class RouterConfig(SubclassJSONSerializer):
    threshold: float = 0.5
    """
    Hard gate is 1 iff the soft gate is strictly greater than this value.
    """

    init_bias: float = 2.0
    """
    Bias of freshly initialized routers. A positive value starts every token on the full branch.
    """

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold", f"must lie in (0, 1), got {self.threshold}")

    def to_json(self) -> Dict[str, Any]:
        return {**super().to_json(), "threshold": self.threshold, "init_bias": self.init_bias}

    @classmethod
    def _from_json(cls, data: Dict[str, Any], **kwargs) -> Self:
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class RegularizerConfig(SubclassJSONSerializer):
    """
    Weights of the softplus penalty that pushes router logits towards the sliding-window branch.
    """

    gamma_base: float = 1e-3
    epsilon: float = 0.1
    alpha: float = 100.0
    """
    Weight of the branch disagreement in the denominator of the adaptive weight.
    """

    adaptive: bool = True
    """
    If False, every token is penalized with the constant gamma_base.
    """

    use_nll: bool = True
    """
    If False, the token's NLL is left out of the denominator of the adaptive weight.
    """

    def __post_init__(self):
        if self.gamma_base < 0:
            raise ConfigurationError("gamma_base", f"must be >= 0, got {self.gamma_base}")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon", f"must be > 0, got {self.epsilon}")
        if self.alpha < 0:
            raise ConfigurationError("alpha", f"must be >= 0, got {self.alpha}")

    @property
    def upper_bound(self) -> float:
        return self.gamma_base / self.epsilon if self.adaptive else self.gamma_base

    def to_json(self) -> Dict[str, Any]:
        return {
            **super().to_json(),
            "gamma_base": self.gamma_base,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "adaptive": self.adaptive,
            "use_nll": self.use_nll,
        }

    @classmethod
    def _from_json(cls, data: Dict[str, Any], **kwargs) -> Self:
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class ModelConfig(SubclassJSONSerializer):
    """
    Architecture of a routed hybrid transformer. The defaults describe the desk-scale model.
    """

    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 4
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    ffn_hidden: int = 256
    attention_mode: AttentionMode = AttentionMode.SWIATTN
    static_hybrid_pattern: Optional[List[Branch]] = None
    """
    Branch of every layer in static hybrid mode. Defaults to [swa, swa, swa, full] repeated.
    """

    router: RouterConfig = field(default_factory=RouterConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    max_seq_len: int = 256

    def __post_init__(self):
        if isinstance(self.attention_mode, str):
            self.attention_mode = AttentionMode(self.attention_mode)
        if self.n_layers < 1:
            raise ConfigurationError("n_layers", f"must be >= 1, got {self.n_layers}")
        for name in ("vocab_size", "ffn_hidden", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.attention.d_model != self.d_model:
            raise ConfigurationError(
                "attention.d_model", f"{self.attention.d_model} differs from d_model={self.d_model}"
            )
        if self.attention_mode is AttentionMode.STATIC_HYBRID:
            if self.static_hybrid_pattern is None:
                self.static_hybrid_pattern = default_static_hybrid_pattern(self.n_layers)
            self.static_hybrid_pattern = [Branch(b) for b in self.static_hybrid_pattern]
            if len(self.static_hybrid_pattern) != self.n_layers:
                raise ConfigurationError(
                    "static_hybrid_pattern",
                    f"has {len(self.static_hybrid_pattern)} entries for {self.n_layers} layers",
                )
        elif self.static_hybrid_pattern is not None:
            self.static_hybrid_pattern = [Branch(b) for b in self.static_hybrid_pattern]

    @classmethod
    def toy(
        cls,
        attention_mode: AttentionMode = AttentionMode.SWIATTN,
        window: int = 3,
        n_layers: int = 2,
        **overrides: Any,
    ) -> ModelConfig:
        """
        A model small enough for gradient checks and exhaustive property tests.
        """
        d_model = overrides.pop("d_model", 8)
        attention = AttentionConfig(d_model=d_model, n_heads=2, n_kv_heads=1, head_dim=4, window=window)
        settings = dict(vocab_size=32, ffn_hidden=16, max_seq_len=64)
        settings.update(overrides)
        return cls(
            d_model=d_model,
            n_layers=n_layers,
            attention=attention,
            attention_mode=attention_mode,
            **settings,
        )

    @property
    def has_router(self) -> bool:
        return self.attention_mode is AttentionMode.SWIATTN

    def fixed_gates(self) -> Optional[List[float]]:
        """
        :return: The constant gate of every layer, or None if a router decides.
        """
        if self.attention_mode is AttentionMode.FULL_ONLY:
            return [1.0] * self.n_layers
        if self.attention_mode is AttentionMode.SWA_ONLY:
            return [0.0] * self.n_layers
        if self.attention_mode is AttentionMode.STATIC_HYBRID:
            return [branch.gate for branch in self.static_hybrid_pattern]
        return None

    def with_attention_mode(
        self, attention_mode: AttentionMode, static_hybrid_pattern: Optional[List[Branch]] = None
    ) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            attention=self.attention,
            ffn_hidden=self.ffn_hidden,
            attention_mode=attention_mode,
            static_hybrid_pattern=static_hybrid_pattern,
            router=self.router,
            regularizer=self.regularizer,
            max_seq_len=self.max_seq_len,
        )

    def parameter_count(self) -> int:
        d, a = self.d_model, self.attention
        projections = d * a.n_heads * a.head_dim * 2 + d * a.n_kv_heads * a.head_dim * 2
        router = d + 1 if self.has_router else 0
        per_layer = 2 * d + projections + router + 3 * d * self.ffn_hidden
        return self.vocab_size * d + self.n_layers * per_layer + d

    def shape_signature(self) -> Dict[str, Any]:
        """
        Everything that determines parameter shapes except the attention mode.
        """
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.attention.n_heads,
            "n_kv_heads": self.attention.n_kv_heads,
            "head_dim": self.attention.head_dim,
            "ffn_hidden": self.ffn_hidden,
        }

    def to_json(self) -> Dict[str, Any]:
        return {
            **super().to_json(),
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "attention": self.attention.to_json(),
            "ffn_hidden": self.ffn_hidden,
            "attention_mode": self.attention_mode.value,
            "static_hybrid_pattern": (
                None
                if self.static_hybrid_pattern is None
                else [b.value for b in self.static_hybrid_pattern]
            ),
            "router": self.router.to_json(),
            "regularizer": self.regularizer.to_json(),
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def _from_json(cls, data: Dict[str, Any], **kwargs) -> Self:
        """
        Also accepts hand-written config sections without type tags; missing keys keep their defaults.
        """
        data = dict(data)
        data.pop("type", None)
        d_model = data.get("d_model", cls.__dataclass_fields__["d_model"].default)
        attention = dict(data.pop("attention", {}))
        attention.setdefault("d_model", d_model)
        data["attention"] = AttentionConfig._from_json(attention)
        data["router"] = RouterConfig._from_json(data.get("router", {}))
        data["regularizer"] = RegularizerConfig._from_json(data.get("regularizer", {}))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError("model", f"unknown keys {sorted(unknown)}")
        return cls(**data)
