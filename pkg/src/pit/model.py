"""Decoder-only toy transformer with a pluggable token-interface head.

Blocks use gated grouped-query attention with rotary positions, a SwiGLU MLP
and RMSNorm pre-normalization; the two branches run in parallel by default.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, ContextOverflow
from .interface import PitHead, TtHead, init_scratch, scratch_memory


def round_up(x: float, multiple: int) -> int:
    return int(math.ceil(x / multiple) * multiple)


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    head_dim: int = 8
    n_heads: int = 0          # 0: derive as d_model // head_dim
    gqa_ratio: int = 4
    d_ff: int = 0             # 0: round_up(8/3 * d_model, ff_multiple)
    ff_multiple: int = 64
    vocab_size: int = 256
    context: int = 64
    block_style: str = "parallel"
    head_mode: str = "PIT"
    trainable_z: bool = False
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def num_heads(self) -> int:
        return self.n_heads or self.d_model // self.head_dim

    @property
    def n_kv_heads(self) -> int:
        return self.num_heads // self.gqa_ratio

    @property
    def d_kv(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def d_attn(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def ff_width(self) -> int:
        return self.d_ff or round_up(8 * self.d_model / 3, self.ff_multiple)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self):
        if self.n_layers < 0 or self.d_model <= 0 or self.head_dim <= 0:
            raise ConfigError("n_layers, d_model and head_dim must be positive")
        if not self.n_heads and self.d_model % self.head_dim:
            raise ConfigError(f"d_model {self.d_model} not divisible by head_dim {self.head_dim}")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary positions")
        if self.num_heads % self.gqa_ratio:
            raise ConfigError(f"{self.num_heads} heads not divisible by gqa_ratio {self.gqa_ratio}")
        if self.ff_width < self.d_model:
            raise ConfigError("d_ff must be at least d_model")
        if self.vocab_size <= self.d_model:
            raise ConfigError("vocab_size must exceed d_model")
        if self.block_style not in ("parallel", "sequential"):
            raise ConfigError(f"block_style must be parallel or sequential, not {self.block_style!r}")
        if self.head_mode not in ("PIT", "TT"):
            raise ConfigError(f"head_mode must be PIT or TT, not {self.head_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, not {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
# Reference configurations, V = 32000. The XL preset has 24 query

# Appendix "sweet spot" configurations, V = 32000. The XL row lists 24 query
# heads at d_head 64 with d_model 1600, so its attention width is 1536.
PRESETS = {
    "small": dict(n_layers=16, d_model=768, head_dim=64, d_ff=2304),
    "medium": dict(n_layers=24, d_model=1024, head_dim=64, d_ff=2816),
    "large": dict(n_layers=32, d_model=1280, head_dim=64, d_ff=3584),
    "xl": dict(n_layers=40, d_model=1600, head_dim=64, n_heads=24, d_ff=4480),
}


def preset(name: str, **overrides) -> ModelConfig:
    kw = dict(vocab_size=32000, context=1024, head_mode="TT")
    kw.update(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(**kw)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every tensor the model allocates, in construction order."""
    c = config
    v, d = c.vocab_size, c.d_model
    shapes: dict[str, tuple] = {}
    if c.head_mode == "PIT":
        shapes["head.z"] = (v, d)
        shapes["head.log_diag"] = (d,)
        shapes["head.strict_lower"] = (d * (d - 1) // 2,)
    else:
        shapes["head.e"] = (v, d)
    for i in range(c.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "wq"] = (d, c.d_attn)
        shapes[p + "wk"] = (d, c.d_kv)
        shapes[p + "wv"] = (d, c.d_kv)
        shapes[p + "wo"] = (c.d_attn, d)
        shapes[p + "gate"] = (d,)
        shapes[p + "w_gate"] = (d, c.ff_width)
        shapes[p + "w_up"] = (d, c.ff_width)
        shapes[p + "w_down"] = (c.ff_width, d)
    shapes["final_norm"] = (d,)
    return shapes


_ATTN = ("wq", "wk", "wv", "wo", "gate")
_MLP = ("w_gate", "w_up", "w_down")


@dataclass
class ParamCount:
    formula: dict = field(default_factory=dict)
    exact: dict = field(default_factory=dict)

    @property
    def relative_gap(self) -> float:
        return abs(self.exact["total"] - self.formula["total"]) / self.exact["total"]


def param_count(config: ModelConfig) -> ParamCount:
    """Closed-form estimate next to the exact count of allocated tensors.

    Formula: ``V d`` for the tied table plus, per layer, ``2d^2 + 2 d d_kv``
    (attention) and ``3 d d_ff`` (SwiGLU). The exact count adds norms, the
    attention gate and, for PIT, the ``d(d+1)/2`` Cholesky parameters.
    """
    c = config
    d, d_kv = c.d_model, c.d_kv
    formula = {
        "embedding": c.vocab_size * d,
        "per_layer_attn": 2 * d * d + 2 * d * d_kv,
        "per_layer_mlp": 3 * d * c.ff_width,
        "norms": 0,
    }
    formula["total"] = formula["embedding"] + c.n_layers * (formula["per_layer_attn"] + formula["per_layer_mlp"])

    exact = {"embedding": 0, "per_layer_attn": 0, "per_layer_mlp": 0, "norms": 0}
    for name, shape in param_shapes(c).items():
        n = int(np.prod(shape))
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("head."):
            exact["embedding"] += n
        elif leaf in _ATTN:
            exact["per_layer_attn"] += n
        elif leaf in _MLP:
            exact["per_layer_mlp"] += n
        else:
            exact["norms"] += n
    exact["total"] = sum(exact.values())
    if c.n_layers:
        exact["per_layer_attn"] //= c.n_layers
        exact["per_layer_mlp"] //= c.n_layers
    return ParamCount(formula, exact)


def rope_tables(t: int, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / base ** (np.arange(0, head_dim, 2) / head_dim)
    ang = np.outer(np.arange(t), inv)
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def build_head(config: ModelConfig):
    dtype = config.np_dtype
    if config.head_mode == "PIT":
        return init_scratch(config.vocab_size, config.d_model, config.seed,
                            trainable_z=config.trainable_z, dtype=dtype)
    # TT starts from the same random Stiefel point a scratch PIT head would use
    return TtHead(scratch_memory(config.vocab_size, config.d_model, config.seed), dtype=dtype)


class ToyTransformer:
    def __init__(self, config: ModelConfig, head=None):
        self.config = config
        c = config
        dtype = c.np_dtype
        self.head = head if head is not None else build_head(c)
        if (self.head.vocab_size, self.head.dim) != (c.vocab_size, c.d_model):
            raise ConfigError("head shape does not match the model config")
        if isinstance(self.head, PitHead) != (c.head_mode == "PIT"):
            raise ConfigError("head type does not match head_mode")
        rng = np.random.default_rng(c.seed + 1)
        std = 0.02
        out_std = std / math.sqrt(2 * max(c.n_layers, 1))
        self.layers: list[dict[str, Tensor]] = []
        for i in range(c.n_layers):
            layer = {}
            for name, shape in param_shapes(c).items():
                prefix = f"layers.{i}."
                if not name.startswith(prefix):
                    continue
                leaf = name[len(prefix):]
                if leaf.endswith("norm"):
                    data = np.ones(shape)
                elif leaf == "gate":
                    data = np.zeros(shape)
                elif leaf in ("wo", "w_down"):
                    data = rng.normal(0.0, out_std, shape)
                else:
                    data = rng.normal(0.0, std, shape)
                layer[leaf] = Tensor(data.astype(dtype), requires_grad=True, name=name)
            self.layers.append(layer)
        self.final_norm = Tensor(np.ones(c.d_model, dtype=dtype), requires_grad=True, name="final_norm")
        self._rope_cache: dict[int, tuple] = {}
        self._mask_cache: dict[int, np.ndarray] = {}

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.head.named_tensors())
        for i, layer in enumerate(self.layers):
            for leaf, t in layer.items():
                out[f"layers.{i}.{leaf}"] = t
        out["final_norm"] = self.final_norm
        return out

    def parameters(self) -> list[Tensor]:
        ps = list(self.head.parameters())
        for layer in self.layers:
            ps.extend(layer.values())
        ps.append(self.final_norm)
        return ps

    def decay_parameters(self) -> list[Tensor]:
        """Matrices that receive weight decay (everything 2-D and trainable)."""
        return [p for p in self.parameters() if p.ndim >= 2]

    def _rope(self, t: int):
        if t not in self._rope_cache:
            c = self.config
            self._rope_cache[t] = rope_tables(t, c.head_dim, c.rope_base, c.np_dtype)
        return self._rope_cache[t]

    def _mask(self, t: int) -> np.ndarray:
        # queries of one kv group are stacked along the row axis: row r is position r % t
        if t not in self._mask_cache:
            g = self.config.gqa_ratio
            pos = np.tile(np.arange(t), g)
            self._mask_cache[t] = pos[:, None] >= np.arange(t)[None, :]
        return self._mask_cache[t]

    def attention(self, x: Tensor, layer: dict) -> Tensor:
        c = self.config
        b, t, _ = x.shape
        g = c.gqa_ratio
        cos, sin = self._rope(t)
        q = ops.rope(ops.split_heads(ops.matmul(x, layer["wq"]), c.num_heads), cos, sin)
        k = ops.rope(ops.split_heads(ops.matmul(x, layer["wk"]), c.n_kv_heads), cos, sin)
        v = ops.split_heads(ops.matmul(x, layer["wv"]), c.n_kv_heads)
        q = ops.reshape(q, (b * c.n_kv_heads, g * t, c.head_dim))
        scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(c.head_dim))
        probs = ops.masked_softmax(scores, self._mask(t))
        out = ops.reshape(ops.matmul(probs, v), (b * c.num_heads, t, c.head_dim))
        out = ops.matmul(ops.merge_heads(out, c.num_heads), layer["wo"])
        return ops.scale_channels(out, ops.sigmoid(layer["gate"]))

    @staticmethod
    def mlp(x: Tensor, layer: dict) -> Tensor:
        gate = ops.silu(ops.matmul(x, layer["w_gate"]))
        up = ops.matmul(x, layer["w_up"])
        return ops.matmul(ops.mul(gate, up), layer["w_down"])

    def block(self, x: Tensor, layer: dict) -> Tensor:
        eps = self.config.norm_eps
        if self.config.block_style == "parallel":
            a = self.attention(ops.rmsnorm(x, layer["attn_norm"], eps), layer)
            m = self.mlp(ops.rmsnorm(x, layer["mlp_norm"], eps), layer)
            return ops.add(ops.add(x, a), m)
        x = ops.add(x, self.attention(ops.rmsnorm(x, layer["attn_norm"], eps), layer))
        return ops.add(x, self.mlp(ops.rmsnorm(x, layer["mlp_norm"], eps), layer))

    def forward(self, tokens, capture: bool = False):
        """Logits (B, T, V). With ``capture`` also the residual stream at the
        last position after the embedding and after every layer."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] > self.config.context:
            raise ContextOverflow(f"sequence length {tokens.shape[1]} > context {self.config.context}")
        x = self.head.embed(tokens)
        hidden = [x.data[:, -1, :].copy()] if capture else None
        for layer in self.layers:
            x = self.block(x, layer)
            if capture:
                hidden.append(x.data[:, -1, :].copy())
        logits = self.head.project_logits(self.readout_norm(x))
        return (logits, hidden) if capture else logits

    __call__ = forward

    def readout_norm(self, h) -> Tensor:
        return ops.rmsnorm(h, self.final_norm, self.config.norm_eps)

    def decode_hidden(self, h) -> np.ndarray:
        """Logits for arbitrary residual-stream states through the model's own readout."""
        h = np.asarray(h, dtype=self.config.np_dtype)
        return self.head.project_logits(self.readout_norm(Tensor(h))).data

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.named_tensors().values())
