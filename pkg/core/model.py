#!/usr/bin/env python3
"""
Pre-norm Transformer Engine for DepthProbe
Residual-stream tracing, LogitLens readout and prompt masking for masked and autoregressive models
"""

import logging
import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import EXPERIMENT_CONFIG
from core.errors import ModelError

logger = logging.getLogger(__name__)

# Vocabulary: 20 amino acids followed by the special tokens
AMINO_ACIDS = 'ACDEFGHIKLMNPQRSTVWY'
PAD_ID = 20
MASK_ID = 21
BOS_ID = 22
EOS_ID = 23
UNK_ID = 24
SPECIAL_TOKENS = {PAD_ID: '<pad>', MASK_ID: '<mask>', BOS_ID: '<bos>', EOS_ID: '<eos>', UNK_ID: '<unk>'}
MIN_VOCAB_SIZE = 25

AA_TO_ID = {aa: i for i, aa in enumerate(AMINO_ACIDS)}


class ObjectiveMode(Enum):
    """Training objective, which also fixes the attention pattern"""
    MASKED = "masked"                   # bidirectional attention
    AUTOREGRESSIVE = "autoregressive"   # strict causal attention

    @classmethod
    def parse(cls, value: Union[str, 'ObjectiveMode']) -> 'ObjectiveMode':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ModelError(f"Unknown objective mode: {value}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters"""
    num_layers: int = EXPERIMENT_CONFIG['model']['num_layers']
    d_model: int = EXPERIMENT_CONFIG['model']['d_model']
    num_heads: int = EXPERIMENT_CONFIG['model']['num_heads']
    d_ff: int = EXPERIMENT_CONFIG['model']['d_ff']
    vocab_size: int = EXPERIMENT_CONFIG['model']['vocab_size']
    max_seq_len: int = EXPERIMENT_CONFIG['model']['max_seq_len']
    objective_mode: ObjectiveMode = ObjectiveMode.MASKED
    positional: str = 'learned-absolute'
    layer_norm_eps: float = EXPERIMENT_CONFIG['model']['layer_norm_eps']

    def __post_init__(self):
        object.__setattr__(self, 'objective_mode', ObjectiveMode.parse(self.objective_mode))
        if self.num_layers < 1:
            raise ModelError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_heads < 1 or self.d_model % self.num_heads != 0:
            raise ModelError(f"d_model ({self.d_model}) must be divisible by num_heads ({self.num_heads})")
        if self.vocab_size < MIN_VOCAB_SIZE:
            raise ModelError(f"vocab_size must be >= {MIN_VOCAB_SIZE}, got {self.vocab_size}")
        if self.d_ff < 1 or self.max_seq_len < 1:
            raise ModelError("d_ff and max_seq_len must be positive")
        if self.positional != 'learned-absolute':
            raise ModelError(f"Unsupported positional scheme: {self.positional}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def causal(self) -> bool:
        return self.objective_mode is ObjectiveMode.AUTOREGRESSIVE

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['objective_mode'] = self.objective_mode.value
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ModelError(f"Unknown config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Prompt:
    """Token ids of one prompt plus where it came from"""
    token_ids: Tuple[int, ...]
    origin: str = 'synthetic'

    def __post_init__(self):
        object.__setattr__(self, 'token_ids', tuple(int(t) for t in self.token_ids))

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def ids(self) -> np.ndarray:
        return np.asarray(self.token_ids, dtype=np.int64)


def encode_sequence(sequence: str, mode: Union[str, ObjectiveMode] = ObjectiveMode.MASKED) -> Tuple[List[int], int]:
    """
    Map amino-acid letters to ids

    Letters outside the 20-letter alphabet become UNK. Autoregressive prompts are
    prefixed with BOS.

    Returns:
        (token ids, number of UNK substitutions)
    """
    ids = []
    unknown = 0
    for letter in sequence.strip().upper():
        token = AA_TO_ID.get(letter)
        if token is None:
            token = UNK_ID
            unknown += 1
        ids.append(token)
    if ObjectiveMode.parse(mode) is ObjectiveMode.AUTOREGRESSIVE:
        ids = [BOS_ID] + ids
    return ids, unknown


def decode_ids(ids: Iterable[int]) -> str:
    """Inverse of encode_sequence for amino-acid ids; special tokens are dropped except UNK -> X"""
    letters = []
    for token in ids:
        token = int(token)
        if token < len(AMINO_ACIDS):
            letters.append(AMINO_ACIDS[token])
        elif token == UNK_ID:
            letters.append('X')
        elif token == MASK_ID:
            letters.append('#')
    return ''.join(letters)


def tensor_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical tensor names and shapes, in container order"""
    d, ff, V = config.d_model, config.d_ff, config.vocab_size
    shapes: Dict[str, Tuple[int, ...]] = {
        'tok_embed': (V, d),
        'pos_embed': (config.max_seq_len, d),
    }
    for layer in range(config.num_layers):
        prefix = f'blocks.{layer}'
        shapes.update({
            f'{prefix}.ln1.gain': (d,),
            f'{prefix}.ln1.bias': (d,),
            f'{prefix}.attn.w_q': (d, d),
            f'{prefix}.attn.b_q': (d,),
            f'{prefix}.attn.w_k': (d, d),
            f'{prefix}.attn.b_k': (d,),
            f'{prefix}.attn.w_v': (d, d),
            f'{prefix}.attn.b_v': (d,),
            f'{prefix}.attn.w_o': (d, d),
            f'{prefix}.attn.b_o': (d,),
            f'{prefix}.ln2.gain': (d,),
            f'{prefix}.ln2.bias': (d,),
            f'{prefix}.mlp.w_in': (d, ff),
            f'{prefix}.mlp.b_in': (ff,),
            f'{prefix}.mlp.w_out': (ff, d),
            f'{prefix}.mlp.b_out': (d,),
        })
    shapes.update({
        'final_norm.gain': (d,),
        'final_norm.bias': (d,),
        'unembed.weight': (d, V),
        'unembed.bias': (V,),
    })
    return shapes


class Model:
    """
    Immutable weight set of a pre-norm transformer

    Weights are stored as float32 (or float64 for finite-difference shadows);
    forward passes always compute in float64.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray], dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        expected = tensor_shapes(config)

        missing = [name for name in expected if name not in params]
        if missing:
            raise ModelError(f"Missing tensors: {missing[:5]}")
        extra = [name for name in params if name not in expected]
        if extra:
            raise ModelError(f"Unexpected tensors: {extra[:5]}")

        self.params: Dict[str, np.ndarray] = {}
        self._compute: Dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            array = np.array(params[name], dtype=self.dtype)
            if array.shape != shape:
                raise ModelError(f"Tensor '{name}' has shape {array.shape}, expected {shape}")
            if not np.all(np.isfinite(array)):
                raise ModelError(f"Tensor '{name}' contains non-finite weights")
            array.setflags(write=False)
            self.params[name] = array
            compute = array.astype(np.float64)
            compute.setflags(write=False)
            self._compute[name] = compute

    def __repr__(self):
        c = self.config
        return (f"<Model(L={c.num_layers}, d={c.d_model}, heads={c.num_heads}, "
                f"mode={c.objective_mode.value}, dtype={self.dtype.name})>")

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def w(self, name: str) -> np.ndarray:
        """float64 view of a tensor, for computation"""
        return self._compute[name]

    def with_params(self, updates: Dict[str, np.ndarray]) -> 'Model':
        """Copy with some tensors replaced"""
        params = dict(self.params)
        params.update(updates)
        return Model(self.config, params, dtype=self.dtype)

    def astype(self, dtype) -> 'Model':
        return Model(self.config, self.params, dtype=dtype)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def init_model(config: ModelConfig, rng: np.random.Generator, zero_readout: bool = False,
               dtype=np.float32) -> Model:
    """
    Seeded initialisation

    Input projections use N(0, 1/fan_in); output projections are further scaled
    by 1/sqrt(2L). With zero_readout the unembedding starts at zero so every
    initial prediction is uniform.
    """
    params = {}
    residual_scale = 1.0 / math.sqrt(2 * config.num_layers)
    for name, shape in tensor_shapes(config).items():
        if name.endswith('.gain'):
            params[name] = np.ones(shape)
        elif name.endswith('bias') or '.b_' in name:
            params[name] = np.zeros(shape)
        elif name in ('tok_embed', 'pos_embed'):
            params[name] = rng.normal(0.0, 0.1, size=shape)
        elif name == 'unembed.weight':
            params[name] = np.zeros(shape) if zero_readout else rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith('.w_o') or name.endswith('.w_out'):
                std *= residual_scale
            params[name] = rng.normal(0.0, std, size=shape)
    logger.debug(f"Initialised model with {sum(p.size for p in params.values())} parameters")
    return Model(config, params, dtype=dtype)


def zero_block_updates(model: Model, layers: Optional[Iterable[int]] = None) -> Model:
    """Zero the attention-output and MLP-output projections (and biases) of the given blocks"""
    layers = range(model.num_layers) if layers is None else layers
    updates = {}
    for layer in layers:
        for suffix in ('attn.w_o', 'attn.b_o', 'mlp.w_out', 'mlp.b_out'):
            name = f'blocks.{layer}.{suffix}'
            updates[name] = np.zeros_like(model.params[name])
    return model.with_params(updates)


# ==============================================================================
# FORWARD KERNELS (float64, batched over a leading axis)
# ==============================================================================

def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """LayerNorm over the last axis; returns (y, cache)"""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return x_hat * gain + bias, (x_hat, inv_std)


GELU_C = math.sqrt(2.0 / math.pi)


def gelu(u: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU"""
    return 0.5 * u * (1.0 + np.tanh(GELU_C * (u + 0.044715 * u ** 3)))


def gelu_grad(u: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u * u)


def causal_mask(length: int) -> np.ndarray:
    """Boolean (T, T) mask, True where key position <= query position"""
    return np.tril(np.ones((length, length), dtype=bool))


def split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    B, T, d = x.shape
    return x.reshape(B, T, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def attention(model: Model, layer: int, a: np.ndarray, causal: bool):
    """Multi-head self-attention sublayer; returns (update, cache)"""
    prefix = f'blocks.{layer}.attn'
    H = model.config.num_heads
    q = split_heads(a @ model.w(f'{prefix}.w_q') + model.w(f'{prefix}.b_q'), H)
    k = split_heads(a @ model.w(f'{prefix}.w_k') + model.w(f'{prefix}.b_k'), H)
    v = split_heads(a @ model.w(f'{prefix}.w_v') + model.w(f'{prefix}.b_v'), H)

    scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(model.config.head_dim)
    if causal:
        scores = np.where(causal_mask(a.shape[1]), scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    probs = weights / weights.sum(axis=-1, keepdims=True)

    ctx = merge_heads(probs @ v)
    out = ctx @ model.w(f'{prefix}.w_o') + model.w(f'{prefix}.b_o')
    return out, (a, q, k, v, probs, ctx)


def mlp(model: Model, layer: int, b: np.ndarray):
    """Position-wise feed-forward sublayer; returns (update, cache)"""
    prefix = f'blocks.{layer}.mlp'
    u = b @ model.w(f'{prefix}.w_in') + model.w(f'{prefix}.b_in')
    g = gelu(u)
    out = g @ model.w(f'{prefix}.w_out') + model.w(f'{prefix}.b_out')
    return out, (b, u, g)


@dataclass
class BlockRun:
    """Everything one batched pass through the block stack produced"""
    states: List[np.ndarray]
    attn_updates: List[np.ndarray]
    mlp_updates: List[np.ndarray]
    caches: List[Dict] = field(default_factory=list)


def embed(model: Model, ids: np.ndarray) -> np.ndarray:
    """h_0 = token embedding + learned absolute position embedding"""
    T = ids.shape[-1]
    return model.w('tok_embed')[ids] + model.w('pos_embed')[:T]


def run_blocks(model: Model, ids: np.ndarray, causal: bool, skip_layer: Optional[int] = None,
               skip_mask: Optional[np.ndarray] = None, keep_cache: bool = False) -> BlockRun:
    """
    Run the embedding and every block on a (B, T) id batch

    If skip_layer is set, the additive update of that block is suppressed at
    positions where skip_mask (B, T) is True: h_{s+1}[t] = h_s[t]. All other
    positions receive the normal update and later blocks run unchanged.
    """
    eps = model.config.layer_norm_eps
    h = embed(model, ids)
    run = BlockRun(states=[h], attn_updates=[], mlp_updates=[])

    for layer in range(model.num_layers):
        prefix = f'blocks.{layer}'
        a, ln1_cache = layer_norm(h, model.w(f'{prefix}.ln1.gain'), model.w(f'{prefix}.ln1.bias'), eps)
        attn_out, attn_cache = attention(model, layer, a, causal)
        h_mid = h + attn_out
        b, ln2_cache = layer_norm(h_mid, model.w(f'{prefix}.ln2.gain'), model.w(f'{prefix}.ln2.bias'), eps)
        mlp_out, mlp_cache = mlp(model, layer, b)
        h_next = h_mid + mlp_out

        if skip_layer == layer and skip_mask is not None:
            keep = skip_mask[..., None]
            h_next = np.where(keep, h, h_next)
            attn_out = np.where(keep, 0.0, attn_out)
            mlp_out = np.where(keep, 0.0, mlp_out)

        if keep_cache:
            run.caches.append({
                'ln1': ln1_cache, 'attn': attn_cache, 'ln2': ln2_cache, 'mlp': mlp_cache,
            })
        run.attn_updates.append(attn_out)
        run.mlp_updates.append(mlp_out)
        run.states.append(h_next)
        h = h_next

    return run


def readout(model: Model, hidden: np.ndarray) -> np.ndarray:
    """
    logits = unembed(final_norm(h))

    Accepts a single d_model vector or a (T, d_model) matrix. A zero vector goes
    through the epsilon path of LayerNorm and yields the unembedding bias.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    single = hidden.ndim == 1
    if single:
        hidden = hidden[None, :]
    if not np.all(np.isfinite(hidden)):
        raise ModelError("readout of a non-finite hidden state")
    z, _ = layer_norm(hidden, model.w('final_norm.gain'), model.w('final_norm.bias'), model.config.layer_norm_eps)
    logits = z @ model.w('unembed.weight') + model.w('unembed.bias')
    return logits[0] if single else logits


# ==============================================================================
# TRACED FORWARD
# ==============================================================================

@dataclass
class ResidualTrace:
    """
    Residual-stream states h_0..h_L of one prompt plus its final logits

    States and updates are stored at the model's weight precision (float32 unless
    the model is a float64 shadow); logits and every reduction over them are float64.
    """
    token_ids: np.ndarray
    states: np.ndarray           # (L+1, T, d)
    logits: np.ndarray           # (T, V)
    attn_updates: np.ndarray     # (L, T, d)
    mlp_updates: np.ndarray      # (L, T, d)
    mode: ObjectiveMode
    masked_positions: Tuple[int, ...] = ()
    intervened_positions: Tuple[int, ...] = ()
    skipped_layer: Optional[int] = None

    @property
    def num_layers(self) -> int:
        return self.states.shape[0] - 1

    @property
    def length(self) -> int:
        return self.states.shape[1]

    def update(self, layer: int) -> np.ndarray:
        """Additive update of block `layer`: h_{layer+1} - h_layer, float64"""
        return self.states[layer + 1].astype(np.float64) - self.states[layer].astype(np.float64)

    def probabilities(self) -> np.ndarray:
        from core.numerics import softmax
        return softmax(self.logits)


def _prompt_ids(model: Model, prompt: Union[Prompt, Sequence[int], np.ndarray]) -> np.ndarray:
    ids = prompt.ids if isinstance(prompt, Prompt) else np.asarray(prompt, dtype=np.int64)
    if ids.ndim != 1:
        raise ModelError(f"Prompt must be one-dimensional, got shape {ids.shape}")
    if ids.size == 0:
        raise ModelError("Empty prompt")
    if ids.size > model.config.max_seq_len:
        raise ModelError(f"Prompt length {ids.size} exceeds max_seq_len {model.config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ModelError(f"Token id out of range [0, {model.config.vocab_size})")
    return ids


def forward(model: Model, prompt: Union[Prompt, Sequence[int], np.ndarray],
            mode: Optional[Union[str, ObjectiveMode]] = None,
            skip_layer: Optional[int] = None, skip_positions: Iterable[int] = (),
            masked_positions: Iterable[int] = ()) -> ResidualTrace:
    """
    Traced forward pass of one prompt

    Args:
        model: weights and config
        prompt: token ids
        mode: must match the model's objective mode when given
        skip_layer / skip_positions: suppress block `skip_layer`'s update at those positions
        masked_positions: metadata carried into the trace

    Returns:
        ResidualTrace with L+1 states and final logits
    """
    if mode is not None and ObjectiveMode.parse(mode) is not model.config.objective_mode:
        raise ModelError(f"Mode {ObjectiveMode.parse(mode).value} does not match model mode "
                         f"{model.config.objective_mode.value}")
    ids = _prompt_ids(model, prompt)
    T = ids.size

    skip_positions = tuple(sorted(set(int(t) for t in skip_positions)))
    skip_mask = None
    if skip_layer is not None:
        if not 0 <= skip_layer < model.num_layers:
            raise ModelError(f"skip_layer {skip_layer} outside [0, {model.num_layers})")
        if skip_positions and (skip_positions[0] < 0 or skip_positions[-1] >= T):
            raise ModelError(f"Skip positions outside prompt of length {T}")
        skip_mask = np.zeros((1, T), dtype=bool)
        skip_mask[0, list(skip_positions)] = True

    run = run_blocks(model, ids[None, :], model.config.causal, skip_layer=skip_layer, skip_mask=skip_mask)
    # logits are read out from the stored final state
    store = model.dtype
    states = np.stack([h[0] for h in run.states]).astype(store, copy=False)
    logits = readout(model, states[-1])

    return ResidualTrace(
        token_ids=ids,
        states=states,
        logits=logits,
        attn_updates=np.stack([u[0] for u in run.attn_updates]).astype(store, copy=False),
        mlp_updates=np.stack([u[0] for u in run.mlp_updates]).astype(store, copy=False),
        mode=model.config.objective_mode,
        masked_positions=tuple(sorted(int(t) for t in masked_positions)),
        intervened_positions=skip_positions if skip_layer is not None else (),
        skipped_layer=skip_layer,
    )


def mask_count(rate: float, length: int) -> int:
    """ceil(rate * length), tolerant of binary rounding (0.15 * 100 -> 15)"""
    return int(math.ceil(rate * length - 1e-9))


def mask_prompt(prompt: Union[Prompt, Sequence[int]], rate: float,
                rng: np.random.Generator) -> Tuple[Prompt, Tuple[int, ...]]:
    """
    Replace ceil(rate * T) uniformly chosen positions by MASK

    Returns:
        (masked prompt, sorted masked positions)
    """
    if not isinstance(prompt, Prompt):
        prompt = Prompt(tuple(prompt))
    if not 0.0 < rate < 1.0:
        raise ModelError(f"mask rate must be in (0, 1), got {rate}")
    T = len(prompt)
    if T < 2:
        raise ModelError("Prompt must have at least 2 tokens to be masked")

    n_masked = min(T, max(1, mask_count(rate, T)))
    positions = tuple(sorted(int(p) for p in rng.choice(T, size=n_masked, replace=False)))
    ids = list(prompt.token_ids)
    for position in positions:
        ids[position] = MASK_ID
    return Prompt(tuple(ids), origin=prompt.origin), positions
