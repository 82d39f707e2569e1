"""Toy multimodal decoder: patch projector, causal transformer, LM head.

The input layout is [vision tokens | prompt tokens | response tokens minus
the final one]; the teacher keeps every patch as a vision token while the
student pools the projected patch grid down to a smaller grid first.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Tensor, no_grad
from . import ops
from .data import SyntheticExample

__all__ = [
    "ModelConfig", "ModelParameters", "ModelOutputs",
    "init_params", "project_vision", "forward", "lm_head", "greedy_decode",
]

ROLES = ("teacher", "student")

_MASK_FILL = -1e30
_mask_cache: dict[int, Tensor] = {}


@dataclass(frozen=True)
class ModelConfig:
    role: str
    vocab_size: int = 64
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    patch_grid: tuple[int, int] = (4, 4)
    patch_dim: int = 16
    pool_grid: Optional[tuple[int, int]] = None
    mlp_ratio: int = 4
    max_seq_len: int = 160

    def __post_init__(self):
        object.__setattr__(self, "patch_grid", tuple(int(g) for g in self.patch_grid))
        if self.pool_grid is not None:
            object.__setattr__(self, "pool_grid", tuple(int(g) for g in self.pool_grid))
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.hidden_dim < 2 or self.num_layers < 1 or self.num_heads < 1:
            raise ValueError("hidden_dim, num_layers and num_heads must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if len(self.patch_grid) != 2 or min(self.patch_grid) < 1:
            raise ValueError(f"patch_grid must be two positive ints, got {self.patch_grid}")
        if self.patch_dim < 1 or self.mlp_ratio < 1 or self.max_seq_len < 2:
            raise ValueError("patch_dim, mlp_ratio and max_seq_len must be positive")
        if self.role == "teacher":
            if self.pool_grid is not None:
                raise ValueError("teacher role does not pool; leave pool_grid unset")
        elif self.pool_grid is not None:
            # A student without pool_grid keeps one token per patch.
            if len(self.pool_grid) != 2 or min(self.pool_grid) < 1:
                raise ValueError(f"pool_grid must be two positive ints, got {self.pool_grid}")
            if self.pool_grid[0] > self.patch_grid[0] or self.pool_grid[1] > self.patch_grid[1]:
                raise ValueError(
                    f"pool_grid {self.pool_grid} cannot exceed patch_grid {self.patch_grid}"
                )

    @property
    def vision_tokens_out(self) -> int:
        if self.role == "student" and self.pool_grid is not None:
            return self.pool_grid[0] * self.pool_grid[1]
        return self.patch_grid[0] * self.patch_grid[1]


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


@dataclass
class ModelOutputs:
    vision_hidden: Tensor
    language_hidden: Tensor
    vision_logits: Tensor
    response_logits: Tensor
    full_hidden: Tensor


def init_params(config: ModelConfig, seed: int) -> ModelParameters:
    """Deterministic initialization; draw order is the parameter name order."""
    rng = np.random.default_rng(seed)
    d = config.hidden_dim
    tensors: dict[str, Tensor] = {}

    def param(name, values):
        tensors[name] = Tensor(values, requires_grad=True)

    def linear(name, fan_in, fan_out):
        param(name + ".weight", rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        param(name + ".bias", np.zeros(fan_out))

    def norm(name):
        param(name + ".gain", np.ones(d))
        param(name + ".bias", np.zeros(d))

    linear("patch_proj", config.patch_dim, d)
    linear("proj_fc1", d, d)
    linear("proj_fc2", d, d)
    param("tok_emb", rng.standard_normal((config.vocab_size, d)) / np.sqrt(d))
    param("pos_emb", rng.standard_normal((config.max_seq_len, d)) / np.sqrt(d))
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        norm(pre + "ln1")
        for proj in ("wq", "wk", "wv", "wo"):
            linear(pre + "attn." + proj, d, d)
        norm(pre + "ln2")
        linear(pre + "mlp.fc1", d, config.mlp_ratio * d)
        linear(pre + "mlp.fc2", config.mlp_ratio * d, d)
    norm("ln_f")
    param("lm_head.weight", rng.standard_normal((d, config.vocab_size)) / np.sqrt(d))
    return ModelParameters(config=config, tensors=tensors)


def project_vision(params: ModelParameters, patch_grid: Tensor) -> Tensor:
    """Patch projection, optional 2-D pooling for students, projector MLP."""
    cfg = params.config
    h, w = cfg.patch_grid
    if patch_grid.shape != (h, w, cfg.patch_dim):
        raise ValueError(
            f"patch grid shape {patch_grid.shape} does not match config "
            f"({h}, {w}, {cfg.patch_dim})"
        )
    p = params.tensors
    flat = ops.reshape(patch_grid, (h * w, cfg.patch_dim))
    enc = ops.add_bias(ops.matmul(flat, p["patch_proj.weight"]), p["patch_proj.bias"])
    if cfg.role == "student" and cfg.pool_grid is not None and cfg.pool_grid != cfg.patch_grid:
        ph, pw = cfg.pool_grid
        grid = ops.reshape(enc, (h, w, cfg.hidden_dim))
        pooled = ops.adaptive_avg_pool(grid, [ph, pw])
        enc = ops.reshape(pooled, (ph * pw, cfg.hidden_dim))
    hid = ops.relu(ops.add_bias(ops.matmul(enc, p["proj_fc1.weight"]), p["proj_fc1.bias"]))
    return ops.add_bias(ops.matmul(hid, p["proj_fc2.weight"]), p["proj_fc2.bias"])


def lm_head(params: ModelParameters, hidden: Tensor) -> Tensor:
    """Single linear map to vocabulary space, no bias."""
    weight = params.tensors["lm_head.weight"]
    if hidden.values.ndim != 2 or hidden.shape[1] != weight.shape[0]:
        raise ValueError(f"lm_head: hidden shape {hidden.shape} does not match width {weight.shape[0]}")
    return ops.matmul(hidden, weight)


def _causal_mask(t: int) -> Tensor:
    mask = _mask_cache.get(t)
    if mask is None:
        mask = Tensor(np.triu(np.full((t, t), _MASK_FILL), k=1))
        _mask_cache[t] = mask
    return mask


def _attention(params: ModelParameters, layer: int, x: Tensor, t: int) -> Tensor:
    cfg = params.config
    p = params.tensors
    pre = f"layers.{layer}.attn."
    q = ops.add_bias(ops.matmul(x, p[pre + "wq.weight"]), p[pre + "wq.bias"])
    k = ops.add_bias(ops.matmul(x, p[pre + "wk.weight"]), p[pre + "wk.bias"])
    v = ops.add_bias(ops.matmul(x, p[pre + "wv.weight"]), p[pre + "wv.bias"])
    dh = cfg.hidden_dim // cfg.num_heads
    mask = _causal_mask(t)
    heads = []
    for h in range(cfg.num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ops.slice_cols(q, lo, hi)
        kh = ops.slice_cols(k, lo, hi)
        vh = ops.slice_cols(v, lo, hi)
        scores = ops.scale(ops.matmul(qh, ops.transpose(kh)), 1.0 / np.sqrt(dh))
        probs = ops.softmax(ops.add(scores, mask))
        heads.append(ops.matmul(probs, vh))
    merged = ops.concat_cols(heads)
    return ops.add_bias(ops.matmul(merged, p[pre + "wo.weight"]), p[pre + "wo.bias"])


def _decode(params: ModelParameters, vision: Tensor, token_ids: list[int]) -> Tensor:
    """Run the decoder stack over [vision | tokens]; returns final hidden states."""
    cfg = params.config
    p = params.tensors
    for tok in token_ids:
        if not 0 <= tok < cfg.vocab_size:
            raise ValueError(f"unknown token id {tok} for vocab size {cfg.vocab_size}")
    t = vision.shape[0] + len(token_ids)
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if token_ids:
        tok = ops.take_rows(p["tok_emb"], token_ids)
        x = ops.concat_rows([vision, tok])
    else:
        x = vision
    x = ops.add(x, ops.take_rows(p["pos_emb"], range(t)))
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        normed = ops.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        x = ops.add(x, _attention(params, i, normed, t))
        normed = ops.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        mid = ops.relu(
            ops.add_bias(ops.matmul(normed, p[pre + "mlp.fc1.weight"]), p[pre + "mlp.fc1.bias"])
        )
        mlp_out = ops.add_bias(ops.matmul(mid, p[pre + "mlp.fc2.weight"]), p[pre + "mlp.fc2.bias"])
        x = ops.add(x, mlp_out)
    return ops.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])


def forward(params: ModelParameters, example: SyntheticExample) -> ModelOutputs:
    """Teacher-forced pass; response_logits sit at the positions that predict
    each response token (the last len(response_ids) rows)."""
    vision = project_vision(params, example.patch_grid)
    n_vis = vision.shape[0]
    token_ids = list(example.prompt_ids) + list(example.response_ids[:-1])
    hidden = _decode(params, vision, token_ids)
    t = hidden.shape[0]
    resp_start = n_vis + len(example.prompt_ids) - 1
    vision_hidden = ops.take_rows(hidden, range(n_vis))
    language_hidden = ops.take_rows(hidden, range(n_vis, t))
    response_hidden = ops.take_rows(hidden, range(resp_start, t))
    return ModelOutputs(
        vision_hidden=vision_hidden,
        language_hidden=language_hidden,
        vision_logits=lm_head(params, vision_hidden),
        response_logits=lm_head(params, response_hidden),
        full_hidden=hidden,
    )


def greedy_decode(
    params: ModelParameters, example: SyntheticExample, max_len: int, eos_id: int
) -> list[int]:
    """Argmax decoding from the prompt; argmax ties resolve to the lowest id."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    generated: list[int] = []
    with no_grad():
        vision = project_vision(params, example.patch_grid)
        prompt = list(example.prompt_ids)
        while len(generated) < max_len:
            hidden = _decode(params, vision, prompt + generated)
            last = ops.take_rows(hidden, [hidden.shape[0] - 1])
            logits = lm_head(params, last)
            next_id = int(np.argmax(logits.values[0]))
            generated.append(next_id)
            if next_id == eos_id:
                break
    return generated
