"""Encoder-decoder paragraph grounding network.

A transformer encoder contextualizes the projected clip features, and a
transformer decoder turns each projected sentence feature into one interval.
Cross-attention in the decoder scores clips by scaled cosine similarity.
Everything runs in float64 on CPU.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
LOG_EPS = 1e-9


class NonFiniteError(FloatingPointError):
    """Non-finite activations or losses; ``name`` points at the first suspect."""

    def __init__(self, name: str, message: str = ""):
        self.name = name
        super().__init__(message or f"non-finite values (first offending parameter: {name})")


@dataclass
class ModelConfig:
    D_v: int = 32
    D_q: int = 32
    D: int = 64
    enc_layers: int = 3
    dec_layers: int = 3
    heads: int = 4
    ffn_dim: int = 128
    attn_scale_init: float = 10.0
    max_sentences: int = 16

    def __post_init__(self):
        if self.D % self.heads != 0:
            raise ValueError(f"hidden size D={self.D} is not divisible by heads={self.heads}")
        if min(self.D_v, self.D_q, self.D, self.heads, self.ffn_dim, self.max_sentences) < 1:
            raise ValueError("model dimensions must be positive")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")

    @property
    def head_dim(self) -> int:
        return self.D // self.heads


class ForwardOutput(NamedTuple):
    intervals: torch.Tensor  # (B, N, 2) start/end
    V_enc: torch.Tensor  # (B, T, D)
    attn: torch.Tensor  # (L_dec, B, N, T), head-averaged cross-attention
    F_q_proj: torch.Tensor  # (B, N, D)
    query_mask: torch.Tensor  # (B, N) bool, True for real sentences


def sinusoidal_positions(T: int, D: int) -> torch.Tensor:
    pos = torch.arange(T, dtype=DTYPE)[:, None]
    div = torch.exp(torch.arange(0, D, 2, dtype=DTYPE) * (-math.log(10000.0) / D))
    pe = torch.zeros(T, D, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : D // 2]
    return pe


class SelfAttention(nn.Module):
    def __init__(self, D: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(D, 3 * D, dtype=DTYPE)
        self.out = nn.Linear(D, D, dtype=DTYPE)

    def forward(self, x, key_mask=None):
        B, L, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(B, L, 3, h, D // h).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        w = torch.softmax(logits, dim=-1)
        y = (w @ v).transpose(1, 2).reshape(B, L, D)
        return self.out(y)


def cosine_attention(q, k, scale):
    """Softmax over keys of ``scale * cos(q, k)``.

    ``q``: (..., Lq, d), ``k``: (..., Lk, d). Returns (..., Lq, Lk) weights.
    """
    qn = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    kn = k / k.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return torch.softmax(scale * (qn @ kn.transpose(-1, -2)), dim=-1)


class CosineCrossAttention(nn.Module):
    def __init__(self, D: int, heads: int, scale_init: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(D, D, dtype=DTYPE)
        self.kv = nn.Linear(D, 2 * D, dtype=DTYPE)
        self.out = nn.Linear(D, D, dtype=DTYPE)
        self.scale = nn.Parameter(torch.tensor(float(scale_init), dtype=DTYPE))

    def forward(self, x, memory):
        B, N, D = x.shape
        T = memory.shape[1]
        h = self.heads
        q = self.q(x).view(B, N, h, D // h).transpose(1, 2)
        k, v = self.kv(memory).view(B, T, 2, h, D // h).permute(2, 0, 3, 1, 4)
        w = cosine_attention(q, k, self.scale)  # (B, h, N, T)
        y = (w @ v).transpose(1, 2).reshape(B, N, D)
        return self.out(y), w.mean(dim=1)


class FeedForward(nn.Sequential):
    def __init__(self, D: int, hidden: int):
        super().__init__(nn.Linear(D, hidden, dtype=DTYPE), nn.GELU(), nn.Linear(hidden, D, dtype=DTYPE))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.D, dtype=DTYPE)
        self.attn = SelfAttention(cfg.D, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.D, dtype=DTYPE)
        self.ffn = FeedForward(cfg.D, cfg.ffn_dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.D, dtype=DTYPE)
        self.self_attn = SelfAttention(cfg.D, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.D, dtype=DTYPE)
        self.cross_attn = CosineCrossAttention(cfg.D, cfg.heads, cfg.attn_scale_init)
        self.norm3 = nn.LayerNorm(cfg.D, dtype=DTYPE)
        self.ffn = FeedForward(cfg.D, cfg.ffn_dim)

    def forward(self, x, memory, query_mask):
        x = x + self.self_attn(self.norm1(x), key_mask=query_mask)
        y, w = self.cross_attn(self.norm2(x), memory)
        x = x + y
        return x + self.ffn(self.norm3(x)), w


class GroundingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.video_proj = nn.Linear(cfg.D_v, cfg.D, dtype=DTYPE)
        self.query_proj = nn.Linear(cfg.D_q, cfg.D, dtype=DTYPE)
        self.sentence_index = nn.Embedding(cfg.max_sentences, cfg.D, dtype=DTYPE)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(cfg.D, dtype=DTYPE)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.dec_norm = nn.LayerNorm(cfg.D, dtype=DTYPE)
        self.head = nn.Linear(cfg.D, 2, dtype=DTYPE)

    def forward(self, video_feats, query_feats, query_mask=None) -> ForwardOutput:
        video_feats = torch.as_tensor(video_feats, dtype=DTYPE)
        query_feats = torch.as_tensor(query_feats, dtype=DTYPE)
        if video_feats.dim() == 2:
            video_feats, query_feats = video_feats[None], query_feats[None]
        B, T, _ = video_feats.shape
        N = query_feats.shape[1]
        if video_feats.shape[-1] != self.cfg.D_v or query_feats.shape[-1] != self.cfg.D_q:
            raise ValueError(
                f"input dims ({video_feats.shape[-1]}, {query_feats.shape[-1]}) do not match "
                f"model dims ({self.cfg.D_v}, {self.cfg.D_q})"
            )
        if N > self.cfg.max_sentences:
            raise ValueError(f"{N} sentences exceed max_sentences={self.cfg.max_sentences}")
        if query_mask is None:
            query_mask = torch.ones(B, N, dtype=torch.bool)

        x = self.video_proj(video_feats) + sinusoidal_positions(T, self.cfg.D)
        for layer in self.encoder:
            x = layer(x)
        V_enc = self.enc_norm(x)

        F_q = self.query_proj(query_feats)
        y = F_q + self.sentence_index.weight[:N]
        attns = []
        for layer in self.decoder:
            y, w = layer(y, V_enc, query_mask)
            attns.append(w)
        c, w = torch.sigmoid(self.head(self.dec_norm(y))).unbind(-1)
        start = (c - w / 2).clamp(0.0, 1.0)
        end = (c + w / 2).clamp(0.0, 1.0)
        intervals = torch.stack([start, end], dim=-1)
        if not torch.isfinite(intervals).all() or not torch.isfinite(V_enc).all():
            raise NonFiniteError(first_nonfinite_param(self))
        return ForwardOutput(intervals, V_enc, torch.stack(attns), F_q, query_mask)


def first_nonfinite_param(model: nn.Module) -> str:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            return name
    return "<inputs>"


def init_params(cfg: ModelConfig, seed: int) -> GroundingModel:
    """Deterministic init: linear weights ~ N(0, 1/fan_in), zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    model = GroundingModel(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("cross_attn.scale"):
                p.fill_(cfg.attn_scale_init)
            elif "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name == "sentence_index.weight":
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) / math.sqrt(cfg.D))
            elif name.endswith("weight"):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) / math.sqrt(p.shape[1]))
            else:
                p.zero_()
    return model


def param_map(model: nn.Module) -> dict:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def pad_queries(queries: list) -> tuple:
    """Stack variable-length query matrices into (B, N_max, D) plus a mask."""
    n_max = max(q.shape[0] for q in queries)
    d = queries[0].shape[1]
    out = np.zeros((len(queries), n_max, d))
    mask = np.zeros((len(queries), n_max), dtype=bool)
    for b, q in enumerate(queries):
        out[b, : q.shape[0]] = q
        mask[b, : q.shape[0]] = True
    return torch.from_numpy(out), torch.from_numpy(mask)


def pad_intervals(sets: list, n_max: int) -> torch.Tensor:
    out = np.zeros((len(sets), n_max, 2))
    for b, s in enumerate(sets):
        for i, iv in enumerate(s):
            out[b, i] = (iv[0], iv[1]) if not hasattr(iv, "start") else (iv.start, iv.end)
    return torch.from_numpy(out)


def forward_batch(model: GroundingModel, videos: list, queries: list) -> ForwardOutput:
    v = torch.from_numpy(np.stack(videos))
    q, mask = pad_queries(queries)
    return model(v, q, mask)


@torch.no_grad()
def predict_intervals(model: GroundingModel, videos: list, queries: list, batch_size: int = 64) -> list:
    """Interval predictions as a list of (N_b, 2) arrays, one per input paragraph."""
    out = []
    for i in range(0, len(videos), batch_size):
        fo = forward_batch(model, videos[i : i + batch_size], queries[i : i + batch_size])
        ivs = fo.intervals.numpy()
        for b, q in enumerate(queries[i : i + batch_size]):
            out.append(ivs[b, : q.shape[0]].copy())
    return out


# --- moment pooling and attention targets ---------------------------------

def membership_mask(intervals, T: int) -> np.ndarray:
    """(K, T) 0/1 mask of clips whose centers lie inside each interval.

    An interval containing no clip center selects the clip nearest to its
    midpoint, ties going to the lower index.
    """
    ivs = np.asarray([(iv.start, iv.end) if hasattr(iv, "start") else tuple(iv) for iv in intervals], dtype=np.float64)
    ivs = ivs.reshape(-1, 2)
    centers = (np.arange(T) + 0.5) / T
    mask = (centers[None, :] >= ivs[:, :1]) & (centers[None, :] <= ivs[:, 1:])
    mask = mask.astype(np.float64)
    for i in np.flatnonzero(mask.sum(axis=1) == 0):
        mid = 0.5 * (ivs[i, 0] + ivs[i, 1])
        mask[i, int(np.argmin(np.abs(centers - mid)))] = 1.0
    return mask


def batch_membership(interval_sets: list, T: int, n_max: int) -> torch.Tensor:
    out = np.zeros((len(interval_sets), n_max, T))
    for b, s in enumerate(interval_sets):
        if len(s):
            out[b, : len(s)] = membership_mask(s, T)
    return torch.from_numpy(out)


def moment_pool(V_enc, intervals, T: Optional[int] = None):
    """Mean of encoded clip features inside each interval.

    ``V_enc`` is (T, D) or a tensor; ``intervals`` is a sequence of K intervals.
    Returns a (K, D) array/tensor matching the input type.
    """
    as_numpy = not isinstance(V_enc, torch.Tensor)
    V = torch.as_tensor(np.asarray(V_enc, dtype=np.float64)) if as_numpy else V_enc
    T = V.shape[-2] if T is None else T
    beta = torch.from_numpy(membership_mask(intervals, T)).to(V.dtype)
    pooled = (beta @ V) / beta.sum(dim=-1, keepdim=True)
    return pooled.numpy() if as_numpy else pooled


def pool_batch(V_enc: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Batched pooling with precomputed masks: (B,T,D), (B,K,T) -> (B,K,D)."""
    denom = beta.sum(dim=-1, keepdim=True).clamp_min(1.0)
    return (beta @ V_enc) / denom


def attention_targets(interval_sets: list, T: int, n_max: int) -> torch.Tensor:
    beta = batch_membership(interval_sets, T, n_max)
    return beta / beta.sum(dim=-1, keepdim=True).clamp_min(1.0)


def attention_loss_per_sample(attn: torch.Tensor, targets: torch.Tensor, query_mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of every decoder layer's attention against the target.

    ``attn``: (L, B, N, T); ``targets``: (B, N, T). Averaged over layers and
    real sentences, one value per sample.
    """
    ce = -(targets[None] * torch.log(attn.clamp_min(LOG_EPS))).sum(dim=-1)  # (L, B, N)
    ce = ce.mean(dim=0) * query_mask
    return ce.sum(dim=-1) / query_mask.sum(dim=-1).clamp_min(1)


def attention_loss(attn, gt_intervals, T: int) -> float:
    """Single-sample attention loss; ``attn`` is (L, N, T)."""
    attn = torch.as_tensor(np.asarray(attn, dtype=np.float64)) if not isinstance(attn, torch.Tensor) else attn
    if attn.shape[1] != len(gt_intervals):
        raise ValueError(f"attention rows ({attn.shape[1]}) do not match {len(gt_intervals)} targets")
    targets = attention_targets([gt_intervals], T, len(gt_intervals))
    mask = torch.ones(1, len(gt_intervals), dtype=torch.bool)
    loss = attention_loss_per_sample(attn[:, None], targets, mask)[0]
    return loss if attn.requires_grad else float(loss)


# --- localization loss on tensors -----------------------------------------

def giou_tensor(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    ps, pe = pred[..., 0], pred[..., 1]
    ts, te = target[..., 0], target[..., 1]
    inter = (torch.minimum(pe, te) - torch.maximum(ps, ts)).clamp_min(0.0)
    union = (pe - ps) + (te - ts) - inter
    hull = torch.maximum(pe, te) - torch.minimum(ps, ts)
    plain = torch.where(union > 0, inter / union.clamp_min(1e-300), torch.zeros_like(union))
    return torch.where(hull > 0, plain - (hull - union) / hull.clamp_min(1e-300), plain)


def location_loss_per_sample(pred: torch.Tensor, target: torch.Tensor, query_mask: torch.Tensor) -> torch.Tensor:
    per = (pred - target).abs().sum(dim=-1) + (1.0 - giou_tensor(pred, target))
    per = per * query_mask
    return per.sum(dim=-1) / query_mask.sum(dim=-1).clamp_min(1)


# --- gradients and optimizer ----------------------------------------------

def backward(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor]) -> dict:
    """Gradient map ``{name: grad}`` of the scalar ``loss_fn(model)``.

    Parameters the loss does not touch get zero gradients.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0 or not loss.requires_grad:
        raise TypeError("loss_fn must return a differentiable scalar tensor")
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    model.zero_grad(set_to_none=True)
    return grads


def adam_init(model: nn.Module) -> dict:
    return {
        "step": 0,
        "m": {n: torch.zeros_like(p) for n, p in model.named_parameters()},
        "v": {n: torch.zeros_like(p) for n, p in model.named_parameters()},
    }


@torch.no_grad()
def adam_step(model: nn.Module, grads: dict, state: dict, lr: float = 1e-4,
              betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """One in-place Adam update of ``model``; returns the advanced state."""
    b1, b2 = betas
    step = state["step"] + 1
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for name, p in model.named_parameters():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {name} {tuple(p.shape)}")
        m = state["m"][name].mul_(b1).add_(g, alpha=1.0 - b1)
        v = state["v"][name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    state["step"] = step
    return state


# --- checkpoints -----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _tensor_json(t: torch.Tensor) -> str:
    data = ",".join(_fmt(x) for x in t.detach().reshape(-1).tolist())
    return '{"shape":%s,"data":[%s]}' % (json.dumps(list(t.shape)), data)


def _tensor_from(obj: dict) -> torch.Tensor:
    return torch.tensor(obj["data"], dtype=DTYPE).reshape(obj["shape"])


def save_checkpoint(path, model: GroundingModel, opt_state: Optional[dict] = None,
                    rng_state: int = 0, extra: Optional[dict] = None) -> None:
    """JSON checkpoint; parameters written with 17 significant digits (exact)."""
    parts = ['"config":' + json.dumps(asdict(model.cfg), sort_keys=True)]
    parts.append('"params":{' + ",".join(
        f"{json.dumps(n)}:{_tensor_json(p)}" for n, p in model.named_parameters()) + "}")
    if opt_state is None:
        parts.append('"opt_state":null')
    else:
        m = ",".join(f"{json.dumps(n)}:{_tensor_json(t)}" for n, t in opt_state["m"].items())
        v = ",".join(f"{json.dumps(n)}:{_tensor_json(t)}" for n, t in opt_state["v"].items())
        parts.append('"opt_state":{"step":%d,"m":{%s},"v":{%s}}' % (opt_state["step"], m, v))
    parts.append('"rng_state":' + json.dumps(int(rng_state)))
    if extra:
        parts.append('"extra":' + json.dumps(extra, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("{" + ",".join(parts) + "}\n")


def load_checkpoint(path) -> tuple:
    """Returns ``(model, opt_state_or_None, rng_state, extra)``."""
    obj = json.loads(Path(path).read_text())
    cfg = ModelConfig(**obj["config"])
    model = GroundingModel(cfg)
    names = {n for n, _ in model.named_parameters()}
    if set(obj["params"]) != names:
        raise ValueError(f"checkpoint parameters do not match model: {sorted(names ^ set(obj['params']))[:5]}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            t = _tensor_from(obj["params"][name])
            if t.shape != p.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.copy_(t)
    opt = obj.get("opt_state")
    if opt is not None:
        opt = {
            "step": int(opt["step"]),
            "m": {n: _tensor_from(t) for n, t in opt["m"].items()},
            "v": {n: _tensor_from(t) for n, t in opt["v"].items()},
        }
    return model, opt, int(obj.get("rng_state", 0)), obj.get("extra", {})
