"""Language-model interface and a small pre-LN causal transformer implementing it.

Every stage talks to the backbone through three calls: :func:`forward_hidden`
(teacher-forced pass returning all hidden layers and next-token
log-probabilities), :func:`generate` (beam search) and
:func:`sequence_logprob`. Any wrapper exposing ``config``, ``forward`` with
the same signature and a tokenizer can stand in for :class:`TinyTransformer`.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, ConfigError
from .lora import LoRAAdapter, apply_adapter

PAPER_LAYER = 25
PAPER_DEPTH = 32


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    n_layers: int = 4
    hidden_dim: int = 64
    n_heads: int = 4
    max_positions: int = 256
    mlp_ratio: int = 4
    pad_id: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if min(self.vocab_size, self.n_layers, self.hidden_dim, self.n_heads, self.max_positions) < 1:
            raise ConfigError("backbone sizes must be positive")

    def site_shapes(self, sites: Sequence[str]) -> dict[str, tuple[int, int]]:
        """Adapter site name -> (in_dim, out_dim) for every layer."""
        d, h = self.hidden_dim, self.hidden_dim * self.mlp_ratio
        dims = {"attn.q": (d, d), "attn.k": (d, d), "attn.v": (d, d), "attn.o": (d, d), "mlp.fc1": (d, h), "mlp.fc2": (h, d)}
        out = {}
        for i in range(self.n_layers):
            for s in sites:
                if s not in dims:
                    raise ConfigError(f"unknown adapter site {s!r}; known: {sorted(dims)}")
                out[f"layers.{i}.{s}"] = dims[s]
        return out


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    top_p: float = 1.0
    top_k: int = 65536
    num_beams: int = 4
    max_new_tokens: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.num_beams < 1 or self.max_new_tokens < 1 or self.top_k < 1:
            raise ConfigError("num_beams, max_new_tokens and top_k must be >= 1")


class AdaptedLinear(nn.Linear):
    """Linear layer that looks up its low-rank correction by site name at call time."""

    def __init__(self, in_features: int, out_features: int, site: str):
        super().__init__(in_features, out_features)
        self.site = site

    def forward(self, x: torch.Tensor, adapter: LoRAAdapter | None = None) -> torch.Tensor:
        # nn.Linear stores (out, in); the adapter convention is x @ A @ B with A (in, r)
        out = F.linear(x, self.weight, self.bias)
        if adapter is not None and self.site in adapter.factors:
            out = apply_adapter(x, out, adapter, self.site, training=self.training)
        return out


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig, idx: int):
        super().__init__()
        d = cfg.hidden_dim
        p = f"layers.{idx}."
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.q = AdaptedLinear(d, d, p + "attn.q")
        self.k = AdaptedLinear(d, d, p + "attn.k")
        self.v = AdaptedLinear(d, d, p + "attn.v")
        self.o = AdaptedLinear(d, d, p + "attn.o")
        self.fc1 = AdaptedLinear(d, d * cfg.mlp_ratio, p + "mlp.fc1")
        self.fc2 = AdaptedLinear(d * cfg.mlp_ratio, d, p + "mlp.fc2")

    def forward(self, x: torch.Tensor, mask: torch.Tensor, adapter: LoRAAdapter | None) -> torch.Tensor:
        B, T, D = x.shape
        hd = D // self.n_heads
        h = self.ln1(x)
        q = self.q(h, adapter).view(B, T, self.n_heads, hd).transpose(1, 2)
        k = self.k(h, adapter).view(B, T, self.n_heads, hd).transpose(1, 2)
        v = self.v(h, adapter).view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~mask, float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        x = x + self.o(y, adapter)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x), adapter)), adapter)
        return x


class TinyTransformer(nn.Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        torch.manual_seed(seed)
        self.tok = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos = nn.Embedding(cfg.max_positions, cfg.hidden_dim)
        self.blocks = nn.ModuleList(Block(cfg, i) for i in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.hidden_dim)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, std=0.02)

    def forward(
        self,
        ids: torch.Tensor,
        attention_mask: torch.Tensor | None = None,
        adapter: LoRAAdapter | None = None,
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        B, T = ids.shape
        if T > self.config.max_positions:
            raise CapacityError(f"sequence length {T} exceeds max_positions {self.config.max_positions}")
        causal = torch.ones(T, T, dtype=torch.bool, device=ids.device).tril()
        if attention_mask is None:
            mask = causal.expand(B, 1, T, T)
        else:
            keys = attention_mask.bool()[:, None, None, :]
            eye = torch.eye(T, dtype=torch.bool, device=ids.device)
            mask = causal & (keys | eye)
        x = self.tok(ids) + self.pos(torch.arange(T, device=ids.device))
        hidden = [x]
        for blk in self.blocks:
            x = blk(x, mask, adapter)
            hidden.append(x)
        logits = self.ln_f(x) @ self.tok.weight.t()
        return hidden, F.log_softmax(logits, dim=-1)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def freeze(self) -> "TinyTransformer":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# operations


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a (B, T) id matrix plus attention mask."""
    T = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), T, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def forward_hidden(
    model: TinyTransformer,
    batch: torch.Tensor | Sequence[Sequence[int]],
    adapter: LoRAAdapter | None = None,
    attention_mask: torch.Tensor | None = None,
) -> tuple[list[torch.Tensor], torch.Tensor]:
    """All hidden layers (index 0 = embeddings) and next-token log-probabilities.

    ``log_probs[b, t]`` is the distribution over the token at position ``t + 1``.
    """
    if not isinstance(batch, torch.Tensor):
        batch, attention_mask = pad_batch(batch, model.config.pad_id)
    if int(batch.max()) >= model.config.vocab_size or int(batch.min()) < 0:
        raise ValueError("token id outside the vocabulary")
    return model(batch, attention_mask, adapter)


def sequence_logprob(
    model: TinyTransformer,
    prompt_ids: Sequence[int],
    target_ids: Sequence[int],
    adapter: LoRAAdapter | None = None,
) -> float:
    """Sum of log P(target_t | prompt, target_<t) over the target positions only."""
    if len(target_ids) == 0:
        warnings.warn("empty target: sequence log-probability is 0", stacklevel=2)
        return 0.0
    if len(prompt_ids) == 0:
        raise ValueError("prompt must contain at least one token")
    seq = list(prompt_ids) + list(target_ids)
    with torch.no_grad():
        _, logp = forward_hidden(model, torch.tensor([seq]), adapter)
    p = len(prompt_ids)
    tgt = torch.tensor(list(target_ids))
    return float(logp[0, p - 1 : len(seq) - 1].gather(-1, tgt[:, None]).sum())


@dataclass
class Generation:
    tokens: list[int]
    logprob: float
    finished: bool
    token_logprobs: list[float]


def _step_logprobs(model, seqs: list[list[int]], adapter, temperature: float) -> torch.Tensor:
    ids = torch.tensor(seqs, dtype=torch.long)
    _, logp = model(ids, None, adapter)
    last = logp[:, -1, :]
    if temperature > 0:
        last = F.log_softmax(last / temperature, dim=-1)
    return last


def _sample(logp: torch.Tensor, params: GenerationParams, gen: torch.Generator) -> int:
    k = min(params.top_k, logp.numel())
    vals, idx = logp.topk(k)
    probs = vals.exp()
    if params.top_p < 1:
        cum = probs.cumsum(0)
        keep = cum - probs < params.top_p
        probs, idx = probs[keep], idx[keep]
    probs = probs / probs.sum()
    return int(idx[torch.multinomial(probs, 1, generator=gen)])


@torch.no_grad()
def generate(
    model: TinyTransformer,
    prompt_ids: Sequence[int],
    params: GenerationParams,
    eos_id: int,
    adapter: LoRAAdapter | None = None,
) -> Generation:
    """Beam search (or seeded sampling when temperature > 0 with one beam).

    Scores are summed token log-probabilities with no length penalty. The
    search ends when ``num_beams`` hypotheses have emitted ``eos_id`` and none
    of the live beams can still beat the best finished one, or after
    ``max_new_tokens``; the result is flagged unfinished if no hypothesis
    reached ``eos_id``. The returned log-probability is re-scored with a
    single teacher-forced pass.
    """
    was_training = model.training
    model.eval()
    prompt = list(prompt_ids)
    budget = min(params.max_new_tokens, model.config.max_positions - len(prompt))
    if budget < 1:
        raise CapacityError("prompt leaves no room for generation")
    try:
        if params.temperature > 0 and params.num_beams == 1:
            gen = torch.Generator().manual_seed(params.seed)
            out: list[int] = []
            for _ in range(budget):
                logp = _step_logprobs(model, [prompt + out], adapter, params.temperature)[0]
                tok = _sample(logp, params, gen)
                out.append(tok)
                if tok == eos_id:
                    break
            return _finish(model, prompt, out, eos_id, adapter)

        beams: list[tuple[float, list[int]]] = [(0.0, [])]
        finished: list[tuple[float, list[int]]] = []
        nb = params.num_beams
        for _ in range(budget):
            logp = _step_logprobs(model, [prompt + b for _, b in beams], adapter, params.temperature)
            cand = []
            for bi, (score, toks) in enumerate(beams):
                vals, idx = logp[bi].topk(min(2 * nb, logp.shape[-1]))
                for v, t in zip(vals.tolist(), idx.tolist()):
                    cand.append((score + v, bi, t))
            # stable order: score desc, then beam index, then token id
            cand.sort(key=lambda c: (-c[0], c[1], c[2]))
            new_beams = []
            for score, bi, t in cand:
                toks = beams[bi][1] + [t]
                if t == eos_id:
                    finished.append((score, toks))
                else:
                    new_beams.append((score, toks))
                if len(new_beams) == nb:
                    break
            beams = new_beams
            finished.sort(key=lambda c: -c[0])
            finished = finished[:nb]
            if len(finished) >= nb and finished[0][0] >= beams[0][0]:
                break
            if not beams:
                break
        pool = finished if finished else beams
        best = max(pool, key=lambda c: c[0])
        return _finish(model, prompt, best[1], eos_id, adapter)
    finally:
        model.train(was_training)


def _finish(model, prompt, out, eos_id, adapter) -> Generation:
    ids = torch.tensor([prompt + out])
    _, logp = model(ids, None, adapter)
    p = len(prompt)
    per_tok = logp[0, p - 1 : p - 1 + len(out)].gather(-1, torch.tensor(out)[:, None]).squeeze(-1)
    return Generation(out, float(per_tok.sum()), bool(out and out[-1] == eos_id), per_tok.tolist())


def gather_indices(
    H: torch.Tensor,
    indices: torch.Tensor | Sequence[Sequence[int]],
    valid_mask: torch.Tensor | Sequence[Sequence[bool]] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """``out[b, j] = H[b, indices[b, j]]``; masked slots come back as zero vectors."""
    idx = torch.as_tensor(indices, dtype=torch.long)
    mask = torch.ones_like(idx, dtype=torch.bool) if valid_mask is None else torch.as_tensor(valid_mask, dtype=torch.bool)
    T = H.shape[1]
    bad = mask & ((idx < 0) | (idx >= T))
    if bool(bad.any()):
        b, j = bad.nonzero()[0].tolist()
        raise IndexError(f"unmasked index {int(idx[b, j])} out of range for length {T} (row {b}, slot {j})")
    safe = torch.where(mask, idx, torch.zeros_like(idx))
    rows = torch.arange(H.shape[0])[:, None].expand_as(safe)
    out = H[rows, safe] * mask[..., None].to(H.dtype)
    return out, mask


def default_layer(n_layers: int) -> int:
    """The reference 25-of-32 depth fraction rescaled to ``n_layers`` (half-up rounding)."""
    return int(math.floor(PAPER_LAYER / PAPER_DEPTH * n_layers + 0.5))


def select_layer(H: Sequence[torch.Tensor], requested: int | None = None) -> torch.Tensor:
    n_layers = len(H) - 1
    if requested is None:
        return H[default_layer(n_layers)]
    if not 0 <= requested <= n_layers:
        raise ConfigError(f"layer {requested} out of range for a {n_layers}-layer backbone")
    return H[requested]


# ---------------------------------------------------------------------------
# pre-training and checkpoints


def train_lm(
    model: TinyTransformer,
    sequences: Sequence[Sequence[int]],
    epochs: int = 1,
    lr: float = 3e-3,
    batch_size: int = 16,
    seed: int = 0,
    loss_masks: Sequence[Sequence[bool]] | None = None,
    log: list | None = None,
) -> list[float]:
    """Full-parameter causal LM training (used to pre-train the reference backbone)."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    for p in model.parameters():
        p.requires_grad_(True)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    n_steps = epochs * math.ceil(len(sequences) / batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / 20) * max(0.05, 1 - s / max(1, n_steps)))
    model.train()
    losses = []
    for ep in range(epochs):
        order = torch.randperm(len(sequences), generator=gen).tolist()
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            ids, mask = pad_batch([sequences[i] for i in chunk], model.config.pad_id)
            target_mask = mask[:, 1:].clone()
            if loss_masks is not None:
                lm, _ = pad_batch([[int(x) for x in loss_masks[i]] for i in chunk], 0)
                target_mask &= lm[:, 1:].bool()
            _, logp = model(ids, mask)
            nll = -logp[:, :-1].gather(-1, ids[:, 1:, None]).squeeze(-1)
            loss = (nll * target_mask).sum() / target_mask.sum().clamp(min=1)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            sched.step()
            val = float(loss.detach())
            losses.append(val)
            if log is not None:
                log.append({"stage": "pretrain", "epoch": ep, "loss": val})
    model.eval()
    return losses


def save_backbone(model: TinyTransformer, path: str | Path) -> None:
    """``.npz`` container: every parameter array plus the config as a JSON string entry."""
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__config__"] = np.array(json.dumps(asdict(model.config)))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_backbone(path: str | Path) -> TinyTransformer:
    with np.load(path, allow_pickle=False) as data:
        cfg = BackboneConfig(**json.loads(str(data["__config__"])))
        model = TinyTransformer(cfg)
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__config__"}
    model.load_state_dict(state)
    model.eval()
    return model
