"""Low-rank adapters: application, weighted composition, weight search and file format.

Adapter file layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"FSLORA\\x00\\x01"
    offset 8   4 bytes   uint32 header length N
    offset 12  N bytes   UTF-8 JSON header
    offset 12+N          payload: for each site in header["sites"] order,
                         A (d x r) then B (r x k), C-order, dtype header["dtype"]

The header holds ``format_version``, ``rank``, ``alpha``, ``dropout``,
``stage_tag``, ``domain_tag``, ``dtype``, ``sites`` (name, a_shape, b_shape)
``meta`` (free-form run metadata such as the config snapshot)
and ``checksum``: the SHA-256 hex digest of the header JSON serialized with
sorted keys *without* the checksum field, followed by the payload bytes.
"""
from __future__ import annotations

import hashlib
import json
import math
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AdapterFormatError, ChecksumError, NumericAbort, StageTagError

STAGES = ("span", "type")
FORMAT_VERSION = 1
MAGIC = b"FSLORA\x00\x01"
DEFAULT_SITES = ("attn.q", "attn.v")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 32
    alpha: float = 16.0
    dropout: float = 0.05
    sites: tuple[str, ...] = DEFAULT_SITES


@dataclass
class LoRAAdapter:
    """Per-site factor pairs ``A`` (d x r) and ``B`` (r x k); correction is ``(alpha/r) x A B``."""

    factors: dict[str, tuple[torch.Tensor, torch.Tensor]]
    rank: int
    alpha: float
    dropout: float = 0.0
    stage_tag: str = "span"
    domain_tag: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.stage_tag not in STAGES:
            raise ValueError(f"stage_tag must be one of {STAGES}")
        for name, (a, b) in self.factors.items():
            if a.shape[1] != self.rank or b.shape[0] != self.rank:
                raise ValueError(f"site {name}: factor shapes {tuple(a.shape)} x {tuple(b.shape)} do not match rank {self.rank}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def sites(self) -> list[str]:
        return list(self.factors)

    @classmethod
    def create(
        cls,
        site_shapes: Mapping[str, tuple[int, int]],
        rank: int,
        alpha: float,
        dropout: float = 0.0,
        stage_tag: str = "span",
        domain_tag: str = "",
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ) -> "LoRAAdapter":
        """A ~ U(-1/sqrt(d), 1/sqrt(d)), B = 0, so a fresh adapter is a no-op."""
        gen = torch.Generator().manual_seed(seed)
        factors = {}
        for name, (d, k) in site_shapes.items():
            bound = 1.0 / math.sqrt(d)
            a = (torch.rand(d, rank, generator=gen, dtype=dtype) * 2 - 1) * bound
            factors[name] = (a, torch.zeros(rank, k, dtype=dtype))
        return cls(factors, rank, alpha, dropout, stage_tag, domain_tag)

    def parameters(self) -> list[torch.Tensor]:
        return [t for pair in self.factors.values() for t in pair]

    def requires_grad_(self, flag: bool = True) -> "LoRAAdapter":
        for t in self.parameters():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "LoRAAdapter":
        factors = {k: (a.detach().clone(), b.detach().clone()) for k, (a, b) in self.factors.items()}
        return LoRAAdapter(factors, self.rank, self.alpha, self.dropout, self.stage_tag, self.domain_tag, dict(self.meta))

    def to(self, dtype: torch.dtype) -> "LoRAAdapter":
        factors = {k: (a.detach().to(dtype), b.detach().to(dtype)) for k, (a, b) in self.factors.items()}
        return LoRAAdapter(factors, self.rank, self.alpha, self.dropout, self.stage_tag, self.domain_tag, dict(self.meta))

    def delta(self, site: str) -> torch.Tensor:
        a, b = self.factors[site]
        return self.scale * (a @ b)

    def equal(self, other: "LoRAAdapter") -> bool:
        if self.sites != other.sites or (self.rank, self.alpha, self.stage_tag) != (other.rank, other.alpha, other.stage_tag):
            return False
        return all(
            torch.equal(a, a2) and torch.equal(b, b2)
            for (a, b), (a2, b2) in zip(self.factors.values(), other.factors.values())
        )


def apply_adapter(
    site_input: torch.Tensor,
    base_output: torch.Tensor,
    adapter: LoRAAdapter,
    site: str,
    training: bool = False,
) -> torch.Tensor:
    a, b = adapter.factors[site]
    if site_input.shape[-1] != a.shape[0] or base_output.shape[-1] != b.shape[1]:
        raise ValueError(
            f"site {site}: input dim {site_input.shape[-1]} / output dim {base_output.shape[-1]} "
            f"incompatible with factors {tuple(a.shape)} x {tuple(b.shape)}"
        )
    x = F.dropout(site_input, adapter.dropout, training=True) if training and adapter.dropout > 0 else site_input
    return base_output + adapter.scale * ((x @ a) @ b)


@dataclass
class CompositionWeights:
    w: list[float] = field(default_factory=list)
    l1_coefficient: float = 0.05
    search_budget: int = 200
    seed: int = 0
    bound: float = 1.5
    objective: float | None = None
    loss: float | None = None
    evaluations: int = 0

    def to_dict(self) -> dict:
        return {
            "w": list(self.w),
            "l1_coefficient": self.l1_coefficient,
            "search_budget": self.search_budget,
            "seed": self.seed,
            "bound": self.bound,
            "objective": self.objective,
            "loss": self.loss,
            "evaluations": self.evaluations,
        }


def merge_adapters(adapters: Sequence[LoRAAdapter], weights: CompositionWeights | Sequence[float]) -> LoRAAdapter:
    """``A = sum_i w_i A_i`` and ``B = sum_i w_i B_i``; the product carries cross terms."""
    w = list(weights.w if isinstance(weights, CompositionWeights) else weights)
    if not adapters:
        raise ValueError("nothing to merge")
    if len(w) != len(adapters):
        raise ValueError(f"{len(w)} weights for {len(adapters)} adapters")
    first = adapters[0]
    for ad in adapters[1:]:
        if ad.rank != first.rank or ad.sites != first.sites or ad.stage_tag != first.stage_tag or ad.alpha != first.alpha:
            raise ValueError("adapters differ in rank, alpha, sites or stage")
        for s in first.sites:
            if ad.factors[s][0].shape != first.factors[s][0].shape or ad.factors[s][1].shape != first.factors[s][1].shape:
                raise ValueError(f"site {s}: shape mismatch")
    factors = {}
    for s in first.sites:
        a = sum(wi * ad.factors[s][0] for wi, ad in zip(w, adapters))
        b = sum(wi * ad.factors[s][1] for wi, ad in zip(w, adapters))
        factors[s] = (a, b)
    tags = "+".join(ad.domain_tag for ad in adapters)
    return LoRAAdapter(factors, first.rank, first.alpha, first.dropout, first.stage_tag, f"composed({tags})")


def optimize_weights(
    adapters: Sequence[LoRAAdapter],
    loss_fn: Callable[[list[float]], float],
    config: CompositionWeights | None = None,
    init: Sequence[float] | None = None,
) -> CompositionWeights:
    """Seeded random-restart coordinate descent on ``loss(w) + l1 * sum|w|`` inside a box.

    Each coordinate is probed at +/- step; a sweep without improvement halves
    the step, and once it falls below 1e-3 the search restarts from a random
    point in the box. Every call to ``loss_fn`` counts against the budget and
    the best point seen is returned, so the result is never worse than the
    initialization.
    """
    config = config or CompositionWeights()
    m = len(adapters)
    if m == 0:
        raise ValueError("no adapters to weigh")
    if config.search_budget < 1:
        raise ValueError("search budget must be >= 1")
    rng = random.Random(config.seed)
    lo, hi = -config.bound, config.bound
    evals = 0
    best_w = list(init) if init is not None else [1.0 / m] * m
    if len(best_w) != m:
        raise ValueError("init length differs from adapter count")

    def objective(w: list[float]) -> tuple[float, float]:
        nonlocal evals
        evals += 1
        loss = float(loss_fn(list(w)))
        if not math.isfinite(loss):
            raise NumericAbort(f"loss_fn returned {loss} at weights {w}")
        return loss + config.l1_coefficient * sum(abs(x) for x in w), loss

    best, best_loss = objective(best_w)
    cur_w, cur = list(best_w), best
    step = 0.5
    while evals < config.search_budget:
        improved = False
        order = list(range(m))
        rng.shuffle(order)
        for i in order:
            for sign in (1.0, -1.0):
                if evals >= config.search_budget:
                    break
                trial = list(cur_w)
                trial[i] = min(hi, max(lo, trial[i] + sign * step))
                if trial[i] == cur_w[i]:
                    continue
                val, loss = objective(trial)
                if val < cur:
                    cur_w, cur, improved = trial, val, True
                    if val < best:
                        best_w, best, best_loss = list(trial), val, loss
                    break
        if not improved:
            step /= 2
            if step < 1e-3:
                cur_w = [rng.uniform(lo, hi) for _ in range(m)]
                if evals >= config.search_budget:
                    break
                cur, cur_loss = objective(cur_w)
                if cur < best:
                    best_w, best, best_loss = list(cur_w), cur, cur_loss
                step = 0.5
    return CompositionWeights(
        w=best_w,
        l1_coefficient=config.l1_coefficient,
        search_budget=config.search_budget,
        seed=config.seed,
        bound=config.bound,
        objective=best,
        loss=best_loss if best_loss is not None else None,
        evaluations=evals,
    )


# ---------------------------------------------------------------------------
# file format

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def _canonical(header: dict) -> bytes:
    return json.dumps({k: v for k, v in header.items() if k != "checksum"}, sort_keys=True).encode("utf-8")


def save_adapter(adapter: LoRAAdapter, path: str | Path) -> None:
    dtype = next(iter(adapter.factors.values()))[0].dtype if adapter.factors else torch.float32
    np_dtype = _DTYPES[dtype]
    payload = bytearray()
    sites = []
    for name, (a, b) in adapter.factors.items():
        sites.append({"name": name, "a_shape": list(a.shape), "b_shape": list(b.shape)})
        for t in (a, b):
            payload += np.ascontiguousarray(t.detach().cpu().numpy().astype(np_dtype)).tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "dropout": adapter.dropout,
        "stage_tag": adapter.stage_tag,
        "domain_tag": adapter.domain_tag,
        "dtype": np_dtype,
        "sites": sites,
        "meta": adapter.meta,
    }
    header["checksum"] = hashlib.sha256(_canonical(header) + bytes(payload)).hexdigest()
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(raw)) + raw + bytes(payload))


def load_adapter(
    path: str | Path,
    expected_stage: str | None = None,
    expected_shapes: Mapping[str, tuple[int, int]] | None = None,
) -> LoRAAdapter:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise AdapterFormatError(f"{path}: not an adapter file (bad magic)")
    try:
        (n,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: corrupted header ({exc})") from None
    if not isinstance(header, dict) or "checksum" not in header:
        raise ChecksumError(f"{path}: corrupted header")
    payload = data[12 + n:]
    if hashlib.sha256(_canonical(header) + payload).hexdigest() != header["checksum"]:
        raise ChecksumError(f"{path}: checksum mismatch")
    if header.get("format_version") != FORMAT_VERSION:
        raise AdapterFormatError(f"{path}: unsupported format version {header.get('format_version')}")
    if expected_stage is not None and header["stage_tag"] != expected_stage:
        raise StageTagError(f"{path}: adapter is for the {header['stage_tag']!r} stage, expected {expected_stage!r}")
    np_dtype = np.dtype(header["dtype"])
    factors = {}
    off = 0
    for site in header["sites"]:
        pair = []
        for shape in (site["a_shape"], site["b_shape"]):
            count = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype=np_dtype, count=count, offset=off).reshape(shape)
            off += count * np_dtype.itemsize
            pair.append(torch.from_numpy(arr.copy()))
        factors[site["name"]] = tuple(pair)
        if expected_shapes is not None:
            d, k = expected_shapes.get(site["name"], (None, None))
            if (pair[0].shape[0], pair[1].shape[1]) != (d, k):
                raise AdapterFormatError(f"{path}: site {site['name']} shape does not match the backbone")
    if off != len(payload):
        raise AdapterFormatError(f"{path}: payload size mismatch")
    return LoRAAdapter(
        factors,
        header["rank"],
        header["alpha"],
        header["dropout"],
        header["stage_tag"],
        header["domain_tag"],
        header.get("meta", {}),
    )
