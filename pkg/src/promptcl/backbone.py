"""Tiny frozen multimodal decoder used in place of a large pretrained model.

A causal transformer over the sequence [prompt prefix; image slots;
instruction tokens; answer tokens]. The image enters through a linear
adapter producing a fixed number of embedding slots. Prompt prefixes are
raw embedding rows supplied by the caller and carry no positional term, so
the model computes exactly its pretrained function when the prefix is
empty, for any prefix length. Output logits are tied against the token
embedding table extended with the prefix rows, one extra column per prompt
token in the current prefix.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .errors import ConfigError, InputError, IntegrityError, ShapeError
from .tasks import Sample, TaskDataset
from .vocab import default_vocab

_F64 = torch.float64


def _init_params(module: nn.Module, gen: torch.Generator, std: float = 0.02) -> None:
    for p in module.parameters():
        if p.ndim >= 2:
            with torch.no_grad():
                p.normal_(0.0, std, generator=gen)
        else:
            with torch.no_grad():
                p.zero_()
    for m in module.modules():
        if isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


class DecoderBlock(nn.Module):
    def __init__(self, d_m: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_m // n_heads
        self.ln1 = nn.LayerNorm(d_m, dtype=_F64)
        self.qkv = nn.Linear(d_m, 3 * d_m, dtype=_F64)
        self.proj = nn.Linear(d_m, d_m, dtype=_F64)
        self.ln2 = nn.LayerNorm(d_m, dtype=_F64)
        self.mlp_in = nn.Linear(d_m, 4 * d_m, dtype=_F64)
        self.mlp_out = nn.Linear(4 * d_m, d_m, dtype=_F64)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=-1)
        q = q.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, l, d)
        x = x + self.proj(y)
        x = x + self.mlp_out(F.gelu(self.mlp_in(self.ln2(x))))
        return x


class BackboneModel(nn.Module):
    """Frozen-after-pretraining causal decoder with an image adapter."""

    def __init__(
        self,
        d_m: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        n_image_tokens: int = 4,
        vocab_size: int = 256,
        d_img: int = 24,
        max_positions: int = 32,
        eos_token_id: int | None = None,
        init_seed: int = 0,
    ):
        super().__init__()
        self.d_m = d_m
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.n_image_tokens = n_image_tokens
        self.vocab_size = vocab_size
        self.d_img = d_img
        self.max_positions = max_positions
        self.eos_token_id = default_vocab().eos_id if eos_token_id is None else eos_token_id
        self.init_seed = init_seed
        self.frozen = False

        self.tok_emb = nn.Parameter(torch.empty(vocab_size, d_m, dtype=_F64))
        self.pos_emb = nn.Parameter(torch.empty(max_positions, d_m, dtype=_F64))
        self.image_adapter = nn.Linear(d_img, n_image_tokens * d_m, dtype=_F64)
        self.blocks = nn.ModuleList(DecoderBlock(d_m, n_heads) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_m, dtype=_F64)
        _init_params(self, torch.Generator().manual_seed(init_seed))

    @classmethod
    def from_config(cls, config: RunConfig, init_seed: int | None = None) -> "BackboneModel":
        return cls(
            d_m=config.d_m,
            n_layers=config.n_layers,
            n_heads=config.n_heads,
            n_image_tokens=config.n_image_tokens,
            vocab_size=config.vocab_size,
            d_img=config.d_img,
            max_positions=config.max_positions,
            init_seed=config.seed if init_seed is None else init_seed,
        )

    def dims(self) -> dict:
        return {
            "d_m": self.d_m,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_image_tokens": self.n_image_tokens,
            "vocab_size": self.vocab_size,
            "d_img": self.d_img,
            "max_positions": self.max_positions,
            "eos_token_id": self.eos_token_id,
        }

    def freeze(self) -> "BackboneModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------

    def _check_prefix(self, prefix: torch.Tensor) -> torch.Tensor:
        """Accept a shared (P, d_m) prefix or per-sample (B, P, d_m) prefixes."""
        prefix = torch.as_tensor(prefix, dtype=_F64)
        if prefix.ndim not in (2, 3) or (prefix.numel() > 0 and prefix.shape[-1] != self.d_m):
            raise ShapeError(
                f"prefix must have shape (P, {self.d_m}) or (B, P, {self.d_m}), "
                f"got {tuple(prefix.shape)}"
            )
        if prefix.ndim == 2:
            return prefix.reshape(-1, self.d_m)
        return prefix

    def _embed(
        self,
        prefix: torch.Tensor,
        images: torch.Tensor,
        instructions: torch.Tensor,
        target_in: torch.Tensor,
    ) -> torch.Tensor:
        b = images.shape[0]
        if images.shape[1] != self.d_img:
            raise ShapeError(f"image dim {images.shape[1]} != d_img {self.d_img}")
        n_content = self.n_image_tokens + instructions.shape[1] + target_in.shape[1]
        if n_content > self.max_positions:
            raise ShapeError(
                f"content length {n_content} exceeds max_positions {self.max_positions}"
            )
        img = self.image_adapter(images).view(b, self.n_image_tokens, self.d_m)
        if prefix.ndim == 2:
            parts = [prefix.unsqueeze(0).expand(b, -1, -1)]
        else:
            if prefix.shape[0] != b:
                raise ShapeError(f"prefix batch {prefix.shape[0]} != image batch {b}")
            parts = [prefix]
        pos = 0
        for emb in (img, self.tok_emb[instructions], self.tok_emb[target_in]):
            n = emb.shape[1]
            parts.append(emb + self.pos_emb[pos : pos + n])
            pos += n
        return torch.cat(parts, dim=1)

    def _decode(self, x: torch.Tensor) -> torch.Tensor:
        l = x.shape[1]
        mask = torch.triu(torch.ones(l, l, dtype=torch.bool), diagonal=1)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_f(x)

    def forward_logits_batch(
        self,
        prefix,
        images,
        instructions,
        target_in,
    ) -> torch.Tensor:
        """Next-token logits for a shape-uniform batch.

        Returns (B, J+1, V + P) where J = target_in length: row j predicts
        the answer token following the first j answer tokens.
        """
        prefix = self._check_prefix(prefix)
        images = torch.as_tensor(np.asarray(images), dtype=_F64)
        instructions = torch.as_tensor(np.asarray(instructions), dtype=torch.long)
        target_in = torch.as_tensor(np.asarray(target_in), dtype=torch.long).reshape(
            images.shape[0], -1
        )
        if instructions.ndim != 2 or instructions.shape[1] == 0:
            raise InputError("instructions must be a non-empty (B, I) batch")
        x = self._embed(prefix, images, instructions, target_in)
        h = self._decode(x)
        p_len = prefix.shape[-2]
        start = p_len + self.n_image_tokens + instructions.shape[1] - 1
        rows = h[:, start:, :]
        if prefix.ndim == 2:
            out_table = torch.cat([self.tok_emb, prefix], dim=0)
            return rows @ out_table.T
        b = images.shape[0]
        out_table = torch.cat([self.tok_emb.unsqueeze(0).expand(b, -1, -1), prefix], dim=1)
        return torch.einsum("bjd,bvd->bjv", rows, out_table)

    def forward_logits(self, prefix, image, instruction, target_prefix=()) -> torch.Tensor:
        """Single-sample logits, shape (len(target_prefix)+1, V + P)."""
        image = torch.as_tensor(np.asarray(image), dtype=_F64).reshape(1, -1)
        instruction = torch.as_tensor(list(instruction), dtype=torch.long).reshape(1, -1)
        target_in = torch.as_tensor(list(target_prefix), dtype=torch.long).reshape(1, -1)
        return self.forward_logits_batch(prefix, image, instruction, target_in)[0]

    # ------------------------------------------------------------------
    # generation
    # ------------------------------------------------------------------

    @torch.no_grad()
    def generate(self, prefix, image, instruction, max_len: int = 4) -> list[int]:
        """Greedy decoding until the end-of-answer token or max_len."""
        out = self.generate_batch(prefix, [np.asarray(image)], [list(instruction)], max_len)
        return out[0]

    @torch.no_grad()
    def generate_batch(
        self,
        prefix,
        images,
        instructions,
        max_len: int = 4,
        ignore_eos: bool = False,
    ) -> list[list[int]]:
        if max_len < 1:
            raise InputError(f"max_len must be >= 1, got {max_len}")
        images = torch.as_tensor(np.asarray(images), dtype=_F64)
        instructions = torch.as_tensor(np.asarray(instructions), dtype=torch.long)
        b = images.shape[0]
        unk = default_vocab().unk_id
        raw = torch.zeros(b, 0, dtype=torch.long)      # emitted ids, may hit prompt columns
        fed = torch.zeros(b, 0, dtype=torch.long)      # embeddable ids fed back in
        done = torch.zeros(b, dtype=torch.bool)
        for _ in range(max_len):
            logits = self.forward_logits_batch(prefix, images, instructions, fed)
            nxt = logits[:, -1, :].argmax(dim=-1)
            # prompt-column ids cannot be embedded; they also end the answer
            out_of_vocab = nxt >= self.vocab_size
            if not ignore_eos:
                done = done | (nxt == self.eos_token_id) | out_of_vocab
            raw = torch.cat([raw, nxt.unsqueeze(1)], dim=1)
            fed = torch.cat([fed, torch.where(out_of_vocab, unk, nxt).unsqueeze(1)], dim=1)
            if bool(done.all()):
                break
        results = []
        for row in range(b):
            seq = raw[row].tolist()
            if not ignore_eos and self.eos_token_id in seq:
                seq = seq[: seq.index(self.eos_token_id)]
            results.append(seq)
        return results

    # ------------------------------------------------------------------
    # checkpointing
    # ------------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "kind": "backbone",
                "dims": self.dims(),
                "init_seed": self.init_seed,
                "frozen": self.frozen,
                "state": self.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "BackboneModel":
        try:
            blob = torch.load(path, weights_only=False)
        except Exception as e:
            raise IntegrityError(f"cannot read backbone checkpoint {path}: {e}") from e
        for key in ("kind", "dims", "state", "frozen"):
            if key not in blob:
                raise IntegrityError(f"backbone checkpoint missing field {key!r}")
        if blob["kind"] != "backbone":
            raise IntegrityError(f"not a backbone checkpoint: kind={blob['kind']!r}")
        model = cls(**blob["dims"], init_seed=blob.get("init_seed", 0))
        model.load_state_dict(blob["state"])
        if blob["frozen"]:
            model.freeze()
        return model

    def param_bytes(self) -> bytes:
        """Canonical byte serialization of all parameters, for freeze checks."""
        return b"".join(
            p.detach().cpu().numpy().tobytes() for _, p in sorted(self.named_parameters())
        )


# --------------------------------------------------------------------------
# batching helpers
# --------------------------------------------------------------------------

def prepare_batch(samples: list[Sample]):
    """Stack shape-uniform samples into (images, instructions, targets)."""
    if not samples:
        raise InputError("empty batch")
    i_len = len(samples[0].instruction)
    t_len = len(samples[0].target)
    if any(len(s.instruction) != i_len or len(s.target) != t_len for s in samples):
        raise InputError("batch mixes instruction/target lengths")
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=_F64)
    instructions = torch.as_tensor([list(s.instruction) for s in samples], dtype=torch.long)
    targets = torch.as_tensor([list(s.target) for s in samples], dtype=torch.long)
    return images, instructions, targets


def batch_indices(samples: list[Sample], batch_size: int, gen: torch.Generator) -> list[list[int]]:
    """Shuffled batches of indices, grouped so each batch is shape-uniform."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault((len(s.instruction), len(s.target)), []).append(i)
    batches = []
    for key in sorted(groups):
        idx = groups[key]
        perm = torch.randperm(len(idx), generator=gen).tolist()
        shuffled = [idx[p] for p in perm]
        batches.extend(shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size))
    order = torch.randperm(len(batches), generator=gen).tolist()
    return [batches[i] for i in order]


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

def _token_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-sample summed negative log-likelihood over answer positions."""
    logp = F.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -picked.sum(dim=-1)


def _pretrain_prefix_ids(batch: list[Sample], vocab_size: int, gen: torch.Generator) -> torch.Tensor | None:
    """Token-id matrix for the batch's pretraining prefixes, or None for empty.

    Samples carrying prefix_cues get those marker ids planted at random
    slots; every other slot holds a random junk token. Batches without any
    marked sample still see junk-only prefixes half the time, so prefix
    content the model has no use for is a familiar sight.
    """
    max_cues = max(len(s.prefix_cues) for s in batch)
    if max_cues > 0:
        p_len = max(3, max_cues) + int(torch.randint(0, 6, (1,), generator=gen))
    elif int(torch.randint(0, 2, (1,), generator=gen)) == 0:
        return None
    else:
        p_len = 2 + int(torch.randint(0, 5, (1,), generator=gen))
    ids = torch.randint(0, vocab_size, (len(batch), p_len), generator=gen)
    for b, s in enumerate(batch):
        if s.prefix_cues:
            slots = torch.randperm(p_len, generator=gen)[: len(s.prefix_cues)]
            ids[b, slots] = torch.as_tensor(s.prefix_cues, dtype=torch.long)
    return ids


def pretrain_backbone(
    mixture: list[TaskDataset],
    config: RunConfig,
    progress: bool = False,
) -> BackboneModel:
    """Train the decoder on a generic mixture, then freeze it.

    The mixture plays the role of large-scale pretraining: after this call
    the model is immutable and all continual-stage adaptation happens in
    prompt space. Binding markers are read either from the instruction or
    from planted prefix rows, per sample.
    """
    samples = [s for ds in mixture for s in ds.train]
    if not samples:
        raise ConfigError("empty pretraining mixture")
    model = BackboneModel.from_config(config)
    empty_prefix = torch.zeros(0, config.d_m, dtype=_F64)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=config.pretrain_lr,
        weight_decay=config.pretrain_weight_decay,
    )
    gen = torch.Generator().manual_seed(config.seed + 7)
    t0 = time.perf_counter()
    for epoch in range(config.pretrain_epochs):
        total = 0.0
        for batch_idx in batch_indices(samples, config.pretrain_batch_size, gen):
            batch = [samples[i] for i in batch_idx]
            images, instructions, targets = prepare_batch(batch)
            prefix_ids = _pretrain_prefix_ids(batch, config.vocab_size, gen)
            prefix = empty_prefix if prefix_ids is None else model.tok_emb[prefix_ids]
            logits = model.forward_logits_batch(prefix, images, instructions, targets[:, :-1])
            loss = _token_nll(logits, targets).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch)
        if progress:
            print(
                f"pretrain epoch {epoch + 1}/{config.pretrain_epochs}: "
                f"loss {total / len(samples):.4f} ({time.perf_counter() - t0:.1f}s)"
            )
    return model.freeze()


@torch.no_grad()
def heldout_accuracy(model: BackboneModel, datasets: list[TaskDataset], max_len: int = 4) -> float:
    """Exact-match accuracy on eval splits with an empty prefix."""
    vocab = default_vocab()
    empty_prefix = torch.zeros(0, model.d_m, dtype=_F64)
    correct = 0
    total = 0
    for ds in datasets:
        groups: dict[tuple[int, ...], list[Sample]] = {}
        for s in ds.eval:
            groups.setdefault(s.instruction, []).append(s)
        for instr, group in sorted(groups.items()):
            outs = model.generate_batch(
                empty_prefix,
                [s.image for s in group],
                [list(instr)] * len(group),
                max_len,
            )
            for s, out in zip(group, outs):
                correct += int(vocab.decode(out) == s.answer)
            total += len(group)
    return correct / max(total, 1)
