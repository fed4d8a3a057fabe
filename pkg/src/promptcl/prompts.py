"""Per-task prompt pools, the shared prototype head, and the freeze ledger.

One prompt set per task, trainable only while its task is the current
stage. A single projection head maps any prompt set to a unit vector in the
guidance space; each task's vector is snapshotted when the task is
finalized and never recomputed, so later head updates cannot disturb the
routing of already-trained tasks.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

from .errors import IntegrityError, OrderingError, ShapeError, StateError
from .guidance import l2_normalize

_F64 = torch.float64


class PromptSet:
    """M learnable embedding rows for one task."""

    def __init__(self, task_id: int, embeddings: torch.Tensor, frozen: bool = False):
        self.task_id = task_id
        self.embeddings = nn.Parameter(embeddings.to(_F64), requires_grad=not frozen)
        self.frozen = frozen

    @property
    def M(self) -> int:
        return self.embeddings.shape[0]

    def freeze(self) -> None:
        self.embeddings.requires_grad_(False)
        self.frozen = True

    def bytes(self) -> bytes:
        return self.embeddings.detach().numpy().tobytes()


class PrototypeHead(nn.Module):
    """Mean-pool the prompt rows, then a two-layer map into guidance space.

    The pooled vector is L2-normalized before the MLP and the weights use
    fan-in scaling: prompt embeddings start near zero, and without the
    normalization the final unit-normalization has a 1/norm gradient blowup
    that slams the head into an input-independent constant on the first
    optimizer step.
    """

    def __init__(self, d_m: int, d_g: int, init_seed: int = 0):
        super().__init__()
        self.d_m = d_m
        self.d_g = d_g
        self.fc1 = nn.Linear(d_m, d_g, dtype=_F64)
        self.fc2 = nn.Linear(d_g, d_g, dtype=_F64)
        gen = torch.Generator().manual_seed(init_seed)
        with torch.no_grad():
            self.fc1.weight.normal_(0.0, 1.0 / d_m ** 0.5, generator=gen)
            self.fc2.weight.normal_(0.0, 1.0 / d_g ** 0.5, generator=gen)
            self.fc1.bias.zero_()
            self.fc2.bias.zero_()

    def forward(self, prompt_embeddings: torch.Tensor) -> torch.Tensor:
        if prompt_embeddings.ndim != 2 or prompt_embeddings.shape[1] != self.d_m:
            raise ShapeError(
                f"expected prompts of shape (M, {self.d_m}), got {tuple(prompt_embeddings.shape)}"
            )
        pooled = l2_normalize(prompt_embeddings.mean(dim=0))
        h = self.fc2(torch.tanh(self.fc1(pooled)))
        return l2_normalize(h)


def project_prototype(head: PrototypeHead, prompts: PromptSet | torch.Tensor) -> torch.Tensor:
    """Unit-norm prototype vector of one prompt set."""
    emb = prompts.embeddings if isinstance(prompts, PromptSet) else prompts
    return head(emb)


class PromptStore:
    """Ordered prompt sets plus the head and the per-task prototype cache."""

    def __init__(self, M: int, d_m: int, d_g: int, head_seed: int = 0):
        self.M = M
        self.d_m = d_m
        self.d_g = d_g
        self.prompt_sets: list[PromptSet] = []
        self.head = PrototypeHead(d_m, d_g, init_seed=head_seed)
        self.cached_prototypes: list[torch.Tensor] = []

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.prompt_sets)

    @property
    def task_ids(self) -> list[int]:
        return [ps.task_id for ps in self.prompt_sets]

    @property
    def current(self) -> PromptSet | None:
        """The single trainable set, or None if everything is frozen."""
        open_sets = [ps for ps in self.prompt_sets if not ps.frozen]
        if len(open_sets) > 1:
            raise StateError(f"multiple trainable prompt sets: {[p.task_id for p in open_sets]}")
        return open_sets[0] if open_sets else None

    def add_task(self, task_id: int, init_seed: int = 0) -> PromptSet:
        expected = len(self.prompt_sets) + 1
        if task_id != expected:
            raise OrderingError(f"expected task id {expected}, got {task_id}")
        if self.current is not None:
            raise StateError(f"task {self.current.task_id} is still trainable; finalize it first")
        gen = torch.Generator().manual_seed(init_seed)
        emb = torch.randn(self.M, self.d_m, generator=gen, dtype=_F64) * 0.02
        ps = PromptSet(task_id, emb, frozen=False)
        self.prompt_sets.append(ps)
        return ps

    def finalize_task(self, task_id: int) -> torch.Tensor:
        ps = self._get(task_id)
        if ps.frozen:
            raise StateError(f"task {task_id} is already frozen")
        if task_id != len(self.prompt_sets):
            raise StateError(f"task {task_id} is not the current task")
        ps.freeze()
        proto = project_prototype(self.head, ps).detach().clone()
        proto.requires_grad_(False)
        self.cached_prototypes.append(proto)
        return proto

    def _get(self, task_id: int) -> PromptSet:
        for ps in self.prompt_sets:
            if ps.task_id == task_id:
                return ps
        raise KeyError(f"no prompt set for task {task_id}")

    def embeddings_for(self, task_id: int) -> torch.Tensor:
        """Embeddings to splice into a prefix: live for the trainable set."""
        ps = self._get(task_id)
        if ps.frozen:
            return ps.embeddings.detach()
        return ps.embeddings

    def prototype_for(self, task_id: int) -> torch.Tensor:
        if task_id < 1 or task_id > len(self.cached_prototypes):
            raise KeyError(f"no cached prototype for task {task_id}")
        return self.cached_prototypes[task_id - 1]

    def frozen_bytes(self) -> bytes:
        """Concatenated bytes of all frozen prompt sets, in task order."""
        return b"".join(ps.bytes() for ps in self.prompt_sets if ps.frozen)

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        blob = {
            "kind": "prompt_store",
            "meta": {
                "M": self.M,
                "d_m": self.d_m,
                "d_g": self.d_g,
                "task_ids": self.task_ids,
                "frozen": [ps.frozen for ps in self.prompt_sets],
            },
            "prompt_sets": {ps.task_id: ps.embeddings.detach().clone() for ps in self.prompt_sets},
            "head": self.head.state_dict(),
            "prototypes": [p.clone() for p in self.cached_prototypes],
        }
        torch.save(blob, path)
        manifest = [
            f"M={self.M} d_m={self.d_m} d_g={self.d_g}",
            f"tasks={self.task_ids}",
            f"frozen={[ps.frozen for ps in self.prompt_sets]}",
            f"cached_prototypes={len(self.cached_prototypes)}",
        ]
        path.with_suffix(path.suffix + ".manifest.txt").write_text("\n".join(manifest) + "\n")

    @classmethod
    def load(cls, path: str | Path, expect: dict | None = None) -> "PromptStore":
        try:
            blob = torch.load(path, weights_only=False)
        except Exception as e:
            raise IntegrityError(f"cannot read prompt store {path}: {e}") from e
        for key in ("kind", "meta", "prompt_sets", "head", "prototypes"):
            if key not in blob:
                raise IntegrityError(f"prompt store missing field {key!r}")
        if blob["kind"] != "prompt_store":
            raise IntegrityError(f"not a prompt store: kind={blob['kind']!r}")
        meta = blob["meta"]
        if expect:
            for name in ("M", "d_m", "d_g"):
                if name in expect and expect[name] != meta[name]:
                    raise ShapeError(
                        f"store has {name}={meta[name]}, run expects {name}={expect[name]}"
                    )
        store = cls(meta["M"], meta["d_m"], meta["d_g"])
        for task_id, frozen in zip(meta["task_ids"], meta["frozen"]):
            emb = blob["prompt_sets"][task_id]
            if tuple(emb.shape) != (meta["M"], meta["d_m"]):
                raise ShapeError(
                    f"task {task_id} embeddings have shape {tuple(emb.shape)}, "
                    f"expected ({meta['M']}, {meta['d_m']})"
                )
            store.prompt_sets.append(PromptSet(task_id, emb, frozen=frozen))
        store.head.load_state_dict(blob["head"])
        store.cached_prototypes = [p.detach().clone() for p in blob["prototypes"]]
        for p in store.cached_prototypes:
            p.requires_grad_(False)
        return store
