"""Synthetic multimodal task suite for desk-scale continual tuning runs.

Each task couples an image-feature cluster (task identity for the guidance
encoders) with a family-specific question and an answer-binding variant: a
fixed permutation of the family's answer vocabulary. Backbone pretraining
sees every family and binding with an explicit ``<bindN>`` marker token in
the instruction; continual-stage tasks drop the marker, so the binding is
exactly the piece of task knowledge that prompt sets have to supply.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigError, InputError, SchemaError
from .vocab import (
    COLOR_WORDS,
    FAMILIES,
    N_BINDINGS,
    NUMBER_WORDS,
    Vocabulary,
    default_vocab,
)

IMG_DIM = 24
CLUSTER_BLOCK = slice(0, 8)       # task-identity component
ONEHOT_BLOCK = slice(8, 14)       # color index / object count
CMP_DIFF, CMP_SUM = 14, 15
REL_SAME, REL_A, REL_B = 16, 17, 18
PARITY_BIT = 19
CENTER_NORM = 3.0
ATTR_GAIN = 2.0
DEFAULT_STD = 0.5

# Templates within a family share almost no content words: a task pair that
# reuses a family must stay separable by text guidance alone.
TEMPLATES: dict[str, tuple[str, ...]] = {
    "attribute_naming": (
        "what color is the object",
        "name the shade of this item shown",
    ),
    "counting": (
        "how many objects are there",
        "count the items in this scene",
        "state the number of things that appear",
    ),
    "comparison": (
        "which side is larger",
        "name the spot holding the greater value",
    ),
    "relation": (
        "are the shapes matching",
        "do these two objects share one form",
    ),
    "parity": (
        "is the count even or odd",
        "state the parity of all items present",
    ),
}

_BINARY_ANSWERS = {
    "comparison": ("left", "right"),
    "relation": ("yes", "no"),
    "parity": ("even", "odd"),
}

_DISTRACTOR_P = (0.4, 0.4, 0.2)


def base_answer(family: str, latents: dict) -> str:
    """Answer under the identity binding, as a pure function of latents."""
    if family == "attribute_naming":
        return COLOR_WORDS[latents["color"]]
    if family == "counting":
        return NUMBER_WORDS[latents["count"] - 1]
    if family == "comparison":
        return "left" if latents["left"] > latents["right"] else "right"
    if family == "relation":
        return "yes" if latents["shape_a"] == latents["shape_b"] else "no"
    if family == "parity":
        return "even" if latents["count"] % 2 == 0 else "odd"
    raise InputError(f"unknown family {family!r}")


def bound_answer(family: str, binding: int, latents: dict) -> str:
    """Apply the task's answer-binding permutation to the base answer.

    Bindings carry two behaviors per family, keyed by parity: even bindings
    are the identity, odd bindings rotate six-way answer lists halfway
    around (every answer changes) or swap binary answer pairs.
    """
    if not 0 <= binding < N_BINDINGS:
        raise InputError(f"binding must be in [0, {N_BINDINGS}), got {binding}")
    ans = base_answer(family, latents)
    if binding % 2 == 0:
        return ans
    if family == "attribute_naming":
        return COLOR_WORDS[(COLOR_WORDS.index(ans) + 3) % len(COLOR_WORDS)]
    if family == "counting":
        return NUMBER_WORDS[(NUMBER_WORDS.index(ans) + 3) % len(NUMBER_WORDS)]
    pair = _BINARY_ANSWERS[family]
    return pair[1 - pair.index(ans)]


def sample_latents(family: str, rng: np.random.Generator) -> dict:
    if family == "attribute_naming":
        return {"color": int(rng.integers(0, 6))}
    if family in ("counting", "parity"):
        return {"count": int(rng.integers(1, 7))}
    if family == "comparison":
        left = int(rng.integers(1, 7))
        right = int(rng.integers(1, 6))
        if right >= left:
            right += 1
        return {"left": left, "right": right}
    if family == "relation":
        a = int(rng.integers(0, 4))
        if rng.random() < 0.5:
            b = a
        else:
            b = int(rng.integers(0, 3))
            if b >= a:
                b += 1
        return {"shape_a": a, "shape_b": b}
    raise InputError(f"unknown family {family!r}")


def image_from_latents(
    family: str,
    latents: dict,
    center: np.ndarray,
    std: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Render latents into a d_img feature vector around the task's cluster."""
    x = center.astype(np.float64).copy()
    if family == "attribute_naming":
        x[8 + latents["color"]] += ATTR_GAIN
    elif family in ("counting", "parity"):
        x[8 + latents["count"] - 1] += ATTR_GAIN
        if family == "parity":
            x[PARITY_BIT] += 2.0 if latents["count"] % 2 == 0 else -2.0
    elif family == "comparison":
        x[CMP_DIFF] += 2.0 * (1.0 if latents["left"] > latents["right"] else -1.0)
        x[CMP_SUM] += 0.3 * (latents["left"] + latents["right"] - 7)
    elif family == "relation":
        x[REL_SAME] += 2.0 if latents["shape_a"] == latents["shape_b"] else -2.0
        x[REL_A] += 0.8 * (latents["shape_a"] - 1.5)
        x[REL_B] += 0.8 * (latents["shape_b"] - 1.5)
    else:
        raise InputError(f"unknown family {family!r}")
    return x + rng.normal(0.0, std, size=IMG_DIM)


@dataclass(frozen=True)
class Sample:
    """One instruction-tuning record.

    `instruction` and `target` are token id tuples; `target` ends with the
    end-of-answer token. `answer` keeps the raw string for exact-match
    scoring and serialization. Pretraining samples may carry their binding
    markers in `prefix_cues` instead of the instruction: those token
    embeddings are planted into the prompt prefix during backbone
    pretraining so the frozen model learns to read markers from prefix
    content. Continual-stage samples never carry markers anywhere.
    """

    task_id: int
    image: np.ndarray
    instruction: tuple[int, ...]
    target: tuple[int, ...]
    latents: dict
    answer: str
    prefix_cues: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.instruction) == 0 or len(self.target) == 0:
            raise InputError("instruction and target must be non-empty")
        vocab_size = default_vocab().size
        ids = (*self.instruction, *self.target, *self.prefix_cues)
        if any(t >= vocab_size or t < 0 for t in ids):
            raise InputError("token id outside base vocabulary")


@dataclass
class TaskSpec:
    task_id: int
    family: str
    binding: int
    template_id: int
    cluster_center: np.ndarray
    cluster_std: float
    n_train: int
    n_eval: int
    seed: int = 0

    @property
    def instruction_text(self) -> str:
        return TEMPLATES[self.family][self.template_id]

    @property
    def name(self) -> str:
        return f"task{self.task_id}-{self.family}-b{self.binding}"

    def answer_fn(self, latents: dict) -> str:
        return bound_answer(self.family, self.binding, latents)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "family": self.family,
            "binding": self.binding,
            "template_id": self.template_id,
            "cluster_center": [float(v) for v in self.cluster_center],
            "cluster_std": self.cluster_std,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["cluster_center"] = np.asarray(d["cluster_center"], dtype=np.float64)
        return cls(**d)


@dataclass
class TaskDataset:
    spec: TaskSpec
    train: list[Sample]
    eval: list[Sample]


def _make_sample(
    spec: TaskSpec,
    rng: np.random.Generator,
    vocab: Vocabulary,
    cue_channel: str | None = None,
    max_distractors: int = 2,
) -> Sample:
    """One record, optionally carrying binding markers.

    cue_channel None: no markers (the continual-stage distribution).
    "instruction": the family's marker lands at a random instruction
    position among 0..max_distractors other-family markers, so it must be
    resolved by family match rather than by position. "prefix": the same
    marker set is stashed in prefix_cues for prefix planting instead.
    """
    latents = sample_latents(spec.family, rng)
    image = image_from_latents(spec.family, latents, spec.cluster_center, spec.cluster_std, rng)
    instr = vocab.encode(spec.instruction_text)
    prefix_cues: tuple[int, ...] = ()
    if cue_channel is not None:
        markers = [vocab.binding_token_id(spec.family, spec.binding)]
        others = [f for f in FAMILIES if f != spec.family]
        # skewed so plain single-marker samples stay common enough to learn from
        n_distract = int(rng.choice(max_distractors + 1, p=_DISTRACTOR_P[: max_distractors + 1]))
        for fi in rng.choice(len(others), size=n_distract, replace=False):
            markers.append(vocab.binding_token_id(others[fi], int(rng.integers(0, N_BINDINGS))))
        if cue_channel == "prefix":
            prefix_cues = tuple(markers)
        else:
            for marker in markers:
                pos = int(rng.integers(0, len(instr) + 1))
                instr.insert(pos, marker)
    answer = spec.answer_fn(latents)
    target = (*vocab.encode(answer), vocab.eos_id)
    return Sample(
        task_id=spec.task_id,
        image=image,
        instruction=tuple(instr),
        target=target,
        latents=latents,
        answer=answer,
        prefix_cues=prefix_cues,
    )


def _fill_dataset(spec: TaskSpec, suite_seed: int) -> TaskDataset:
    vocab = default_vocab()
    splits = []
    for split_salt, n in ((1, spec.n_train), (2, spec.n_eval)):
        rng = np.random.default_rng([suite_seed, spec.task_id, split_salt])
        splits.append([_make_sample(spec, rng, vocab) for _ in range(n)])
    return TaskDataset(spec=spec, train=splits[0], eval=splits[1])


def _draw_centers(
    n: int,
    std: float,
    rng: np.random.Generator,
    max_tries: int = 200,
    with_antipodes: bool = False,
) -> list[np.ndarray]:
    """Cluster centers pairwise separated by at least 4x the sample std.

    with_antipodes additionally keeps every center that far from every
    earlier center's negation, so -center can safely serve as another
    task's cluster.
    """
    min_dist = 4.0 * std
    centers: list[np.ndarray] = []
    for _ in range(n):
        for attempt in range(max_tries):
            raw = rng.normal(size=CLUSTER_BLOCK.stop - CLUSTER_BLOCK.start)
            raw *= CENTER_NORM / np.linalg.norm(raw)
            c = np.zeros(IMG_DIM)
            c[CLUSTER_BLOCK] = raw
            rivals = list(centers)
            if with_antipodes:
                rivals += [-prev for prev in centers]
            if all(np.linalg.norm(c - prev) >= min_dist for prev in rivals):
                centers.append(c)
                break
        else:
            raise CapacityError(f"could not place {n} separated cluster centers")
    return centers


# Default task sequence. Families recur with the opposite binding parity
# (an answer-behavior conflict for anything that shares storage across
# tasks) and the recurrence reuses the earlier task's cluster axis with the
# opposite sign, so guidance scores push the conflicting partner to the
# bottom of the ranking. `partner` points at the earlier same-family task.
_COMBO_PATTERN: list[dict] = [
    {"family": "attribute_naming", "binding": 1, "template_id": 0, "partner": None},
    {"family": "counting", "binding": 1, "template_id": 0, "partner": None},
    {"family": "comparison", "binding": 1, "template_id": 0, "partner": None},
    {"family": "attribute_naming", "binding": 0, "template_id": 1, "partner": 0},
    {"family": "counting", "binding": 0, "template_id": 1, "partner": 1},
    {"family": "relation", "binding": 1, "template_id": 0, "partner": None},
    {"family": "parity", "binding": 1, "template_id": 0, "partner": None},
    {"family": "relation", "binding": 0, "template_id": 1, "partner": 5},
    {"family": "comparison", "binding": 0, "template_id": 1, "partner": 2},
    {"family": "parity", "binding": 0, "template_id": 1, "partner": 6},
]

SUITE_CAPACITY = len(_COMBO_PATTERN)


def generate_suite(
    T: int,
    seed: int,
    n_train: int = 500,
    n_eval: int = 200,
    cluster_std: float = DEFAULT_STD,
) -> list[TaskDataset]:
    """Generate T tasks with separated image clusters and distinct questions.

    Recurring-family tasks sit on the antipodal axis of their earlier
    partner's cluster: the two are maximally separated in raw feature space
    (distance 2x the center norm) and, because the image encoder is odd up
    to normalization, their guidance embeddings are close to opposite.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if T > SUITE_CAPACITY:
        raise CapacityError(
            f"T={T} exceeds the {SUITE_CAPACITY} distinct family/binding/template combinations"
        )
    rng = np.random.default_rng([seed, 0])
    n_fresh = sum(1 for c in _COMBO_PATTERN[:T] if c["partner"] is None)
    fresh_centers = _draw_centers(n_fresh, cluster_std, rng, with_antipodes=True)
    centers: list[np.ndarray] = []
    fresh_iter = iter(fresh_centers)
    for combo in _COMBO_PATTERN[:T]:
        if combo["partner"] is None:
            centers.append(next(fresh_iter))
        else:
            centers.append(-centers[combo["partner"]])
    suite = []
    for i, combo in enumerate(_COMBO_PATTERN[:T]):
        spec = TaskSpec(
            task_id=i + 1,
            family=combo["family"],
            binding=combo["binding"],
            template_id=combo["template_id"],
            cluster_center=centers[i],
            cluster_std=cluster_std,
            n_train=n_train,
            n_eval=n_eval,
            seed=seed,
        )
        suite.append(_fill_dataset(spec, seed))
    return suite


def generate_confusable_suite(
    seed: int,
    n_train: int = 500,
    n_eval: int = 200,
    cluster_std: float = DEFAULT_STD,
) -> list[TaskDataset]:
    """Four counting tasks that only joint image+text guidance can separate.

    Tasks 1 and 2 share a cluster center (identical image distribution) but
    ask differently-worded questions; tasks 3 and 4 share a question but sit
    on different clusters. Every pair carries a different answer binding, so
    routing mistakes turn directly into wrong answers.
    """
    rng = np.random.default_rng([seed, 1])
    centers = _draw_centers(3, cluster_std, rng)
    # confused pairs must differ in binding parity, so mistakes cost accuracy
    layout = [
        (centers[0], 0, 1),   # (center, template_id, binding)
        (centers[0], 1, 2),
        (centers[1], 2, 3),
        (centers[2], 2, 0),
    ]
    suite = []
    for i, (center, template_id, binding) in enumerate(layout):
        spec = TaskSpec(
            task_id=i + 1,
            family="counting",
            binding=binding,
            template_id=template_id,
            cluster_center=center,
            cluster_std=cluster_std,
            n_train=n_train,
            n_eval=n_eval,
            seed=seed,
        )
        suite.append(_fill_dataset(spec, seed))
    return suite


def generate_pretrain_mixture(
    n_samples: int,
    seed: int,
    eval_fraction: float = 0.1,
    prefix_cue_fraction: float = 0.7,
) -> list[TaskDataset]:
    """Generic mixture for backbone pretraining, one dataset per family.

    Every training sample carries its family's binding marker plus 0-2
    other-family distractor markers; most stash the markers in prefix_cues
    (planted into the prompt prefix during pretraining), the rest put them
    at random instruction positions. Images center on broad per-sample
    cluster draws, so the backbone never sees the marker-free continual
    distribution. Eval samples always use the instruction channel so the
    held-out check runs with an empty prefix.
    """
    if n_samples < len(FAMILIES):
        raise ConfigError(f"need at least {len(FAMILIES)} pretraining samples, got {n_samples}")
    vocab = default_vocab()
    per_family = n_samples // len(FAMILIES)
    n_eval = max(1, int(per_family * eval_fraction))
    datasets = []
    for fi, family in enumerate(FAMILIES):
        rng = np.random.default_rng([seed, 100 + fi])
        samples = []
        for i in range(per_family + n_eval):
            binding = int(rng.integers(0, N_BINDINGS))
            template_id = int(rng.integers(0, len(TEMPLATES[family])))
            center = np.zeros(IMG_DIM)
            center[CLUSTER_BLOCK] = rng.normal(0.0, 1.2, size=8)
            spec = TaskSpec(
                task_id=fi + 1,
                family=family,
                binding=binding,
                template_id=template_id,
                cluster_center=center,
                cluster_std=DEFAULT_STD,
                n_train=per_family,
                n_eval=n_eval,
                seed=seed,
            )
            in_train = i < per_family
            channel = "prefix" if in_train and rng.random() < prefix_cue_fraction else "instruction"
            samples.append(_make_sample(spec, rng, vocab, cue_channel=channel))
        spec = TaskSpec(
            task_id=fi + 1,
            family=family,
            binding=0,
            template_id=0,
            cluster_center=np.zeros(IMG_DIM),
            cluster_std=DEFAULT_STD,
            n_train=per_family,
            n_eval=n_eval,
            seed=seed,
        )
        datasets.append(TaskDataset(spec=spec, train=samples[:per_family], eval=samples[per_family:]))
    return datasets


def joint_mixture(suite: list[TaskDataset], seed: int = 0) -> TaskDataset:
    """Shuffled union of all train splits, for the multi-task upper bound."""
    if not suite:
        raise InputError("cannot mix an empty suite")
    pooled = [s for ds in suite for s in ds.train]
    rng = np.random.default_rng([seed, 999])
    order = rng.permutation(len(pooled))
    spec = TaskSpec(
        task_id=0,
        family=suite[0].spec.family,
        binding=0,
        template_id=0,
        cluster_center=np.zeros(IMG_DIM),
        cluster_std=suite[0].spec.cluster_std,
        n_train=len(pooled),
        n_eval=0,
        seed=seed,
    )
    return TaskDataset(spec=spec, train=[pooled[i] for i in order], eval=[])


# --------------------------------------------------------------------------
# suite files: one JSONL of records plus a JSON manifest
# --------------------------------------------------------------------------

_REQUIRED_FIELDS = ("task_id", "latents", "image", "instruction", "answer", "split")


def _suite_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix != ".jsonl":
        p = p.with_suffix(".jsonl")
    return p, p.with_suffix("").with_suffix(".manifest.json")


def save_suite(suite: list[TaskDataset], path: str | Path) -> Path:
    records_path, manifest_path = _suite_paths(path)
    vocab = default_vocab()
    with records_path.open("w") as fh:
        for ds in suite:
            for split, samples in (("train", ds.train), ("eval", ds.eval)):
                for s in samples:
                    rec = {
                        "task_id": s.task_id,
                        "latents": s.latents,
                        "image": [float(v) for v in s.image],
                        "instruction": vocab.decode(s.instruction),
                        "answer": s.answer,
                        "split": split,
                    }
                    fh.write(json.dumps(rec) + "\n")
    manifest = {
        "T": len(suite),
        "seeds": sorted({ds.spec.seed for ds in suite}),
        "sizes": {"n_train": [len(ds.train) for ds in suite], "n_eval": [len(ds.eval) for ds in suite]},
        "families": [ds.spec.family for ds in suite],
        "task_names": [ds.spec.name for ds in suite],
        "specs": [ds.spec.to_dict() for ds in suite],
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return records_path


def load_suite(path: str | Path) -> list[TaskDataset]:
    records_path, manifest_path = _suite_paths(path)
    if not records_path.exists():
        raise InputError(f"suite file not found: {records_path}")
    if not manifest_path.exists():
        raise InputError(f"suite manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    specs = {d["task_id"]: TaskSpec.from_dict(d) for d in manifest["specs"]}
    datasets = {tid: TaskDataset(spec=sp, train=[], eval=[]) for tid, sp in specs.items()}
    vocab = default_vocab()
    with records_path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"line {lineno}: invalid JSON record ({e})") from e
            for fieldname in _REQUIRED_FIELDS:
                if fieldname not in rec:
                    raise SchemaError(f"line {lineno}: missing field {fieldname!r}")
            extra = set(rec) - set(_REQUIRED_FIELDS)
            if extra:
                warnings.warn(f"line {lineno}: ignoring unknown fields {sorted(extra)}")
            if rec["task_id"] not in datasets:
                raise SchemaError(f"line {lineno}: task_id {rec['task_id']} not in manifest")
            if rec["split"] not in ("train", "eval"):
                raise SchemaError(f"line {lineno}: bad split {rec['split']!r}")
            sample = Sample(
                task_id=int(rec["task_id"]),
                image=np.asarray(rec["image"], dtype=np.float64),
                instruction=tuple(vocab.encode(rec["instruction"])),
                target=(*vocab.encode(rec["answer"]), vocab.eos_id),
                latents={k: int(v) for k, v in rec["latents"].items()},
                answer=rec["answer"],
            )
            getattr(datasets[rec["task_id"]], rec["split"]).append(sample)
    return [datasets[tid] for tid in sorted(datasets)]
