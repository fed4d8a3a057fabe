"""Fixed word-level vocabulary for the toy instruction-tuning world.

The token table is static: a handful of control tokens, the answer-binding
marker tokens used during backbone pretraining, and every word appearing in
instruction templates or answers. Ids are stable across runs by construction.
"""

from __future__ import annotations

from .errors import InputError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"

FAMILIES = ("attribute_naming", "counting", "comparison", "relation", "parity")

# Markers that announce a task's answer-binding variant during backbone
# pretraining, scoped per family: a marker only applies when its family
# matches the question, so markers of other families act as distractors.
# Continual-stage instructions never contain them.
N_BINDINGS = 4
BINDING_TOKENS = {
    fam: tuple(f"<{fam}:b{i}>" for i in range(N_BINDINGS)) for fam in FAMILIES
}

COLOR_WORDS = ("red", "green", "blue", "yellow", "purple", "orange")
NUMBER_WORDS = ("one", "two", "three", "four", "five", "six")

_TEMPLATE_WORDS = (
    "what", "color", "is", "the", "object", "name", "shade", "of", "this",
    "item", "shown", "how", "many", "objects", "are", "there", "count",
    "items", "in", "scene", "state", "number", "things", "that", "appear",
    "which", "side", "larger", "spot", "holding", "greater", "value",
    "shapes", "matching", "do", "these", "two", "share", "one", "form",
    "even", "or", "odd", "parity", "all", "present",
    "left", "right", "yes", "no",
)


class Vocabulary:
    """Static word<->id mapping padded out to a fixed base size."""

    def __init__(self, size: int = 256):
        tokens = [PAD, BOS, EOS, UNK]
        for fam in FAMILIES:
            tokens.extend(BINDING_TOKENS[fam])
        for word in COLOR_WORDS + NUMBER_WORDS + _TEMPLATE_WORDS:
            if word not in tokens:
                tokens.append(word)
        if len(tokens) > size:
            raise InputError(f"vocabulary needs {len(tokens)} slots, got size {size}")
        self.size = size
        self._id_of = {tok: i for i, tok in enumerate(tokens)}
        self._tok_of = dict(enumerate(tokens))

    def __len__(self) -> int:
        return self.size

    @property
    def pad_id(self) -> int:
        return self._id_of[PAD]

    @property
    def eos_id(self) -> int:
        return self._id_of[EOS]

    @property
    def unk_id(self) -> int:
        return self._id_of[UNK]

    def binding_token_id(self, family: str, binding: int) -> int:
        return self._id_of[BINDING_TOKENS[family][binding]]

    def encode(self, text: str) -> list[int]:
        """Whitespace-split `text` into token ids; unknown words map to <unk>."""
        words = text.split()
        if not words:
            raise InputError("cannot encode empty text")
        unk = self.unk_id
        return [self._id_of.get(w, unk) for w in words]

    def decode(self, ids) -> str:
        """Inverse of encode; out-of-table ids render as <extraN> placeholders."""
        out = []
        for i in ids:
            i = int(i)
            if i in self._tok_of:
                out.append(self._tok_of[i])
            else:
                out.append(f"<extra{i}>")
        return " ".join(out)


_DEFAULT: Vocabulary | None = None


def default_vocab() -> Vocabulary:
    """Process-wide shared vocabulary (it is immutable)."""
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Vocabulary()
    return _DEFAULT
