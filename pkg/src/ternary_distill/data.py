"""Byte-level datasets: LM corpus windows and input/answer classification items."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import BOS, EOS, PAD, SEP


class DataError(ValueError):
    pass


def encode(text: str | bytes) -> list[int]:
    return list(text.encode("utf-8") if isinstance(text, str) else bytes(text))


def decode(ids) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


@dataclass
class Batch:
    ids: np.ndarray  # int64 [B, L]
    targets: np.ndarray  # int64 [B, L], next token (PAD where unused)
    mask: np.ndarray  # bool [B, L], positions contributing to the loss


class CorpusDataset:
    """Documents joined as BOS doc EOS BOS doc EOS ... and cut into fixed windows."""

    def __init__(self, documents: list[bytes], seq_len: int):
        if not documents:
            raise DataError("corpus has no documents")
        if seq_len < 2:
            raise DataError("seq_len must be at least 2")
        self.documents = [bytes(d) for d in documents]
        self.seq_len = seq_len
        stream: list[int] = []
        for d in self.documents:
            stream += [BOS, *d, EOS]
        n = (len(stream) - 1) // seq_len
        if n == 0:
            raise DataError(f"corpus of {len(stream)} tokens is shorter than one window of {seq_len + 1}")
        arr = np.asarray(stream[: n * seq_len + 1], dtype=np.int64)
        self.inputs = np.stack([arr[i * seq_len : (i + 1) * seq_len] for i in range(n)])
        self.targets = np.stack([arr[i * seq_len + 1 : (i + 1) * seq_len + 1] for i in range(n)])

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def split(self, heldout_frac: float) -> tuple[CorpusDataset, CorpusDataset]:
        """Split by document, last documents held out."""
        k = max(1, int(round(len(self.documents) * heldout_frac)))
        if k >= len(self.documents):
            raise DataError("not enough documents to split")
        return CorpusDataset(self.documents[:-k], self.seq_len), CorpusDataset(self.documents[-k:], self.seq_len)

    def batch(self, idx) -> Batch:
        ids = self.inputs[idx]
        return Batch(ids, self.targets[idx], np.ones(ids.shape, dtype=bool))


@dataclass(frozen=True)
class TaskItem:
    input: bytes
    answer: bytes


class TaskDataset:
    """Items rendered as BOS input SEP answer; the loss sees answer positions only."""

    def __init__(self, items: list[TaskItem], max_seq_len: int = 128):
        if not items:
            raise DataError("task dataset is empty")
        for n, it in enumerate(items):
            if not it.answer:
                raise DataError(f"item {n}: empty answer")
            if self.rendered_len(it) > max_seq_len:
                raise DataError(f"item {n}: rendered length {self.rendered_len(it)} exceeds max_seq_len {max_seq_len}")
        self.items = list(items)
        self.max_seq_len = max_seq_len

    @staticmethod
    def rendered_len(item: TaskItem) -> int:
        return len(item.input) + len(item.answer) + 2

    def __len__(self) -> int:
        return len(self.items)

    def __eq__(self, other) -> bool:
        return isinstance(other, TaskDataset) and self.items == other.items

    @property
    def labels(self) -> list[bytes]:
        return sorted({it.answer for it in self.items})

    def subset(self, idx) -> TaskDataset:
        return TaskDataset([self.items[i] for i in idx], self.max_seq_len)

    def split(self, heldout_frac: float) -> tuple[TaskDataset, TaskDataset]:
        k = max(1, int(round(len(self) * heldout_frac)))
        if k >= len(self):
            raise DataError("not enough items to split")
        return TaskDataset(self.items[:-k], self.max_seq_len), TaskDataset(self.items[-k:], self.max_seq_len)

    def batch(self, idx) -> Batch:
        """Right-padded batch. The target at position t is token t+1."""
        rows = [[BOS, *self.items[i].input, SEP, *self.items[i].answer] for i in idx]
        L = max(len(r) for r in rows) - 1
        ids = np.full((len(rows), L), PAD, dtype=np.int64)
        tgt = np.full((len(rows), L), PAD, dtype=np.int64)
        mask = np.zeros((len(rows), L), dtype=bool)
        for b, (r, i) in enumerate(zip(rows, idx)):
            n = len(r) - 1
            ids[b, :n] = r[:-1]
            tgt[b, :n] = r[1:]
            a = len(self.items[i].answer)
            mask[b, n - a : n] = True
        return Batch(ids, tgt, mask)

    def prompt(self, i: int) -> list[int]:
        return [BOS, *self.items[i].input, SEP]


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


# -- file formats -----------------------------------------------------------------


def _read_text(path) -> str:
    try:
        return Path(path).read_bytes().decode("utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 at byte {e.start}") from None


def load_corpus(path, seq_len: int = 128) -> CorpusDataset:
    """Plain text; documents are separated by one or more blank lines."""
    text = _read_text(path).replace("\r\n", "\n")
    docs, cur = [], []
    for line in text.split("\n"):
        if line.strip():
            cur.append(line)
        elif cur:
            docs.append("\n".join(cur))
            cur = []
    if cur:
        docs.append("\n".join(cur))
    if not docs:
        raise DataError(f"{path}: corpus is empty")
    return CorpusDataset([d.encode("utf-8") for d in docs], seq_len)


def dump_corpus(ds: CorpusDataset, path) -> None:
    Path(path).write_bytes(b"\n\n".join(ds.documents) + b"\n")


def load_task(path, max_seq_len: int = 128) -> TaskDataset:
    """One item per line: input<TAB>answer. Blank lines are skipped."""
    items = []
    for n, line in enumerate(_read_text(path).split("\n"), start=1):
        line = line.rstrip("\r")
        if not line:
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{n}: missing TAB between input and answer")
        x, y = line.split("\t", 1)
        if "\t" in y:
            raise DataError(f"{path}:{n}: more than one TAB")
        if not y:
            raise DataError(f"{path}:{n}: empty answer")
        item = TaskItem(x.encode("utf-8"), y.encode("utf-8"))
        if TaskDataset.rendered_len(item) > max_seq_len:
            raise DataError(f"{path}:{n}: rendered length {TaskDataset.rendered_len(item)} exceeds {max_seq_len}")
        items.append(item)
    if not items:
        raise DataError(f"{path}: task file has no items")
    return TaskDataset(items, max_seq_len)


def dump_task(ds: TaskDataset, path) -> None:
    lines = [f"{it.input.decode('utf-8')}\t{it.answer.decode('utf-8')}" for it in ds.items]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- synthetic data ---------------------------------------------------------------

TOY_ALPHABET = b"abcdefgh"
TOY_LENGTH = 8
TOY_LABELS = (b"y", b"n")


def _random_string(rng: np.random.Generator, length: int, alphabet: bytes) -> bytearray:
    return bytearray(alphabet[i] for i in rng.integers(0, len(alphabet), length))


def make_toy_task(seed: int, n: int, length: int = TOY_LENGTH, alphabet: bytes = TOY_ALPHABET) -> TaskDataset:
    """Balanced yes/no task: does the string end with the letter it starts with?

    Inputs are uniformly random letters apart from the constrained last
    position, so adjacent-pair statistics carry no signal about the label.
    All inputs are distinct, which makes any split of the result disjoint.
    """
    if n < 100:
        raise DataError("make_toy_task needs n >= 100")
    if len(alphabet) < 2:
        raise DataError("alphabet needs at least two letters")
    space = len(alphabet) ** (length - 1) * len(alphabet)
    if n > space // 4:
        raise DataError(f"n={n} too large for {space} distinct strings")
    rng = np.random.default_rng(seed)
    seen: set[bytes] = set()
    items = []
    while len(items) < n:
        want_yes = len(items) % 2 == 0
        s = _random_string(rng, length, alphabet)
        if want_yes:
            s[-1] = s[0]
        else:
            others = bytes(c for c in alphabet if c != s[0])
            s[-1] = others[rng.integers(0, len(others))]
        key = bytes(s)
        if key in seen:
            continue
        seen.add(key)
        items.append(TaskItem(key, TOY_LABELS[0] if want_yes else TOY_LABELS[1]))
    order = rng.permutation(n)
    return TaskDataset([items[i] for i in order], max_seq_len=length + 3 + 1)


def make_toy_corpus(
    seed: int, n_docs: int = 4000, length: int = TOY_LENGTH, alphabet: bytes = TOY_ALPHABET
) -> CorpusDataset:
    """Unlabelled one-line documents in the task's alphabet.

    Half the lines are ``<string>=<first letter>``, which rewards looking back
    to the start of the line. The other half are ``<string>?<y|n>`` where the
    last character says whether the string ends with its first letter. The
    task's skill is therefore present in the corpus, but in a different
    surface form (no special tokens). Windows are one document long so they
    line up with document boundaries.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for k in range(n_docs):
        s = _random_string(rng, length, alphabet)
        if rng.random() < 0.5:
            docs.append(bytes(s) + b"=" + bytes(s[:1]))
            continue
        same = k % 2 == 0
        if same:
            s[-1] = s[0]
        elif s[-1] == s[0]:
            others = bytes(c for c in alphabet if c != s[0])
            s[-1] = others[rng.integers(0, len(others))]
        docs.append(bytes(s) + b"?" + (TOY_LABELS[0] if same else TOY_LABELS[1]))
    return CorpusDataset(docs, seq_len=length + 4)


def bigram_baseline_accuracy(train: TaskDataset, test: TaskDataset) -> float:
    """Naive-Bayes classifier over adjacent byte pairs of the input (add-one smoothing)."""
    labels = train.labels
    counts = {y: np.ones((256, 256)) for y in labels}
    prior = {y: 0 for y in labels}
    for it in train.items:
        prior[it.answer] += 1
        c = counts[it.answer]
        for a, b in zip(it.input, it.input[1:]):
            c[a, b] += 1
    logp = {y: np.log(c / c.sum()) for y, c in counts.items()}
    correct = 0
    for it in test.items:
        scores = {
            y: math.log(prior[y] / len(train)) + sum(logp[y][a, b] for a, b in zip(it.input, it.input[1:])) for y in labels
        }
        correct += max(scores, key=scores.get) == it.answer
    return correct / len(test)
