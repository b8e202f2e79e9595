import hashlib
from dataclasses import dataclass, field
from enum import Enum
from itertools import chain
from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from ops import Rng

TEXT_EXTENSIONS = [".txt", ".md", ".text"]


class CorpusError(RuntimeError):
    pass


def is_text_file(filename):
    return any(str(filename).endswith(extension) for extension in TEXT_EXTENSIONS)


def encode_text(text: str) -> List[int]:
    """UTF-8 bytes as tokens 0-255."""
    return list(text.encode("utf-8"))


def byte_entropy(tokens) -> float:
    """Shannon entropy in bits of the empirical byte histogram."""
    counts = np.bincount(np.asarray(tokens, dtype=np.int64).reshape(-1), minlength=256).astype(np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


class SyntheticDomain(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"

    @classmethod
    def from_str(cls, value: str):
        value = value.lower()
        for domain in cls:
            if domain.value == value:
                return domain
        raise ValueError(f"Synthetic domain should be one of {[d.value for d in cls]}, {value}")


@dataclass
class SynthSpec:
    domains: Tuple[str, ...] = ("easy", "hard")
    sequences_per_domain: int = 2048
    seq_len: int = 64
    split: float = 0.9


@dataclass
class CorpusConfig:
    paths: List[str] = field(default_factory=list)
    split: float = 0.9
    seq_len: int = 64
    domains: Tuple[str, ...] = ("easy", "hard")
    sequences_per_domain: int = 2048


@dataclass
class Corpus:
    train: torch.Tensor
    train_domains: List[str]
    validation: torch.Tensor
    validation_domains: List[str]
    split: float = 0.9

    @property
    def seq_len(self):
        return int(self.train.shape[1]) if self.train.numel() else int(self.validation.shape[1])

    @property
    def domains(self):
        seen = {}
        for name in chain(self.train_domains, self.validation_domains):
            seen.setdefault(name, None)
        return list(seen)

    def domain_tokens(self, domain: str, phase: str = "validation") -> torch.Tensor:
        tokens, labels = (self.validation, self.validation_domains) if phase == "validation" \
            else (self.train, self.train_domains)
        indices = [i for i, label in enumerate(labels) if label == domain]
        return tokens[indices]

    def digest(self):
        h = hashlib.sha256()
        for tokens, labels in ((self.train, self.train_domains), (self.validation, self.validation_domains)):
            h.update(tokens.numpy().astype("<i8").tobytes())
            h.update("\n".join(labels).encode("utf-8"))
            h.update(b"|")
        return h.hexdigest()


def _split_sequences(per_domain, split):
    if not 0.0 < split <= 1.0:
        raise ValueError(f"split should lie in (0, 1], {split}")
    train, train_labels, val, val_labels = [], [], [], []
    for name, sequences in per_domain:
        n_train = int(round(len(sequences) * split))
        train.extend(sequences[:n_train])
        train_labels.extend([name] * n_train)
        val.extend(sequences[n_train:])
        val_labels.extend([name] * (len(sequences) - n_train))
    seq_len = per_domain[0][1].shape[1]

    def stack(rows):
        if not rows:
            return torch.zeros(0, seq_len, dtype=torch.long)
        return torch.from_numpy(np.stack(rows).astype(np.int64))

    return Corpus(stack(train), train_labels, stack(val), val_labels, split)


def _expand_paths(paths):
    files = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            files.extend(sorted(p for p in path.iterdir() if is_text_file(p.name) and not p.name.startswith(".")))
        else:
            files.append(path)
    return sorted(set(files))


def ingest_corpus(paths, split: float = 0.9, seq_len: int = 64) -> Corpus:
    """Byte-tokenized shards, one domain per file (named by its stem), split by sequence index."""
    files = _expand_paths(paths)
    if not files:
        raise CorpusError("no corpus files given")
    per_domain = []
    for path in files:
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise CorpusError(f"cannot read corpus file {path}: {e}")
        if not text:
            raise CorpusError(f"corpus file {path} is empty")
        tokens = np.asarray(encode_text(text), dtype=np.int64)
        n_seq = len(tokens) // seq_len
        if n_seq == 0:
            raise CorpusError(f"corpus file {path} holds fewer than {seq_len} bytes")
        per_domain.append((path.stem, tokens[:n_seq * seq_len].reshape(n_seq, seq_len)))
    return _split_sequences(per_domain, split)


def _easy_sequence(gen, seq_len):
    # short pattern over 8 letters, repeated
    alphabet = np.frombuffer(b"abcdefgh", dtype=np.uint8)
    pattern = gen.choice(alphabet, size=int(gen.integers(2, 5)))
    return np.resize(pattern, seq_len).astype(np.int64)


def _medium_sequence(gen, seq_len):
    seq = _easy_sequence(gen, seq_len)
    noise = gen.random(seq_len) < 0.15
    seq[noise] = gen.integers(0x41, 0x61, size=int(noise.sum()))
    return seq


def _hard_sequence(gen, seq_len):
    # random prefix over 64 symbols, then a copy of it: predictable only by looking back
    half = (seq_len + 1) // 2
    head = gen.integers(0x21, 0x61, size=half)
    return np.concatenate([head, head[:seq_len - half]]).astype(np.int64)


_domain_generators = {
    SyntheticDomain.EASY: _easy_sequence,
    SyntheticDomain.MEDIUM: _medium_sequence,
    SyntheticDomain.HARD: _hard_sequence,
}


def synth_corpus(rng: Rng, spec: SynthSpec) -> Corpus:
    if not spec.domains:
        raise ValueError("synthetic corpus needs at least one domain")
    per_domain = []
    for name in spec.domains:
        domain = SyntheticDomain.from_str(name)
        gen = rng.stream(f"synth/{domain.value}").numpy
        make = _domain_generators[domain]
        rows = np.stack([make(gen, spec.seq_len) for _ in range(spec.sequences_per_domain)])
        per_domain.append((domain.value, rows))
    return _split_sequences(per_domain, spec.split)


def load_corpus(config: CorpusConfig, rng: Rng) -> Corpus:
    if config.paths:
        return ingest_corpus(config.paths, config.split, config.seq_len)
    spec = SynthSpec(tuple(config.domains), config.sequences_per_domain, config.seq_len, config.split)
    return synth_corpus(rng.stream("corpus"), spec)


class SequenceDataset(Dataset):
    def __init__(self, tokens: torch.Tensor):
        self.tokens = tokens

    def __getitem__(self, index):
        return self.tokens[index]

    def __len__(self):
        return len(self.tokens)


def make_loader(tokens: torch.Tensor, batch_size: int, rng: Rng, shuffle: bool = True,
                num_workers: int = 0) -> DataLoader:
    if len(tokens) < batch_size:
        raise CorpusError(f"corpus holds {len(tokens)} sequences, fewer than one batch of {batch_size}")
    return DataLoader(
        SequenceDataset(tokens),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=rng.generator,
        num_workers=num_workers,
        drop_last=True,
    )


def cycle(loader):
    while True:
        for batch in loader:
            yield batch


def sequential_batches(tokens: torch.Tensor, batch_size: int, max_batches: int = None) -> List[torch.Tensor]:
    batches = [tokens[i:i + batch_size] for i in range(0, len(tokens), batch_size)]
    return batches[:max_batches] if max_batches else batches
