"""Synthetic chunk-pattern grammar: patterns, lexicon, sentences, choice instances.

Sentences are built from a noun phrase, up to two prepositional phrases and a
verb phrase.  Every chunk carries a grammatical number and the subject NP
agrees with the VP, which yields exactly 14 legal patterns (2 of length 2,
4 of length 3, 8 of length 4).
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from pathlib import Path
from random import Random

CHUNK_KINDS = ("np", "pp1", "pp2", "vp")
NUMBERS = ("sg", "pl")
SPLITS = ("train", "dev", "test")

# default instance split, stratified by pattern (each count divisible by 14)
DEFAULT_SPLIT_COUNTS = (2576, 630, 798)
DEFAULT_INSTANCE_COUNT = sum(DEFAULT_SPLIT_COUNTS)
PAIR_KINDS = ("length", "gram_number", "subj_verb")


class LexiconError(ValueError):
    """Raised for malformed or incomplete lexicons."""


class DataError(ValueError):
    """Raised when a dataset cannot satisfy a construction request."""


def stable_hash(text: str) -> int:
    """Platform-independent 63-bit hash used for seeding and lexical keys."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class ChunkPattern:
    """An ordered sequence of (chunk kind, number) pairs, e.g. np-sg pp1-pl vp-sg."""

    chunks: tuple[tuple[str, str], ...]

    def __post_init__(self):
        kinds = [k for k, _ in self.chunks]
        expected = {
            2: ["np", "vp"],
            3: ["np", "pp1", "vp"],
            4: ["np", "pp1", "pp2", "vp"],
        }.get(len(self.chunks))
        if expected is None or kinds != expected:
            raise ValueError(f"illegal chunk sequence: {kinds}")
        for _, num in self.chunks:
            if num not in NUMBERS:
                raise ValueError(f"illegal number {num!r}")
        if self.chunks[0][1] != self.chunks[-1][1]:
            raise ValueError("subject and verb must agree in number")

    @property
    def length(self) -> int:
        return len(self.chunks)

    def number_of(self, kind: str) -> str | None:
        for k, num in self.chunks:
            if k == kind:
                return num
        return None

    def canonical(self) -> str:
        return " ".join(f"{k}-{n}" for k, n in self.chunks)

    def sort_key(self):
        return (self.length, tuple(NUMBERS.index(n) for _, n in self.chunks))

    @classmethod
    def parse(cls, text: str) -> "ChunkPattern":
        chunks = []
        for token in text.split():
            kind, sep, num = token.partition("-")
            if not sep:
                raise ValueError(f"malformed chunk token {token!r}")
            chunks.append((kind, num))
        return cls(tuple(chunks))

    def __str__(self) -> str:
        return self.canonical()


def enumerate_patterns() -> list[ChunkPattern]:
    """All 14 legal patterns, ordered by length then number sequence (sg before pl)."""
    patterns = []
    for n_pp in (0, 1, 2):
        kinds = ["np"] + [f"pp{i + 1}" for i in range(n_pp)] + ["vp"]
        for nums in itertools.product(NUMBERS, repeat=n_pp + 2):
            if nums[0] != nums[-1]:
                continue
            patterns.append(ChunkPattern(tuple(zip(kinds, nums))))
    patterns.sort(key=ChunkPattern.sort_key)
    return patterns


@dataclass(frozen=True)
class Lexicon:
    """Surface forms per (chunk kind, number) slot plus prepositions per PP slot.

    Entry index is meaningful: index i of the sg list and index i of the pl
    list of the same kind are treated as two forms of one lemma, which the
    matrix-task generator relies on for controlled lexical variation.
    """

    entries: dict[tuple[str, str], tuple[str, ...]]
    preps: dict[str, tuple[str, ...]]
    coord: tuple[str, ...] = ("and",)

    def validate(self) -> None:
        for kind in CHUNK_KINDS:
            for num in NUMBERS:
                forms = self.entries.get((kind, num), ())
                if not forms:
                    raise LexiconError(f"empty lexicon slot ({kind}, {num})")
                if len(set(forms)) != len(forms):
                    raise LexiconError(f"duplicate entries in slot ({kind}, {num})")
        for kind in ("pp1", "pp2"):
            if not self.preps.get(kind):
                raise LexiconError(f"no prepositions for slot {kind}")
        if not self.coord:
            raise LexiconError("no coordination words")

    def slot_size(self, kind: str, num: str) -> int:
        n = len(self.entries[(kind, num)])
        if kind.startswith("pp"):
            n *= len(self.preps[kind])
        return n

    def pattern_count(self, pattern: ChunkPattern) -> int:
        count = 1
        for kind, num in pattern.chunks:
            count *= self.slot_size(kind, num)
        return count

    def total_count(self) -> int:
        return sum(self.pattern_count(p) for p in enumerate_patterns())

    def realize_chunk(self, kind: str, num: str, choice: int) -> str:
        """Surface string of one chunk; ``choice`` indexes the slot's flat choice space."""
        forms = self.entries[(kind, num)]
        if kind.startswith("pp"):
            preps = self.preps[kind]
            prep_i, form_i = divmod(choice, len(forms))
            return f"{preps[prep_i]} {forms[form_i]}"
        return forms[choice]


def load_lexicon(path: str | Path) -> Lexicon:
    """Read a tab-separated lexicon file: category, slot, surface form."""
    entries: dict[tuple[str, str], list[str]] = {}
    preps: dict[str, list[str]] = {}
    coord: list[str] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise LexiconError(f"{path}:{lineno}: expected 3 tab-separated fields")
        cat, slot, form = parts
        if cat == "prep":
            preps.setdefault(slot, []).append(form)
        elif cat == "coord":
            coord.append(form)
        elif cat in CHUNK_KINDS:
            if slot not in NUMBERS:
                raise LexiconError(f"{path}:{lineno}: bad number {slot!r}")
            entries.setdefault((cat, slot), []).append(form)
        else:
            raise LexiconError(f"{path}:{lineno}: unknown category {cat!r}")
    lex = Lexicon(
        entries={k: tuple(v) for k, v in entries.items()},
        preps={k: tuple(v) for k, v in preps.items()},
        coord=tuple(coord) if coord else ("and",),
    )
    lex.validate()
    return lex


def default_lexicon_path() -> Path:
    return Path(__file__).parent / "data" / "lexicon_default.tsv"


def paper_scale_lexicon_path() -> Path:
    return Path(__file__).parent / "data" / "lexicon_large.tsv"


@dataclass(frozen=True)
class SentenceRecord:
    """One generated sentence with its pattern label and split assignment."""

    id: int
    text: str
    pattern: str
    split: str


@dataclass(frozen=True)
class SentenceInstance:
    """One input sentence plus candidate sentences, exactly one pattern-matching."""

    input: SentenceRecord
    candidates: tuple[SentenceRecord, ...]
    correct_index: int

    def validate(self) -> None:
        if not 0 <= self.correct_index < len(self.candidates):
            raise DataError("correct_index out of range")
        matching = [c for c in self.candidates if c.pattern == self.input.pattern]
        if len(matching) != 1 or self.candidates[self.correct_index].pattern != self.input.pattern:
            raise DataError("exactly one candidate must match the input pattern")
        wrong = [c.pattern for i, c in enumerate(self.candidates) if i != self.correct_index]
        if len(set(wrong)) != len(wrong):
            raise DataError("wrong-candidate patterns must be pairwise distinct")

    @property
    def split(self) -> str:
        return self.input.split


def _allocate(total: int, weights: tuple[int, ...]) -> list[int]:
    """Largest-remainder allocation of ``total`` into len(weights) integer parts."""
    wsum = sum(weights)
    exact = [total * w / wsum for w in weights]
    base = [int(e) for e in exact]
    remainder = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: exact[i] - base[i], reverse=True)
    for i in order[:remainder]:
        base[i] += 1
    return base


def generate_sentences(
    lexicon: Lexicon,
    seed: int,
    split_weights: tuple[int, int, int] = DEFAULT_SPLIT_COUNTS,
) -> list[SentenceRecord]:
    """Enumerate every pattern x lexical combination exactly once.

    Record ids follow enumeration order, so regeneration with the same lexicon
    and seed is byte-identical.  The seed only drives the stratified split
    assignment.
    """
    lexicon.validate()
    records: list[SentenceRecord] = []
    next_id = 0
    for pattern in enumerate_patterns():
        ranges = [range(lexicon.slot_size(k, n)) for k, n in pattern.chunks]
        texts = []
        for combo in itertools.product(*ranges):
            parts = [
                lexicon.realize_chunk(kind, num, choice)
                for (kind, num), choice in zip(pattern.chunks, combo)
            ]
            texts.append(" ".join(parts))
        counts = _allocate(len(texts), split_weights)
        splits = [SPLITS[s] for s, c in enumerate(counts) for _ in range(c)]
        Random(f"{seed}/split/{pattern.canonical()}").shuffle(splits)
        for text, split in zip(texts, splits):
            records.append(
                SentenceRecord(id=next_id, text=text, pattern=pattern.canonical(), split=split)
            )
            next_id += 1
    return records


def build_instances(
    records: list[SentenceRecord],
    n: int = DEFAULT_INSTANCE_COUNT,
    seed: int = 0,
    split_counts: tuple[int, int, int] = DEFAULT_SPLIT_COUNTS,
) -> list[SentenceInstance]:
    """Assemble n choice instances, n/14 per input pattern, stratified over splits.

    Each instance draws its input, the matching candidate and the 6 wrong
    candidates from records of a single split, so instance splits inherit
    from their input records without leakage across splits.
    """
    patterns = [p.canonical() for p in enumerate_patterns()]
    if n % len(patterns):
        raise DataError(f"instance count {n} not divisible by {len(patterns)}")
    if sum(split_counts) != n:
        raise DataError(f"split counts {split_counts} do not sum to {n}")
    for c in split_counts:
        if c % len(patterns):
            raise DataError(f"split count {c} not divisible by {len(patterns)}")

    pools: dict[tuple[str, str], list[SentenceRecord]] = {}
    for rec in records:
        pools.setdefault((rec.pattern, rec.split), []).append(rec)

    rng = Random(f"{seed}/instances")
    instances: list[SentenceInstance] = []
    for split, count in zip(SPLITS, split_counts):
        per_pattern = count // len(patterns)
        for pattern in patterns:
            pool = pools.get((pattern, split), [])
            if len(pool) < max(per_pattern, 2):
                raise DataError(
                    f"insufficient records for pattern {pattern!r} in split {split!r}: "
                    f"{len(pool)} available, {max(per_pattern, 2)} needed"
                )
            inputs = rng.sample(pool, per_pattern)
            for inp in inputs:
                correct = rng.choice([r for r in pool if r.id != inp.id])
                wrong_patterns = rng.sample([p for p in patterns if p != pattern], 6)
                candidates = [correct]
                for wp in wrong_patterns:
                    wrong_pool = pools.get((wp, split), [])
                    if not wrong_pool:
                        raise DataError(
                            f"insufficient records for pattern {wp!r} in split {split!r}"
                        )
                    candidates.append(rng.choice(wrong_pool))
                order = list(range(7))
                rng.shuffle(order)
                shuffled = tuple(candidates[i] for i in order)
                instance = SentenceInstance(
                    input=inp,
                    candidates=shuffled,
                    correct_index=order.index(0),
                )
                instance.validate()
                instances.append(instance)
    return instances


@dataclass(frozen=True)
class MinimalPair:
    """Two patterns differing in exactly one controlled property."""

    kind: str
    p1: str
    p2: str


def _delete_pp(pattern: ChunkPattern, index: int) -> ChunkPattern:
    """Remove one PP chunk and relabel the remaining PPs positionally."""
    kept = [c for i, c in enumerate(pattern.chunks) if i != index]
    pps = [c for c in kept if c[0].startswith("pp")]
    relabeled = [("np", kept[0][1])]
    relabeled += [(f"pp{i + 1}", num) for i, (_, num) in enumerate(pps)]
    relabeled.append(("vp", kept[-1][1]))
    return ChunkPattern(tuple(relabeled))


def minimal_pairs(kind: str) -> list[MinimalPair]:
    """Pairs for one of: length, gram_number, subj_verb (see module docs)."""
    if kind not in PAIR_KINDS:
        raise ValueError(f"unknown pair kind {kind!r}")
    patterns = enumerate_patterns()
    index = {p.canonical(): p for p in patterns}
    pairs: set[tuple[str, str]] = set()

    if kind == "length":
        for p2 in patterns:
            for i, (ck, _) in enumerate(p2.chunks):
                if not ck.startswith("pp"):
                    continue
                p1 = _delete_pp(p2, i)
                if p1.canonical() in index:
                    pairs.add((p1.canonical(), p2.canonical()))
    elif kind == "gram_number":
        for pa, pb in itertools.combinations(patterns, 2):
            if pa.length != pb.length:
                continue
            diffs = [
                (ka, na, nb)
                for (ka, na), (_, nb) in zip(pa.chunks, pb.chunks)
                if na != nb
            ]
            if len(diffs) == 1 and diffs[0][0].startswith("pp"):
                pairs.add((pa.canonical(), pb.canonical()))
    else:  # subj_verb
        for pa, pb in itertools.combinations(patterns, 2):
            if pa.length != pb.length:
                continue
            same_pps = all(
                ca == cb
                for ca, cb in zip(pa.chunks, pb.chunks)
                if ca[0].startswith("pp")
            )
            if same_pps and pa.chunks[0][1] != pb.chunks[0][1]:
                pairs.add((pa.canonical(), pb.canonical()))

    def key(pair):
        return (index[pair[0]].sort_key(), index[pair[1]].sort_key())

    return [MinimalPair(kind, a, b) for a, b in sorted(pairs, key=key)]


# ---------------------------------------------------------------------------
# dataset files: tab-separated, UTF-8, LF line endings

def write_sentence_dataset(records: list[SentenceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(f"{rec.id}\t{rec.text}\t{rec.pattern}\t{rec.split}\n")


def read_sentence_dataset(path: str | Path) -> list[SentenceRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
            rec_id, text, pattern, split = parts
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: bad split {split!r}")
            records.append(SentenceRecord(int(rec_id), text, pattern, split))
    if len({r.id for r in records}) != len(records):
        raise DataError(f"{path}: duplicate record ids")
    return records


def write_instances(instances: list[SentenceInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            ids = "\t".join(str(c.id) for c in inst.candidates)
            fh.write(f"{inst.input.id}\t{ids}\t{inst.correct_index}\n")


def read_instances(path: str | Path, records: list[SentenceRecord]) -> list[SentenceInstance]:
    by_id = {r.id: r for r in records}
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if len(parts) != 9:
                raise DataError(f"{path}:{lineno}: expected 9 fields")
            try:
                inp = by_id[int(parts[0])]
                cands = tuple(by_id[int(p)] for p in parts[1:8])
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: unknown record id {exc}") from None
            inst = SentenceInstance(inp, cands, int(parts[8]))
            inst.validate()
            instances.append(inst)
    return instances
