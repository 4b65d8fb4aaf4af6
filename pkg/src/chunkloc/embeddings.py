"""Embedding interchange format, 768 <-> 32x24 reshape and the synthetic oracle.

The synthetic generator plants a known signal block per sentence feature
(chunk slot x number, or role slots for the alternation task) inside the
bottom rows of the 32x24 grid, so localization claims can be verified against
a ground truth without running a pretrained transformer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grammar import SentenceRecord, stable_hash

MAGIC = b"EMB1"
DIM = 768
GRID_ROWS, GRID_COLS = 32, 24


class EmbeddingFormatError(ValueError):
    """Raised for malformed embedding files; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def reshape_to_grid(vec: np.ndarray) -> np.ndarray:
    """Row-major reshape of 768-vectors to 32x24 (row r, col c -> flat 24r+c)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != DIM:
        raise ValueError(f"expected last dimension {DIM}, got {vec.shape}")
    return vec.reshape(vec.shape[:-1] + (GRID_ROWS, GRID_COLS))


def flatten_grid(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape[-2:] != (GRID_ROWS, GRID_COLS):
        raise ValueError(f"expected trailing shape {(GRID_ROWS, GRID_COLS)}, got {mat.shape}")
    return mat.reshape(mat.shape[:-2] + (DIM,))


def write_embeddings(matrices: np.ndarray, path: str | Path) -> None:
    """Write (n, 32, 24) or (n, 768) values as little-endian float32 rows."""
    arr = np.asarray(matrices, dtype=np.float64)
    if arr.ndim == 3:
        arr = flatten_grid(arr)
    if arr.ndim != 2 or arr.shape[1] != DIM:
        raise ValueError(f"expected (n, {DIM}) payload, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", MAGIC, arr.shape[0], DIM))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    """Read an embedding file back as float64 matrices of shape (n, 32, 24)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise EmbeddingFormatError("truncated header", len(raw))
    magic, count, dim = struct.unpack_from("<4sII", raw, 0)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}", 0)
    if dim != DIM:
        raise EmbeddingFormatError(f"unsupported dim {dim}", 8)
    expected = 12 + count * dim * 4
    if len(raw) != expected:
        raise EmbeddingFormatError(
            f"payload length {len(raw) - 12}, expected {count * dim * 4}", min(len(raw), expected)
        )
    flat = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=12)
    return reshape_to_grid(flat.astype(np.float64).reshape(count, dim))


@dataclass(frozen=True)
class Block:
    """Half-open cell range [row0, row1) x [col0, col1) in the 32x24 grid."""

    row0: int
    row1: int
    col0: int
    col1: int

    def __post_init__(self):
        if not (0 <= self.row0 < self.row1 <= GRID_ROWS and 0 <= self.col0 < self.col1 <= GRID_COLS):
            raise ValueError(f"block out of bounds: {self}")

    def cells(self) -> set[tuple[int, int]]:
        return {
            (r, c)
            for r in range(self.row0, self.row1)
            for c in range(self.col0, self.col1)
        }

    @property
    def shape(self) -> tuple[int, int]:
        return (self.row1 - self.row0, self.col1 - self.col0)


def features_for_pattern(pattern: str) -> list[str]:
    """Decompose a canonical pattern string into synthetic signal features.

    Chunk tokens ("np-sg", "pp1-pl") map to slot:number features, the
    coordination token ("cnp-sg") to a bare coordination flag, and
    role-annotated alternation tokens ("np:agent", "vb:pass", "pp:loc",
    "pp~:loc") to positional subject/verb/object features.
    """
    tokens = pattern.split()
    features: list[str] = []
    obj_index = 0
    for pos, token in enumerate(tokens):
        if ":" in token:
            head, _, role = token.partition(":")
            if head == "np" and pos == 0:
                features.append(f"subj:{role}")
            elif head == "vb":
                features.append(f"verb:{role}")
            elif head in ("np", "pp", "pp~"):
                obj_index += 1
                form = "np" if head == "np" else "pp"
                features.append(f"obj{obj_index}:{role}:{form}")
                if head == "pp~":
                    features.append("prep:wrong")
            else:
                raise ValueError(f"unknown pattern token {token!r}")
        else:
            kind, _, num = token.partition("-")
            if kind == "cnp":
                features.append("coord")
            elif kind in ("np", "pp1", "pp2", "vp"):
                features.append(f"{kind}:{num}")
            else:
                raise ValueError(f"unknown pattern token {token!r}")
    return features


@dataclass(frozen=True)
class SyntheticEmbeddingSpec:
    """Signal placement plus noise levels for the synthetic oracle.

    ``base_level`` adds a constant shared component to every cell, mimicking
    the anisotropy of real transformer sentence embeddings (all pairwise
    cosines high); pattern information rides on top of it inside the blocks.
    It shifts every per-node value distribution equally, so localization
    statistics are unaffected.
    """

    blocks: dict[str, Block]
    amplitude: float = 1.0
    lexical_std: float = 0.1
    global_std: float = 0.05
    seed: int = 0
    base_level: float = 0.0

    def validate(self) -> None:
        taken: set[tuple[int, int]] = set()
        for name, block in self.blocks.items():
            cells = block.cells()
            clash = taken & cells
            if clash:
                raise ValueError(f"block {name!r} overlaps another block at {sorted(clash)[0]}")
            taken |= cells

    def signal_rows(self) -> tuple[int, int]:
        """Smallest row interval [lo, hi] covering every signal block."""
        lo = min(b.row0 for b in self.blocks.values())
        hi = max(b.row1 for b in self.blocks.values()) - 1
        return lo, hi


def agreement_spec(
    amplitude: float = 1.0,
    lexical_std: float = 0.05,
    global_std: float = 0.02,
    seed: int = 0,
    base_level: float = 1.0,
) -> SyntheticEmbeddingSpec:
    """Default blocks for the sentence/agreement tasks, all inside rows 25-31.

    Singular slots sit in rows 25-27, plural slots in rows 28-30 and the
    coordination flag in row 31, with one 6-column strip per chunk slot.
    """
    blocks: dict[str, Block] = {}
    for i, kind in enumerate(("np", "pp1", "pp2", "vp")):
        blocks[f"{kind}:sg"] = Block(25, 28, 6 * i, 6 * i + 6)
        blocks[f"{kind}:pl"] = Block(28, 31, 6 * i, 6 * i + 6)
    blocks["coord"] = Block(31, 32, 0, 24)
    spec = SyntheticEmbeddingSpec(blocks, amplitude, lexical_std, global_std, seed, base_level)
    spec.validate()
    return spec


def alternation_spec(
    amplitude: float = 1.0,
    lexical_std: float = 0.05,
    global_std: float = 0.02,
    seed: int = 0,
    base_level: float = 1.0,
) -> SyntheticEmbeddingSpec:
    """Blocks for role-annotated alternation sentences, also in rows 25-31."""
    roles = ("agent", "theme", "loc")
    names = [f"subj:{r}" for r in roles]
    names += ["verb:act", "verb:pass"]
    for obj in ("obj1", "obj2"):
        for role in roles:
            for form in ("np", "pp"):
                names.append(f"{obj}:{role}:{form}")
    names.append("prep:wrong")
    blocks = {}
    for i, name in enumerate(names):
        band, strip = divmod(i, 12)
        blocks[name] = Block(25 + 3 * band, 28 + 3 * band, 2 * strip, 2 * strip + 2)
    spec = SyntheticEmbeddingSpec(blocks, amplitude, lexical_std, global_std, seed, base_level)
    spec.validate()
    return spec


def synthesize_embedding(pattern: str, lexical_key: int, spec: SyntheticEmbeddingSpec) -> np.ndarray:
    """Deterministic 32x24 matrix: amplitude + lexical noise on the pattern's
    feature blocks, plus flat global noise everywhere."""
    spec.validate()
    mat = np.full((GRID_ROWS, GRID_COLS), float(spec.base_level))
    g_rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, 0, lexical_key, stable_hash(pattern)])
    )
    mat += g_rng.normal(0.0, spec.global_std, mat.shape)
    for feature in features_for_pattern(pattern):
        block = spec.blocks.get(feature)
        if block is None:
            raise ValueError(f"no signal block configured for feature {feature!r}")
        f_rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, 1, stable_hash(feature), lexical_key])
        )
        patch = spec.amplitude + f_rng.normal(0.0, spec.lexical_std, block.shape)
        mat[block.row0 : block.row1, block.col0 : block.col1] += patch
    return mat


def synthesize_dataset(records: list[SentenceRecord], spec: SyntheticEmbeddingSpec) -> np.ndarray:
    """One matrix per record, keyed by the sentence text so identical surface
    forms always map to identical embeddings."""
    return np.stack(
        [synthesize_embedding(r.pattern, stable_hash(r.text), spec) for r in records]
    )


class EmbeddingTable:
    """Record-id indexed view over a matrix stack aligned with a dataset file."""

    def __init__(self, records: list[SentenceRecord], matrices: np.ndarray):
        if len(records) != matrices.shape[0]:
            raise ValueError(
                f"{len(records)} records but {matrices.shape[0]} embedding rows"
            )
        self._index = {r.id: i for i, r in enumerate(records)}
        self.matrices = np.asarray(matrices, dtype=np.float64)

    def get(self, record_id: int) -> np.ndarray:
        try:
            return self.matrices[self._index[record_id]]
        except KeyError:
            raise KeyError(f"no embedding for record id {record_id}") from None

    def rows(self, record_ids) -> np.ndarray:
        try:
            idx = [self._index[i] for i in record_ids]
        except KeyError as exc:
            raise KeyError(f"no embedding for record id {exc.args[0]}") from None
        return self.matrices[idx]

    def __len__(self) -> int:
        return len(self._index)
