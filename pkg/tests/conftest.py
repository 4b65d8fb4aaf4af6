"""Shared fixtures and the central finite-difference gradient checker."""

from __future__ import annotations

import numpy as np
import pytest

from chunkloc import autodiff as ad
from chunkloc import grammar
from chunkloc.embeddings import EmbeddingTable, agreement_spec, synthesize_dataset


def numeric_gradients(build, arrays, h=1e-5):
    """Central finite differences of a scalar-valued builder.

    ``build`` maps plain float64 arrays (wrapped as constant tensors) to a
    scalar Tensor; the arrays are perturbed in place one coordinate at a time.
    """
    def value():
        return build(*[ad.Tensor(a) for a in arrays]).item()

    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(arr.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def assert_gradients_match(build, arrays, h=1e-5, rtol=1e-4, atol=1e-7):
    """Backprop through ``build`` on leaf tensors and compare against central
    finite differences at relative tolerance ``rtol``."""
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]
    numeric = numeric_gradients(build, [a.copy() for a in arrays], h=h)
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a), np.abs(n))
        err = np.abs(a - n)
        bad = err > atol + rtol * denom
        assert not bad.any(), (
            f"gradient mismatch: max rel err "
            f"{(err / np.maximum(denom, 1e-300)).max():.3e}"
        )


@pytest.fixture(scope="session")
def tiny_lexicon():
    """Two lemmas per NP/VP slot, one PP lemma and preposition per slot."""
    return grammar.Lexicon(
        entries={
            ("np", "sg"): ("the cat", "the dog"),
            ("np", "pl"): ("the cats", "the dogs"),
            ("vp", "sg"): ("sleeps", "runs"),
            ("vp", "pl"): ("sleep", "run"),
            ("pp1", "sg"): ("the garden",),
            ("pp1", "pl"): ("the gardens",),
            ("pp2", "sg"): ("the hill",),
            ("pp2", "pl"): ("the hills",),
        },
        preps={"pp1": ("in",), "pp2": ("near",)},
    )


@pytest.fixture(scope="session")
def default_lexicon():
    return grammar.load_lexicon(grammar.default_lexicon_path())


@pytest.fixture(scope="session")
def small_dataset(default_lexicon):
    """Records, instances and synthetic embeddings at a quick test scale."""
    records = grammar.generate_sentences(default_lexicon, seed=11)
    instances = grammar.build_instances(records, n=280, seed=5, split_counts=(168, 56, 56))
    spec = agreement_spec(seed=3)
    needed_ids = set()
    for inst in instances:
        needed_ids.add(inst.input.id)
        needed_ids.update(c.id for c in inst.candidates)
    needed = [r for r in records if r.id in needed_ids]
    table = EmbeddingTable(needed, synthesize_dataset(needed, spec))
    return records, instances, table, spec
