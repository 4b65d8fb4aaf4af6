"""Training, evaluation and latent-layer probing for the sentence task."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .embeddings import DIM, EmbeddingTable, flatten_grid
from .grammar import SentenceInstance, SentenceRecord
from .metrics import accuracy, macro_f1, mean_std
from .model import MaskedEncoderModel, ModelConfig


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 1
    tau_start: float = 1.0
    tau_end: float = 0.01
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "tau_start", "tau_end", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.seed is None:
            raise ValueError("seed is mandatory")

    def tau_at(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.tau_end
        frac = epoch / (self.epochs - 1)
        return self.tau_start + (self.tau_end - self.tau_start) * frac


@dataclass
class EvalResult:
    accuracy: float
    macro_f1: float
    seed: int
    n_instances: int


@dataclass
class TrainResult:
    model: MaskedEncoderModel
    train_loss: list[float]
    dev_loss: list[float]
    best_epoch: int


def _instance_rows(instances, embeddings: EmbeddingTable):
    """Inputs (B, 32, 24) and candidates (B, n_cand, 768) with the correct
    candidate moved to column 0 (internal ordering only)."""
    inputs = embeddings.rows([inst.input.id for inst in instances])
    cand_ids = []
    for inst in instances:
        ordered = [inst.candidates[inst.correct_index].id]
        ordered += [c.id for i, c in enumerate(inst.candidates) if i != inst.correct_index]
        cand_ids.append(ordered)
    n_cand = len(cand_ids[0])
    flat = embeddings.rows([cid for row in cand_ids for cid in row])
    cands = flatten_grid(flat).reshape(len(instances), n_cand, DIM)
    return inputs, cands


@dataclass
class LossParts:
    total: ad.Tensor
    margin: ad.Tensor
    kl: ad.Tensor
    mu: ad.Tensor
    logvar: ad.Tensor


def instance_loss(model: MaskedEncoderModel, inputs, cands, mode, noise=None, tau=None) -> LossParts:
    """Mean over the batch of max-margin + KL, with the two terms kept visible."""
    mu, logvar, z = model.encode(inputs, mode=mode, noise=noise, tau=tau)
    recon = ad.reshape(model.decode(z), (inputs.shape[0], DIM))
    n_cand = cands.shape[1]
    s_correct = ad.cosine(recon, ad.Tensor(cands[:, 0]))
    s_errs = ad.concat_rows(
        [ad.reshape(ad.cosine(recon, ad.Tensor(cands[:, j])), (-1, 1)) for j in range(1, n_cand)]
    )
    margin = ad.mean_all(ad.maxmargin_loss(s_correct, s_errs))
    kl = ad.mean_all(ad.kl_standard_normal(mu, logvar))
    return LossParts(ad.add(margin, kl), margin, kl, mu, logvar)


def dataset_loss(model, instances, embeddings, batch_size=256) -> float:
    """Deterministic evaluation-mode loss (z = mu) over a whole instance list."""
    total, count = 0.0, 0
    for lo in range(0, len(instances), batch_size):
        batch = instances[lo : lo + batch_size]
        inputs, cands = _instance_rows(batch, embeddings)
        parts = instance_loss(model, inputs, cands, mode="eval")
        total += parts.total.item() * len(batch)
        count += len(batch)
    return total / max(count, 1)


def train(
    instances: list[SentenceInstance],
    embeddings: EmbeddingTable,
    config: TrainConfig,
    model: MaskedEncoderModel | None = None,
    model_config: ModelConfig | None = None,
) -> TrainResult:
    """Adam on max-margin + KL with a linear temperature anneal and
    early stopping on the dev loss; returns the best-dev checkpoint."""
    for inst in instances:
        for rec in (inst.input, *inst.candidates):
            try:
                embeddings.get(rec.id)
            except KeyError:
                raise KeyError(f"missing embedding for record id {rec.id}") from None

    train_set = [i for i in instances if i.split == "train"] or list(instances)
    dev_set = [i for i in instances if i.split == "dev"] or train_set

    if model is None:
        model = MaskedEncoderModel(model_config or ModelConfig(), seed=config.seed)
    optimizer = ad.Adam(model.trainable(), config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)

    best_dev = np.inf
    best_state = model.state_arrays()
    best_tau = model.tau
    best_epoch = 0
    stale = 0
    train_curve, dev_curve = [], []

    for epoch in range(config.epochs):
        model.tau = config.tau_at(epoch)
        order = rng.permutation(len(train_set))
        epoch_loss, seen = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[lo : lo + config.batch_size]]
            inputs, cands = _instance_rows(batch, embeddings)
            noise = rng.standard_normal((len(batch), model.config.latent))
            parts = instance_loss(model, inputs, cands, mode="train", noise=noise)
            optimizer.zero_grad()
            parts.total.backward()
            optimizer.step()
            epoch_loss += parts.total.item() * len(batch)
            seen += len(batch)
        train_curve.append(epoch_loss / seen)

        dev = dataset_loss(model, dev_set, embeddings)
        dev_curve.append(dev)
        if dev < best_dev - 1e-12:
            best_dev = dev
            best_state = model.state_arrays()
            best_tau = model.tau
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    model.load_state_arrays(best_state)
    model.tau = best_tau
    return TrainResult(model, train_curve, dev_curve, best_epoch)


def predict(model: MaskedEncoderModel, instances, embeddings: EmbeddingTable) -> list[int]:
    """Evaluation-mode candidate choice: cosine argmax over each answer set."""
    chosen = []
    for lo in range(0, len(instances), 256):
        batch = instances[lo : lo + 256]
        inputs = embeddings.rows([inst.input.id for inst in batch])
        _, _, z = model.encode(inputs, mode="eval")
        recon = model.decode(z).data.reshape(len(batch), DIM)
        for row, inst in zip(recon, batch):
            cands = flatten_grid(embeddings.rows([c.id for c in inst.candidates]))
            norms = np.linalg.norm(cands, axis=1) * np.linalg.norm(row)
            sims = np.where(norms > 0, cands @ row / np.where(norms > 0, norms, 1.0), 0.0)
            chosen.append(int(np.argmax(sims)))
    return chosen


def evaluate(
    instances: list[SentenceInstance],
    embeddings: EmbeddingTable,
    model: MaskedEncoderModel,
    seed: int = 0,
) -> EvalResult:
    """Accuracy and macro-F1 over input patterns, predicting the pattern of the
    chosen candidate."""
    chosen = predict(model, instances, embeddings)
    y_true = [inst.input.pattern for inst in instances]
    y_pred = [inst.candidates[c].pattern for inst, c in zip(instances, chosen)]
    labels = sorted(set(y_true))
    return EvalResult(
        accuracy=accuracy(y_true, y_pred),
        macro_f1=macro_f1(y_true, y_pred, labels),
        seed=seed,
        n_instances=len(instances),
    )


# ---------------------------------------------------------------------------
# latent-layer pattern probe

def latent_means(model: MaskedEncoderModel, records, embeddings: EmbeddingTable) -> np.ndarray:
    mus = []
    ids = [r.id for r in records]
    for lo in range(0, len(ids), 512):
        mu, _, _ = model.encode(embeddings.rows(ids[lo : lo + 512]), mode="eval")
        mus.append(mu.data)
    return np.concatenate(mus, axis=0)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    return (a / np.where(na > 0, na, 1.0)) @ (b / np.where(nb > 0, nb, 1.0)).T


def latent_probe(
    train_latents: np.ndarray,
    train_labels: list[str],
    test_latents: np.ndarray,
    test_labels: list[str],
) -> float:
    """Nearest-centroid macro-F1: per-pattern centroids on the training
    latents, cosine-nearest centroid assignment on the test latents."""
    labels = sorted(set(train_labels))
    missing = set(test_labels) - set(labels)
    if missing:
        raise ValueError(f"patterns absent from training latents: {sorted(missing)}")
    centroids = np.stack(
        [np.mean(train_latents[[l == lab for l in train_labels]], axis=0) for lab in labels]
    )
    sims = _cosine_rows(np.asarray(test_latents), centroids)
    predicted = [labels[i] for i in np.argmax(sims, axis=1)]
    return macro_f1(test_labels, predicted, labels)


def dump_latents(model, records, embeddings, path) -> None:
    """Tab-separated per-sentence means: id, K latent values, pattern label."""
    mus = latent_means(model, records, embeddings)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec, mu in zip(records, mus):
            values = "\t".join(f"{v:.17g}" for v in mu)
            fh.write(f"{rec.id}\t{values}\t{rec.pattern}\n")


def read_latents(path) -> tuple[list[int], np.ndarray, list[str]]:
    ids, rows, labels = [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        ids.append(int(parts[0]))
        rows.append([float(v) for v in parts[1:-1]])
        labels.append(parts[-1])
    return ids, np.asarray(rows), labels


def summarize_runs(results: list[EvalResult]) -> dict:
    accs = [r.accuracy for r in results]
    f1s = [r.macro_f1 for r in results]
    acc_m, acc_s = mean_std(accs)
    f1_m, f1_s = mean_std(f1s)
    return {
        "runs": len(results),
        "accuracy_mean": acc_m,
        "accuracy_std": acc_s,
        "macro_f1_mean": f1_m,
        "macro_f1_std": f1_s,
    }
