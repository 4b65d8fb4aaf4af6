"""Sequence-completion matrix tasks (BLM): template generation, interchange
files and the two-level variational encoder-decoder that solves them.

An instance is a 7-sentence context built by fixed structural rules plus an
answer set in which exactly one candidate continues the sequence correctly;
the wrong candidates each corrupt one named property.  The two-level model
compresses every context sentence with the (optionally sparsified) sentence
encoder and solves the task from the concatenated sentence latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from random import Random

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .embeddings import DIM, EmbeddingTable, flatten_grid
from .grammar import DataError, Lexicon, SentenceRecord
from .metrics import accuracy, macro_f1
from .model import MaskedEncoderModel, ModelConfig
from .training import TrainConfig

TASKS = ("agreement", "alternation-ALT-ATL", "alternation-ATL-ALT")
VARIATIONS = ("I", "II", "III")

AGREEMENT_CONTEXT = (
    "np-sg pp1-sg vp-sg",
    "np-pl pp1-sg vp-pl",
    "np-sg pp1-pl vp-sg",
    "np-pl pp1-pl vp-pl",
    "np-sg pp1-sg pp2-sg vp-sg",
    "np-pl pp1-sg pp2-sg vp-pl",
    "np-sg pp1-pl pp2-sg vp-sg",
)

# answer set: the sequence continuation plus seven named corruptions
AGREEMENT_ANSWERS = (
    ("Coord", "np-sg pp1-sg cnp-sg vp-sg"),
    ("correct", "np-pl pp1-pl pp2-sg vp-pl"),
    ("WNA", "np-sg pp1-sg vp-sg"),
    ("AE_V", "np-pl pp1-pl pp2-sg vp-sg"),
    ("AE_N1", "np-pl pp1-sg pp2-sg vp-sg"),
    ("AE_N2", "np-pl pp1-pl pp2-pl vp-sg"),
    ("WN1", "np-pl pp1-sg pp2-sg vp-pl"),
    ("WN2", "np-pl pp1-pl pp2-pl vp-pl"),
)

ALT_ATL_CONTEXT = (
    "np:agent vb:act np:loc pp:theme",
    "np:theme vb:pass pp:agent",
    "np:theme vb:pass pp:loc pp:agent",
    "np:theme vb:pass pp:loc",
    "np:loc vb:pass pp:agent",
    "np:loc vb:pass pp:theme pp:agent",
    "np:loc vb:pass pp:theme",
)

ALT_ATL_ANSWERS = (
    ("Correct", "np:agent vb:act np:theme pp:loc"),
    ("AgentAct", "np:agent vb:pass np:theme pp:loc"),
    ("Alt1", "np:agent vb:act np:theme np:loc"),
    ("Alt2", "np:agent vb:act pp:theme pp:loc"),
    ("NoEmb", "np:agent vb:act np:theme"),
    ("LexPrep", "np:agent vb:act np:theme pp~:loc"),
    ("SSM1", "np:theme vb:act np:agent pp:loc"),
    ("SSM2", "np:loc vb:act np:agent pp:theme"),
    ("AASSM", "np:theme vb:act np:loc pp:agent"),
)

CORRECT_TAGS = {"correct", "Correct"}


def _swap_roles(pattern: str) -> str:
    return (
        pattern.replace(":theme", ":@")
        .replace(":loc", ":theme")
        .replace(":@", ":loc")
    )


@dataclass(frozen=True)
class BLMTemplate:
    task: str
    context: tuple[str, ...]
    answers: tuple[tuple[str, str], ...]

    @property
    def n_candidates(self) -> int:
        return len(self.answers)

    @property
    def correct_tag(self) -> str:
        return next(tag for tag, _ in self.answers if tag in CORRECT_TAGS)


def template_for(task: str) -> BLMTemplate:
    if task == "agreement":
        return BLMTemplate(task, AGREEMENT_CONTEXT, AGREEMENT_ANSWERS)
    if task == "alternation-ALT-ATL":
        return BLMTemplate(task, ALT_ATL_CONTEXT, ALT_ATL_ANSWERS)
    if task == "alternation-ATL-ALT":
        context = tuple(_swap_roles(p) for p in ALT_ATL_CONTEXT)
        answers = tuple((tag, _swap_roles(p)) for tag, p in ALT_ATL_ANSWERS)
        return BLMTemplate(task, context, answers)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass(frozen=True)
class BLMInstance:
    context: tuple[SentenceRecord, ...]
    candidates: tuple[SentenceRecord, ...]
    tags: tuple[str, ...]
    correct_index: int
    variation: str
    split: str = "train"

    def validate(self, template: BLMTemplate | None = None) -> None:
        if len(self.context) != 7:
            raise DataError(f"expected 7 context sentences, got {len(self.context)}")
        if len(self.candidates) != len(self.tags):
            raise DataError("candidate/tag length mismatch")
        correct = [i for i, t in enumerate(self.tags) if t in CORRECT_TAGS]
        if correct != [self.correct_index]:
            raise DataError("exactly one candidate must carry the correct tag")
        if self.variation not in VARIATIONS:
            raise DataError(f"bad variation {self.variation!r}")
        if template is not None:
            if len(self.candidates) != template.n_candidates:
                raise DataError(
                    f"expected {template.n_candidates} candidates, got {len(self.candidates)}"
                )
            for rec, pattern in zip(self.context, template.context):
                if rec.pattern != pattern:
                    raise DataError(
                        f"context row pattern {rec.pattern!r} does not match template {pattern!r}"
                    )
            if set(self.tags) != {tag for tag, _ in template.answers}:
                raise DataError("error tags do not match the template answer set")


# ---------------------------------------------------------------------------
# alternation lexicon

@dataclass(frozen=True)
class AltLexicon:
    """Role nouns, active/passive verb pairs and per-role prepositions."""

    nouns: dict[str, tuple[str, ...]]
    verbs_act: tuple[str, ...]
    verbs_pass: tuple[str, ...]
    preps: dict[str, tuple[str, ...]]
    wrong_preps: dict[str, tuple[str, ...]]

    def validate(self) -> None:
        for role in ("agent", "theme", "loc"):
            if not self.nouns.get(role):
                raise DataError(f"alternation lexicon missing nouns for role {role!r}")
            if not self.preps.get(role):
                raise DataError(f"alternation lexicon missing prepositions for role {role!r}")
            if not self.wrong_preps.get(role):
                raise DataError(f"alternation lexicon missing wrong prepositions for {role!r}")
        if not self.verbs_act or len(self.verbs_act) != len(self.verbs_pass):
            raise DataError("alternation lexicon verbs must pair active and passive forms")


def load_alt_lexicon(path: str | Path) -> AltLexicon:
    nouns: dict[str, list[str]] = {}
    preps: dict[str, list[str]] = {}
    wrong: dict[str, list[str]] = {}
    verbs_act: list[str] = []
    verbs_pass: list[str] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        cat, slot, form = parts
        if cat == "anp":
            nouns.setdefault(slot, []).append(form)
        elif cat == "verb_act":
            verbs_act.append(form)
        elif cat == "verb_pass":
            verbs_pass.append(form)
        elif cat == "prep":
            preps.setdefault(slot, []).append(form)
        elif cat == "prep_wrong":
            wrong.setdefault(slot, []).append(form)
        else:
            raise DataError(f"{path}:{lineno}: unknown category {cat!r}")
    lex = AltLexicon(
        nouns={k: tuple(v) for k, v in nouns.items()},
        verbs_act=tuple(verbs_act),
        verbs_pass=tuple(verbs_pass),
        preps={k: tuple(v) for k, v in preps.items()},
        wrong_preps={k: tuple(v) for k, v in wrong.items()},
    )
    lex.validate()
    return lex


def default_alt_lexicon_path() -> Path:
    return Path(__file__).parent / "data" / "lexicon_alternation.tsv"


# ---------------------------------------------------------------------------
# surface realization

AGREEMENT_SLOTS = ("np", "pp1", "pp2", "vp", "np2")
ALTERNATION_SLOTS = ("agent", "theme", "loc", "verb")


def _agreement_slot_sizes(lexicon: Lexicon) -> dict[str, int]:
    sizes = {}
    for kind in ("np", "pp1", "pp2", "vp"):
        n_sg = len(lexicon.entries[(kind, "sg")])
        n_pl = len(lexicon.entries[(kind, "pl")])
        if n_sg != n_pl:
            raise DataError(
                f"slot {kind!r} needs paired sg/pl lemmas for matrix generation "
                f"({n_sg} sg vs {n_pl} pl)"
            )
        sizes[kind] = n_sg
    sizes["np2"] = sizes["np"]
    return sizes


def _realize_agreement(pattern: str, lexicon: Lexicon, assignment: dict[str, int]) -> str:
    parts = []
    for token in pattern.split():
        kind, _, num = token.partition("-")
        if kind == "cnp":
            parts.append(lexicon.coord[0])
            parts.append(lexicon.entries[("np", num)][assignment["np2"]])
        elif kind in ("pp1", "pp2"):
            parts.append(lexicon.preps[kind][0])
            parts.append(lexicon.entries[(kind, num)][assignment[kind]])
        else:
            parts.append(lexicon.entries[(kind, num)][assignment[kind]])
    return " ".join(parts)


def _realize_alternation(pattern: str, lexicon: AltLexicon, assignment: dict[str, int]) -> str:
    parts = []
    for token in pattern.split():
        head, _, role = token.partition(":")
        if head == "np":
            parts.append(lexicon.nouns[role][assignment[role]])
        elif head == "vb":
            verbs = lexicon.verbs_act if role == "act" else lexicon.verbs_pass
            parts.append(verbs[assignment["verb"]])
        elif head == "pp":
            parts.append(lexicon.preps[role][0])
            parts.append(lexicon.nouns[role][assignment[role]])
        elif head == "pp~":
            parts.append(lexicon.wrong_preps[role][0])
            parts.append(lexicon.nouns[role][assignment[role]])
        else:
            raise DataError(f"cannot realize token {token!r}")
    return " ".join(parts)


def _vary(assignment: dict[str, int], sizes: dict[str, int], variation: str, rng: Random):
    """Next row's lexical assignment under the instance's variation regime."""
    if variation == "I":
        return assignment
    if variation == "II":
        slot = rng.choice(sorted(sizes))
        out = dict(assignment)
        out[slot] = rng.randrange(sizes[slot])
        return out
    return {slot: rng.randrange(size) for slot, size in sizes.items()}


def generate_blm(
    task: str,
    lexicon: Lexicon | AltLexicon,
    n: int,
    variation: str,
    seed: int,
    split: str = "train",
    start_id: int = 0,
) -> tuple[list[SentenceRecord], list[BLMInstance]]:
    """Build n instances; variation I reuses one lexical assignment across the
    whole instance, II resamples one slot per row, III resamples every slot."""
    if variation not in VARIATIONS:
        raise DataError(f"unknown variation {variation!r}")
    template = template_for(task)
    if task == "agreement":
        if not isinstance(lexicon, Lexicon):
            raise DataError("agreement generation needs the chunk lexicon")
        sizes = _agreement_slot_sizes(lexicon)
        realize = lambda pattern, asg: _realize_agreement(pattern, lexicon, asg)
    else:
        if not isinstance(lexicon, AltLexicon):
            raise DataError("alternation generation needs the role lexicon")
        lexicon.validate()
        sizes = {
            "agent": len(lexicon.nouns["agent"]),
            "theme": len(lexicon.nouns["theme"]),
            "loc": len(lexicon.nouns["loc"]),
            "verb": len(lexicon.verbs_act),
        }
        realize = lambda pattern, asg: _realize_alternation(pattern, lexicon, asg)

    rng = Random(f"{seed}/blm/{task}/{variation}/{split}")
    records: list[SentenceRecord] = []
    instances: list[BLMInstance] = []
    next_id = start_id

    def record(pattern: str, assignment) -> SentenceRecord:
        nonlocal next_id
        rec = SentenceRecord(next_id, realize(pattern, assignment), pattern, split)
        next_id += 1
        records.append(rec)
        return rec

    for _ in range(n):
        assignment = {slot: rng.randrange(size) for slot, size in sizes.items()}
        context = []
        row_assignment = assignment
        for row_pattern in template.context:
            context.append(record(row_pattern, row_assignment))
            row_assignment = _vary(row_assignment, sizes, variation, rng)
        answer_assignment = row_assignment  # the variation process continued to row 8
        order = list(range(template.n_candidates))
        rng.shuffle(order)
        candidates = tuple(record(template.answers[i][1], answer_assignment) for i in order)
        tags = tuple(template.answers[i][0] for i in order)
        correct_index = tags.index(template.correct_tag)
        inst = BLMInstance(tuple(context), candidates, tags, correct_index, variation, split)
        inst.validate(template)
        instances.append(inst)
    return records, instances


# ---------------------------------------------------------------------------
# interchange files

def write_blm(instances: list[BLMInstance], path: str | Path, task: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# blm-task: {task}\n")
        for inst in instances:
            ctx = ",".join(str(r.id) for r in inst.context)
            cand = ",".join(str(r.id) for r in inst.candidates)
            tags = ",".join(inst.tags)
            fh.write(
                f"{ctx}\t{len(inst.candidates)}\t{cand}\t{tags}\t"
                f"{inst.correct_index}\t{inst.variation}\t{inst.split}\n"
            )


def load_blm(
    path: str | Path,
    records: list[SentenceRecord],
    task: str | None = None,
) -> tuple[str, list[BLMInstance]]:
    """Read an interchange file; validation errors carry the line number."""
    by_id = {r.id: r for r in records}
    instances: list[BLMInstance] = []
    file_task = task
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if line.startswith("# blm-task:"):
                file_task = line.split(":", 1)[1].strip()
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise DataError(f"{path}:{lineno}: expected 7 tab-separated fields")
            try:
                ctx_ids = [int(x) for x in parts[0].split(",")]
                count = int(parts[1])
                cand_ids = [int(x) for x in parts[2].split(",")]
                tags = tuple(parts[3].split(","))
                correct_index = int(parts[4])
                variation, split = parts[5], parts[6]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if len(cand_ids) != count:
                raise DataError(
                    f"{path}:{lineno}: candidate count {count} does not match {len(cand_ids)} ids"
                )
            try:
                context = tuple(by_id[i] for i in ctx_ids)
                candidates = tuple(by_id[i] for i in cand_ids)
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: unknown record id {exc}") from None
            inst = BLMInstance(context, candidates, tags, correct_index, variation, split)
            try:
                template = template_for(file_task) if file_task else None
                inst.validate(template)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            instances.append(inst)
    if file_task is None:
        raise DataError(f"{path}: no task header and none supplied")
    return file_task, instances


# ---------------------------------------------------------------------------
# two-level model

class TwoLevelModel:
    """Sentence-level masked encoder-decoder feeding a dense matrix-level VAE.

    The 7 sentence latents are concatenated (7x5 = 35), compressed to a 5-unit
    matrix latent and decoded back to a 32x24 sentence representation through
    a mirror of the sentence decoder.  Only the sentence level is sparsified.
    """

    def __init__(self, sentence: MaskedEncoderModel, seed: int = 0):
        self.sentence = sentence
        k = sentence.config.latent
        spec = sentence.config.conv
        rng = np.random.default_rng(seed + 104729)
        width = 7 * k
        self.blm_enc_weight = ad.Tensor(rng.normal(0, width**-0.5, (width, 2 * k)), requires_grad=True)
        self.blm_enc_bias = ad.Tensor(np.zeros(2 * k), requires_grad=True)
        self.blm_dec_weight = ad.Tensor(rng.normal(0, k**-0.5, (k, spec.nodes)), requires_grad=True)
        self.blm_dec_bias = ad.Tensor(np.zeros(spec.nodes), requires_grad=True)
        self.blm_dec_kernel = ad.Tensor(
            rng.normal(0, spec.channels**-0.5, (spec.channels, spec.kernel_rows, spec.kernel_cols)),
            requires_grad=True,
        )
        self.blm_dec_out_bias = ad.Tensor(np.zeros(()), requires_grad=True)

    def parameters(self) -> dict[str, ad.Tensor]:
        named = {f"sentence.{k}": v for k, v in self.sentence.parameters().items()}
        named.update(
            blm_enc_weight=self.blm_enc_weight,
            blm_enc_bias=self.blm_enc_bias,
            blm_dec_weight=self.blm_dec_weight,
            blm_dec_bias=self.blm_dec_bias,
            blm_dec_kernel=self.blm_dec_kernel,
            blm_dec_out_bias=self.blm_dec_out_bias,
        )
        return named

    def trainable(self) -> list[ad.Tensor]:
        return [t for t in self.parameters().values() if t.requires_grad]

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_arrays(self, arrays) -> None:
        for name, tensor in self.parameters().items():
            tensor.data = np.array(arrays[name], dtype=np.float64)

    def forward(self, ctx: np.ndarray, mode: str, noise_sent=None, noise_blm=None):
        """ctx (B, 7, rows, cols) -> decoded (B, rows, cols) plus KL pieces."""
        batch, n_ctx = ctx.shape[0], ctx.shape[1]
        k = self.sentence.config.latent
        flat_ctx = ctx.reshape(batch * n_ctx, ctx.shape[2], ctx.shape[3])
        mu_s, lv_s, z_s = self.sentence.encode(flat_ctx, mode=mode, noise=noise_sent)
        seq = ad.reshape(z_s, (batch, n_ctx * k))
        heads = ad.linear(seq, self.blm_enc_weight, self.blm_enc_bias)
        mu_b, lv_b = _split_heads(heads, k)
        if mode == "train":
            if noise_blm is None:
                raise ValueError("train-mode forward requires matrix-level noise")
            z_b = ad.reparam_sample(mu_b, lv_b, noise_blm)
        else:
            z_b = mu_b
        h = ad.tanh(ad.linear(z_b, self.blm_dec_weight, self.blm_dec_bias))
        spec = self.sentence.config.conv
        gh, gw = spec.grid
        h = ad.reshape(h, (batch, spec.channels, gh, gw))
        decoded = ad.conv2d_transpose(h, self.blm_dec_kernel, self.blm_dec_out_bias, spec)
        kl_sent = ad.sum_axis(
            ad.reshape(ad.kl_standard_normal(mu_s, lv_s), (batch, n_ctx)), 1
        )
        kl_blm = ad.kl_standard_normal(mu_b, lv_b)
        return decoded, kl_sent, kl_blm

    def save(self, path, meta_extra: dict | None = None) -> None:
        blocks = self.state_arrays()
        blocks["temperature"] = np.asarray(self.sentence.tau)
        spec = self.sentence.config.conv
        meta = {
            "kind": "two-level",
            "conv": [spec.in_rows, spec.in_cols, spec.channels, spec.kernel_rows, spec.kernel_cols],
            "latent": self.sentence.config.latent,
            "sparsify": self.sentence.config.sparsify,
            "activation": self.sentence.config.activation,
        }
        if meta_extra:
            meta.update(meta_extra)
        save_checkpoint(path, blocks, meta)

    @classmethod
    def load(cls, path) -> "TwoLevelModel":
        blocks, meta = load_checkpoint(path)
        config = ModelConfig(
            conv=ad.ConvSpec(*meta["conv"]),
            latent=meta["latent"],
            sparsify=meta["sparsify"],
            activation=meta["activation"],
        )
        sentence = MaskedEncoderModel(config, seed=0)
        model = cls(sentence, seed=0)
        model.sentence.tau = float(blocks.pop("temperature"))
        model.load_state_arrays(blocks)
        return model


def _split_heads(heads: ad.Tensor, k: int):
    full_shape = heads.data.shape

    def pad(g, col0, col1):
        out = np.zeros(full_shape)
        out[:, col0:col1] = g
        return out

    mu = ad.Tensor(heads.data[:, :k], parents=(heads,))
    mu._backward = lambda g: heads.accumulate(pad(g, 0, k))
    lv = ad.Tensor(heads.data[:, k:], parents=(heads,))
    lv._backward = lambda g: heads.accumulate(pad(g, k, 2 * k))
    return mu, lv


# ---------------------------------------------------------------------------
# training and evaluation

@dataclass
class BLMEvalResult:
    accuracy: float
    macro_f1: float
    tag_counts: dict[str, int]
    seed: int
    n_instances: int


@dataclass
class BLMTrainResult:
    model: TwoLevelModel
    train_loss: list[float]
    dev_loss: list[float]
    best_epoch: int


def _blm_rows(instances, embeddings: EmbeddingTable):
    ctx = np.stack(
        [embeddings.rows([r.id for r in inst.context]) for inst in instances]
    )
    cand_ids = []
    for inst in instances:
        ordered = [inst.candidates[inst.correct_index].id]
        ordered += [c.id for i, c in enumerate(inst.candidates) if i != inst.correct_index]
        cand_ids.append(ordered)
    n_cand = len(cand_ids[0])
    flat = embeddings.rows([cid for row in cand_ids for cid in row])
    cands = flatten_grid(flat).reshape(len(instances), n_cand, DIM)
    return ctx, cands


def blm_loss(model: TwoLevelModel, ctx, cands, mode, noise_sent=None, noise_blm=None):
    decoded, kl_sent, kl_blm = model.forward(ctx, mode, noise_sent, noise_blm)
    recon = ad.reshape(decoded, (ctx.shape[0], DIM))
    n_cand = cands.shape[1]
    s_correct = ad.cosine(recon, ad.Tensor(cands[:, 0]))
    s_errs = ad.concat_rows(
        [ad.reshape(ad.cosine(recon, ad.Tensor(cands[:, j])), (-1, 1)) for j in range(1, n_cand)]
    )
    margin = ad.mean_all(ad.maxmargin_loss(s_correct, s_errs))
    kl = ad.add(ad.mean_all(kl_sent), ad.mean_all(kl_blm))
    return ad.add(margin, kl), margin, kl


def train_two_level(
    instances: list[BLMInstance],
    embeddings: EmbeddingTable,
    config: TrainConfig,
    sentence_model: MaskedEncoderModel | None = None,
    model_config: ModelConfig | None = None,
) -> BLMTrainResult:
    """Joint training of both levels; pass a pretrained ``sentence_model`` for
    the pretrain-then-joint regime, otherwise both levels start from scratch.

    With a pretrained sentence level the mask temperature stays at its final
    (near-hard) value; training from scratch follows the anneal schedule.
    """
    for inst in instances:
        for rec in (*inst.context, *inst.candidates):
            try:
                embeddings.get(rec.id)
            except KeyError:
                raise KeyError(f"missing embedding for record id {rec.id}") from None

    pretrained = sentence_model is not None
    if sentence_model is None:
        sentence_model = MaskedEncoderModel(model_config or ModelConfig(), seed=config.seed)
    model = TwoLevelModel(sentence_model, seed=config.seed)

    train_set = [i for i in instances if i.split == "train"] or list(instances)
    dev_set = [i for i in instances if i.split == "dev"] or train_set

    optimizer = ad.Adam(model.trainable(), config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    k = sentence_model.config.latent

    best_dev = np.inf
    best_state = model.state_arrays()
    best_tau = sentence_model.tau
    best_epoch = 0
    stale = 0
    train_curve, dev_curve = [], []

    def dev_loss() -> float:
        total = 0.0
        for lo in range(0, len(dev_set), 128):
            batch = dev_set[lo : lo + 128]
            ctx, cands = _blm_rows(batch, embeddings)
            loss, _, _ = blm_loss(model, ctx, cands, mode="eval")
            total += loss.item() * len(batch)
        return total / len(dev_set)

    for epoch in range(config.epochs):
        if not pretrained:
            sentence_model.tau = config.tau_at(epoch)
        order = rng.permutation(len(train_set))
        epoch_loss, seen = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[lo : lo + config.batch_size]]
            ctx, cands = _blm_rows(batch, embeddings)
            noise_sent = rng.standard_normal((len(batch) * 7, k))
            noise_blm = rng.standard_normal((len(batch), k))
            loss, _, _ = blm_loss(model, ctx, cands, "train", noise_sent, noise_blm)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
            seen += len(batch)
        train_curve.append(epoch_loss / seen)

        dev = dev_loss()
        dev_curve.append(dev)
        if dev < best_dev - 1e-12:
            best_dev, best_epoch, stale = dev, epoch, 0
            best_state = model.state_arrays()
            best_tau = sentence_model.tau
        else:
            stale += 1
            if stale > config.patience:
                break

    model.load_state_arrays(best_state)
    sentence_model.tau = best_tau
    return BLMTrainResult(model, train_curve, dev_curve, best_epoch)


def chance_baseline(instances: list[BLMInstance], seed: int = 0, trials: int = 200) -> float:
    """Uniform random candidate selection, averaged over ``trials`` draws."""
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        for inst in instances:
            if rng.integers(len(inst.candidates)) == inst.correct_index:
                hits += 1
    return hits / (trials * len(instances))


def evaluate_blm(
    model: TwoLevelModel,
    instances: list[BLMInstance],
    embeddings: EmbeddingTable,
    seed: int = 0,
) -> BLMEvalResult:
    """Cosine-argmax candidate choice plus per-error-tag selection counts."""
    tag_counts: dict[str, int] = {}
    correct_flags: list[bool] = []
    y_true: list[str] = []
    y_pred: list[str] = []
    for lo in range(0, len(instances), 128):
        batch = instances[lo : lo + 128]
        ctx = np.stack([embeddings.rows([r.id for r in inst.context]) for inst in batch])
        decoded, _, _ = model.forward(ctx, mode="eval")
        recon = decoded.data.reshape(len(batch), DIM)
        for row, inst in zip(recon, batch):
            cands = flatten_grid(embeddings.rows([c.id for c in inst.candidates]))
            norms = np.linalg.norm(cands, axis=1) * np.linalg.norm(row)
            sims = np.where(norms > 0, cands @ row / np.where(norms > 0, norms, 1.0), 0.0)
            chosen = int(np.argmax(sims))
            tag = inst.tags[chosen]
            tag_counts[tag] = tag_counts.get(tag, 0) + 1
            correct_flags.append(chosen == inst.correct_index)
            y_true.append(inst.tags[inst.correct_index])
            y_pred.append(tag)
    labels = sorted({t for inst in instances for t in inst.tags})
    return BLMEvalResult(
        accuracy=sum(correct_flags) / len(correct_flags),
        macro_f1=macro_f1(y_true, y_pred, labels),
        tag_counts=tag_counts,
        seed=seed,
        n_instances=len(instances),
    )
