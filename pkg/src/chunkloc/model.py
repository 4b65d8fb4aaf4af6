"""The sentence-level variational encoder-decoder, full and sparsified.

Encoder: strided convolution -> pointwise nonlinearity -> masked dense layer
producing a 5-unit mean and log-variance.  Decoder mirrors it: dense 5 -> 240,
nonlinearity, transposed convolution back to 32x24.  Sparsification multiplies
the dense weights by softmax(mask_logits / tau) per node, hardened to one-hot
at evaluation so every CNN output node feeds exactly one latent unit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint

LATENT = 5


@dataclass(frozen=True)
class ModelConfig:
    conv: ad.ConvSpec = field(default_factory=ad.ConvSpec)
    latent: int = LATENT
    sparsify: bool = True
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class MaskedEncoderModel:
    """Holds all trainable tensors plus the mask logits and temperature."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.tau = 1.0
        spec = config.conv
        k = config.latent
        rng = np.random.default_rng(seed)

        def param(shape, scale):
            return ad.Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        kernel_fan = spec.kernel_rows * spec.kernel_cols
        self.enc_kernel = param((spec.channels, spec.kernel_rows, spec.kernel_cols), kernel_fan**-0.5)
        self.enc_bias = ad.Tensor(np.zeros(spec.channels), requires_grad=True)
        self.enc_weight = param((spec.nodes, 2 * k), spec.nodes**-0.5)
        self.enc_head_bias = ad.Tensor(np.zeros(2 * k), requires_grad=True)
        self.mask_logits = ad.Tensor(
            rng.normal(0.0, 0.01, (spec.nodes, k)), requires_grad=config.sparsify
        )
        self.dec_weight = param((k, spec.nodes), k**-0.5)
        self.dec_bias = ad.Tensor(np.zeros(spec.nodes), requires_grad=True)
        self.dec_kernel = param((spec.channels, spec.kernel_rows, spec.kernel_cols), spec.channels**-0.5)
        self.dec_out_bias = ad.Tensor(np.zeros(()), requires_grad=True)

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self) -> dict[str, ad.Tensor]:
        named = {
            "enc_kernel": self.enc_kernel,
            "enc_bias": self.enc_bias,
            "enc_weight": self.enc_weight,
            "enc_head_bias": self.enc_head_bias,
            "mask_logits": self.mask_logits,
            "dec_weight": self.dec_weight,
            "dec_bias": self.dec_bias,
            "dec_kernel": self.dec_kernel,
            "dec_out_bias": self.dec_out_bias,
        }
        return named

    def trainable(self) -> list[ad.Tensor]:
        return [t for t in self.parameters().values() if t.requires_grad]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.parameters().items():
            tensor.data = np.array(arrays[name], dtype=np.float64)

    # -- forward passes --------------------------------------------------------

    def _activation(self):
        return ad.ACTIVATIONS[self.config.activation]

    def conv_node_values(self, x: np.ndarray) -> np.ndarray:
        """Pre-activation CNN output nodes, (B, nodes); no gradient tracking."""
        out = ad.conv2d(
            ad.Tensor(_as_batch(x)),
            ad.Tensor(self.enc_kernel.data),
            ad.Tensor(self.enc_bias.data),
            self.config.conv,
        )
        return out.data.reshape(out.data.shape[0], self.config.conv.nodes)

    def encode(
        self,
        x,
        mode: str = "eval",
        noise: np.ndarray | None = None,
        tau: float | None = None,
    ) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        """Return (mu, logvar, z); z is sampled in train mode, mu at evaluation."""
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        x = ad.as_tensor(_as_batch(x))
        h = ad.conv2d(x, self.enc_kernel, self.enc_bias, self.config.conv)
        h = self._activation()(h)
        flat = ad.flatten_nodes(h, self.config.conv)
        mu, logvar = ad.masked_linear(
            flat,
            self.enc_weight,
            self.enc_head_bias,
            self.mask_logits if self.config.sparsify else None,
            tau if tau is not None else self.tau,
            self.config.latent,
            hard=self.config.sparsify and mode == "eval",
        )
        if mode == "train":
            if noise is None:
                raise ValueError("train-mode encode requires a noise array")
            z = ad.reparam_sample(mu, logvar, noise)
        else:
            z = mu
        return mu, logvar, z

    def decode(self, z) -> ad.Tensor:
        """(B, K) latent -> (B, 32, 24) reconstruction."""
        z = ad.as_tensor(z)
        if z.data.ndim == 1:
            z = ad.reshape(z, (1,) + z.data.shape)
        h = ad.linear(z, self.dec_weight, self.dec_bias)
        h = self._activation()(h)
        gh, gw = self.config.conv.grid
        h = ad.reshape(h, (h.data.shape[0], self.config.conv.channels, gh, gw))
        return ad.conv2d_transpose(h, self.dec_kernel, self.dec_out_bias, self.config.conv)

    # -- sparsification structure ----------------------------------------------

    def hardened_assignment(self) -> np.ndarray:
        return ad.harden_mask(self.mask_logits.data)

    def unit_node_sets(self) -> list[set[int]]:
        assignment = self.hardened_assignment()
        return [set(np.nonzero(assignment == k)[0]) for k in range(self.config.latent)]

    def unit_regions(self, unit: int) -> set[int]:
        """Embedding regions feeding one latent unit under the hardened mask."""
        spec = self.config.conv
        assignment = self.hardened_assignment()
        return {spec.node_region(n) for n in np.nonzero(assignment == unit)[0]}

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        blocks = self.state_arrays()
        blocks["temperature"] = np.asarray(self.tau)
        spec = self.config.conv
        meta = {
            "kind": "masked-encoder",
            "conv": [spec.in_rows, spec.in_cols, spec.channels, spec.kernel_rows, spec.kernel_cols],
            "latent": self.config.latent,
            "sparsify": self.config.sparsify,
            "activation": self.config.activation,
        }
        save_checkpoint(path, blocks, meta)

    @classmethod
    def load(cls, path) -> "MaskedEncoderModel":
        blocks, meta = load_checkpoint(path)
        spec = ad.ConvSpec(*meta["conv"])
        config = ModelConfig(
            conv=spec,
            latent=meta["latent"],
            sparsify=meta["sparsify"],
            activation=meta["activation"],
        )
        model = cls(config, seed=0)
        model.tau = float(blocks.pop("temperature"))
        model.load_state_arrays(blocks)
        return model


def _as_batch(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def score(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two embedding matrices, flattened; zero norm -> 0."""
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch {av.shape} vs {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0 or nb == 0:
        warnings.warn("score of a zero-norm embedding defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(av @ bv / (na * nb))


def path_isolation_check(
    model: MaskedEncoderModel,
    base: np.ndarray,
    unit: int,
    rng: np.random.Generator,
    magnitude: float = 1.0,
) -> bool:
    """Perturb every cell outside the regions feeding ``unit`` (hardened mask)
    and verify the unit's evaluation-mode mean is bitwise unchanged."""
    spec = model.config.conv
    fed = model.unit_regions(unit)
    mask = np.zeros((spec.in_rows, spec.in_cols), dtype=bool)
    for region in range(spec.n_regions):
        if region not in fed:
            r0, r1, c0, c1 = spec.region_bounds(region)
            mask[r0:r1, c0:c1] = True
    perturbed = np.array(base, dtype=np.float64)
    perturbed[mask] += rng.normal(0.0, magnitude, int(mask.sum()))
    mu_base, _, _ = model.encode(base, mode="eval")
    mu_pert, _, _ = model.encode(perturbed, mode="eval")
    return bool(np.all(mu_base.data[:, unit] == mu_pert.data[:, unit]))
