"""
Permutation-invariant set autoencoder.

A set ``{x_1..x_n}`` of ``d_obs``-dimensional vectors is encoded as

    z = sum_i psi_key(k_i) * psi_val(x_i) + card_embed[n]

where ``k_i`` is the sinusoidal encoding of element ``i``'s rank after sorting
the set lexicographically. Decoding predicts the cardinality with
``card_dec(z)`` and reconstructs element ``i`` as ``phi_dec(phi_key(k_i) * z)``.

Sets are handled in padded batches (:class:`SetBatch`), already sorted into
canonical order, so the sum over elements is performed in the same order for
any permutation of the input and the latent is bit-for-bit invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, ConfigurationError, NumericalError
from .nn import Mlp, MlpTape, Tensors, adam_init, adam_step, cross_entropy, init_mlp

ENCODER_PREFIXES = ("psi_key", "psi_val", "card_embed")


def positional_encoding(n: int, dim: int, base: float = 100.0) -> np.ndarray:
    """Sinusoidal encoding of the integers ``0..n-1``; shape ``(n, dim)``."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return pe


def canonical_order(elements: np.ndarray) -> np.ndarray:
    """Indices sorting the rows of ``elements`` lexicographically (stable)."""
    elements = np.asarray(elements, dtype=np.float64)
    if elements.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(elements.T[::-1])


def assign_keys(elements: np.ndarray, d_key: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Sort a set canonically and attach rank keys.

    Returns ``(sorted_elements, keys)`` where ``keys[i]`` is the positional
    encoding of rank ``i``.
    """
    elements = np.asarray(elements, dtype=np.float64)
    order = canonical_order(elements)
    return elements[order], positional_encoding(len(order), d_key)


@dataclass(frozen=True)
class SetBatch:
    """Padded batch of canonically sorted sets.

    ``elements`` has shape ``(batch, length, d_obs)``; rows at or beyond
    ``counts[b]`` are zero.
    """

    elements: np.ndarray
    counts: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.elements.shape[1])[None, :] < self.counts[:, None]

    def __len__(self) -> int:
        return self.elements.shape[0]

    def sets(self) -> list[np.ndarray]:
        return [self.elements[b, : self.counts[b]] for b in range(len(self))]

    def take(self, idx: np.ndarray) -> SetBatch:
        counts = self.counts[idx]
        length = int(counts.max()) if len(counts) else 0
        return SetBatch(self.elements[idx, :length], counts)

    @classmethod
    def from_sets(cls, sets: Iterable[np.ndarray], d_obs: int | None = None) -> SetBatch:
        sets = [np.asarray(s, dtype=np.float64).reshape(-1, d_obs if d_obs else np.shape(s)[-1]) for s in sets]
        if d_obs is None:
            if not sets:
                raise ConfigurationError("cannot infer d_obs from an empty list of sets")
            d_obs = sets[0].shape[1]
        counts = np.array([len(s) for s in sets], dtype=np.int64)
        length = int(counts.max()) if len(counts) else 0
        out = np.zeros((len(sets), length, d_obs))
        for b, s in enumerate(sets):
            if s.shape[1] != d_obs:
                raise ConfigurationError("all set elements must share one dimension")
            out[b, : len(s)] = s[canonical_order(s)]
        return cls(out, counts)

    @classmethod
    def from_padded(cls, elements: np.ndarray, counts: np.ndarray) -> SetBatch:
        """Canonicalise a padded batch whose first ``counts[b]`` rows are valid."""
        elements = np.asarray(elements, dtype=np.float64)
        counts = np.asarray(counts, dtype=np.int64)
        valid = np.arange(elements.shape[1])[None, :] < counts[:, None]
        return cls.from_masked(elements, valid)

    @classmethod
    def from_masked(cls, elements: np.ndarray, valid: np.ndarray) -> SetBatch:
        """Canonicalise sets given as rows of ``elements`` selected by ``valid``.

        Valid rows of each set are sorted lexicographically (stable) and moved
        to the front; the remaining rows are zeroed.
        """
        elements = np.asarray(elements, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        b, length, d = elements.shape
        counts = valid.sum(axis=1).astype(np.int64)
        flat = elements.reshape(b * length, d)
        set_id = np.repeat(np.arange(b), length)
        keys = [flat[:, j] for j in range(d - 1, -1, -1)] + [~valid.reshape(-1), set_id]
        order = np.lexsort(keys)
        out = flat[order].reshape(b, length, d)
        out[np.arange(length)[None, :] >= counts[:, None]] = 0.0
        return cls(out, counts)


@dataclass(frozen=True)
class SetAutoencoder:
    psi_key: Mlp
    psi_val: Mlp
    card_embed: np.ndarray
    card_dec: Mlp
    phi_key: Mlp
    phi_dec: Mlp

    @property
    def n_max(self) -> int:
        return self.card_embed.shape[0] - 1

    @property
    def d_z(self) -> int:
        return self.card_embed.shape[1]

    @property
    def d_obs(self) -> int:
        return self.psi_val.in_dim

    @property
    def d_key(self) -> int:
        return self.psi_key.in_dim

    def tensors(self) -> Tensors:
        out: Tensors = {}
        out.update(self.psi_key.tensors("psi_key"))
        out.update(self.psi_val.tensors("psi_val"))
        out["card_embed"] = self.card_embed
        out.update(self.card_dec.tensors("card_dec"))
        out.update(self.phi_key.tensors("phi_key"))
        out.update(self.phi_dec.tensors("phi_dec"))
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> SetAutoencoder:
        def mlp(prefix):
            depth = len({k.split(".")[1] for k in tensors if k.startswith(prefix + ".")})
            if depth == 0:
                raise ConfigurationError(f"checkpoint has no tensors for {prefix}")
            return Mlp.from_tensors(tensors, prefix, ["relu"] * (depth - 1) + ["identity"])

        if "card_embed" not in tensors:
            raise ConfigurationError("checkpoint has no card_embed tensor")
        return cls(
            psi_key=mlp("psi_key"), psi_val=mlp("psi_val"),
            card_embed=np.asarray(tensors["card_embed"], dtype=np.float64),
            card_dec=mlp("card_dec"), phi_key=mlp("phi_key"), phi_dec=mlp("phi_dec"),
        )

    def with_tensors(self, updates: Mapping[str, np.ndarray]) -> SetAutoencoder:
        merged = self.tensors()
        merged.update(updates)
        return SetAutoencoder.from_tensors(merged)


def init_autoencoder(rng: np.random.Generator, d_obs: int, d_z: int = 72, n_max: int = 10,
                     hidden: int = 128, d_key: int = 16) -> SetAutoencoder:
    return SetAutoencoder(
        psi_key=init_mlp(rng, [d_key, hidden, d_z]),
        psi_val=init_mlp(rng, [d_obs, hidden, d_z]),
        card_embed=rng.normal(0.0, 0.1, size=(n_max + 1, d_z)),
        card_dec=init_mlp(rng, [d_z, hidden, n_max + 1]),
        phi_key=init_mlp(rng, [d_key, hidden, d_z]),
        phi_dec=init_mlp(rng, [d_z, hidden, d_obs]),
    )


# --------------------------------------------------------------------------
# encoder

@dataclass
class EncodeTape:
    batch: SetBatch
    keys: np.ndarray | None
    key_tape: MlpTape | None
    values: np.ndarray | None
    val_tape: MlpTape | None


def _check_batch(ae: SetAutoencoder, batch: SetBatch) -> None:
    if len(batch.counts) and int(batch.counts.max()) > ae.n_max:
        raise CapacityError(f"set cardinality {int(batch.counts.max())} exceeds n_max={ae.n_max}")
    if batch.elements.shape[-1] != ae.d_obs and batch.elements.shape[1] > 0:
        raise ConfigurationError(f"element dimension {batch.elements.shape[-1]} != d_obs={ae.d_obs}")


def encode_batch(ae: SetAutoencoder, batch: SetBatch) -> tuple[np.ndarray, EncodeTape]:
    _check_batch(ae, batch)
    b, length = batch.elements.shape[:2]
    z = ae.card_embed[batch.counts].copy()
    if length == 0:
        return z, EncodeTape(batch, None, None, None, None)
    keys, key_tape = ae.psi_key.forward(positional_encoding(length, ae.d_key))
    values, val_tape = ae.psi_val.forward(batch.elements.reshape(b * length, -1))
    values = values.reshape(b, length, ae.d_z)
    z += (batch.mask[:, :, None] * keys[None] * values).sum(axis=1)
    return z, EncodeTape(batch, keys, key_tape, values, val_tape)


def encode_backward(ae: SetAutoencoder, tape: EncodeTape, dz: np.ndarray) -> Tensors:
    """Gradients of the encoder parameters given dL/dz (shape ``(batch, d_z)``)."""
    batch = tape.batch
    grads: Tensors = {}
    d_embed = np.zeros_like(ae.card_embed)
    np.add.at(d_embed, batch.counts, dz)
    if tape.keys is None:
        grads.update(ae.psi_key.zeros_like().tensors("psi_key"))
        grads.update(ae.psi_val.zeros_like().tensors("psi_val"))
    else:
        b, length = batch.elements.shape[:2]
        mdz = batch.mask[:, :, None] * dz[:, None, :]
        d_keys = (mdz * tape.values).sum(axis=0)
        d_values = (mdz * tape.keys[None]).reshape(b * length, -1)
        g_key, _ = ae.psi_key.backward(tape.key_tape, d_keys)
        g_val, _ = ae.psi_val.backward(tape.val_tape, d_values)
        grads.update(g_key.tensors("psi_key"))
        grads.update(g_val.tensors("psi_val"))
    grads["card_embed"] = d_embed
    return grads


def encode(ae: SetAutoencoder, elements: np.ndarray) -> np.ndarray:
    """Latent state of a single set given as an ``(n, d_obs)`` array."""
    elements = np.asarray(elements, dtype=np.float64).reshape(-1, ae.d_obs)
    return encode_batch(ae, SetBatch.from_sets([elements], ae.d_obs))[0][0]


# --------------------------------------------------------------------------
# decoder

def predict_cardinality(ae: SetAutoencoder, z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    return np.argmax(ae.card_dec(z), axis=-1)


def decode_elements(ae: SetAutoencoder, z: np.ndarray, length: int) -> np.ndarray:
    """Decode the first ``length`` elements for each latent in ``z`` (batch, d_z)."""
    z = np.atleast_2d(z)
    if length == 0:
        return np.zeros((z.shape[0], 0, ae.d_obs))
    queries = ae.phi_key(positional_encoding(length, ae.d_key))
    h = queries[None] * z[:, None, :]
    out = ae.phi_dec(h.reshape(-1, ae.d_z))
    return out.reshape(z.shape[0], length, ae.d_obs)


def decode(ae: SetAutoencoder, z: np.ndarray) -> np.ndarray:
    """Decode one latent into a set (rows in key order) of predicted size."""
    z = np.asarray(z, dtype=np.float64).reshape(ae.d_z)
    n_hat = int(predict_cardinality(ae, z)[0])
    if n_hat == 0:
        return np.zeros((0, ae.d_obs))
    return decode_elements(ae, z, n_hat)[0]


# --------------------------------------------------------------------------
# loss

@dataclass(frozen=True)
class LossBreakdown:
    """Batch-mean loss plus per-set components."""

    total: float
    element: float
    card: float
    per_set_element: np.ndarray
    per_set_card: np.ndarray

    @property
    def per_set_total(self) -> np.ndarray:
        return self.per_set_element + self.per_set_card


def loss_and_grad(ae: SetAutoencoder, batch: SetBatch, need_grad: bool = True
                  ) -> tuple[LossBreakdown, Tensors | None]:
    """Reconstruction loss (teacher-forced element MSE + cardinality CE).

    Per set: element loss is the mean squared error over its ``n * d_obs``
    entries (zero for an empty set); cardinality loss is the cross-entropy of
    ``card_dec(z)`` against ``n``. The batch loss is the mean over sets.
    """
    z, etape = encode_batch(ae, batch)
    bsz, length = batch.elements.shape[:2]
    logits, ctape = ae.card_dec.forward(z)
    card, dlogits = cross_entropy(logits, batch.counts)

    mask = batch.mask
    denom = np.maximum(batch.counts, 1) * ae.d_obs
    if length:
        pe = positional_encoding(length, ae.d_key)
        queries, qtape = ae.phi_key.forward(pe)
        h = queries[None] * z[:, None, :]
        recon, dtape = ae.phi_dec.forward(h.reshape(bsz * length, ae.d_z))
        diff = (recon.reshape(bsz, length, ae.d_obs) - batch.elements) * mask[:, :, None]
        elem = (diff * diff).sum(axis=(1, 2)) / denom
    else:
        elem = np.zeros(bsz)
    breakdown = LossBreakdown(
        total=float(np.mean(elem + card)) if bsz else 0.0,
        element=float(np.mean(elem)) if bsz else 0.0,
        card=float(np.mean(card)) if bsz else 0.0,
        per_set_element=elem, per_set_card=card,
    )
    if not need_grad:
        return breakdown, None

    grads: Tensors = {}
    dz = np.zeros_like(z)
    g_card, dz_card = ae.card_dec.backward(ctape, dlogits / bsz)
    dz += dz_card
    if length:
        drecon = (2.0 * diff / (denom[:, None, None] * bsz)).reshape(bsz * length, ae.d_obs)
        g_dec, dh = ae.phi_dec.backward(dtape, drecon)
        dh = dh.reshape(bsz, length, ae.d_z)
        dz += (dh * queries[None]).sum(axis=1)
        g_qkey, _ = ae.phi_key.backward(qtape, (dh * z[:, None, :]).sum(axis=0))
    else:
        g_dec, g_qkey = ae.phi_dec.zeros_like(), ae.phi_key.zeros_like()
    grads.update(encode_backward(ae, etape, dz))
    grads.update(g_card.tensors("card_dec"))
    grads.update(g_qkey.tensors("phi_key"))
    grads.update(g_dec.tensors("phi_dec"))
    return breakdown, grads


def reconstruction_loss(ae: SetAutoencoder, elements: np.ndarray) -> LossBreakdown:
    """Loss of one set given as an ``(n, d_obs)`` array."""
    elements = np.asarray(elements, dtype=np.float64).reshape(-1, ae.d_obs)
    return loss_and_grad(ae, SetBatch.from_sets([elements], ae.d_obs), need_grad=False)[0]


def evaluate(ae: SetAutoencoder, batch: SetBatch) -> dict[str, float]:
    """Per-element RMSE (decoded with the true cardinality) and cardinality accuracy."""
    loss, _ = loss_and_grad(ae, batch, need_grad=False)
    z, _ = encode_batch(ae, batch)
    n_hat = predict_cardinality(ae, z)
    counts = batch.counts
    entries = counts.sum() * ae.d_obs
    sq = (loss.per_set_element * np.maximum(counts, 1) * ae.d_obs).sum()
    return {
        "rmse": float(math.sqrt(sq / entries)) if entries else 0.0,
        "card_accuracy": float(np.mean(n_hat == counts)),
        "loss": loss.total,
    }


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class AeTrainConfig:
    iterations: int = 15000
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float = 1e-5
    seed: int = 0


@dataclass(frozen=True)
class TrainResult:
    params: SetAutoencoder
    total: np.ndarray
    element: np.ndarray
    card: np.ndarray
    total_sq: np.ndarray


def train(ae: SetAutoencoder, dataset: SetBatch | Sequence[np.ndarray], config: AeTrainConfig,
          callback: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Minibatch Adam on the reconstruction loss.

    The learning rate follows a cosine schedule from ``lr`` to ``lr_final``.
    Returns the trained parameters and the per-iteration loss trace. Besides
    the batch means, ``total_sq`` keeps each iteration's mean squared per-set
    loss so per-set spread can be recovered from the trace.
    """
    if not isinstance(dataset, SetBatch):
        dataset = SetBatch.from_sets(dataset, ae.d_obs)
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    _check_batch(ae, dataset)
    rng = np.random.default_rng(config.seed)
    params = ae.tensors()
    state = adam_init(params, config.lr)
    n_iter = config.iterations
    total = np.zeros(n_iter)
    element = np.zeros(n_iter)
    card = np.zeros(n_iter)
    total_sq = np.zeros(n_iter)
    current = ae
    for it in range(n_iter):
        idx = rng.integers(0, len(dataset), size=min(config.batch_size, len(dataset)))
        loss, grads = loss_and_grad(current, dataset.take(idx))
        if not np.isfinite(loss.total):
            raise NumericalError(
                f"reconstruction loss became non-finite at iteration {it} "
                f"(element={loss.element}, card={loss.card})"
            )
        total[it], element[it], card[it] = loss.total, loss.element, loss.card
        total_sq[it] = float(np.mean(loss.per_set_total ** 2))
        frac = it / max(n_iter - 1, 1)
        lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1.0 + math.cos(math.pi * frac))
        state = replace(state, lr=lr)
        params, state = adam_step(params, grads, state)
        current = SetAutoencoder.from_tensors(params)
        if callback is not None:
            callback(it, loss)
    return TrainResult(current, total, element, card, total_sq)


def encoder_tensors(ae: SetAutoencoder) -> Tensors:
    return {k: v for k, v in ae.tensors().items() if k.split(".")[0] in ENCODER_PREFIXES}
