"""A small pre-LN transformer encoder with a tied LM head.

Hidden states travel through the layers as ``[batch, time, e]`` arrays; the
single-sequence API (:func:`embed`, :func:`encode_with_prompt`,
:func:`predict_label_distribution`) speaks the column layout ``[e, time]``
used when writing prompts as ``[P|X]``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tasks import MASK, NUM_SPECIAL, PAD

CHECKPOINT_FORMAT = 1
_MASK_VALUE = -1e30


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 512
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 64
    dropout_p: float = 0.1
    seed: int = 0
    ln_eps: float = 1e-6

    def validate(self) -> None:
        if self.model_dim % self.num_heads:
            raise BackboneError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.vocab_size <= NUM_SPECIAL:
            raise BackboneError("vocabulary must leave room beyond the special tokens")
        if not 0.0 <= self.dropout_p < 1.0:
            raise BackboneError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if min(self.model_dim, self.num_layers, self.ffn_dim, self.max_seq_len) < 1:
            raise BackboneError("dimensions must be positive")

    def parameter_count(self) -> int:
        """Closed-form parameter total (attention and FFN carry no biases)."""
        V, e, L, f, S = (self.vocab_size, self.model_dim, self.num_layers,
                         self.ffn_dim, self.max_seq_len)
        per_layer = 4 * e * e + 2 * e * f + 4 * e
        return V * e + S * e + L * per_layer + 2 * e


def _param_shapes(cfg: BackboneConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    e, f = cfg.model_dim, cfg.ffn_dim
    yield "token_emb", (cfg.vocab_size, e)
    yield "pos_emb", (cfg.max_seq_len, e)
    for i in range(cfg.num_layers):
        yield f"layer{i}.ln1.gain", (e,)
        yield f"layer{i}.ln1.bias", (e,)
        for w in ("wq", "wk", "wv", "wo"):
            yield f"layer{i}.attn.{w}", (e, e)
        yield f"layer{i}.ln2.gain", (e,)
        yield f"layer{i}.ln2.bias", (e,)
        yield f"layer{i}.ffn.w1", (e, f)
        yield f"layer{i}.ffn.w2", (f, e)
    yield "final_ln.gain", (e,)
    yield "final_ln.bias", (e,)


class Backbone:
    """Encoder weights plus the dropout toggle.

    ``params`` keeps a fixed insertion order; that order defines the byte
    serialization behind :attr:`weights_hash`.
    """

    frozen = False

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor],
                 dropout_enabled: bool = True):
        self.config = config
        self.params = params
        self.dropout_enabled = dropout_enabled

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def embedding_table(self) -> Tensor:
        return self.params["token_emb"]

    @property
    def weights_hash(self) -> str:
        return weights_hash(self)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "Backbone":
        params = {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()}
        return Backbone(self.config, params, self.dropout_enabled)


class FrozenBackbone(Backbone):
    """Read-only backbone: arrays are non-writeable and never require grad."""

    frozen = True

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor],
                 dropout_enabled: bool = True):
        super().__init__(config, params, dropout_enabled)
        for t in self.params.values():
            t.requires_grad = False
            t.data.setflags(write=False)
        self._hash = weights_hash(self)

    def __setstate__(self, state):
        # worker processes receive writeable copies; make them read-only again
        self.__dict__.update(state)
        for t in self.params.values():
            t.data.setflags(write=False)

    @property
    def weights_hash(self) -> str:
        return self._hash

    def verify(self) -> bool:
        return weights_hash(self) == self._hash

    def with_dropout(self, enabled: bool) -> "FrozenBackbone":
        """A view sharing these read-only weights with its own dropout toggle."""
        view = copy.copy(self)
        view.dropout_enabled = bool(enabled)
        return view

    def unfrozen(self) -> Backbone:
        """A trainable deep copy, e.g. for full fine-tuning."""
        b = self.copy()
        for t in b.params.values():
            t.requires_grad = True
        return b


def serialize_weights(backbone: Backbone) -> bytes:
    chunks = []
    for name, t in backbone.params.items():
        chunks.append(name.encode())
        chunks.append(np.asarray(t.shape, dtype="<i8").tobytes())
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def weights_hash(backbone: Backbone) -> str:
    """64-bit BLAKE2b digest of the serialized weights, as 16 hex chars."""
    return hashlib.blake2b(serialize_weights(backbone), digest_size=8).hexdigest()


def init_backbone(config: BackboneConfig) -> Backbone:
    """Seeded N(0, 0.02) weights; layer-norm gains 1, biases 0."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in _param_shapes(config):
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Backbone(config, params, dropout_enabled=config.dropout_p > 0)


def freeze(backbone: Backbone) -> FrozenBackbone:
    if isinstance(backbone, FrozenBackbone):
        return backbone
    params = {k: Tensor(v.data.copy(), name=k) for k, v in backbone.params.items()}
    return FrozenBackbone(backbone.config, params, backbone.dropout_enabled)


def set_dropout(backbone: Backbone, enabled: bool) -> None:
    backbone.dropout_enabled = bool(enabled)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _attention(bb: Backbone, i: int, x: Tensor, key_mask: np.ndarray | None,
               training: bool) -> Tensor:
    cfg = bb.config
    B, T, e = x.shape
    h = cfg.num_heads
    d = e // h
    p = f"layer{i}.attn."

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, T, h, d)), (0, 2, 1, 3))

    q = heads(ad.matmul(x, bb[p + "wq"]))
    k = heads(ad.matmul(x, bb[p + "wk"]))
    v = heads(ad.matmul(x, bb[p + "wv"]))
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    if key_mask is not None:
        scores = ad.add(scores, Tensor(key_mask))
    weights = ad.softmax(scores, axis=-1)
    weights = ad.dropout(weights, cfg.dropout_p, training)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, T, e))
    return ad.matmul(ctx, bb[p + "wo"])


def _ffn(bb: Backbone, i: int, x: Tensor, training: bool) -> Tensor:
    hidden = ad.relu(ad.matmul(x, bb[f"layer{i}.ffn.w1"]))
    hidden = ad.dropout(hidden, bb.config.dropout_p, training)
    return ad.matmul(hidden, bb[f"layer{i}.ffn.w2"])


def run_layers(bb: Backbone, z: Tensor, valid: np.ndarray | None = None,
               training: bool = False) -> Tensor:
    """Add positions, run every encoder layer and the final layer norm.

    ``z`` is ``[B, T, e]``; ``valid`` is a boolean ``[B, T]`` mask of real
    (non-pad) positions.  Dropout fires only when ``training`` and the
    backbone's dropout toggle are both on.
    """
    cfg = bb.config
    B, T, e = z.shape
    if T > cfg.max_seq_len:
        raise BackboneError(f"sequence of {T} positions exceeds max_seq_len {cfg.max_seq_len}")
    if e != cfg.model_dim:
        raise BackboneError(f"hidden width {e} does not match model_dim {cfg.model_dim}")
    drop = training and bb.dropout_enabled
    pos = ad.take_rows(bb["pos_emb"], np.arange(T))
    x = ad.add(z, pos)
    key_mask = None
    if valid is not None and not valid.all():
        key_mask = np.where(valid, 0.0, _MASK_VALUE)[:, None, None, :]
    eps = cfg.ln_eps
    for i in range(cfg.num_layers):
        y = ad.layer_norm(x, bb[f"layer{i}.ln1.gain"], bb[f"layer{i}.ln1.bias"], eps)
        y = ad.dropout(_attention(bb, i, y, key_mask, drop), cfg.dropout_p, drop)
        x = ad.add(x, y)
        y = ad.layer_norm(x, bb[f"layer{i}.ln2.gain"], bb[f"layer{i}.ln2.bias"], eps)
        y = ad.dropout(_ffn(bb, i, y, drop), cfg.dropout_p, drop)
        x = ad.add(x, y)
    return ad.layer_norm(x, bb["final_ln.gain"], bb["final_ln.bias"], eps)


def embed(bb: Backbone, seq: Sequence[int]) -> Tensor:
    """Column ``i`` of the result is the embedding of ``seq[i]``; shape ``[e, l]``."""
    ids = np.asarray(seq, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise BackboneError("token sequence must be a nonempty 1-D list of ids")
    if ids.min() < 0 or ids.max() >= bb.config.vocab_size:
        raise IndexError(f"token id out of range for vocabulary of {bb.config.vocab_size}")
    return ad.transpose(ad.take_rows(bb.embedding_table, ids))


def encode(bb: Backbone, X: Tensor, training: bool = False) -> Tensor:
    """Encode an ``[e, l]`` input matrix without any prompt."""
    return encode_with_prompt(bb, None, X, training)


def encode_with_prompt(bb: Backbone, P: Tensor | None, X: Tensor,
                       training: bool = False) -> Tensor:
    """Run the encoder over ``[P|X]``; returns hidden states ``[e, n+l]``."""
    e = bb.config.model_dim
    if X.ndim != 2 or X.shape[0] != e:
        raise BackboneError(f"input matrix must be [{e}, l], got {X.shape}")
    if P is not None and P.shape[1] > 0:
        if P.ndim != 2 or P.shape[0] != e:
            raise BackboneError(f"prompt matrix must be [{e}, n], got {P.shape}")
        Z = ad.concat([P, X], axis=1)
    else:
        Z = X
    T = Z.shape[1]
    hidden = run_layers(bb, ad.reshape(ad.transpose(Z), (1, T, e)), None, training)
    return ad.transpose(ad.reshape(hidden, (T, e)))


def predict_label_distribution(bb: Backbone, hidden: Tensor) -> Tensor:
    """Mean-pool ``[e, T]`` hidden columns and score every vocabulary entry."""
    if hidden.ndim != 2 or hidden.shape[1] == 0:
        raise BackboneError("hidden states must be a nonempty [e, T] matrix")
    pooled = ad.scale(ad.sum_axis(hidden, axis=1), 1.0 / hidden.shape[1])
    return ad.matmul(bb.embedding_table, pooled)


def predicted_token(logits: np.ndarray) -> np.ndarray:
    """Argmax over the full vocabulary; ties go to the lowest id."""
    return np.argmax(logits, axis=-1)


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with ``PAD``; returns ``(ids [B, l], valid [B, l])``."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    valid = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s
        valid[r, :len(s)] = True
    return ids, valid


def encode_batch(bb: Backbone, P: Tensor | None, ids: np.ndarray, valid: np.ndarray,
                 training: bool = False) -> tuple[Tensor, np.ndarray]:
    """Batched ``[P|X]`` encoding; returns hidden ``[B, n+l, e]`` and its validity mask."""
    B, l = ids.shape
    e = bb.config.model_dim
    X = ad.reshape(ad.take_rows(bb.embedding_table, ids.reshape(-1)), (B, l, e))
    if P is not None and P.shape[1] > 0:
        n = P.shape[1]
        prompt = ad.broadcast_to(ad.reshape(ad.transpose(P), (1, n, e)), (B, n, e))
        Z = ad.concat([prompt, X], axis=1)
        valid = np.concatenate([np.ones((B, n), dtype=bool), valid], axis=1)
    else:
        Z = X
    return run_layers(bb, Z, valid, training), valid


def label_logits(bb: Backbone, P: Tensor | None, ids: np.ndarray, valid: np.ndarray,
                 training: bool = False) -> Tensor:
    """Batched version of encode + :func:`predict_label_distribution`; ``[B, V]``."""
    hidden, valid = encode_batch(bb, P, ids, valid, training)
    w = valid.astype(np.float64)
    w = w / w.sum(axis=1, keepdims=True)
    pooled = ad.sum_axis(ad.mul(hidden, Tensor(w[:, :, None])), axis=1)
    return ad.matmul(pooled, ad.transpose(bb.embedding_table))


# ---------------------------------------------------------------------------
# masked-token pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainReport:
    losses: list[float]
    masked_accuracy: float
    chance: float
    weights_hash: str


def mask_batch(seqs: Sequence[Sequence[int]], rng: np.random.Generator,
               rate: float = 0.15) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Replace ``rate`` of each sequence's positions (at least one) by ``MASK``.

    Returns ``(ids, valid, flat_positions, targets)``.
    """
    ids, valid = pad_batch(seqs)
    width = ids.shape[1]
    flat_pos, targets = [], []
    for r, s in enumerate(seqs):
        k = max(1, int(round(rate * len(s))))
        for p in sorted(rng.choice(len(s), size=k, replace=False)):
            flat_pos.append(r * width + int(p))
            targets.append(ids[r, p])
            ids[r, p] = MASK
    return ids, valid, np.asarray(flat_pos), np.asarray(targets)


def _mlm_logits(bb: Backbone, ids, valid, flat_pos, training: bool) -> Tensor:
    hidden = run_layers(bb, ad.reshape(ad.take_rows(bb.embedding_table, ids.reshape(-1)),
                                       (*ids.shape, bb.config.model_dim)), valid, training)
    rows = ad.take_rows(ad.reshape(hidden, (-1, bb.config.model_dim)), flat_pos)
    return ad.matmul(rows, ad.transpose(bb.embedding_table))


def masked_token_accuracy(bb: Backbone, corpus: Sequence[Sequence[int]], seed: int = 1,
                          batch_size: int = 64) -> float:
    rng = np.random.default_rng(seed)
    hits = total = 0
    for start in range(0, len(corpus), batch_size):
        ids, valid, pos, targets = mask_batch(corpus[start:start + batch_size], rng)
        logits = _mlm_logits(bb, ids, valid, pos, training=False)
        hits += int((predicted_token(logits.data) == targets).sum())
        total += len(targets)
    return hits / max(total, 1)


def pretrain(bb: Backbone, corpus: Sequence[Sequence[int]], steps: int,
             lr: float = 1e-3, weight_decay: float = 0.01, batch_size: int = 32,
             seed: int = 0, eval_corpus: Sequence[Sequence[int]] | None = None,
             log_every: int = 0) -> PretrainReport:
    """Masked-token training of every backbone weight, in place."""
    from .optim import AdamW, AdamWConfig, ParamGroup

    if not corpus:
        raise BackboneError("pretraining corpus is empty")
    if bb.frozen:
        raise BackboneError("cannot pretrain a frozen backbone")
    V = bb.config.vocab_size
    if max(max(s) for s in corpus) >= V:
        raise BackboneError("corpus contains ids outside the vocabulary")
    decay = [t for k, t in bb.params.items() if not k.endswith((".gain", ".bias"))]
    no_decay = [t for k, t in bb.params.items() if k.endswith((".gain", ".bias"))]
    opt = AdamW([ParamGroup(decay, lr, weight_decay), ParamGroup(no_decay, lr, 0.0)],
                AdamWConfig(lr=lr, max_grad_norm=1.0))
    rng = np.random.default_rng(seed)
    lengths = np.array([len(s) for s in corpus])
    losses = []
    for step in range(steps):
        # one length per batch so nothing is padded
        L = int(lengths[rng.integers(len(corpus))])
        pool = np.flatnonzero(lengths == L)
        batch = [corpus[i] for i in pool[rng.integers(len(pool), size=batch_size)]]
        ids, valid, pos, targets = mask_batch(batch, rng)
        opt.zero_grad()
        with ad.Tape(seed=seed * 1_000_003 + step) as tape:
            loss = ad.cross_entropy(_mlm_logits(bb, ids, valid, pos, training=True), targets)
            ad.backpropagate(loss, tape)
        opt.step()
        losses.append(float(loss.data))
        if log_every and (step + 1) % log_every == 0:
            print(f"pretrain step {step + 1}/{steps} loss {np.mean(losses[-log_every:]):.4f}")
    acc = masked_token_accuracy(bb, eval_corpus) if eval_corpus else float("nan")
    return PretrainReport(losses, acc, 1.0 / V, weights_hash(bb))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_backbone(bb: Backbone, path: str | Path) -> None:
    """``.npz`` container: one array per weight plus a JSON header."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(bb.config),
        "names": list(bb.params),
        "parameter_count": bb.num_parameters(),
        "weights_hash": weights_hash(bb),
        "dropout_enabled": bb.dropout_enabled,
    }
    arrays = {f"w{i}": np.asarray(t.data) for i, t in enumerate(bb.params.values())}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_backbone(path: str | Path) -> FrozenBackbone:
    """Load a checkpoint as a frozen backbone, verifying counts and hash."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise BackboneError(f"unsupported checkpoint format {header.get('format')}")
        config = BackboneConfig(**header["config"])
        params = {name: Tensor(z[f"w{i}"], name=name) for i, name in enumerate(header["names"])}
    expected = dict(_param_shapes(config))
    if list(params) != list(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise BackboneError("checkpoint tensors do not match the configured architecture")
    total = sum(t.size for t in params.values())
    if total != header["parameter_count"] or total != config.parameter_count():
        raise BackboneError(f"parameter total {total} disagrees with header "
                            f"{header['parameter_count']} / formula {config.parameter_count()}")
    bb = FrozenBackbone(config, params, header.get("dropout_enabled", True))
    if bb.weights_hash != header["weights_hash"]:
        raise BackboneError("checkpoint weights hash mismatch")
    return bb
