"""Soft-prompt parameterizations: simple, superposition, softmax mixture, residual.

Each parameterization owns its trainable tensors and rebuilds the prompt
matrix ``P`` (shape ``[e, n]``) from them on every call to ``materialize``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone
from .tasks import NUM_SPECIAL

METHODS = ("simple", "superpos", "softmax_mixture", "residual")


class PromptError(ValueError):
    pass


def sample_unique_tokens(vocab_size: int, k: int, rng: np.random.Generator,
                         skip: int = NUM_SPECIAL) -> np.ndarray:
    """Partial Fisher-Yates draw of ``k`` distinct ids from ``[skip, vocab_size)``.

    The first ``j`` ids of a ``k``-draw equal a ``j``-draw under the same rng
    state, which is what lets SuperPos and Simple start from the same tokens.
    """
    pool = np.arange(skip, vocab_size)
    if k > len(pool):
        raise PromptError(f"cannot sample {k} unique tokens from {len(pool)} candidates")
    for i in range(k):
        j = int(rng.integers(i, len(pool)))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k].copy()


@dataclass
class SimplePromptParams:
    P_raw: Tensor
    indices: np.ndarray
    method: str = field(default="simple", init=False)

    def materialize(self) -> Tensor:
        return self.P_raw

    def parameters(self) -> list[Tensor]:
        return [self.P_raw]

    def param_groups(self) -> list[tuple[list[Tensor], bool]]:
        return [([self.P_raw], True)]


@dataclass
class SuperPosParams:
    """Per-prompt ``E_i`` (``[e, m]``) and coefficients ``p'_i`` (``[m]``).

    With ``shared_e`` a single ``E`` serves every prompt.
    """

    E_list: list[Tensor]
    coef_list: list[Tensor]
    indices: np.ndarray
    shared_e: bool = False
    method: str = field(default="superpos", init=False)

    @property
    def m(self) -> int:
        return self.E_list[0].shape[1]

    @property
    def n(self) -> int:
        return len(self.coef_list)

    def _E(self, i: int) -> Tensor:
        return self.E_list[0] if self.shared_e else self.E_list[i]

    def _weights(self, coef: Tensor) -> Tensor:
        return coef

    def mixture_weights(self) -> np.ndarray:
        """The effective weight on each sampled embedding, one row per prompt."""
        return np.stack([self._weights(c).data for c in self.coef_list])

    def materialize(self) -> Tensor:
        cols = [ad.matmul(self._E(i), self._weights(c)) for i, c in enumerate(self.coef_list)]
        return ad.stack(cols, axis=1)

    def parameters(self) -> list[Tensor]:
        return [*self.E_list, *self.coef_list]

    def param_groups(self) -> list[tuple[list[Tensor], bool]]:
        # E keeps its norm; only the superposition weights decay
        return [(list(self.E_list), False), (list(self.coef_list), True)]


@dataclass
class SoftmaxMixtureParams(SuperPosParams):
    method: str = field(default="softmax_mixture", init=False)

    def _weights(self, coef: Tensor) -> Tensor:
        return ad.softmax(coef, axis=0)


@dataclass
class ResidualPromptParams:
    P_raw: Tensor
    down_proj: Tensor   # [b, e]
    up_proj: Tensor     # [e, b]
    norm_gain: Tensor
    norm_bias: Tensor
    indices: np.ndarray
    eps: float = 1e-5
    method: str = field(default="residual", init=False)

    @property
    def bottleneck(self) -> int:
        return self.down_proj.shape[0]

    def materialize(self) -> Tensor:
        hidden = ad.relu(ad.matmul(self.down_proj, self.P_raw))
        branch = ad.matmul(self.up_proj, hidden)
        normed = ad.transpose(ad.layer_norm(ad.transpose(branch), self.norm_gain,
                                            self.norm_bias, self.eps))
        return ad.add(normed, self.P_raw)

    def parameters(self) -> list[Tensor]:
        return [self.P_raw, self.down_proj, self.up_proj, self.norm_gain, self.norm_bias]

    def param_groups(self) -> list[tuple[list[Tensor], bool]]:
        return [(self.parameters(), True)]


PromptParams = SimplePromptParams | SuperPosParams | SoftmaxMixtureParams | ResidualPromptParams


def _rows(bb: Backbone, indices: np.ndarray) -> np.ndarray:
    return np.array(bb.embedding_table.data[indices], dtype=np.float64)


def init_simple(bb: Backbone, n: int, rng: np.random.Generator) -> SimplePromptParams:
    """Prompt columns start as copies of ``n`` distinct vocabulary embeddings."""
    if n < 1:
        raise PromptError("need at least one prompt token")
    idx = sample_unique_tokens(bb.config.vocab_size, n, rng)
    return SimplePromptParams(Tensor(np.ascontiguousarray(_rows(bb, idx).T), requires_grad=True, name="P_raw"), idx)


def init_superpos(bb: Backbone, n: int, m: int, rng: np.random.Generator,
                  coef_init: str = "onehot", shared_e: bool = False,
                  cls: type = SuperPosParams) -> SuperPosParams:
    """Sample ``m`` distinct embeddings once and copy them into every ``E_i``.

    ``coef_init="onehot"`` puts a 1 at ``i mod m`` so the initial prompt is
    exactly ``n`` of the sampled embeddings; ``"uniform"`` uses ``1/m``.
    """
    if n < 1:
        raise PromptError("need at least one prompt token")
    if not 1 <= m <= bb.config.vocab_size:
        raise PromptError(f"m={m} must lie in [1, V={bb.config.vocab_size}]")
    idx = sample_unique_tokens(bb.config.vocab_size, m, rng)
    E0 = np.ascontiguousarray(_rows(bb, idx).T)
    count = 1 if shared_e else n
    E_list = [Tensor(E0.copy(), requires_grad=True, name=f"E{i}") for i in range(count)]
    coefs = []
    for i in range(n):
        if coef_init == "onehot":
            c = np.zeros(m)
            c[i % m] = 1.0
        elif coef_init == "uniform":
            c = np.full(m, 1.0 / m)
        else:
            raise PromptError(f"unknown coefficient init {coef_init!r}")
        coefs.append(Tensor(c, requires_grad=True, name=f"coef{i}"))
    return cls(E_list, coefs, idx, shared_e)


def init_softmax_mixture(bb: Backbone, n: int, m: int, rng: np.random.Generator,
                         coef_init: str = "onehot", shared_e: bool = False) -> SoftmaxMixtureParams:
    return init_superpos(bb, n, m, rng, coef_init, shared_e, cls=SoftmaxMixtureParams)


def init_residual(bb: Backbone, n: int, rng: np.random.Generator,
                  bottleneck: int = 128) -> ResidualPromptParams:
    """Sampled-embedding prompts plus a freshly initialized bottleneck MLP.

    Projections use N(0, 1/fan_in); the output layer norm starts at gain 1, bias 0.
    """
    simple = init_simple(bb, n, rng)
    e = bb.config.model_dim
    down = rng.normal(0.0, 1.0 / np.sqrt(e), size=(bottleneck, e))
    up = rng.normal(0.0, 1.0 / np.sqrt(bottleneck), size=(e, bottleneck))
    return ResidualPromptParams(
        simple.P_raw,
        Tensor(down, requires_grad=True, name="down_proj"),
        Tensor(up, requires_grad=True, name="up_proj"),
        Tensor(np.ones(e), requires_grad=True, name="norm_gain"),
        Tensor(np.zeros(e), requires_grad=True, name="norm_bias"),
        simple.indices,
    )


def init_prompt(method: str, bb: Backbone, n: int, rng: np.random.Generator, m: int = 128,
                bottleneck: int = 128, coef_init: str = "onehot",
                shared_e: bool = False) -> PromptParams:
    if method == "simple":
        return init_simple(bb, n, rng)
    if method == "superpos":
        return init_superpos(bb, n, m, rng, coef_init, shared_e)
    if method == "softmax_mixture":
        return init_softmax_mixture(bb, n, m, rng, coef_init, shared_e)
    if method == "residual":
        return init_residual(bb, n, rng, bottleneck)
    raise PromptError(f"unknown prompt method {method!r}")


def materialize_superpos(params: SuperPosParams) -> Tensor:
    return SuperPosParams.materialize(params)


def materialize_softmax(params: SoftmaxMixtureParams) -> Tensor:
    return params.materialize()


def materialize_residual(params: ResidualPromptParams) -> Tensor:
    return params.materialize()


def param_groups(params: PromptParams) -> list[tuple[list[Tensor], bool]]:
    """Partition of the trainable tensors into (tensors, apply_weight_decay)."""
    return params.param_groups()


def count_trainable(params: PromptParams) -> int:
    return sum(t.size for t in params.parameters())


def expected_trainable(method: str, e: int, n: int, m: int = 128, b: int = 128,
                       shared_e: bool = False) -> int:
    """Closed-form trainable-parameter counts."""
    if method == "simple":
        return e * n
    if method in ("superpos", "softmax_mixture"):
        return e * m + n * m if shared_e else n * (e * m + m)
    if method == "residual":
        return e * n + 2 * e * b + 2 * e
    raise PromptError(f"unknown prompt method {method!r}")


# ---------------------------------------------------------------------------
# prompt checkpoints
# ---------------------------------------------------------------------------

def prompt_to_dict(params: PromptParams, seed: int | None = None) -> dict:
    tensors = {t.name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
               for t in params.parameters()}
    out = {"method": params.method, "seed": seed, "indices": [int(i) for i in params.indices],
           "tensors": tensors}
    if isinstance(params, SuperPosParams):
        out["shared_e"] = params.shared_e
    if isinstance(params, ResidualPromptParams):
        out["eps"] = params.eps
    return out


def prompt_from_dict(d: dict) -> PromptParams:
    def t(name):
        spec = d["tensors"][name]
        return Tensor(np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"]),
                      requires_grad=True, name=name)

    idx = np.asarray(d["indices"], dtype=np.int64)
    method = d["method"]
    if method == "simple":
        return SimplePromptParams(t("P_raw"), idx)
    if method in ("superpos", "softmax_mixture"):
        names = list(d["tensors"])
        E = [t(k) for k in names if k.startswith("E")]
        C = [t(k) for k in names if k.startswith("coef")]
        cls = SuperPosParams if method == "superpos" else SoftmaxMixtureParams
        return cls(E, C, idx, d.get("shared_e", False))
    if method == "residual":
        return ResidualPromptParams(t("P_raw"), t("down_proj"), t("up_proj"), t("norm_gain"),
                                    t("norm_bias"), idx, d.get("eps", 1e-5))
    raise PromptError(f"unknown prompt method {method!r}")


def save_prompt(params: PromptParams, path: str | Path, seed: int | None = None,
                optimizer_state: dict | None = None) -> None:
    payload = prompt_to_dict(params, seed)
    if optimizer_state is not None:
        payload["optimizer_state"] = optimizer_state
    Path(path).write_text(json.dumps(payload))


def load_prompt(path: str | Path) -> tuple[PromptParams, dict]:
    payload = json.loads(Path(path).read_text())
    return prompt_from_dict(payload), payload
