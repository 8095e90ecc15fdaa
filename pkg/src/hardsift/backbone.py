"""Embedding backbones and their optimizers.

Two model kinds share one parameter layout (a user table and an item table):

* ``mf``: plain inner-product matrix factorization.
* ``lightgcn_lite``: light graph convolution. Embeddings are propagated
  through the symmetrically normalized interaction graph and the layer
  outputs are averaged. Propagation is linear, so gradients flow back
  through the same operator exactly. It is recomputed once per epoch, not
  per batch; with zero layers the model collapses to ``mf``.

Gradients are assembled by hand (no autograd): per-sample dLoss/dscore
values are scattered onto the active tables and, for the graph model,
pulled back through the propagation operator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import Dataset
from .errors import ValidationError

MF = "mf"
LIGHTGCN_LITE = "lightgcn_lite"
KINDS = (MF, LIGHTGCN_LITE)

_INIT_STREAM = 4
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8

CHECKPOINT_HEADER = "header.json"
CHECKPOINT_TENSORS = "tensors.npz"


@dataclass
class Model:
    kind: str
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    layers: int = 0
    optimizer_state: dict = field(default_factory=dict)
    prop_user: np.ndarray | None = None
    prop_item: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.user_embeddings.shape[1]

    @property
    def user_count(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def item_count(self) -> int:
        return self.item_embeddings.shape[0]


@dataclass
class InteractionGraph:
    """Symmetrically normalized adjacency over the stacked user+item nodes."""

    norm_adj: sp.csr_matrix
    user_count: int
    item_count: int


@dataclass
class GradientBuffer:
    user: np.ndarray
    item: np.ndarray


def init_model(kind: str, user_count: int, item_count: int, dim: int, seed: int, layers: int = 0) -> Model:
    """Fresh model with zero-mean embeddings at scale 0.1/sqrt(dim)."""
    if kind not in KINDS:
        raise ValidationError(f"unknown backbone kind {kind!r}")
    if dim < 1:
        raise ValidationError("dim must be >= 1")
    if layers < 0:
        raise ValidationError("layers must be >= 0")
    if kind == MF and layers != 0:
        raise ValidationError("mf takes no propagation layers")
    rng = np.random.default_rng([seed, _INIT_STREAM])
    scale = 0.1 / np.sqrt(dim)
    return Model(
        kind=kind,
        user_embeddings=rng.normal(0.0, scale, size=(user_count, dim)),
        item_embeddings=rng.normal(0.0, scale, size=(item_count, dim)),
        layers=layers,
    )


def active_tables(model: Model) -> tuple[np.ndarray, np.ndarray]:
    """The tables predictions read from: base for mf, propagated otherwise."""
    if model.kind == MF:
        return model.user_embeddings, model.item_embeddings
    if model.prop_user is None or model.prop_item is None:
        raise ValidationError("lightgcn_lite model needs propagate() before predicting")
    return model.prop_user, model.prop_item


def predict(model: Model, user: int, item: int) -> float:
    if not (0 <= user < model.user_count):
        raise ValidationError(f"user {user} out of range")
    if not (0 <= item < model.item_count):
        raise ValidationError(f"item {item} out of range")
    users_t, items_t = active_tables(model)
    return float(users_t[user] @ items_t[item])


def predict_pairs(model: Model, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    users_t, items_t = active_tables(model)
    return np.einsum("ij,ij->i", users_t[users], items_t[items])


def score_matrix(model: Model, users: np.ndarray) -> np.ndarray:
    """Scores of the given users against every item, (len(users), items)."""
    users_t, items_t = active_tables(model)
    return users_t[users] @ items_t.T


def build_graph(train: Dataset) -> InteractionGraph:
    """D^-1/2 A D^-1/2 over the bipartite train-positive graph. Nodes with
    no edges simply keep zero rows."""
    uc, ic = train.user_count, train.item_count
    rows, cols = [], []
    for it in train.interactions:
        if it.label != 1:
            continue
        rows.append(it.user)
        cols.append(uc + it.item)
    n = uc + ic
    data = np.ones(len(rows))
    adj = sp.coo_matrix((data, (rows, cols)), shape=(n, n))
    adj = (adj + adj.T).tocsr()
    degree = np.asarray(adj.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(degree > 0, 1.0 / np.sqrt(np.maximum(degree, 1e-12)), 0.0)
    d_half = sp.diags(inv_sqrt)
    return InteractionGraph(norm_adj=(d_half @ adj @ d_half).tocsr(), user_count=uc, item_count=ic)


def propagate(model: Model, graph: InteractionGraph) -> tuple[np.ndarray, np.ndarray]:
    """Mean of the 0..layers propagation outputs, cached on the model."""
    if model.kind != LIGHTGCN_LITE:
        raise ValidationError("propagate only applies to lightgcn_lite")
    if graph.user_count != model.user_count or graph.item_count != model.item_count:
        raise ValidationError("graph shape does not match the model")
    stacked = np.vstack([model.user_embeddings, model.item_embeddings])
    acc = stacked.copy()
    cur = stacked
    for _ in range(model.layers):
        cur = graph.norm_adj @ cur
        acc += cur
    acc /= model.layers + 1
    model.prop_user = acc[: model.user_count]
    model.prop_item = acc[model.user_count:]
    return model.prop_user, model.prop_item


def zero_gradients(model: Model) -> GradientBuffer:
    return GradientBuffer(
        user=np.zeros_like(model.user_embeddings),
        item=np.zeros_like(model.item_embeddings),
    )


def score_gradients(
    model: Model,
    users: np.ndarray,
    items: np.ndarray,
    dscore: np.ndarray,
    into: GradientBuffer | None = None,
) -> GradientBuffer:
    """Scatter per-sample dLoss/dscore onto the active tables.

    d(p.q)/dp = q and vice versa; repeated indices accumulate. For
    lightgcn_lite the result lives in propagated space until backprop().
    """
    buf = into if into is not None else zero_gradients(model)
    users_t, items_t = active_tables(model)
    np.add.at(buf.user, users, dscore[:, None] * items_t[items])
    np.add.at(buf.item, items, dscore[:, None] * users_t[users])
    return buf


def backprop(model: Model, buf: GradientBuffer, graph: InteractionGraph | None = None) -> GradientBuffer:
    """Pull propagated-space gradients back to the base tables.

    The propagation operator is symmetric, so its transpose is the same
    mean-of-powers loop applied to the gradient. mf passes through.
    """
    if model.kind == MF:
        return buf
    if graph is None:
        raise ValidationError("lightgcn_lite backprop needs the interaction graph")
    stacked = np.vstack([buf.user, buf.item])
    acc = stacked.copy()
    cur = stacked
    for _ in range(model.layers):
        cur = graph.norm_adj @ cur
        acc += cur
    acc /= model.layers + 1
    return GradientBuffer(user=acc[: model.user_count], item=acc[model.user_count:])


def apply_gradients(
    model: Model,
    grads: GradientBuffer,
    learning_rate: float,
    optimizer: str = "sgd",
    l2: float = 0.0,
) -> None:
    """One optimizer step in place. l2 adds weight decay on the full tables."""
    for name, g in (("user_embeddings", grads.user), ("item_embeddings", grads.item)):
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient for {name}")

    gu = grads.user + l2 * model.user_embeddings if l2 else grads.user
    gi = grads.item + l2 * model.item_embeddings if l2 else grads.item

    if optimizer == "sgd":
        model.user_embeddings -= learning_rate * gu
        model.item_embeddings -= learning_rate * gi
    elif optimizer == "adam":
        state = model.optimizer_state
        if not state:
            state.update(
                step=0,
                m_user=np.zeros_like(model.user_embeddings),
                v_user=np.zeros_like(model.user_embeddings),
                m_item=np.zeros_like(model.item_embeddings),
                v_item=np.zeros_like(model.item_embeddings),
            )
        state["step"] += 1
        t = state["step"]
        for table, g, mk, vk in (
            (model.user_embeddings, gu, "m_user", "v_user"),
            (model.item_embeddings, gi, "m_item", "v_item"),
        ):
            state[mk] = _ADAM_BETA1 * state[mk] + (1 - _ADAM_BETA1) * g
            state[vk] = _ADAM_BETA2 * state[vk] + (1 - _ADAM_BETA2) * g * g
            m_hat = state[mk] / (1 - _ADAM_BETA1 ** t)
            v_hat = state[vk] / (1 - _ADAM_BETA2 ** t)
            table -= learning_rate * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
    else:
        raise ValidationError(f"unknown optimizer {optimizer!r}")


def save_checkpoint(model: Model, directory: str | Path) -> None:
    """Tensor dump plus a small JSON header describing the model."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": model.kind,
        "dim": model.dim,
        "layers": model.layers,
        "user_count": model.user_count,
        "item_count": model.item_count,
    }
    with open(out / CHECKPOINT_HEADER, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    np.savez(
        out / CHECKPOINT_TENSORS,
        user_embeddings=model.user_embeddings,
        item_embeddings=model.item_embeddings,
    )


def load_checkpoint(directory: str | Path) -> Model:
    src = Path(directory)
    try:
        with open(src / CHECKPOINT_HEADER, encoding="utf-8") as fh:
            header = json.load(fh)
        tensors = np.load(src / CHECKPOINT_TENSORS)
    except FileNotFoundError as exc:
        raise ValidationError(f"not a checkpoint directory: {src} ({exc})") from None
    model = Model(
        kind=header["kind"],
        user_embeddings=tensors["user_embeddings"],
        item_embeddings=tensors["item_embeddings"],
        layers=int(header["layers"]),
    )
    if model.kind not in KINDS:
        raise ValidationError(f"checkpoint has unknown kind {model.kind!r}")
    if model.dim != header["dim"] or model.user_count != header["user_count"]:
        raise ValidationError("checkpoint header does not match its tensors")
    return model
