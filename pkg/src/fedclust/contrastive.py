"""Loss heads for siamese training.

Two terms share one forward pass: the cluster-contrastive loss (negative mean
cosine similarity of each member's prediction to the other members' latents,
latents treated as constants) and the model-agreement regularizer (negative
cosine similarity between local and frozen-global predictions on the same
inputs). Gradients w.r.t. network outputs are exact; parameter gradients are
composed through diffnet.backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet
from .diffnet import GradientSet, SiameseModel, as_matrix
from .errors import ConfigError, ContractError, NumericError, ShapeError


@dataclass
class ClusterBatch:
    """Rows sampled from one assigned cluster; needs >= 2 members so that
    leave-one-out similarity is defined."""

    inputs: np.ndarray
    cluster_id: int

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs, "cluster batch")
        if self.inputs.shape[0] < 2:
            raise ContractError(
                f"cluster {self.cluster_id} batch has {self.inputs.shape[0]} member(s); "
                "need at least 2"
            )

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class LossReport:
    """Scalar loss decomposition; total is exactly the sum of the two terms."""

    contrastive_term: float
    regularizer_term: float
    total: float

    @classmethod
    def build(cls, contrastive: float, regularizer: float) -> "LossReport":
        return cls(contrastive, regularizer, contrastive + regularizer)


def _unit_rows(x: np.ndarray, name: str):
    norms = np.sqrt(np.square(x).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise NumericError(f"zero-norm row in {name}: cosine similarity undefined")
    return x / norms, norms


def pairwise_cosine_loss(p_i, z_others) -> float:
    """Negative average cosine similarity of one prediction against target latents."""
    p_i = np.asarray(p_i, dtype=np.float64).reshape(1, -1)
    z_others = as_matrix(z_others, "z_others")
    pu, _ = _unit_rows(p_i, "p_i")
    zu, _ = _unit_rows(z_others, "z_others")
    return float(-(zu @ pu.ravel()).mean())


def _batch_terms(z: np.ndarray, p: np.ndarray):
    """Sum of leave-one-out similarity losses for one cluster batch, plus its
    gradient w.r.t. the predictions (latents carry no gradient)."""
    b = z.shape[0]
    zu, _ = _unit_rows(z, "latents")
    pu, pn = _unit_rows(p, "predictions")
    cos = pu @ zu.T                       # b x b, cos(p_i, z_j)
    row = cos.sum(axis=1) - np.diag(cos)  # per i: sum over j != i
    value = float(-row.sum() / (b - 1))
    others = zu.sum(axis=0)[None, :] - zu  # per i: sum over j != i of unit z_j
    dp = -(others - row[:, None] * pu) / ((b - 1) * pn)
    return value, dp


def cluster_contrastive_loss(
    model: SiameseModel, batches: list[ClusterBatch]
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Cluster-contrastive loss over one training step.

    Returns the scalar term plus per-batch gradients w.r.t. predictions p and
    latents z. The latent gradients are exactly zero: each member's latent acts
    only as a constant target for the other members' predictions, so gradients
    flow solely through the predictor path.
    """
    if not batches:
        raise ContractError("need at least one cluster batch")
    k_eff = len(batches)
    value = 0.0
    grads_p, grads_z = [], []
    for batch in batches:
        z, p, _ = diffnet.forward_full(model, batch.inputs)
        contrib, dp = _batch_terms(z, p)
        weight = 1.0 / (k_eff * batch.size)
        value += weight * contrib
        grads_p.append(weight * dp)
        grads_z.append(np.zeros_like(z))
    return value, grads_p, grads_z


def _regularizer_terms(p_local: np.ndarray, p_global: np.ndarray):
    """Mean negative cosine between local and frozen-global predictions, with
    gradient w.r.t. the local predictions only."""
    n = p_local.shape[0]
    pu, pn = _unit_rows(p_local, "local predictions")
    gu, _ = _unit_rows(p_global, "global predictions")
    cos = np.einsum("ij,ij->i", pu, gu)
    value = float(-cos.sum() / n)
    dp = -(gu - cos[:, None] * pu) / (n * pn)
    return value, dp


def model_contrastive_regularizer(
    local: SiameseModel, global_snapshot: SiameseModel, batch
) -> tuple[float, np.ndarray]:
    """Raw (unweighted) agreement penalty between local and global predictions.

    The global model is a frozen snapshot: only the gradient w.r.t. the local
    predictions is returned.
    """
    _check_same_specs(local, global_snapshot)
    batch = as_matrix(batch, "batch")
    p_local = diffnet.forward_predictor(local, diffnet.forward_encoder(local, batch))
    p_global = diffnet.forward_predictor(
        global_snapshot, diffnet.forward_encoder(global_snapshot, batch)
    )
    return _regularizer_terms(p_local, p_global)


def _check_same_specs(local: SiameseModel, global_snapshot: SiameseModel) -> None:
    if (
        local.encoder.spec != global_snapshot.encoder.spec
        or local.predictor.spec != global_snapshot.predictor.spec
    ):
        raise ShapeError("local and global models have different layer specs")


def combined_loss(
    model: SiameseModel,
    global_snapshot: SiameseModel | None,
    batches: list[ClusterBatch],
    lam: float,
    solo_inputs=None,
) -> tuple[LossReport, GradientSet]:
    """Cluster-contrastive term plus lam-weighted agreement regularizer, with
    exact parameter gradients for the local model.

    `solo_inputs` rows (members of singleton clusters) join only the
    regularizer mean. With lam == 0 the regularizer and the global forward pass
    are skipped entirely.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if lam > 0 and global_snapshot is None:
        raise ConfigError("lambda > 0 requires a global snapshot")
    if global_snapshot is not None:
        _check_same_specs(model, global_snapshot)

    parts = [b.inputs for b in batches]
    if solo_inputs is not None and len(solo_inputs):
        parts.append(as_matrix(solo_inputs, "solo inputs"))
    if not parts:
        raise ContractError("no inputs: need cluster batches or solo rows")
    x_all = np.vstack(parts)

    z, p, taps = diffnet.forward_full(model, x_all)
    upstream = np.zeros_like(p)

    contrastive = 0.0
    k_eff = len(batches)
    offset = 0
    for batch in batches:
        sl = slice(offset, offset + batch.size)
        contrib, dp = _batch_terms(z[sl], p[sl])
        weight = 1.0 / (k_eff * batch.size)
        contrastive += weight * contrib
        upstream[sl] += weight * dp
        offset += batch.size

    regularizer = 0.0
    if lam > 0:
        assert global_snapshot is not None
        zg = diffnet.forward_encoder(global_snapshot, x_all)
        pg = diffnet.forward_predictor(global_snapshot, zg)
        raw, dp_reg = _regularizer_terms(p, pg)
        regularizer = lam * raw
        upstream += lam * dp_reg

    grads = diffnet.backward(model, taps, upstream)
    return LossReport.build(contrastive, regularizer), grads
