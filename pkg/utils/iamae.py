"""
Intervention-aware masked autoencoding and the test-time adaptation loop.

Only the intervention, a small decoder and the two mask tokens are trained;
the backbone is read-only and its fingerprint is checked on the way out.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from utils.backbone import forward, predict_proba
from utils.errors import AdaptationDivergedError, ContractError, ForgettingGuardError, OrthogonalityError
from utils.intervention import make_hook
from utils.kernel import (
    AdamState, Parameter, Tape, Tensor, adam_step, as_tensor, div, log, log_softmax, make_rng, matmul,
    mul, power, put_rows, reduce_sum, relu, softmax, spmm, sqrt, take_rows, tile_rows,
)
from utils.selection import InterventionMask, select_nodes

logger = logging.getLogger(__name__)

ORTHOGONALITY_TOLERANCE = 1e-6
MARGINAL_EPS = 1e-5


def mask_probabilities(mask, adj, cfg, uniform=False):
    """
    p_i = ρ·(β + (1−β)·C_i / (max_k C_k + ε)), with C_i the number of
    intervened neighbours of node i in the raw adjacency.

    ``uniform`` gives every node probability ρ (plain masked autoencoding).
    """
    n = len(mask.m)
    if uniform:
        return np.full(n, cfg.rho)
    counts = np.asarray(adj @ mask.m.astype(np.float64)).ravel()
    peak = counts.max(initial=0.0)
    return cfg.rho * (cfg.beta + (1.0 - cfg.beta) * counts / (peak + cfg.eps))


def mask_features(X, p_mask, token, rng):
    """
    Replace a Bernoulli(p_mask) sample of rows by ``token``.

    Returns:
    - (masked features tensor, sorted masked node indices)
    """
    p_mask = np.asarray(p_mask, dtype=np.float64)
    masked = np.flatnonzero(rng.random(len(p_mask)) < p_mask)
    X = as_tensor(X)
    if masked.size == 0:
        return X, masked
    return put_rows(X, masked, tile_rows(token, masked.size)), masked


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Decoder:
    """
    Maps hidden representations back to input features.

    ``gcn`` propagates once over Â, ``mlp`` is two dense layers, ``linear``
    one dense layer.
    """

    def __init__(self, kind, params):
        self.kind = kind
        self.params = params

    @classmethod
    def create(cls, kind, hidden_dim, out_dim, seed):
        rng = make_rng(seed, "decoder")
        if kind in ("gcn", "linear"):
            params = {"W": _glorot(rng, hidden_dim, out_dim), "b": np.zeros(out_dim)}
        elif kind == "mlp":
            params = {"W1": _glorot(rng, hidden_dim, hidden_dim), "b1": np.zeros(hidden_dim),
                      "W2": _glorot(rng, hidden_dim, out_dim), "b2": np.zeros(out_dim)}
        else:
            raise ContractError(f"unknown decoder kind {kind!r}")
        return cls(kind, {name: Parameter(v, name=f"decoder.{name}") for name, v in params.items()})

    def __call__(self, norm_adj, H):
        p = self.params
        if self.kind == "gcn":
            return spmm(norm_adj, matmul(H, p["W"])) + p["b"]
        if self.kind == "linear":
            return matmul(H, p["W"]) + p["b"]
        return matmul(relu(matmul(H, p["W1"]) + p["b1"]), p["W2"]) + p["b2"]

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.data.size for p in self.parameters()))


def reconstruct(bb, hooks, X_masked, masked, decoder, remask_token):
    """
    Encode with the hooked backbone, re-mask the masked rows of the last
    hidden layer with ``remask_token`` and decode.

    For a one-layer backbone the output layer stands in for the hidden layer.
    """
    logits, acts = forward(bb, X_masked, hooks=hooks)
    H = acts[-2] if bb.depth > 1 else logits
    if masked.size:
        H = put_rows(H, masked, tile_rows(remask_token, masked.size))
    return decoder(bb.norm_adj, H)


def sce_loss(X, Z, masked, gamma):
    """
    Scaled cosine error over the masked rows: mean of (1 − cos(x_i, z_i))^γ.

    Rows where either vector has zero norm are left out of the average.

    Returns:
    - (loss tensor, number of excluded rows)
    """
    X = np.asarray(X, dtype=np.float64)
    masked = np.asarray(masked, dtype=np.int64)
    if masked.size:
        x_norm = np.linalg.norm(X[masked], axis=1)
        z_norm = np.linalg.norm(as_tensor(Z).data[masked], axis=1)
        valid = masked[(x_norm > 0) & (z_norm > 0)]
    else:
        valid = masked
    excluded = int(masked.size - valid.size)
    if excluded:
        logger.warning("SCE loss skipped %d zero-norm row(s)", excluded)
    if valid.size == 0:
        return Tensor(0.0), excluded

    x = X[valid]
    z = take_rows(Z, valid)
    dot = reduce_sum(mul(z, x), axis=1)
    z_len = sqrt(reduce_sum(mul(z, z), axis=1))
    cosine = div(dot, mul(z_len, np.linalg.norm(x, axis=1)))
    # relu only clips rounding below zero
    errors = power(relu(1.0 - cosine), gamma)
    return reduce_sum(errors) * (1.0 / valid.size), excluded


def entropy_loss(logits, index=None, diversity=0.0):
    """
    Mean predictive entropy of softmax(logits) over ``index`` (all rows by default).

    With ``diversity`` > 0 the entropy of the mean prediction is subtracted
    at that weight, so sending every row to one class stops being a minimum.
    """
    logits = as_tensor(logits)
    if index is not None:
        logits = take_rows(logits, index)
    rows = logits.shape[0]
    if rows == 0:
        return Tensor(0.0)
    proba = softmax(logits)
    loss = reduce_sum(mul(proba, log_softmax(logits))) * (-1.0 / rows)
    if diversity > 0:
        marginal = reduce_sum(proba, axis=0) * (1.0 / rows)
        loss = loss + reduce_sum(mul(marginal, log(marginal + MARGINAL_EPS))) * diversity
    return loss


@dataclass
class AdaptReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = float("nan")
    selected: int = 0
    threshold: float = float("nan")
    decoder_param_count: int = 0
    token_param_count: int = 0
    excluded_rows: int = 0
    mask: InterventionMask = None

    def to_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for row in self.epochs:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        return path


def _objective_weights(ssl_cfg):
    """(weight on the reconstruction term, weight on the entropy term)"""
    if ssl_cfg.objective == "entropy_only":
        return 0.0, ssl_cfg.lambda_e if ssl_cfg.lambda_e > 0 else 1.0
    return 1.0, ssl_cfg.lambda_e


def adapt(bb, g, masks, sel_cfg, variant, mask_cfg, ssl_cfg, seed):
    """
    Test-time adaptation of ``variant`` on the target graph.

    Parameters:
    - bb: FrozenBackbone on the target graph's normalized adjacency
    - g: target Graph (features and raw adjacency)
    - masks: SplitMasks; the test mask is the adaptation target
    - sel_cfg, mask_cfg, ssl_cfg: SelectionConfig, MaskingConfig, SslConfig
    - variant: freshly initialized intervention, updated in place
    - seed: run seed

    Returns:
    - (variant restored to the lowest-L_ssl snapshot, AdaptReport)
    """
    fingerprint = bb.fingerprint
    if not bb.verify_fingerprint():
        raise ForgettingGuardError("backbone fingerprint does not match its parameters before adaptation")
    test_idx = masks.indices("test")
    if test_idx.size == 0:
        raise ContractError("adaptation needs a nonempty test set")

    feature_dim = g.feature_dim
    hidden_dim = bb.dims[-2] if bb.depth > 1 else bb.dims[-1]
    decoder = Decoder.create(ssl_cfg.decoder, hidden_dim, feature_dim, seed)
    mask_token = Parameter(np.zeros(feature_dim), name="mask_token")
    remask_token = Parameter(np.zeros(hidden_dim), name="remask_token")
    trainable = variant.parameters() + decoder.parameters() + [mask_token, remask_token]
    reconstruction_weight, entropy_weight = _objective_weights(ssl_cfg)

    mask, _, threshold = select_nodes(predict_proba(bb, g.features), masks, sel_cfg, seed)
    report = AdaptReport(selected=mask.size, threshold=threshold, mask=mask,
                         decoder_param_count=decoder.parameter_count(),
                         token_param_count=feature_dim + hidden_dim)
    if mask.size == 0:
        logger.warning("Empty intervention set: only the decoder and mask tokens will train")

    def mask_probs_for(current):
        return mask_probabilities(current, g.adj, mask_cfg, uniform=ssl_cfg.objective == "mae_uniform")

    p_mask = mask_probs_for(mask)
    state = AdamState()
    best = None
    for epoch in range(ssl_cfg.epochs):
        if sel_cfg.resample_each_epoch and epoch > 0:
            hooks = make_hook(variant, mask)
            mask, _, _ = select_nodes(predict_proba(bb, g.features, hooks=hooks), masks, sel_cfg, seed,
                                      stream=(epoch,))
            p_mask = mask_probs_for(mask)

        with Tape() as tape:
            hooks = make_hook(variant, mask)
            X_masked, masked = mask_features(g.features, p_mask, mask_token, make_rng(seed, "feature-mask", epoch))
            if reconstruction_weight > 0 and masked.size:
                Z = reconstruct(bb, hooks, X_masked, masked, decoder, remask_token)
                loss_mae, excluded = sce_loss(g.features, Z, masked, ssl_cfg.gamma)
                report.excluded_rows += excluded
            else:
                loss_mae = Tensor(0.0)
                if reconstruction_weight > 0:
                    logger.warning("Epoch %d masked no nodes; reconstruction term is zero", epoch)
            logits, _ = forward(bb, g.features, hooks=hooks)
            loss_e = entropy_loss(logits, test_idx, diversity=ssl_cfg.diversity)
            loss = loss_mae * reconstruction_weight + loss_e * entropy_weight
            row = {"epoch": epoch, "L_IAMAE": float(loss_mae.data), "L_e": float(loss_e.data),
                   "L_ssl": float(loss.data), "masked": int(masked.size), "selected": mask.size}
            report.epochs.append(row)
            if not np.isfinite(row["L_ssl"]):
                error = AdaptationDivergedError(f"L_ssl is not finite at epoch {epoch}")
                error.report = report
                raise error
            grads = tape.backward(loss)

        if best is None or row["L_ssl"] < best[1]:
            best = (epoch, row["L_ssl"], variant.snapshot())
        logger.debug("adapt epoch %d L_IAMAE %.6f L_e %.6f L_ssl %.6f masked %d selected %d",
                     epoch, row["L_IAMAE"], row["L_e"], row["L_ssl"], row["masked"], row["selected"])

        try:
            adam_step(state, trainable, grads, ssl_cfg.lr)
        except AdaptationDivergedError as e:
            e.report = report
            raise
        for layer, residual in variant.orthogonality_residuals().items():
            if residual >= ORTHOGONALITY_TOLERANCE:
                raise OrthogonalityError(f"layer {layer}: ‖RRᵀ − I‖_F = {residual:.3e} after epoch {epoch}")

    if best is not None:
        report.best_epoch, report.best_loss = best[0], best[1]
        variant.restore(best[2])

    if bb.fingerprint != fingerprint or not bb.verify_fingerprint():
        raise ForgettingGuardError("backbone parameters changed during adaptation")
    report.mask = mask
    report.selected = mask.size
    logger.info("adapted %s over %d epochs: best epoch %d, L_ssl %.6f, |P| = %d",
                variant.kind, ssl_cfg.epochs, report.best_epoch, report.best_loss, mask.size)
    return variant, report


def infer(bb, X, variant, mask, mode="gated_dual_pass"):
    """
    Logits after adaptation.

    ``gated_dual_pass`` takes hooked logits for nodes in P and clean logits
    everywhere else; ``propagating`` uses one hooked pass for all nodes.
    """
    clean, _ = forward(bb, X)
    if mask.size == 0:
        return clean.data
    hooked, _ = forward(bb, X, hooks=make_hook(variant, mask))
    if mode == "propagating":
        return hooked.data
    if mode != "gated_dual_pass":
        raise ContractError(f"unknown inference mode {mode!r}")
    out = clean.data.copy()
    out[mask.indices] = hooked.data[mask.indices]
    return out
