"""
K-layer GCN backbone: forward pass with per-layer hooks, supervised
pretraining with early stopping, the frozen snapshot used at test time,
and the SGC model used by the theory harness.

Layer l computes h^(l) = act(Â h^(l-1) W_l + b_l), with ReLU between layers
and no activation after the last one. A hook registered for layer l sees
h^(l) right after the activation and before layer l+1 propagates it.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.special

from utils.checkpoint import fingerprint_arrays, read_container, write_container
from utils.errors import CheckpointError, ContractError, ShapeError, TrainingError
from utils.graph_store import normalize
from utils.kernel import (
    AdamState, Parameter, Tape, Tensor, adam_step, as_tensor, log_softmax, make_rng,
    matmul, mul, reduce_sum, relu, spmm, take_rows,
)

logger = logging.getLogger(__name__)

BACKBONE_FORMAT = "ttreft.backbone"


@dataclass(frozen=True)
class GcnLayer:
    weight: np.ndarray
    bias: np.ndarray


def _read_only(array):
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


def _named_arrays(layers):
    named = []
    for i, layer in enumerate(layers):
        named.append((f"layer{i}.weight", layer.weight))
        named.append((f"layer{i}.bias", layer.bias))
    return named


@dataclass(frozen=True)
class FrozenBackbone:
    """
    Pretrained GCN parameters plus the normalized adjacency they run on.

    Parameter arrays are write-protected, and ``fingerprint`` hashes them so
    callers can prove the weights did not move during adaptation.
    """
    layers: tuple
    norm_adj: object
    activation: str = "relu"
    fingerprint: str = ""

    @classmethod
    def build(cls, layers, norm_adj, activation="relu"):
        layers = tuple(GcnLayer(_read_only(l.weight), _read_only(l.bias)) for l in layers)
        if not layers:
            raise ShapeError("a backbone needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError(f"layer dims do not chain: {prev.weight.shape} then {nxt.weight.shape}")
        for layer in layers:
            if layer.bias.shape != (layer.weight.shape[1],):
                raise ShapeError(f"bias shape {layer.bias.shape} does not match weight {layer.weight.shape}")
        return cls(layers, norm_adj, activation, compute_fingerprint(layers))

    @property
    def depth(self):
        return len(self.layers)

    @property
    def dims(self):
        """[d_in, d_1, ..., d_K]; d_K is the class count"""
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    @property
    def num_classes(self):
        return self.dims[-1]

    def with_graph(self, norm_adj):
        return replace(self, norm_adj=norm_adj)

    def verify_fingerprint(self):
        return compute_fingerprint(self.layers) == self.fingerprint


def compute_fingerprint(layers):
    return fingerprint_arrays(_named_arrays(layers), tag=BACKBONE_FORMAT)


def parameter_count(bb):
    return int(sum(l.weight.size + l.bias.size for l in bb.layers))


def _activate(h, activation):
    return relu(h) if activation == "relu" else h


def _dropout(h, rate, rng):
    if rate <= 0.0 or rng is None:
        return h
    keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return mul(h, keep)


def gcn_forward(weights, biases, norm_adj, X, activation="relu", hooks=None, dropout=0.0, rng=None):
    """
    Run the GCN on ``X``.

    Parameters:
    - weights, biases: per-layer tensors or arrays
    - norm_adj: normalized sparse adjacency
    - hooks: optional mapping layer index (0..K) -> callable(Tensor) -> Tensor
    - dropout, rng: training-time dropout on every layer input

    Returns:
    - (logits, acts) where acts[l] is h^(l) after any hook, acts[0] the input
    """
    hooks = hooks or {}
    h = as_tensor(X)
    h = _apply_hook(hooks, 0, h)
    acts = [h]
    depth = len(weights)
    for l, (W, b) in enumerate(zip(weights, biases), start=1):
        h = _dropout(h, dropout, rng)
        h = spmm(norm_adj, matmul(h, W)) + b
        if l < depth:
            h = _activate(h, activation)
        h = _apply_hook(hooks, l, h)
        acts.append(h)
    return h, acts


def _apply_hook(hooks, layer, h):
    hook = hooks.get(layer)
    if hook is None:
        return h
    out = hook(h)
    if not isinstance(out, Tensor) or out.shape != h.shape:
        raise ContractError(
            f"hook at layer {layer} returned shape {getattr(out, 'shape', None)}, expected {h.shape}"
        )
    return out


def forward(bb, X, hooks=None):
    """Deterministic forward of a frozen backbone; see gcn_forward"""
    return gcn_forward(
        [l.weight for l in bb.layers], [l.bias for l in bb.layers],
        bb.norm_adj, X, activation=bb.activation, hooks=hooks,
    )


def predict_proba(bb, X, hooks=None):
    logits, _ = forward(bb, X, hooks=hooks)
    return scipy.special.softmax(logits.data, axis=1)


def sgc_forward(norm_adj, X, W, K):
    """softmax(Â^K X W): no nonlinearity, no bias"""
    Z = np.asarray(X, dtype=np.float64)
    for _ in range(K):
        Z = np.asarray(norm_adj @ Z)
    return scipy.special.softmax(Z @ np.asarray(W, dtype=np.float64), axis=1)


def accuracy(logits, labels, index):
    index = np.asarray(index)
    if index.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(np.asarray(logits)[index], axis=1) == labels[index]))


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def cross_entropy(logits, labels, index):
    """Mean negative log-likelihood of ``labels[index]`` under softmax(logits)"""
    index = np.asarray(index)
    onehot = np.zeros((len(index), logits.shape[1]))
    onehot[np.arange(len(index)), labels[index]] = 1.0
    picked = mul(take_rows(log_softmax(logits), index), onehot)
    return reduce_sum(picked) * (-1.0 / len(index))


def pretrain(g, masks, cfg, seed, history=None):
    """
    Supervised pretraining on the source split.

    Adam on cross-entropy over train nodes plus weight decay, early stopping
    on validation accuracy. Returns the best-validation snapshot as a
    FrozenBackbone on ``g``'s normalized adjacency.
    When ``history`` is a list, one dict per epoch (epoch, loss, val_acc) is
    appended to it.
    """
    norm_adj = normalize(g.adj)
    dims = [g.feature_dim] + [cfg.hidden] * (cfg.depth - 1) + [g.num_classes]
    init_rng = make_rng(seed, "backbone-init")
    weights = [Parameter(_glorot(init_rng, a, b), name=f"layer{i}.weight")
               for i, (a, b) in enumerate(zip(dims, dims[1:]))]
    biases = [Parameter(np.zeros(b), name=f"layer{i}.bias") for i, b in enumerate(dims[1:])]

    def snapshot():
        return [GcnLayer(W.data.copy(), b.data.copy()) for W, b in zip(weights, biases)]

    train_idx, val_idx = masks.indices("train"), masks.indices("val")
    best_layers, best_val, stale = snapshot(), -1.0, 0
    state = AdamState()
    for epoch in range(cfg.epochs):
        with Tape() as tape:
            logits, _ = gcn_forward(weights, biases, norm_adj, g.features, cfg.activation,
                                    dropout=cfg.dropout, rng=make_rng(seed, "dropout", epoch))
            loss = cross_entropy(logits, g.labels, train_idx)
            if cfg.weight_decay > 0:
                decay = sum(reduce_sum(W * W) for W in weights) * (0.5 * cfg.weight_decay)
                loss = loss + decay
            if not np.isfinite(loss.data):
                raise TrainingError(f"pretraining diverged at epoch {epoch} (loss {float(loss.data)})")
            grads = tape.backward(loss)
        adam_step(state, weights + biases, grads, cfg.lr)

        eval_logits, _ = gcn_forward([W.data for W in weights], [b.data for b in biases],
                                     norm_adj, g.features, cfg.activation)
        val_acc = accuracy(eval_logits.data, g.labels, val_idx)
        logger.debug("pretrain epoch %d loss %.6f val_acc %.4f", epoch, float(loss.data), val_acc)
        if history is not None:
            history.append({"epoch": epoch, "loss": float(loss.data), "val_acc": val_acc})
        if val_acc > best_val:
            best_layers, best_val, stale = snapshot(), val_acc, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("early stopping at epoch %d (best val acc %.4f)", epoch, best_val)
                break

    bb = FrozenBackbone.build(best_layers, norm_adj, cfg.activation)
    logger.info("pretrained %d-layer GCN, %d parameters, fingerprint %s",
                bb.depth, parameter_count(bb), bb.fingerprint[:12])
    return bb


def save_backbone(bb, path):
    return write_container(path, BACKBONE_FORMAT, _named_arrays(bb.layers),
                           {"activation": bb.activation, "dims": bb.dims})


def load_backbone(path, norm_adj):
    arrays, metadata = read_container(path, BACKBONE_FORMAT)
    if len(arrays) % 2 or not arrays:
        raise CheckpointError(f"{path}: expected weight/bias pairs, found {len(arrays)} arrays")
    layers = [GcnLayer(arrays[i][1], arrays[i + 1][1]) for i in range(0, len(arrays), 2)]
    try:
        bb = FrozenBackbone.build(layers, norm_adj, metadata.get("activation", "relu"))
    except ShapeError as e:
        raise CheckpointError(f"{path}: {e}")
    if bb.fingerprint != metadata["fingerprint"]:
        raise CheckpointError(f"{path}: backbone fingerprint mismatch")
    return bb
