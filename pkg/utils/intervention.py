"""
Low-rank representation interventions applied as backbone hooks.

Representations are row-major (one node per row), so the column-form edits
read, for a row h:

- loreft: h + (h Wᵀ + b − h Rᵀ) R, with R row-orthonormal
- direft: h + (h W1ᵀ + b) W2
- uv:     h + h V Uᵀ

Each variant starts as the exact identity: loreft with W = R and b = 0,
direft with W2 = 0, uv with U = 0.
"""
import logging
import math

import numpy as np

from utils.checkpoint import read_container, write_container
from utils.errors import CheckpointError, ContractError, ShapeError
from utils.kernel import (
    Parameter, make_rng, matmul, orthogonality_residual, put_rows, qr_reorthogonalize,
    take_rows, transpose,
)

logger = logging.getLogger(__name__)

INTERVENTION_FORMAT = "ttreft.intervention"


def retract_rows(R):
    """QR retraction that leaves matrices already on the manifold untouched"""
    if orthogonality_residual(R) <= 1e-13:
        return R
    return qr_reorthogonalize(R)


class Intervention:
    """
    One independent parameter set per intervened layer.

    Parameters:
    - rank: subspace rank r
    - layers: intervened layer indices (1..K)
    - layer_dims: mapping layer -> width d_l
    - params: mapping layer -> {name: Parameter}
    """
    kind = None
    param_names = ()

    def __init__(self, rank, layers, layer_dims, params):
        self.rank = int(rank)
        self.layers = tuple(sorted(int(l) for l in layers))
        self.layer_dims = {int(l): int(d) for l, d in layer_dims.items()}
        self.params = params

    @classmethod
    def create(cls, rank, layers, dims, seed):
        layer_dims = {}
        params = {}
        for layer in sorted(layers):
            if not 1 <= layer < len(dims):
                raise ShapeError(f"layer {layer} does not exist in a {len(dims) - 1}-layer backbone")
            d = dims[layer]
            if rank > d:
                raise ShapeError(f"rank {rank} exceeds width {d} of layer {layer}")
            layer_dims[layer] = d
            rng = make_rng(seed, "intervention", layer)
            arrays = cls._initial_arrays(rng, rank, d)
            params[layer] = {name: cls._make_parameter(layer, name, arrays[name]) for name in cls.param_names}
        return cls(rank, layers, layer_dims, params)

    @classmethod
    def _make_parameter(cls, layer, name, array):
        return Parameter(array, name=f"intervention.l{layer}.{name}")

    @classmethod
    def _initial_arrays(cls, rng, rank, d):
        raise NotImplementedError

    def _delta(self, p, h):
        raise NotImplementedError

    @staticmethod
    def formula_count(rank, d):
        raise NotImplementedError

    def flops_per_row(self, d):
        raise NotImplementedError

    def apply(self, h, layer):
        """Edited rows for a |P|×d_l block of representations at ``layer``"""
        if layer not in self.params:
            raise ContractError(f"layer {layer} is not intervened (layers {list(self.layers)})")
        if h.data.ndim != 2 or h.shape[1] != self.layer_dims[layer]:
            raise ShapeError(f"layer {layer} expects width {self.layer_dims[layer]}, got {h.shape}")
        return h + self._delta(self.params[layer], h)

    def parameters(self):
        return [self.params[l][name] for l in self.layers for name in self.param_names]

    def parameter_count(self):
        """Direct enumeration of trainable leaves"""
        return int(sum(p.data.size for p in self.parameters()))

    def flops(self, selected):
        return int(sum(selected * self.flops_per_row(self.layer_dims[l]) for l in self.layers))

    def orthogonality_residuals(self):
        return {}

    def snapshot(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def restore(self, snapshot):
        for p in self.parameters():
            p.data = snapshot[p.name].copy()

    def named_arrays(self):
        return [(f"l{l}.{name}", self.params[l][name].data) for l in self.layers for name in self.param_names]


class LoReft(Intervention):
    kind = "loreft"
    param_names = ("R", "W", "b")

    @classmethod
    def _make_parameter(cls, layer, name, array):
        retraction = retract_rows if name == "R" else None
        return Parameter(array, name=f"intervention.l{layer}.{name}", retraction=retraction)

    @classmethod
    def _initial_arrays(cls, rng, rank, d):
        R = qr_reorthogonalize(rng.standard_normal((rank, d)))
        return {"R": R, "W": R.copy(), "b": np.zeros(rank)}

    def _delta(self, p, h):
        target = matmul(h, transpose(p["W"])) + p["b"]
        return matmul(target - matmul(h, transpose(p["R"])), p["R"])

    @staticmethod
    def formula_count(rank, d):
        return 2 * rank * d + rank

    def flops_per_row(self, d):
        return 3 * self.rank * d

    def orthogonality_residuals(self):
        return {l: orthogonality_residual(self.params[l]["R"].data) for l in self.layers}


class DiReft(Intervention):
    kind = "direft"
    param_names = ("W1", "W2", "b")

    @classmethod
    def _initial_arrays(cls, rng, rank, d):
        return {"W1": qr_reorthogonalize(rng.standard_normal((rank, d))),
                "W2": np.zeros((rank, d)), "b": np.zeros(rank)}

    def _delta(self, p, h):
        return matmul(matmul(h, transpose(p["W1"])) + p["b"], p["W2"])

    @staticmethod
    def formula_count(rank, d):
        return 2 * rank * d + rank

    def flops_per_row(self, d):
        return 2 * self.rank * d


class UvIntervention(Intervention):
    kind = "uv"
    param_names = ("U", "V")

    @classmethod
    def _initial_arrays(cls, rng, rank, d):
        return {"U": np.zeros((d, rank)), "V": rng.standard_normal((d, rank)) / math.sqrt(d)}

    def _delta(self, p, h):
        return matmul(matmul(h, p["V"]), transpose(p["U"]))

    @staticmethod
    def formula_count(rank, d):
        return 2 * d * rank

    def flops_per_row(self, d):
        return 2 * self.rank * d


VARIANTS = {cls.kind: cls for cls in (LoReft, DiReft, UvIntervention)}


def initialize(kind, dims, rank, layers, seed):
    """
    Fresh intervention of ``kind`` whose forward effect is exactly the identity.

    ``dims`` is the backbone's width chain [d_in, d_1, ..., d_K].
    """
    try:
        cls = VARIANTS[kind]
    except KeyError:
        raise ContractError(f"unknown intervention kind {kind!r}")
    return cls.create(rank, layers, dims, seed)


def parameter_count(kind, dims, rank, layers):
    """Closed-form tunable parameter count: Σ over intervened layers"""
    cls = VARIANTS[kind]
    return int(sum(cls.formula_count(rank, dims[l]) for l in layers))


def make_hook(variant, mask, layers=None):
    """
    Per-layer hooks that edit the rows in P and pass every other row through.

    Returns a mapping layer -> callable for backbone.forward; with an empty
    target set every hook is the identity.
    """
    index = mask.indices
    layers = variant.layers if layers is None else tuple(layers)

    def hook_for(layer):
        def hook(h):
            if index.size == 0:
                return h
            return put_rows(h, index, variant.apply(take_rows(h, index), layer))
        return hook

    return {layer: hook_for(layer) for layer in layers}


def save_intervention(variant, path):
    return write_container(path, INTERVENTION_FORMAT, variant.named_arrays(), {
        "kind": variant.kind,
        "rank": variant.rank,
        "layers": list(variant.layers),
        "layer_dims": {str(l): d for l, d in variant.layer_dims.items()},
    })


def load_intervention(path):
    arrays, metadata = read_container(path, INTERVENTION_FORMAT)
    try:
        cls = VARIANTS[metadata["kind"]]
        layers = [int(l) for l in metadata["layers"]]
        layer_dims = {int(l): int(d) for l, d in metadata["layer_dims"].items()}
        rank = int(metadata["rank"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed intervention metadata ({e})")
    by_name = dict(arrays)
    params = {}
    for layer in layers:
        params[layer] = {}
        for name in cls.param_names:
            key = f"l{layer}.{name}"
            if key not in by_name:
                raise CheckpointError(f"{path}: missing array {key}")
            params[layer][name] = cls._make_parameter(layer, name, by_name[key])
    return cls(rank, layers, layer_dims, params)
