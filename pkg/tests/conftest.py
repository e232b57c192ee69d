import numpy as np
import pytest

from utils.backbone import FrozenBackbone, GcnLayer, pretrain
from utils.config import ExperimentConfig
from utils.experiment import build_benchmark
from utils.graph_store import adjacency_from_edges, normalize
from utils.kernel import make_rng


@pytest.fixture
def small_config(tmp_path):
    """A config small enough for a full pretrain/adapt/eval chain in a unit test"""
    config = ExperimentConfig().update({
        "data": {"n": 90, "classes": 3, "p_in": 0.15, "p_out": 0.01, "feature_dim": 8, "mean_scale": 2.0},
        "backbone": {"hidden": 12, "epochs": 40, "patience": 20, "dropout": 0.0},
        "intervention": {"rank": 3, "layers": [1]},
        "ssl": {"epochs": 4},
        "run": {"seeds": [0], "out_dir": str(tmp_path / "runs")},
    })
    return config.validate()


@pytest.fixture
def benchmark(small_config):
    return build_benchmark(small_config.data, seed=0)


@pytest.fixture
def backbone(small_config, benchmark):
    return pretrain(benchmark.source, benchmark.masks, small_config.backbone, seed=0)


def path_graph(n):
    return adjacency_from_edges(n, [(i, i + 1) for i in range(n - 1)])


def random_backbone(dims, adj, seed=0, activation="relu", zero_bias=False):
    """Hand-built frozen backbone with random weights over ``adj``"""
    rng = make_rng(seed, "test-backbone")
    layers = []
    for a, b in zip(dims, dims[1:]):
        bias = np.zeros(b) if zero_bias else rng.standard_normal(b)
        layers.append(GcnLayer(rng.standard_normal((a, b)), bias))
    return FrozenBackbone.build(layers, normalize(adj), activation)
