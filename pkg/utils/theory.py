"""
Numerical check of the risk-reduction result for repaired orthogonal shifts.

Setting (row convention, one node per row): labels come from a one-step SGC,
Y = softmax(Â X W). At test time features arrive rotated, X̃ = X Qᵀ, and are
repaired by Φ(X̃) = (1−α) X̃ + α X̃ (UV)ᵀ. Per node the representation error is
S_α x with S_α = (1−α) C + α D, C = Q − I and D = UVQ − I, so the expected
squared logit distance is the quadratic

    d(α) = γ_w (a α² + b α + c),   a = E − F + G,  b = F − 2E,  c = E

with γ_w = tr(WWᵀ) and E, F, G trace coefficients against the feature
covariance Σ_x. The graph enters only through ‖Â‖_F²/N: for zero-mean rows
drawn independently with covariance Σ_x, E‖Â X Sᵀ W‖_F² / N equals
‖Â‖_F²/N · tr(SᵀWWᵀSΣ_x), so E, F, G carry the factor ‖Â‖_F²/(N·γ_w) and
γ_w is pulled out in front of the quadratic. The harness builds instances,
evaluates the coefficients, cross-checks them by Monte Carlo and tests
Risk(α*) < Risk(0).
"""
import logging
from dataclasses import asdict, dataclass

import networkx as nx
import numpy as np
import pandas as pd
import scipy.linalg
import scipy.special
from scipy.stats import ortho_group

from utils.backbone import sgc_forward
from utils.errors import ConfigError, TheoryConstructionError
from utils.graph_store import adjacency_from_edges, normalize
from utils.kernel import make_rng

logger = logging.getLogger(__name__)

ALPHA_GRID = np.linspace(0.0, 1.0, 11)
MONTE_CARLO_DRAWS = 2000
MAX_RESAMPLES = 20
FLAT_TOLERANCE = 1e-12


@dataclass(frozen=True)
class TheoryInstance:
    norm_adj: object
    X: np.ndarray
    W: np.ndarray
    Q: np.ndarray
    U: np.ndarray
    V: np.ndarray
    Y: np.ndarray
    sigma_x: np.ndarray
    seed: int = 0
    resamples: int = 0

    @classmethod
    def assemble(cls, norm_adj, X, W, Q, U, V, seed=0, resamples=0):
        """Derive labels and covariance for given arrays; X is used as given"""
        X = np.asarray(X, dtype=np.float64)
        Y = sgc_forward(norm_adj, X, W, 1)
        return cls(norm_adj, X, np.asarray(W, float), np.asarray(Q, float), np.asarray(U, float),
                   np.asarray(V, float), Y, X.T @ X / X.shape[0], seed, resamples)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def shifted(self):
        return self.X @ self.Q.T

    @property
    def repair(self):
        return self.U @ self.V

    @property
    def C(self):
        return self.Q - np.eye(self.d)

    @property
    def D(self):
        return self.repair @ self.Q - np.eye(self.d)

    @property
    def gamma_w(self):
        return float(np.trace(self.W @ self.W.T))

    @property
    def graph_energy(self):
        """‖Â‖_F² / N"""
        return float(self.norm_adj.multiply(self.norm_adj).sum() / self.n)

    def repaired(self, alpha):
        shifted = self.shifted
        return (1.0 - alpha) * shifted + alpha * shifted @ self.repair.T

    def error_operator(self, alpha):
        return (1.0 - alpha) * self.C + alpha * self.D


@dataclass(frozen=True)
class QuadraticRisk:
    E: float
    F: float
    G: float
    a: float
    b: float
    c: float
    gamma_w: float
    alpha_star: float
    interior_minimum: bool

    def distance(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        return self.gamma_w * (self.a * alpha ** 2 + self.b * alpha + self.c)


def _centered_features(rng, n, d):
    raw = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(n, d))
    mixing = rng.standard_normal((d, d)) / np.sqrt(d)
    X = raw @ mixing.T
    return X - X.mean(axis=0)


def _repair_basis(W, sigma_x, m):
    """Orthonormal d×m basis: range(W) first, then the leading covariance directions outside it"""
    d = W.shape[0]
    head = scipy.linalg.orth(W)[:, :m]
    if head.shape[1] < m:
        outside = np.eye(d) - head @ head.T
        values, vectors = scipy.linalg.eigh(outside @ sigma_x @ outside)
        order = np.argsort(values)[::-1][: m - head.shape[1]]
        head = np.hstack([head, vectors[:, order]])
    basis, _ = scipy.linalg.qr(head, mode="economic")
    return basis


def _assumption_holds(inst):
    """Repair shrinks the mean squared feature error over the sample rows"""
    X = inst.X
    shifted_error = np.mean(np.sum((X @ inst.C.T) ** 2, axis=1))
    repaired_error = np.mean(np.sum((X @ inst.D.T) ** 2, axis=1))
    return repaired_error < shifted_error, repaired_error, shifted_error


def build_instance(n, d, classes, m, repair_quality, seed, mean_degree=6.0, force_identity_shift=False):
    """
    Random graph, centered bounded features, Haar rotation and a rank-m repair.

    The repair is U = B, V = q·BᵀQᵀ + (1−q)·noise/√d for an orthonormal basis B
    aligned with range(W), so q = 1 and m = d give UV = Qᵀ. Instances where the
    repair does not shrink the feature error (or the W-weighted error) are
    redrawn up to MAX_RESAMPLES times. ``force_identity_shift`` pins Q = I,
    which no repair can improve on, so every draw is rejected.
    """
    if not 1 <= m <= d:
        raise ConfigError(f"repair rank m must lie in 1..{d}, got {m}")
    if not 0.0 <= repair_quality <= 1.0:
        raise ConfigError(f"repair_quality must lie in [0, 1], got {repair_quality}")

    for attempt in range(MAX_RESAMPLES + 1):
        rng = make_rng(seed, "theory", attempt)
        graph = nx.fast_gnp_random_graph(n, min(mean_degree / max(n - 1, 1), 1.0),
                                         seed=int(rng.integers(2 ** 31)))
        edges = np.array(list(graph.edges()), dtype=np.int64).reshape(-1, 2)
        norm_adj = normalize(adjacency_from_edges(n, edges))
        X = _centered_features(rng, n, d)
        W = rng.standard_normal((d, classes))
        Q = ortho_group.rvs(d, random_state=rng) if d > 1 else -np.eye(1)
        if force_identity_shift:
            Q = np.eye(d)
        sigma_x = X.T @ X / n
        U = _repair_basis(W, sigma_x, m)
        noise = rng.standard_normal((m, d)) / np.sqrt(d)
        V = repair_quality * U.T @ Q.T + (1.0 - repair_quality) * noise
        inst = TheoryInstance.assemble(norm_adj, X, W, Q, U, V, seed=seed, resamples=attempt)

        holds, repaired_error, shifted_error = _assumption_holds(inst)
        coefficients = trace_coefficients(inst)
        if holds and coefficients.G < coefficients.E:
            return inst
        logger.warning("Theory instance seed %d attempt %d rejected (repaired %.4f vs shifted %.4f, G %.4f vs E %.4f)",
                       seed, attempt, repaired_error, shifted_error, coefficients.G, coefficients.E)
    raise TheoryConstructionError(
        f"no instance satisfying the repair assumption after {MAX_RESAMPLES} resamples (seed {seed})"
    )


def _weighted_trace(left, right, inst):
    return float(np.trace(left.T @ inst.W @ inst.W.T @ right @ inst.sigma_x))


def trace_coefficients(inst):
    """E, F, G from the trace formulas and the minimiser α* of d on [0, 1]"""
    scale = inst.graph_energy / inst.gamma_w
    C, D = inst.C, inst.D
    E = scale * _weighted_trace(C, C, inst)
    F = scale * (_weighted_trace(C, D, inst) + _weighted_trace(D, C, inst))
    G = scale * _weighted_trace(D, D, inst)
    a, b, c = E - F + G, F - 2.0 * E, E
    gamma_w = inst.gamma_w
    # a = ‖C − D‖² in the weighted inner product, so only cancellation makes it negative
    tol = FLAT_TOLERANCE * (abs(E) + abs(G))

    if a > tol:
        alpha_star = float(np.clip(-b / (2.0 * a), 0.0, 1.0))
        interior = 0.0 < -b / (2.0 * a) < 1.0
    else:
        if b >= -tol:
            logger.warning("d(α) has no interior minimum (a = %.3e, b = %.3e)", a, b)
        # linear on [0, 1]: the minimum sits at an endpoint
        alpha_star = 1.0 if a + b < -tol else 0.0
        interior = False
    return QuadraticRisk(E, F, G, a, b, c, gamma_w, alpha_star, interior)


def trace_distance(inst, alpha):
    """d(α) evaluated directly as ‖Â‖_F²/N · tr(S_αᵀ WWᵀ S_α Σ_x)"""
    S = inst.error_operator(alpha)
    return inst.graph_energy * float(np.trace(S.T @ inst.W @ inst.W.T @ S @ inst.sigma_x))


def monte_carlo_distance(inst, alphas=ALPHA_GRID, draws=MONTE_CARLO_DRAWS, seed=0, chunk=250):
    """
    E‖Â X S_αᵀ W‖_F² / N over fresh feature matrices with rows ~ N(0, Σ_x).

    Returns one estimate per entry of ``alphas``.
    """
    rng = make_rng(inst.seed, "monte-carlo", seed)
    n, d = inst.n, inst.d
    factor = scipy.linalg.cholesky(inst.sigma_x + 1e-12 * np.eye(d), lower=True)
    operators = [inst.error_operator(a).T @ inst.W for a in alphas]
    totals = np.zeros(len(operators))
    done = 0
    while done < draws:
        size = min(chunk, draws - done)
        samples = rng.standard_normal((size, n, d)) @ factor.T
        # one sparse product over all draws, stacked column-wise
        stacked = samples.transpose(1, 0, 2).reshape(n, size * d)
        propagated = np.asarray(inst.norm_adj @ stacked).reshape(n, size, d)
        for k, M in enumerate(operators):
            totals[k] += np.sum((propagated @ M) ** 2)
        done += size
    return totals / (draws * n)


def sample_distance(inst, alpha):
    """Mean squared logit distance over the sample rows, ‖Â(Φ(X̃) − X)W‖_F² / N"""
    diff = np.asarray(inst.norm_adj @ (inst.repaired(alpha) - inst.X)) @ inst.W
    return float(np.sum(diff ** 2) / inst.n)


def predictions(inst, alpha):
    return sgc_forward(inst.norm_adj, inst.repaired(alpha), inst.W, 1)


def empirical_risk(inst, alpha):
    """Mean ℓ1 distance between repaired predictions and the label distributions"""
    return float(np.mean(np.sum(np.abs(predictions(inst, alpha) - inst.Y), axis=1)))


def lipschitz_estimate(inst, alphas=ALPHA_GRID):
    """Largest observed ‖Δsoftmax‖₁ / ‖Δlogits‖₂ over rows and grid points"""
    clean = np.asarray(inst.norm_adj @ inst.X) @ inst.W
    best = 0.0
    for alpha in alphas:
        logits = np.asarray(inst.norm_adj @ inst.repaired(alpha)) @ inst.W
        gap = np.linalg.norm(logits - clean, axis=1)
        moved = gap > 1e-12
        if not moved.any():
            continue
        spread = np.sum(np.abs(scipy.special.softmax(logits, axis=1) - inst.Y), axis=1)
        best = max(best, float(np.max(spread[moved] / gap[moved])))
    return best


@dataclass
class TheoremReport:
    seed: int
    E: float
    F: float
    G: float
    a: float
    b: float
    c: float
    gamma_w: float
    alpha_star: float
    interior_minimum: bool
    d0: float
    d1: float
    d_star: float
    risk0: float
    risk_star: float
    distance_passed: bool
    passed: bool
    quadratic_error: float
    lipschitz: float
    lipschitz_bound_holds: bool
    monte_carlo_error: float = float("nan")
    resamples: int = 0


def verify_theorem(inst, monte_carlo=True, draws=MONTE_CARLO_DRAWS):
    """
    Evaluate the risk claim on one instance.

    ``passed`` is Risk(α*) < Risk(0); ``distance_passed`` is d(α*) < d(0) and
    d(1) < d(0). ``quadratic_error`` is the largest relative gap between the
    quadratic and the direct trace formula over the grid, ``monte_carlo_error``
    the largest relative gap to the Monte Carlo estimate.
    """
    q = trace_coefficients(inst)
    d0, d1, d_star = (float(q.distance(x)) for x in (0.0, 1.0, q.alpha_star))
    risk0, risk_star = empirical_risk(inst, 0.0), empirical_risk(inst, q.alpha_star)

    direct = np.array([trace_distance(inst, a) for a in ALPHA_GRID])
    # floor the denominator so an exactly repaired endpoint does not blow up the ratio
    scale = np.maximum(np.abs(direct), 1e-9 * np.abs(direct).max() + 1e-300)
    quadratic_error = float(np.max(np.abs(q.distance(ALPHA_GRID) - direct) / scale))

    lipschitz = lipschitz_estimate(inst)
    bound_holds = all(
        empirical_risk(inst, a) <= lipschitz * np.sqrt(sample_distance(inst, a)) + 1e-12 for a in ALPHA_GRID
    )

    mc_error = float("nan")
    if monte_carlo:
        estimate = monte_carlo_distance(inst, ALPHA_GRID, draws=draws)
        mc_error = float(np.max(np.abs(estimate - direct) / scale))

    return TheoremReport(
        seed=inst.seed, E=q.E, F=q.F, G=q.G, a=q.a, b=q.b, c=q.c, gamma_w=q.gamma_w,
        alpha_star=q.alpha_star, interior_minimum=q.interior_minimum,
        d0=d0, d1=d1, d_star=d_star, risk0=risk0, risk_star=risk_star,
        distance_passed=d_star < d0 and d1 < d0, passed=risk_star < risk0,
        quadratic_error=quadratic_error, lipschitz=lipschitz, lipschitz_bound_holds=bound_holds,
        monte_carlo_error=mc_error, resamples=inst.resamples,
    )


def run_trials(trials, n=200, d=16, classes=4, m=8, repair_quality=0.9, seed=0,
               monte_carlo=True, draws=MONTE_CARLO_DRAWS, progress=None):
    """
    One row per trial seed (seed, seed+1, ...); construction failures are kept
    as rows with ``valid`` False.

    ``progress`` optionally wraps the seed iterable (e.g. tqdm).
    """
    seeds = range(seed, seed + trials)
    if progress is not None:
        seeds = progress(seeds)
    rows = []
    for trial_seed in seeds:
        try:
            inst = build_instance(n, d, classes, m, repair_quality, trial_seed)
        except TheoryConstructionError as e:
            logger.warning("%s", e)
            rows.append({"seed": trial_seed, "valid": False})
            continue
        row = asdict(verify_theorem(inst, monte_carlo=monte_carlo, draws=draws))
        row["valid"] = True
        rows.append(row)
    return pd.DataFrame(rows)


def summarize_trials(table):
    """Pass counts over valid trials, with the distance and risk inequalities counted separately"""
    valid = table[table["valid"].astype(bool)] if len(table) else table
    count = len(valid)
    summary = {"trials": int(len(table)), "valid": int(count)}
    if count == 0:
        return summary
    summary.update({
        "risk_passed": int(valid["passed"].astype(bool).sum()),
        "distance_passed": int(valid["distance_passed"].astype(bool).sum()),
        "d1_below_d0": int((valid["d1"] < valid["d0"]).sum()),
        "lipschitz_bound_holds": int(valid["lipschitz_bound_holds"].astype(bool).sum()),
        "max_monte_carlo_error": float(valid["monte_carlo_error"].max()),
        "pass_rate": float(valid["passed"].astype(bool).mean()),
    })
    return summary
