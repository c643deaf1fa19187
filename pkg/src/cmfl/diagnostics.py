"""Theory-side measurements: optima, heterogeneity, committee gap, constants, and the error bound.

Everything here is post-hoc analysis over a finished run and its dataset.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model
from .dataset import FederatedDataset
from .errors import ConfigError, DiagnosticError, DomainError

MAX_CLIENTS = 20
MAX_COMMITTEE = 5
GAP_FLOOR = 1e-12


# -- optimization -------------------------------------------------------------


def minimize_strongly_convex(grad_fn, x0, L, mu, tol, max_iter=200_000):
    """Nesterov's method for mu-strongly convex, L-smooth objectives.

    Uses the constant momentum (sqrt(L) - sqrt(mu)) / (sqrt(L) + sqrt(mu)) with
    a gradient-based restart. Stops once ||grad|| < tol at the main iterate.
    """
    if not 0 < mu <= L:
        raise ConfigError("need 0 < mu <= L")
    beta = (math.sqrt(L) - math.sqrt(mu)) / (math.sqrt(L) + math.sqrt(mu))
    x = np.array(x0, dtype=np.float64)
    x_prev = x.copy()
    for it in range(max_iter):
        y = x + beta * (x - x_prev)
        g_y = grad_fn(y)
        x_prev, x = x, y - g_y / L
        if np.dot(g_y, x - x_prev) > 0:
            x_prev = x.copy()
        g = grad_fn(x)
        if np.linalg.norm(g) < tol:
            return x, it + 1
    raise DiagnosticError(f"no convergence to ||grad|| < {tol} within {max_iter} iterations")


@dataclass
class Optima:
    w_star: np.ndarray
    F_star: float
    w_k_star: list
    F_k_star: np.ndarray
    weights: np.ndarray
    tol: float

    @property
    def weighted_local_floor(self) -> float:
        """sum_k p_k F_k*."""
        return float(self.weights @ self.F_k_star)


def _need_strong_convexity(spec: model.LossSpec):
    if spec.reg_coeff <= 0:
        raise ConfigError("reg_coeff: theory diagnostics need reg_coeff > 0 (unique minimizers)")


def compute_optima(dataset: FederatedDataset, spec: model.LossSpec, tol=1e-8) -> Optima:
    _need_strong_convexity(spec)
    mu = spec.reg_coeff
    p = dataset.weights
    locals_, values = [], []
    for part in dataset.partitions:
        L = model.smoothness_bound(part.samples, mu)
        w, _ = minimize_strongly_convex(lambda v, s=part.samples: model.grad_full(v, s, spec),
                                        spec.zeros(), L, mu, tol)
        locals_.append(w)
        values.append(model.loss(w, part.samples, spec))

    def global_grad(v):
        return sum(pk * model.grad_full(v, part.samples, spec) for pk, part in zip(p, dataset.partitions))

    L = model.smoothness_bound(dataset.all_samples(), mu)
    w_star, _ = minimize_strongly_convex(global_grad, spec.zeros(), L, mu, tol)
    F_star = global_loss(w_star, dataset, spec)
    return Optima(w_star, F_star, locals_, np.array(values), p, tol)


def global_loss(w, dataset: FederatedDataset, spec) -> float:
    return float(dataset.weights @ local_losses(w, dataset, spec))


def local_losses(w, dataset: FederatedDataset, spec) -> np.ndarray:
    return np.array([model.loss(w, part.samples, spec) for part in dataset.partitions])


def gamma(optima: Optima, dataset: FederatedDataset = None, spec=None) -> float:
    """Heterogeneity sum_k p_k (F_k(w*) - F_k*), clamped at 0 within optimizer slack."""
    if dataset is not None:
        terms = local_losses(optima.w_star, dataset, spec) - optima.F_k_star
        value = float(optima.weights @ terms)
    else:
        value = optima.F_star - optima.weighted_local_floor
    if value < 0:
        if value < -2 * optima.tol:
            raise DiagnosticError(f"negative heterogeneity {value:.3e}: an optimizer did not converge")
        warnings.warn(f"heterogeneity {value:.3e} within optimizer slack; clamped to 0")
        value = 0.0
    return value


# -- committee gap ------------------------------------------------------------


def _subset_floor(ids, optima: Optima) -> float:
    ids = list(ids)
    w = optima.weights[ids]
    return float(w @ optima.F_k_star[ids] / w.sum())


def optimal_committee(optima: Optima, C) -> tuple:
    """Exhaustive argmin over C-subsets of the p-weighted mean of F_k*."""
    K = len(optima.F_k_star)
    if K > MAX_CLIENTS or C > MAX_COMMITTEE:
        raise ConfigError(f"optimal-committee search limited to K <= {MAX_CLIENTS}, C <= {MAX_COMMITTEE}")
    if not 1 <= C <= K:
        raise ConfigError(f"C={C} must lie in [1, {K}]")
    best, best_val = None, math.inf
    for subset in itertools.combinations(range(K), C):
        val = _subset_floor(subset, optima)
        if val < best_val - 1e-15:
            best, best_val = subset, val
    return best, best_val


@dataclass
class CommitteeGap:
    phi_min: float
    phi_max: float
    per_round: list  # (round, phi or nan)
    flagged_rounds: list
    optimal_committee: tuple
    optimal_floor: float


def phi(agg_ids, w, dataset, spec, optima: Optima, floor_star) -> float:
    """Aggregation-committee gap for one aggregation set at model w (nan if degenerate)."""
    losses = local_losses(w, dataset, spec)
    ids = list(agg_ids)
    pw = optima.weights[ids] / optima.weights[ids].sum()
    num = float(pw @ losses[ids]) - floor_star
    den = float(optima.weights @ losses) - optima.weighted_local_floor
    if den < GAP_FLOOR:
        return float("nan")
    return num / den


def committee_gap(result, dataset, spec, optima: Optima, C) -> CommitteeGap:
    """phi_min over observed rounds at w^t; phi_max at w* over observed aggregation sets."""
    best, floor_star = optimal_committee(optima, C)
    per_round, flagged = [], []
    for rec in result.records:
        w_t = result.trajectory[rec.round - 1]
        value = phi(rec.aggregation, w_t, dataset, spec, optima, floor_star)
        if math.isnan(value):
            flagged.append(rec.round)
        elif value < -1e-9:
            warnings.warn(f"negative committee gap {value:.3e} at round {rec.round}")
        per_round.append((rec.round, value))
    finite = [v for _, v in per_round if not math.isnan(v)]
    phi_min = min(finite) if finite else float("nan")
    seen = {tuple(sorted(rec.aggregation)) for rec in result.records}
    at_opt = [phi(s, optima.w_star, dataset, spec, optima, floor_star) for s in sorted(seen)]
    at_opt = [v for v in at_opt if not math.isnan(v)]
    phi_max = max(at_opt) if at_opt else float("nan")
    return CommitteeGap(phi_min, phi_max, per_round, flagged, best, floor_star)


def kappa_estimate(result, optima: Optima, optimal_committee_ids) -> float:
    """max over observed aggregation sets of |mean_p F_k*(S_a) - mean_p F_k*(S_c*)| (the kappa^2 term)."""
    target = _subset_floor(optimal_committee_ids, optima)
    seen = {tuple(sorted(rec.aggregation)) for rec in result.records}
    if not seen:
        raise DomainError("run has no rounds")
    return max(abs(_subset_floor(s, optima) - target) for s in seen)


# -- constants ----------------------------------------------------------------


def secant_smoothness(grad_fn, pairs) -> float:
    best = 0.0
    for v, w in pairs:
        d = np.linalg.norm(v - w)
        if d == 0:
            continue
        best = max(best, float(np.linalg.norm(grad_fn(v) - grad_fn(w)) / d))
    return best


def estimate_constants(dataset: FederatedDataset, spec: model.LossSpec, num_probes, seed,
                       trajectory=None, batch_size=None):
    """Return ``(L_hat, sigma_hat, G_hat, sigma_sq_per_client)``.

    ``L_hat`` is the larger of the analytic softmax bound and the largest secant
    slope over random probe pairs in the box spanned by the trajectory.
    ``sigma_hat`` and ``G_hat`` are maxima over clients and probe points of the
    exact mini-batch variance and expected squared mini-batch gradient norm.
    Without a trajectory, probes follow a gradient-descent path from zero.
    """
    if num_probes < 10:
        raise ConfigError("num_probes must be >= 10")
    rng = np.random.default_rng(seed)
    probes = _probe_points(dataset, spec, num_probes, trajectory)
    radius = max(1.0, float(np.max(np.abs(probes))))

    L_hat = model.smoothness_bound(dataset.all_samples(), spec.reg_coeff)
    for part in dataset.partitions:
        pairs = [(rng.uniform(-radius, radius, spec.dim), rng.uniform(-radius, radius, spec.dim))
                 for _ in range(num_probes)]
        L_hat = max(L_hat, secant_smoothness(lambda v, s=part.samples: model.grad_full(v, s, spec), pairs))

    sigma_sq = np.zeros(dataset.K)
    G_sq = 0.0
    for k, part in enumerate(dataset.partitions):
        b = part.n_k if batch_size is None else min(batch_size, part.n_k)
        for w in probes:
            var = model.minibatch_variance(w, part.samples, b, spec)
            g = model.grad_full(w, part.samples, spec)
            sigma_sq[k] = max(sigma_sq[k], var)
            G_sq = max(G_sq, float(g @ g) + var)
    if not (np.isfinite(L_hat) and np.all(np.isfinite(sigma_sq)) and math.isfinite(G_sq)):
        raise DomainError("non-finite constant estimate")
    return L_hat, math.sqrt(sigma_sq.max()), math.sqrt(G_sq), sigma_sq


def _probe_points(dataset, spec, num_probes, trajectory):
    if trajectory is not None and len(trajectory) > 0:
        idx = np.unique(np.linspace(0, len(trajectory) - 1, num=min(num_probes, len(trajectory))).astype(int))
        return np.array([trajectory[i] for i in idx])
    L = model.smoothness_bound(dataset.all_samples(), spec.reg_coeff)
    w = spec.zeros()
    points = []
    for _ in range(num_probes):
        points.append(w.copy())
        w = w - sum(pk * model.grad_full(w, part.samples, spec)
                    for pk, part in zip(dataset.weights, dataset.partitions)) / L
    return np.array(points)


# -- the bound ----------------------------------------------------------------


@dataclass
class TheoryReport:
    L_hat: float
    mu: float
    sigma_hat: float
    G_hat: float
    kappa_sq: float
    Gamma: float
    phi_min: float
    phi_max: float
    F_star: float
    F_k_star: list
    weighted_sigma_sq: float  # sum_k p_k sigma_k^2
    w1_dist_sq: float  # ||w^1 - w*||^2
    tau: int
    bound_curve: list = field(default_factory=list)  # (t, bound)
    error_curve: list = field(default_factory=list)  # (t, F(w^t) - F*)
    notes: list = field(default_factory=list)

    @property
    def gamma_offset(self) -> float:
        return 4.0 * self.L_hat / self.mu

    def check(self):
        problems = []
        if self.mu > self.L_hat:
            problems.append("mu > L_hat")
        if self.Gamma < 0:
            problems.append("Gamma < 0")
        if self.phi_min > self.phi_max:
            problems.append("phi_min > phi_max")
        values = [self.L_hat, self.mu, self.sigma_hat, self.G_hat, self.kappa_sq, self.Gamma,
                  self.phi_min, self.phi_max]
        if not all(math.isfinite(v) for v in values):
            problems.append("non-finite estimate")
        return problems

    def first_violation(self):
        for (t, b), (_, e) in zip(self.bound_curve, self.error_curve):
            if e > b:
                return t
        return None

    def to_json(self) -> str:
        d = asdict(self)
        d["gamma"] = self.gamma_offset
        d["violated_at"] = self.first_violation()
        return json.dumps(d, indent=2)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "error", "bound"])
        for (t, b), (_, e) in zip(self.bound_curve, self.error_curve):
            w.writerow([t, repr(e), repr(b)])
        return buf.getvalue()


def theorem1_bound(report: TheoryReport, round_T, tau=None) -> float:
    """Right-hand side of the convergence bound after ``round_T`` rounds."""
    L, mu = report.L_hat, report.mu
    tau = report.tau if tau is None else tau
    if not report.phi_min > 0:
        raise DiagnosticError(f"bound undefined for phi_min={report.phi_min}")
    gam = 4.0 * L / mu
    noise = (4.0 * L * (32.0 * tau ** 2 * report.G_hat ** 2 + report.weighted_sigma_sq)
             + 24.0 * L ** 2 * report.kappa_sq) / (3.0 * mu ** 2 * report.phi_min)
    hetero = 8.0 * L ** 2 * report.Gamma / mu ** 2
    init = L * gam * report.w1_dist_sq / 2.0
    floor = 8.0 * L * report.Gamma / (3.0 * mu) * (report.phi_max / report.phi_min - 1.0)
    return (noise + hetero + init) / (round_T + gam) + floor


def build_report(result, dataset: FederatedDataset, num_probes=20, seed=0, tol=1e-8, optima=None) -> TheoryReport:
    """Measure every constant on one finished run and evaluate the bound on each round."""
    config = result.config
    spec = config.loss_spec(dataset)
    _need_strong_convexity(spec)
    if dataset.K > MAX_CLIENTS or config.C > MAX_COMMITTEE:
        raise ConfigError(f"K: theory diagnostics need K <= {MAX_CLIENTS} and C <= {MAX_COMMITTEE}")
    optima = optima or compute_optima(dataset, spec, tol)
    gap = committee_gap(result, dataset, spec, optima, max(config.C, 1))
    L_hat, sigma_hat, G_hat, sigma_sq = estimate_constants(
        dataset, spec, num_probes, seed, trajectory=result.trajectory, batch_size=config.batch_size)
    notes = ["expectations replaced by single-run values"]
    if config.lr != "theorem":
        notes.append("learning rate is not the theorem schedule; the bound does not formally apply")
    report = TheoryReport(
        L_hat=L_hat, mu=spec.reg_coeff, sigma_hat=sigma_hat, G_hat=G_hat,
        kappa_sq=kappa_estimate(result, optima, gap.optimal_committee),
        Gamma=gamma(optima, dataset, spec), phi_min=gap.phi_min, phi_max=gap.phi_max,
        F_star=optima.F_star, F_k_star=[float(v) for v in optima.F_k_star],
        weighted_sigma_sq=float(optima.weights @ sigma_sq),
        w1_dist_sq=float(np.sum((result.trajectory[0] - optima.w_star) ** 2)),
        tau=config.tau, notes=notes,
    )
    if gap.flagged_rounds:
        notes.append(f"{len(gap.flagged_rounds)} rounds at the heterogeneity floor skipped for phi")
    attach_curves(report, [global_loss(w, dataset, spec) - optima.F_star for w in result.trajectory])
    return report


def attach_curves(report: TheoryReport, errors):
    """Set error_curve from per-round errors (index 0 is w^1) and the matching bound_curve."""
    report.error_curve = [(t, float(e)) for t, e in enumerate(errors, start=1)]
    report.bound_curve = [(t, theorem1_bound(report, t)) for t, _ in report.error_curve]
    return report


def pool_reports(reports, errors_by_run) -> TheoryReport:
    """Combine per-seed reports conservatively and compare the bound with the mean error curve."""
    first = reports[0]
    pooled = TheoryReport(
        L_hat=max(r.L_hat for r in reports), mu=first.mu,
        sigma_hat=max(r.sigma_hat for r in reports), G_hat=max(r.G_hat for r in reports),
        kappa_sq=max(r.kappa_sq for r in reports), Gamma=first.Gamma,
        phi_min=min(r.phi_min for r in reports), phi_max=max(r.phi_max for r in reports),
        F_star=first.F_star, F_k_star=first.F_k_star,
        weighted_sigma_sq=max(r.weighted_sigma_sq for r in reports),
        w1_dist_sq=max(r.w1_dist_sq for r in reports), tau=first.tau,
        notes=[f"pooled over {len(reports)} runs; expectation = mean error across runs"],
    )
    mean_err = np.mean(np.asarray(errors_by_run, dtype=np.float64), axis=0)
    return attach_curves(pooled, mean_err)
