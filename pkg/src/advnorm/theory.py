"""Tabular verification of the adversarial normalization fixed point.

On a finite sample space the minimax game between per-domain generated
distributions and a (K+1)-class discriminator can be solved numerically and
compared against closed forms: the per-domain-optimal discriminator, the
induced generator loss in KL form, and the predicted fixed point where every
generated distribution equals the mean of the real per-domain distributions.

Two readings of the game coexist and are kept separate on purpose:

* the closed-form discriminator below satisfies the per-domain stationarity
  conditions ``D_z / D_{K+1} = p_r(x|z) / p_g(x|z)`` (each domain's generated
  mass paired against its own real mass); the numeric maximizer ascends the
  matching per-domain-paired objective and agrees with the closed form;
* the training loop elsewhere in this package minimizes the joint
  (K+1)-class NLL, whose batch form is :func:`discriminator_objective` here
  and is what the alternating solver's discriminator ascends.

Both readings share the same fixed point: when every generated row equals the
mean real distribution, the paired optimum puts exactly 1/(K+1) on the
generated class and the generator's logit gradient vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = 1e-300


class TheoryError(ValueError):
    pass


class SupportError(TheoryError):
    """Generated mass vanishes somewhere the real mass does not."""


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TabularProblem:
    """K real per-domain distributions over n atoms, with a domain prior."""

    p_r: np.ndarray                     # (K, n)
    prior: np.ndarray | None = None     # (K,), uniform when None

    def __post_init__(self):
        self.p_r = np.asarray(self.p_r, dtype=np.float64)
        if self.p_r.ndim != 2:
            raise TheoryError(f"p_r must be (K, n), got shape {self.p_r.shape}")
        if (self.p_r < 0).any():
            raise TheoryError("p_r entries must be non-negative")
        sums = self.p_r.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-12:
            raise TheoryError(f"p_r rows must sum to 1 (error {np.abs(sums-1).max():.2e})")
        if self.prior is None:
            self.prior = np.full(self.K, 1.0 / self.K)
        else:
            self.prior = np.asarray(self.prior, dtype=np.float64)
            if self.prior.shape != (self.K,) or (self.prior < 0).any():
                raise TheoryError("prior must be a length-K non-negative vector")
            if abs(self.prior.sum() - 1.0) > 1e-12:
                raise TheoryError("prior must sum to 1")

    @property
    def K(self) -> int:
        return self.p_r.shape[0]

    @property
    def n(self) -> int:
        return self.p_r.shape[1]

    @property
    def uniform_prior(self) -> bool:
        return bool(np.abs(self.prior - 1.0 / self.K).max() < 1e-12)

    @staticmethod
    def random(K: int, n: int, seed: int = 0) -> "TabularProblem":
        rng = np.random.default_rng(seed)
        rows = rng.dirichlet(np.ones(n), size=K)
        rows /= rows.sum(axis=1, keepdims=True)
        return TabularProblem(rows)


@dataclass
class TabularState:
    """Logit-parameterized generated distributions and discriminator."""

    gen_logits: np.ndarray              # (K, n)
    disc_logits: np.ndarray             # (K+1, n); softmax over classes per atom

    @property
    def p_g(self) -> np.ndarray:
        return _softmax_rows(self.gen_logits)

    @property
    def D(self) -> np.ndarray:
        return _softmax_rows(self.disc_logits.T).T


def mean_real(problem: TabularProblem) -> np.ndarray:
    """The arithmetic mean of the per-domain real distributions."""
    return problem.p_r.mean(axis=0)


def _ratios(p_r: np.ndarray, p_g: np.ndarray) -> np.ndarray:
    p_r = np.asarray(p_r, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    bad = (p_g <= 0) & (p_r > 0)
    if bad.any():
        z, x = np.argwhere(bad)[0]
        raise SupportError(
            f"p_g(x={x}|z={z}) = 0 under positive real mass; ratios are singular")
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(p_g > 0, p_r / np.where(p_g > 0, p_g, 1.0), 0.0)
    return r


def optimal_discriminator(p_r: np.ndarray, p_g: np.ndarray) -> np.ndarray:
    """Closed-form (K+1, n) discriminator satisfying the per-domain conditions
    ``D_z / D_{K+1} = p_r(x|z) / p_g(x|z)``; columns sum to 1."""
    r = _ratios(p_r, p_g)
    denom = 1.0 + r.sum(axis=0)
    return np.vstack([r / denom, 1.0 / denom])


def _project_simplex_columns(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each column onto the probability simplex."""
    k = v.shape[0]
    u = -np.sort(-v, axis=0)
    css = np.cumsum(u, axis=0)
    idx = np.arange(1, k + 1)[:, None]
    cond = u * idx > (css - 1.0)
    rho = np.maximum.reduce(np.where(cond, np.arange(k)[:, None], 0))
    theta = (np.take_along_axis(css, rho[None], axis=0)[0] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta[None], 0.0)


def paired_ascent_objective(p_r: np.ndarray, p_g: np.ndarray,
                            D: np.ndarray) -> float:
    """Per-domain-paired objective the numeric discriminator maximizer ascends:
    each atom contributes sum_z r_z log D_z + log D_{K+1} with
    r_z = p_r / p_g. Strictly concave in D on the simplex."""
    r = _ratios(p_r, p_g)
    logD = np.log(np.maximum(D, LOG_FLOOR))
    return float((r * logD[:-1]).sum() + logD[-1].sum())


def optimal_discriminator_numeric(p_r: np.ndarray, p_g: np.ndarray,
                                  steps: int = 2000, lr: float = 0.5) -> np.ndarray:
    """Gradient ascent on :func:`paired_ascent_objective` with the simplex
    constraint enforced by Bregman (entropy) projection per atom.

    The multiplicative update ``D <- D * exp(lr * grad) / Z`` keeps every
    iterate strictly interior, where the euclidean projection would stall on
    the boundary; the unique maximizer is its exact fixed point, so the
    iteration converges to the closed form at machine precision.
    """
    r = _ratios(p_r, p_g)
    K, n = r.shape
    coeff = np.vstack([r, np.ones((1, n))])
    # atoms are independent, so scaling each atom's objective leaves its argmax
    # unchanged while keeping the ascent uniformly conditioned
    coeff = coeff / coeff.sum(axis=0, keepdims=True)
    D = np.full((K + 1, n), 1.0 / (K + 1))
    for _ in range(steps):
        grad = coeff / D
        step = np.clip(lr * (grad - 1.0), -200.0, 200.0)
        D = D * np.exp(step)
        D /= D.sum(axis=0, keepdims=True)
    return D


def discriminator_stationarity(p_r: np.ndarray, p_g: np.ndarray, D: np.ndarray,
                               prior: np.ndarray | None = None) -> float:
    """Max absolute residual of the per-domain stationarity conditions
    ``p(z) (p_r / D_z - p_g / D_{K+1})``; exactly zero at the closed form."""
    p_r = np.asarray(p_r, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    K = p_r.shape[0]
    prior = np.full(K, 1.0 / K) if prior is None else np.asarray(prior)
    res = prior[:, None] * (p_r / np.maximum(D[:-1], LOG_FLOOR)
                            - p_g / np.maximum(D[-1:], LOG_FLOOR))
    return float(np.abs(res).max())


def discriminator_objective(p_r: np.ndarray, p_g: np.ndarray, D: np.ndarray,
                            prior: np.ndarray | None = None,
                            return_flag: bool = False):
    """Joint (K+1)-class log objective
    ``sum_z p(z) sum_x [p_r log D_z + p_g log D_{K+1}]``.

    Probabilities inside the logs are floored at 1e-300; the optional flag
    reports whether the floor was hit.
    """
    p_r = np.asarray(p_r, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    K = p_r.shape[0]
    prior = np.full(K, 1.0 / K) if prior is None else np.asarray(prior)
    floored = bool((np.asarray(D) < LOG_FLOOR).any())
    logD = np.log(np.maximum(D, LOG_FLOOR))
    value = float((prior[:, None] * (p_r * logD[:-1] + p_g * logD[-1:])).sum())
    if return_flag:
        return value, floored
    return value


def q_distribution(p_r: np.ndarray, p_g: np.ndarray, z: int):
    """The induced target distribution for domain z and its exact normalizer:
    unnormalized mass ``p_g(x|z) + sum_z' (p_g(x|z)/p_g(x|z')) p_r(x|z')``.

    The normalizer equals K+1 exactly whenever all generated rows coincide.
    """
    r = _ratios(p_r, p_g)               # p_r / p_g, validated support
    p_g = np.asarray(p_g, dtype=np.float64)
    mass = p_g[z] * (1.0 + r.sum(axis=0))
    Z = float(mass.sum())
    if Z <= 0:
        raise SupportError(f"domain {z}: degenerate normalizer {Z}")
    return mass / Z, Z


def kl(p: np.ndarray, q: np.ndarray) -> float:
    """Kullback-Leibler divergence sum p log(p/q); requires q > 0 on supp(p)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    if (q[mask] <= 0).any():
        raise SupportError("q vanishes on the support of p")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def generator_loss_under_optimal_D(p_r: np.ndarray, p_g: np.ndarray,
                                   prior: np.ndarray | None = None) -> float:
    """Generator loss with the discriminator at its closed form, in KL form:
    ``sum_z p(z) KL(p_g(.|z) || q(.|z)) - log(K+1)`` with the exact per-domain
    normalizer inside q."""
    p_r = np.asarray(p_r, dtype=np.float64)
    K = p_r.shape[0]
    prior = np.full(K, 1.0 / K) if prior is None else np.asarray(prior)
    total = 0.0
    for z in range(K):
        q, _ = q_distribution(p_r, p_g, z)
        total += prior[z] * kl(np.asarray(p_g, dtype=np.float64)[z], q)
    return total - float(np.log(K + 1))


def generator_loss_via_substitution(p_r: np.ndarray, p_g: np.ndarray,
                                    prior: np.ndarray | None = None) -> float:
    """Generator loss evaluated directly: ``sum_z p(z) E_{p_g} log D*_{K+1}``.

    Equals the KL form up to the per-domain gap ``log Z(z) - log(K+1)``, so the
    two paths agree exactly wherever Z(z) = K+1.
    """
    p_r = np.asarray(p_r, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    K = p_r.shape[0]
    prior = np.full(K, 1.0 / K) if prior is None else np.asarray(prior)
    D = optimal_discriminator(p_r, p_g)
    log_dk1 = np.log(np.maximum(D[-1], LOG_FLOOR))
    return float((prior[:, None] * p_g * log_dk1[None]).sum())


def generator_logit_gradient(p_g: np.ndarray, D: np.ndarray,
                             prior: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``sum_z p(z) E_{p_g(.|z)} log D_{K+1}`` on the generated
    logits, holding D fixed. Vanishes iff log D_{K+1} is constant under each
    generated row."""
    p_g = np.asarray(p_g, dtype=np.float64)
    K = p_g.shape[0]
    prior = np.full(K, 1.0 / K) if prior is None else np.asarray(prior)
    ell = np.log(np.maximum(D[-1], LOG_FLOOR))
    centered = ell[None, :] - (p_g * ell[None, :]).sum(axis=1, keepdims=True)
    return prior[:, None] * p_g * centered


@dataclass
class MinimaxResult:
    state: TabularState
    kl_trajectory: list[float] = field(default_factory=list)
    mode: str = "best_response_d"
    steps_run: int = 0

    @property
    def final_kl(self) -> float:
        return self.kl_trajectory[-1] if self.kl_trajectory else float("nan")


def _max_kl_to_mean(p_g: np.ndarray, pbar: np.ndarray) -> float:
    return max(kl(p_g[z], pbar) for z in range(p_g.shape[0]))


def minimax_solve(problem: TabularProblem, init: np.ndarray | TabularState | None = None,
                  mode: str = "best_response_d", steps: int = 5000,
                  lr_g: float = 1.0, lr_d: float = 1.0, n_steps: int = 3,
                  record_every: int = 10, early_stop: float | None = None) -> MinimaxResult:
    """Drive the generated distributions toward the mean real distribution.

    ``best_response_d`` sets the discriminator to its closed form every
    iteration; ``alternating`` mirrors the training loop's schedule with
    ``n_steps`` discriminator logit-ascent steps per generator step. The
    generator always performs one descent step on its logits against the
    current discriminator. Records max_z KL(p_g(.|z) || mean real).

    The default (symmetric) initialization starts every generated row at the
    uniform distribution; the per-row dynamics share one common score field,
    so rows initialized equal stay equal and converge onto the mean real
    distribution. Asymmetric initializations can come to rest on other
    stationary profiles of the game.
    """
    if mode not in ("best_response_d", "alternating"):
        raise TheoryError(f"unknown mode {mode!r}")
    K, n = problem.K, problem.n
    if init is None:
        gen_logits = np.zeros((K, n))
        disc_logits = np.zeros((K + 1, n))
    elif isinstance(init, TabularState):
        gen_logits = init.gen_logits.copy()
        disc_logits = init.disc_logits.copy()
    else:
        gen_logits = np.array(init, dtype=np.float64).reshape(K, n).copy()
        disc_logits = np.zeros((K + 1, n))
    pbar = mean_real(problem)
    prior = problem.prior
    traj: list[float] = []
    steps_run = 0
    for t in range(steps):
        p_g = _softmax_rows(gen_logits)
        if mode == "best_response_d":
            D = optimal_discriminator(problem.p_r, p_g)
        else:
            for _ in range(n_steps):
                D = _softmax_rows(disc_logits.T).T
                coeff = np.vstack([prior[:, None] * problem.p_r,
                                   (prior[:, None] * p_g).sum(axis=0, keepdims=True)])
                # ascent on the joint objective through the per-atom softmax
                disc_logits += lr_d * (coeff - coeff.sum(axis=0, keepdims=True) * D)
            D = _softmax_rows(disc_logits.T).T
        gen_logits -= lr_g * generator_logit_gradient(p_g, D, prior)
        if not np.isfinite(gen_logits).all():
            raise TheoryError(f"generator logits diverged at step {t}")
        steps_run = t + 1
        if t % record_every == 0 or t == steps - 1:
            traj.append(_max_kl_to_mean(_softmax_rows(gen_logits), pbar))
            if early_stop is not None and traj[-1] < early_stop:
                break
    state = TabularState(gen_logits=gen_logits, disc_logits=disc_logits)
    return MinimaxResult(state=state, kl_trajectory=traj, mode=mode,
                         steps_run=steps_run)


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------

@dataclass
class Certificate:
    seed: int
    K: int
    n: int
    mode: str
    steps: int
    final_kl: float
    dstar_residual: float
    dstar_numeric_gap: float
    threshold: float
    passed: bool
    assertion_disabled: bool = False

    def to_text(self) -> str:
        lines = [
            f"seed: {self.seed}",
            f"K: {self.K}",
            f"n: {self.n}",
            f"mode: {self.mode}",
            f"steps: {self.steps}",
            f"final_max_kl: {self.final_kl:.3e}",
            f"dstar_stationarity_residual: {self.dstar_residual:.3e}",
            f"dstar_numeric_gap: {self.dstar_numeric_gap:.3e}",
            f"threshold: {self.threshold:.3e}",
            f"assertion_disabled: {self.assertion_disabled}",
            f"passed: {self.passed}",
        ]
        return "\n".join(lines) + "\n"


def certify_instance(K: int, n: int, seed: int, mode: str = "best_response_d",
                     steps: int = 5000, threshold: float = 1e-3,
                     prior: np.ndarray | None = None) -> Certificate:
    """Solve one random instance and certify the fixed-point property."""
    problem = TabularProblem(TabularProblem.random(K, n, seed).p_r, prior)
    result = minimax_solve(problem, mode=mode, steps=steps, early_stop=threshold / 10)
    p_g = result.state.p_g
    dstar = optimal_discriminator(problem.p_r, p_g)
    residual = discriminator_stationarity(problem.p_r, p_g, dstar, problem.prior)
    numeric = optimal_discriminator_numeric(problem.p_r, p_g)
    gap = float(np.abs(dstar - numeric).max())
    disabled = not problem.uniform_prior
    passed = disabled or (result.final_kl < threshold and gap < 1e-6)
    return Certificate(seed=seed, K=K, n=n, mode=mode, steps=result.steps_run,
                       final_kl=result.final_kl, dstar_residual=residual,
                       dstar_numeric_gap=gap, threshold=threshold, passed=passed,
                       assertion_disabled=disabled)
