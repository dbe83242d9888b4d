"""Dynamic Hamiltonian Monte Carlo with no-U-turn termination.

One transition doubles a leapfrog trajectory until the ends start approaching
each other, sampling the next state multinomially across the trajectory
(weights proportional to the joint density). Warmup interleaves dual-averaging
step-size adaptation toward a target acceptance statistic with diagonal
mass-matrix estimation over expanding windows. Chains are deterministic given
(seed, chain index).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

LogPost = Callable[[np.ndarray], tuple[float, np.ndarray]]


class SamplerError(Exception):
    pass


class AllDivergent(SamplerError):
    """More than half of post-warmup transitions diverged: the model or the
    settings are misconfigured, the draws are unusable."""


@dataclass(frozen=True)
class SamplerSettings:
    chains: int = 4
    iterations: int = 1000
    warmup: int = 500
    thin: int = 1
    max_tree_depth: int = 10
    seed: int = 0
    target_accept: float = 0.8
    max_energy_error: float = 1000.0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.chains < 1:
            raise SamplerError("need at least one chain")
        if self.iterations <= self.warmup:
            raise SamplerError("iterations must exceed warmup")
        if self.thin < 1:
            raise SamplerError("thin must be >= 1")


def planned_retained_draws(settings: SamplerSettings) -> int:
    """Retained draw count: post-warmup draws pooled across chains in chain
    order, thinned by keeping every thin-th. When thin divides the per-chain
    post-warmup count this is ordinary per-chain thinning."""
    total = settings.chains * (settings.iterations - settings.warmup)
    return len(range(0, total, settings.thin))


@dataclass
class _Tree:
    theta_minus: np.ndarray
    r_minus: np.ndarray
    grad_minus: np.ndarray
    theta_plus: np.ndarray
    r_plus: np.ndarray
    grad_plus: np.ndarray
    theta_prop: np.ndarray
    logp_prop: float
    grad_prop: np.ndarray
    log_sum_w: float
    sum_alpha: float
    n_alpha: int
    ok: bool
    diverged: bool


def _uturn(theta_minus, theta_plus, r_minus, r_plus, inv_mass) -> bool:
    dx = theta_plus - theta_minus
    return (
        float(np.dot(dx, inv_mass * r_minus)) < 0.0
        or float(np.dot(dx, inv_mass * r_plus)) < 0.0
    )


class _Transition:
    """One NUTS transition at fixed step size and metric."""

    def __init__(
        self,
        logpost: LogPost,
        eps: float,
        inv_mass: np.ndarray,
        max_depth: int,
        max_energy_error: float,
        rng: np.random.Generator,
    ):
        self.logpost = logpost
        self.eps = eps
        self.inv_mass = inv_mass
        self.max_depth = max_depth
        self.max_energy_error = max_energy_error
        self.rng = rng
        self.w0 = 0.0

    def _leapfrog(self, theta, r, grad, direction):
        eps = direction * self.eps
        r = r + 0.5 * eps * grad
        theta = theta + eps * self.inv_mass * r
        logp, grad = self.logpost(theta)
        r = r + 0.5 * eps * grad
        return theta, r, logp, grad

    def _joint(self, logp: float, r: np.ndarray) -> float:
        return logp - 0.5 * float(np.sum(r * r * self.inv_mass))

    def _leaf(self, theta, r, grad, direction) -> _Tree:
        try:
            theta, r, logp, grad = self._leapfrog(theta, r, grad, direction)
            w = self._joint(logp, r)
            delta = w - self.w0
        except Exception:
            # numerical blow-up along the trajectory is a divergence, not a crash
            logp, delta = -np.inf, -np.inf
        diverged = not np.isfinite(delta) or delta < -self.max_energy_error
        alpha = 0.0 if not np.isfinite(delta) else float(min(1.0, np.exp(min(delta, 0.0))))
        return _Tree(
            theta_minus=theta,
            r_minus=r,
            grad_minus=grad,
            theta_plus=theta,
            r_plus=r,
            grad_plus=grad,
            theta_prop=theta,
            logp_prop=logp,
            grad_prop=grad,
            log_sum_w=(delta if not diverged else -np.inf),
            sum_alpha=alpha,
            n_alpha=1,
            ok=not diverged,
            diverged=diverged,
        )

    def _build(self, theta, r, grad, depth, direction) -> _Tree:
        if depth == 0:
            return self._leaf(theta, r, grad, direction)
        first = self._build(theta, r, grad, depth - 1, direction)
        if not first.ok:
            return first
        if direction > 0:
            second = self._build(
                first.theta_plus, first.r_plus, first.grad_plus, depth - 1, direction
            )
            first.theta_plus = second.theta_plus
            first.r_plus = second.r_plus
            first.grad_plus = second.grad_plus
        else:
            second = self._build(
                first.theta_minus, first.r_minus, first.grad_minus, depth - 1, direction
            )
            first.theta_minus = second.theta_minus
            first.r_minus = second.r_minus
            first.grad_minus = second.grad_minus
        total = np.logaddexp(first.log_sum_w, second.log_sum_w)
        if second.ok and np.isfinite(second.log_sum_w):
            if np.log(self.rng.uniform()) < second.log_sum_w - total:
                first.theta_prop = second.theta_prop
                first.logp_prop = second.logp_prop
                first.grad_prop = second.grad_prop
        first.log_sum_w = total
        first.sum_alpha += second.sum_alpha
        first.n_alpha += second.n_alpha
        first.diverged = first.diverged or second.diverged
        first.ok = (
            second.ok
            and not _uturn(
                first.theta_minus,
                first.theta_plus,
                first.r_minus,
                first.r_plus,
                self.inv_mass,
            )
        )
        return first

    def run(self, theta, logp, grad):
        """Returns (theta, logp, grad, accept_stat, diverged, depth_hit)."""
        r0 = self.rng.normal(size=theta.shape) / np.sqrt(self.inv_mass)
        self.w0 = self._joint(logp, r0)
        tree = _Tree(
            theta_minus=theta,
            r_minus=r0,
            grad_minus=grad,
            theta_plus=theta,
            r_plus=r0,
            grad_plus=grad,
            theta_prop=theta,
            logp_prop=logp,
            grad_prop=grad,
            log_sum_w=0.0,
            sum_alpha=0.0,
            n_alpha=0,
            ok=True,
            diverged=False,
        )
        diverged = False
        depth = 0
        while depth < self.max_depth:
            direction = 1 if self.rng.uniform() < 0.5 else -1
            if direction > 0:
                sub = self._build(
                    tree.theta_plus, tree.r_plus, tree.grad_plus, depth, direction
                )
            else:
                sub = self._build(
                    tree.theta_minus, tree.r_minus, tree.grad_minus, depth, direction
                )
            tree.sum_alpha += sub.sum_alpha
            tree.n_alpha += sub.n_alpha
            diverged = diverged or sub.diverged
            if not sub.ok:
                break
            # biased progressive sampling: favour the fresh half of the trajectory
            if np.log(self.rng.uniform()) < sub.log_sum_w - tree.log_sum_w:
                tree.theta_prop = sub.theta_prop
                tree.logp_prop = sub.logp_prop
                tree.grad_prop = sub.grad_prop
            tree.log_sum_w = np.logaddexp(tree.log_sum_w, sub.log_sum_w)
            if direction > 0:
                tree.theta_plus = sub.theta_plus
                tree.r_plus = sub.r_plus
                tree.grad_plus = sub.grad_plus
            else:
                tree.theta_minus = sub.theta_minus
                tree.r_minus = sub.r_minus
                tree.grad_minus = sub.grad_minus
            depth += 1
            if _uturn(
                tree.theta_minus, tree.theta_plus, tree.r_minus, tree.r_plus, self.inv_mass
            ):
                break
        accept = tree.sum_alpha / max(tree.n_alpha, 1)
        return (
            tree.theta_prop,
            tree.logp_prop,
            tree.grad_prop,
            accept,
            diverged,
            depth >= self.max_depth,
        )


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, eps0: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = float(np.log(10.0 * eps0))
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.log_eps = float(np.log(eps0))
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.m = 0

    def update(self, accept: float) -> float:
        self.m += 1
        frac = 1.0 / (self.m + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept)
        self.log_eps = self.mu - np.sqrt(self.m) / self.gamma * self.h_bar
        weight = self.m ** (-self.kappa)
        self.log_eps_bar = weight * self.log_eps + (1.0 - weight) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    def adapted(self) -> float:
        return float(np.exp(self.log_eps_bar))


def _find_reasonable_epsilon(
    logpost: LogPost, theta, logp, grad, inv_mass, rng
) -> float:
    eps = 1.0
    r = rng.normal(size=theta.shape) / np.sqrt(inv_mass)
    joint0 = logp - 0.5 * float(np.sum(r * r * inv_mass))

    def probe(eps_):
        with np.errstate(over="ignore", invalid="ignore"):
            r1 = r + 0.5 * eps_ * grad
            theta1 = theta + eps_ * inv_mass * r1
            try:
                logp1, grad1 = logpost(theta1)
            except Exception:
                return -np.inf
            r1 = r1 + 0.5 * eps_ * grad1
            return (logp1 - 0.5 * float(np.sum(r1 * r1 * inv_mass))) - joint0

    delta = probe(eps)
    direction = 1.0 if delta > np.log(0.5) else -1.0
    for _ in range(64):
        eps *= 2.0**direction
        delta = probe(eps)
        if (direction > 0 and delta <= np.log(0.5)) or (
            direction < 0 and delta >= np.log(0.5)
        ):
            break
        if eps < 1e-10 or eps > 1e7:
            break
    return eps


class _Welford:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        if self.n < 2:
            return np.ones_like(self.mean)
        return self.m2 / (self.n - 1)


def _adaptation_windows(warmup: int) -> tuple[int, int, list[int]]:
    """(init_buffer, term_start, window ends) in the style of staged warmup."""
    if warmup < 20:
        return warmup, warmup, []
    init_buffer = max(1, int(0.15 * warmup))
    term_buffer = max(1, int(0.10 * warmup))
    term_start = warmup - term_buffer
    ends = []
    size = max(10, int(0.25 * (term_start - init_buffer)) // 2)
    pos = init_buffer
    while pos + size < term_start:
        pos += size
        ends.append(pos)
        size *= 2
    ends.append(term_start)
    return init_buffer, term_start, ends


@dataclass
class ChainResult:
    draws: np.ndarray  # post-warmup, unthinned (n_kept, dim)
    divergences: int
    depth_hits: int
    step_size: float
    accept_mean: float


@dataclass
class Diagnostics:
    divergences: int
    depth_hits: int
    rhat: dict[str, float]
    post_warmup: int

    def worst_rhat(self) -> float:
        return max(self.rhat.values()) if self.rhat else float("nan")

    def warnings(self, rhat_threshold: float = 1.05, divergence_frac: float = 0.01) -> list[str]:
        out = []
        if self.post_warmup and self.divergences / self.post_warmup > divergence_frac:
            out.append(
                f"{self.divergences}/{self.post_warmup} post-warmup divergences"
            )
        bad = {k: v for k, v in self.rhat.items() if v > rhat_threshold}
        if bad:
            worst = max(bad, key=bad.get)
            out.append(f"{len(bad)} parameters with split-Rhat > {rhat_threshold} "
                       f"(worst {worst}: {bad[worst]:.3f})")
        return out


def _run_chain(
    logpost: LogPost,
    dim: int,
    settings: SamplerSettings,
    chain: int,
    init: Optional[np.ndarray],
) -> ChainResult:
    rng = np.random.default_rng(np.random.SeedSequence([settings.seed, chain]))
    theta = (
        init.copy()
        if init is not None
        else settings.init_scale * rng.uniform(-1.0, 1.0, size=dim)
    )
    logp, grad = logpost(theta)
    inv_mass = np.ones(dim)

    eps = _find_reasonable_epsilon(logpost, theta, logp, grad, inv_mass, rng)
    da = _DualAveraging(eps, settings.target_accept)
    init_buffer, term_start, window_ends = _adaptation_windows(settings.warmup)
    welford = _Welford(dim)

    for it in range(settings.warmup):
        trans = _Transition(
            logpost, eps, inv_mass, settings.max_tree_depth,
            settings.max_energy_error, rng,
        )
        theta, logp, grad, accept, _, _ = trans.run(theta, logp, grad)
        eps = da.update(accept)
        if init_buffer <= it < term_start:
            welford.update(theta)
            if (it + 1) in window_ends:
                var = welford.variance()
                n = welford.n
                inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                welford = _Welford(dim)
                eps = _find_reasonable_epsilon(logpost, theta, logp, grad, inv_mass, rng)
                da = _DualAveraging(eps, settings.target_accept)

    eps = da.adapted() if settings.warmup else eps
    kept = settings.iterations - settings.warmup
    draws = np.empty((kept, dim))
    divergences = 0
    depth_hits = 0
    accept_sum = 0.0
    for it in range(kept):
        trans = _Transition(
            logpost, eps, inv_mass, settings.max_tree_depth,
            settings.max_energy_error, rng,
        )
        theta, logp, grad, accept, diverged, depth_hit = trans.run(theta, logp, grad)
        draws[it] = theta
        divergences += int(diverged)
        depth_hits += int(depth_hit)
        accept_sum += accept
    return ChainResult(
        draws=draws,
        divergences=divergences,
        depth_hits=depth_hits,
        step_size=eps,
        accept_mean=accept_sum / max(kept, 1),
    )


def split_rhat(chains: np.ndarray) -> float:
    """Split-Rhat for one scalar; chains is (n_chains, n_draws)."""
    n_chains, n_draws = chains.shape
    half = n_draws // 2
    if half < 2:
        return float("nan")
    halves = np.concatenate([chains[:, :half], chains[:, half : 2 * half]], axis=0)
    means = halves.mean(axis=1)
    variances = halves.var(axis=1, ddof=1)
    w = variances.mean()
    b = half * means.var(ddof=1)
    if w <= 0:
        return float("nan") if b <= 0 else float("inf")
    var_hat = (half - 1) / half * w + b / half
    return float(np.sqrt(var_hat / w))


@dataclass
class PosteriorDraws:
    """Retained draws with provenance and diagnostics.

    `unconstrained` is (n_draws, dim); chain/iteration give each row's origin
    (iteration counts post-warmup, pre-thinning).
    """

    unconstrained: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    diagnostics: Diagnostics

    @property
    def n_draws(self) -> int:
        return self.unconstrained.shape[0]


def sample(
    logpost: LogPost,
    dim: int,
    settings: SamplerSettings,
    init: Optional[np.ndarray] = None,
) -> PosteriorDraws:
    """Run the chains, thin the pooled post-warmup sequence, and attach
    split-Rhat / divergence diagnostics.

    Raises AllDivergent when over half of post-warmup transitions diverge.
    """
    results = [
        _run_chain(logpost, dim, settings, chain, init)
        for chain in range(settings.chains)
    ]
    kept = settings.iterations - settings.warmup
    total = settings.chains * kept
    divergences = sum(r.divergences for r in results)
    if divergences > 0.5 * total:
        raise AllDivergent(
            f"{divergences}/{total} post-warmup transitions diverged"
        )
    depth_hits = sum(r.depth_hits for r in results)

    rows = []
    chain_ids = []
    iters = []
    for g in range(0, total, settings.thin):
        c, i = divmod(g, kept)
        rows.append(results[c].draws[i])
        chain_ids.append(c)
        iters.append(i)
    draws = np.array(rows)

    # split-Rhat on the unthinned per-chain sequences
    rhat: dict[str, float] = {}
    stacked = np.stack([r.draws for r in results])  # (chains, kept, dim)
    for d in range(stacked.shape[2]):
        rhat[f"theta[{d}]"] = split_rhat(stacked[:, :, d])

    return PosteriorDraws(
        unconstrained=draws,
        chain=np.array(chain_ids),
        iteration=np.array(iters),
        diagnostics=Diagnostics(
            divergences=divergences,
            depth_hits=depth_hits,
            rhat=rhat,
            post_warmup=total,
        ),
    )
