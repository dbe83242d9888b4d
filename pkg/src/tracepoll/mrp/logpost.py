"""Joint log-density of the hierarchical choice model, with exact gradients.

The likelihood is categorical with a softmax link over J choices; the
reference choice's linear predictor is fixed at zero. Each non-reference
choice gets an intercept, a spatial area effect (unstructured + scaled ICAR
convolution), random-walk and unstructured individual effects, optional fixed
area-covariate effects, an optional (past vote x past area share) interaction,
an optional no-area offset for responses with unknown area, and an optional
fieldwork random walk.

Everything is written against the unconstrained parametrization defined by
ParamLayout, so the gradient returned here is the one the sampler consumes.
The gradient is derived by hand; the test suite checks it against central
finite differences.
"""

from __future__ import annotations

import numpy as np

from .spec import ModelSpec, ParamLayout, RANDOM_WALK, TrainingData

_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_HALF_NORMAL = 0.5 * float(np.log(2.0 / np.pi))
_LOG_PI = float(np.log(np.pi))


class NonFinite(Exception):
    pass


def _revcumsum(a: np.ndarray) -> np.ndarray:
    return np.cumsum(a[::-1], axis=0)[::-1]


def _scatter_rows(idx: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Column-wise bincount: sum `values` rows into `n_rows` buckets."""
    out = np.empty((n_rows, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(idx, weights=values[:, j], minlength=n_rows)
    return out


def _std_normal(x: np.ndarray, grad: np.ndarray) -> float:
    grad -= x
    return float(-0.5 * np.sum(x * x) - 0.5 * x.size * _LOG_2PI)


def linear_predictor(
    vec: np.ndarray,
    data: TrainingData,
    spec: ModelSpec,
    layout: ParamLayout,
    con: dict | None = None,
) -> np.ndarray:
    """(n, Jm) linear predictors for the non-reference choices."""
    if con is None:
        con = layout.constrain(vec)
    n = data.n
    jm = layout.jm
    mu = np.tile(con["alpha"], (n, 1))
    valid = data.area >= 0
    sl = data.area[valid]
    if spec.include_spatial:
        mu[valid] += con["lam"][sl, :]
    for e in spec.effects:
        mu += con[f"effect_{e.title}"][data.effect_idx[e.title], :]
    if layout.beta_entries:
        bz = layout.area_covariate_term(con)
        mu[valid] += bz[sl, :]
    if spec.interaction_title is not None:
        nu_act = _active_nu(spec, layout)
        v_idx = data.effect_idx[spec.interaction_title]
        mu[valid] += con["zeta"][v_idx[valid], :] * nu_act[sl, :]
    if spec.include_no_state:
        mu[~valid] += con["no_state"][None, :]
    if spec.include_poll_walk:
        mu += con["eta_poll"][data.poll, :]
    return mu


def _active_nu(spec: ModelSpec, layout: ParamLayout) -> np.ndarray:
    """Standardized past-share column for each active choice: (S, Jm)."""
    cols = [spec.choice_index(c) for c in spec.active_choices]
    return layout.nu_std[:, cols]


def response_probs(
    vec: np.ndarray, data: TrainingData, spec: ModelSpec, layout: ParamLayout
) -> np.ndarray:
    """(n, J) choice probabilities in spec.choices order."""
    mu = linear_predictor(vec, data, spec, layout)
    full = np.zeros((data.n, len(spec.choices)))
    active_cols = [spec.choice_index(c) for c in spec.active_choices]
    full[:, active_cols] = mu
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def log_posterior(
    vec: np.ndarray, data: TrainingData, spec: ModelSpec, layout: ParamLayout
) -> tuple[float, np.ndarray]:
    """Log joint density (likelihood + all priors) and its exact gradient."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _log_posterior(vec, data, spec, layout)


def _log_posterior(
    vec: np.ndarray, data: TrainingData, spec: ModelSpec, layout: ParamLayout
) -> tuple[float, np.ndarray]:
    raw = layout.unpack(vec)
    con = layout.constrain(vec)
    jm = layout.jm
    n = data.n
    grad = {name: np.zeros(b.shape) for name, b in layout.blocks.items()}
    lp = 0.0

    # ----- likelihood ------------------------------------------------------
    mu = linear_predictor(vec, data, spec, layout, con=con)
    valid = data.area >= 0
    sl = data.area[valid]

    # log-sum-exp over the reference (0) and the Jm active predictors
    top = np.maximum(mu.max(axis=1, initial=0.0), 0.0) if n else np.zeros(0)
    lse = top + np.log(
        np.exp(-top) + np.exp(mu - top[:, None]).sum(axis=1)
    ) if n else np.zeros(0)

    # position of each response among the active choices; -1 for the reference
    active_pos = np.full(len(spec.choices), -1, dtype=int)
    for a, c in enumerate(spec.active_choices):
        active_pos[spec.choice_index(c)] = a
    y_pos = active_pos[data.y] if n else np.zeros(0, dtype=int)

    if n:
        picked = np.where(y_pos >= 0, mu[np.arange(n), np.maximum(y_pos, 0)], 0.0)
        lp += float(np.sum(picked - lse))
        p = np.exp(mu - lse[:, None])
        r = -p
        rows = np.nonzero(y_pos >= 0)[0]
        r[rows, y_pos[rows]] += 1.0
    else:
        r = np.zeros((0, jm))

    # residual sums routed to each block
    g_alpha_lik = r.sum(axis=0)
    if n:
        m_area = _scatter_rows(sl, r[valid], len(spec.areas))
    else:
        m_area = np.zeros((len(spec.areas), jm))

    # ----- intercepts ------------------------------------------------------
    grad["alpha"] += g_alpha_lik
    lp += _std_normal(raw["alpha"], grad["alpha"])

    # ----- spatial block ---------------------------------------------------
    if spec.include_spatial:
        sigma_state = con["sigma_state"]
        xi = con["xi"]
        phi = con["phi"]
        psi = con["psi"]
        lam = con["lam"]
        inv_sqrt_eps = layout.icar.inv_sqrt_eps
        sqrt_1mxi = np.sqrt(1.0 - xi)
        sqrt_xi = np.sqrt(xi)

        grad["phi"] += m_area * (sigma_state * sqrt_1mxi)[None, :]
        lp += _std_normal(raw["phi"], grad["phi"])

        if layout.icar.n_free > 0:
            d_psi = m_area * (sigma_state * sqrt_xi)[None, :] * inv_sqrt_eps[:, None]
            q_psi = layout.icar.laplacian @ psi
            lp += float(-0.5 * np.sum(psi * q_psi))
            grad["psi_raw"] += layout.icar.basis.T @ (d_psi - q_psi)

        grad["log_sigma_state"] += np.sum(m_area * lam, axis=0)
        lp += float(
            np.sum(
                _LOG_HALF_NORMAL
                - 0.5 * sigma_state**2
                + raw["log_sigma_state"]
            )
        )
        grad["log_sigma_state"] += 1.0 - sigma_state**2

        d_lam_d_xi = sigma_state[None, :] * (
            -phi / (2.0 * sqrt_1mxi)[None, :]
            + psi * inv_sqrt_eps[:, None] / (2.0 * sqrt_xi)[None, :]
        )
        d_xi = np.sum(m_area * d_lam_d_xi, axis=0)
        lp += float(np.sum(0.5 * np.log(xi) + 0.5 * np.log1p(-xi) - _LOG_PI))
        grad["logit_xi"] += d_xi * xi * (1.0 - xi) + (0.5 - xi)

    # ----- individual-level effects ----------------------------------------
    for e in spec.effects:
        idx = data.effect_idx[e.title]
        if n:
            g_eff = _scatter_rows(idx, r, len(e.levels))
        else:
            g_eff = np.zeros((len(e.levels), jm))
        delta = raw[f"delta_{e.title}"]
        sigma = con[f"sigma_{e.title}"]
        eff = con[f"effect_{e.title}"]
        if e.structure == RANDOM_WALK:
            grad[f"delta_{e.title}"] += sigma[None, :] * _revcumsum(g_eff)
        else:
            grad[f"delta_{e.title}"] += sigma[None, :] * g_eff
        lp += _std_normal(delta, grad[f"delta_{e.title}"])
        grad[f"log_sigma_{e.title}"] += np.sum(g_eff * eff, axis=0) + (1.0 - sigma**2)
        lp += float(
            np.sum(_LOG_HALF_NORMAL - 0.5 * sigma**2 + raw[f"log_sigma_{e.title}"])
        )

    # ----- fixed area covariates -------------------------------------------
    if layout.beta_entries:
        g_beta = np.array(
            [
                float(np.dot(m_area[:, a_idx], layout.z_std[:, col]))
                for a_idx, col in layout.beta_entries
            ]
        )
        grad["beta"] += g_beta
        lp += _std_normal(raw["beta"], grad["beta"])

    # ----- past-vote x past-share interaction -------------------------------
    if spec.interaction_title is not None:
        nu_act = _active_nu(spec, layout)
        v_idx = data.effect_idx[spec.interaction_title]
        v_levels = raw["zeta_raw"].shape[0]
        if n:
            g_zeta = _scatter_rows(v_idx[valid], r[valid] * nu_act[sl, :], v_levels)
        else:
            g_zeta = np.zeros((v_levels, jm))
        sigma_zeta = con["sigma_zeta"]
        zeta = con["zeta"]
        grad["zeta_raw"] += sigma_zeta[None, :] * g_zeta
        lp += _std_normal(raw["zeta_raw"], grad["zeta_raw"])
        grad["log_sigma_zeta"] += np.sum(g_zeta * zeta, axis=0) + (1.0 - sigma_zeta**2)
        lp += float(
            np.sum(_LOG_HALF_NORMAL - 0.5 * sigma_zeta**2 + raw["log_sigma_zeta"])
        )

    # ----- no-area offset ----------------------------------------------------
    if spec.include_no_state:
        grad["no_state"] += r[~valid].sum(axis=0) if n else 0.0
        lp += _std_normal(raw["no_state"], grad["no_state"])

    # ----- fieldwork walk ----------------------------------------------------
    if spec.include_poll_walk:
        if n:
            g_poll = _scatter_rows(data.poll, r, spec.n_polls)
        else:
            g_poll = np.zeros((spec.n_polls, jm))
        delta_poll = raw["delta_poll"]
        sigma_poll = float(con["sigma_poll"][0])
        eta_poll = con["eta_poll"]
        grad["delta_poll"] += sigma_poll * _revcumsum(g_poll)
        lp += _std_normal(delta_poll, grad["delta_poll"])
        grad["log_sigma_poll"] += np.sum(g_poll * eta_poll) + (1.0 - sigma_poll**2)
        lp += _LOG_HALF_NORMAL - 0.5 * sigma_poll**2 + float(raw["log_sigma_poll"][0])

    flat = layout.pack(grad)
    if not np.isfinite(lp) or not np.all(np.isfinite(flat)):
        raise NonFinite("log posterior produced a non-finite value or gradient")
    return lp, flat


def make_logpost(data: TrainingData, spec: ModelSpec, layout: ParamLayout):
    """Closure suitable for the sampler: vec -> (value, gradient)."""
    data.validate(spec)

    def f(vec: np.ndarray) -> tuple[float, np.ndarray]:
        return log_posterior(vec, data, spec, layout)

    return f
