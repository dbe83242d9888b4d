"""Model configuration, training data, and the parameter vector layout.

The sampler works on a flat unconstrained vector. The layout maps named
blocks into that vector and applies the constraining transforms: scales live
on the log scale, the spatial mixing weight on the logit scale, the ICAR
effect in a sum-to-zero basis, and every hierarchical effect is non-centered
(standard-normal raw values scaled inside the model).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .icar import AreaGraph, IcarStructure, build_icar


class ModelSpecError(Exception):
    pass


RANDOM_WALK = "random_walk"
UNSTRUCTURED = "unstructured"


@dataclass(frozen=True)
class EffectSpec:
    title: str
    levels: tuple[str, ...]
    structure: str  # RANDOM_WALK or UNSTRUCTURED

    def __post_init__(self):
        if self.structure not in (RANDOM_WALK, UNSTRUCTURED):
            raise ModelSpecError(f"unknown prior structure {self.structure!r}")
        if len(self.levels) < 2:
            raise ModelSpecError(f"effect {self.title}: needs >= 2 levels")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model description.

    The reference choice carries no parameters; every block below exists per
    non-reference choice. z columns and the past-share matrix nu are
    standardized over areas at construction.
    """

    choices: tuple[str, ...]
    reference: str
    areas: tuple[str, ...]
    graph: AreaGraph
    effects: tuple[EffectSpec, ...]
    covariate_map: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    z: Optional[np.ndarray] = None  # (S, K) area-level predictors
    nu: Optional[np.ndarray] = None  # (S, J) past shares of each choice
    interaction_title: Optional[str] = None
    include_spatial: bool = True
    include_no_state: bool = False
    include_poll_walk: bool = False
    n_polls: int = 1

    def __post_init__(self):
        if self.reference not in self.choices:
            raise ModelSpecError(f"reference {self.reference!r} not a choice")
        if len(set(self.choices)) != len(self.choices):
            raise ModelSpecError("duplicate choice labels")
        if self.graph.n != len(self.areas):
            raise ModelSpecError("graph size does not match area count")
        if self.z is not None and self.z.shape[0] != len(self.areas):
            raise ModelSpecError("z must have one row per area")
        if self.nu is not None and self.nu.shape != (len(self.areas), len(self.choices)):
            raise ModelSpecError("nu must be areas x choices")
        if self.interaction_title is not None:
            if self.nu is None:
                raise ModelSpecError("interaction requires nu")
            if self.interaction_title not in {e.title for e in self.effects}:
                raise ModelSpecError(
                    f"interaction title {self.interaction_title!r} is not an effect"
                )
        for choice in self.covariate_map:
            if choice not in self.choices or choice == self.reference:
                raise ModelSpecError(f"covariates mapped to invalid choice {choice!r}")

    @property
    def active_choices(self) -> tuple[str, ...]:
        return tuple(c for c in self.choices if c != self.reference)

    def choice_index(self, label: str) -> int:
        return self.choices.index(label)

    def effect(self, title: str) -> EffectSpec:
        for e in self.effects:
            if e.title == title:
                return e
        raise KeyError(title)


def standardize_columns(x: np.ndarray) -> np.ndarray:
    """Standardize each column to mean 0 / sd 1 over rows; constant columns
    are centered only."""
    out = x.astype(float).copy()
    mean = out.mean(axis=0)
    sd = out.std(axis=0)
    sd = np.where(sd == 0, 1.0, sd)
    return (out - mean) / sd


@dataclass
class TrainingData:
    """Index-encoded responses.

    area < 0 flags a stateless response (known level-1 member, unknown area);
    those rows use the no-state predictor and skip every area-indexed term.
    """

    y: np.ndarray  # (n,) index into spec.choices
    area: np.ndarray  # (n,) index into spec.areas, -1 if stateless
    effect_idx: Mapping[str, np.ndarray]  # title -> (n,) level index
    poll: Optional[np.ndarray] = None  # (n,) poll index

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        self.area = np.asarray(self.area, dtype=int)
        self.effect_idx = {k: np.asarray(v, dtype=int) for k, v in self.effect_idx.items()}
        if self.poll is not None:
            self.poll = np.asarray(self.poll, dtype=int)

    @property
    def n(self) -> int:
        return len(self.y)

    def validate(self, spec: ModelSpec) -> None:
        if self.n and (self.y.min() < 0 or self.y.max() >= len(spec.choices)):
            raise ModelSpecError("y index out of range")
        if self.n and self.area.max() >= len(spec.areas):
            raise ModelSpecError("area index out of range")
        if self.n and self.area.min() < -1:
            raise ModelSpecError("area index below -1")
        if self.n and self.area.min() < 0 and not spec.include_no_state:
            raise ModelSpecError("stateless rows present but no-state term disabled")
        for e in spec.effects:
            idx = self.effect_idx.get(e.title)
            if idx is None:
                raise ModelSpecError(f"missing index array for effect {e.title!r}")
            if self.n and (idx.min() < 0 or idx.max() >= len(e.levels)):
                raise ModelSpecError(f"effect {e.title!r}: level index out of range")
        if spec.include_poll_walk:
            if self.poll is None:
                raise ModelSpecError("poll walk enabled but poll indices missing")
            if self.n and (self.poll.min() < 0 or self.poll.max() >= spec.n_polls):
                raise ModelSpecError("poll index out of range")


@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple[int, ...]
    offset: int
    size: int


class ParamLayout:
    """Block map over the flat unconstrained parameter vector."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.jm = len(spec.active_choices)
        self.icar: Optional[IcarStructure] = build_icar(spec.graph) if spec.include_spatial else None
        self.z_std = standardize_columns(spec.z) if spec.z is not None else None
        self.nu_std = standardize_columns(spec.nu) if spec.nu is not None else None
        # per active choice: which z columns feed it
        self.beta_entries: list[tuple[int, int]] = []  # (active choice idx, z col)
        for a_idx, choice in enumerate(spec.active_choices):
            for col in spec.covariate_map.get(choice, ()):
                if self.z_std is None or col >= self.z_std.shape[1]:
                    raise ModelSpecError(f"z column {col} out of range for {choice!r}")
                self.beta_entries.append((a_idx, col))

        blocks: list[Block] = []
        offset = 0

        def add(name: str, shape: tuple[int, ...]):
            nonlocal offset
            size = int(np.prod(shape))
            blocks.append(Block(name, shape, offset, size))
            offset += size

        jm = self.jm
        add("alpha", (jm,))
        if spec.include_spatial:
            s = len(spec.areas)
            add("phi", (s, jm))
            if self.icar.n_free > 0:
                add("psi_raw", (self.icar.n_free, jm))
            add("log_sigma_state", (jm,))
            add("logit_xi", (jm,))
        for e in spec.effects:
            add(f"delta_{e.title}", (len(e.levels), jm))
            add(f"log_sigma_{e.title}", (jm,))
        if self.beta_entries:
            add("beta", (len(self.beta_entries),))
        if spec.interaction_title is not None:
            v_levels = len(spec.effect(spec.interaction_title).levels)
            add("zeta_raw", (v_levels, jm))
            add("log_sigma_zeta", (jm,))
        if spec.include_no_state:
            add("no_state", (jm,))
        if spec.include_poll_walk:
            add("delta_poll", (spec.n_polls, jm))
            add("log_sigma_poll", (1,))
        self.blocks = {b.name: b for b in blocks}
        self.dim = offset

    def unpack(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        if vec.shape != (self.dim,):
            raise ModelSpecError(f"expected vector of length {self.dim}, got {vec.shape}")
        return {
            b.name: vec[b.offset : b.offset + b.size].reshape(b.shape)
            for b in self.blocks.values()
        }

    def pack(self, parts: Mapping[str, np.ndarray]) -> np.ndarray:
        vec = np.zeros(self.dim)
        for name, b in self.blocks.items():
            vec[b.offset : b.offset + b.size] = np.asarray(parts[name]).reshape(-1)
        return vec

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)

    # -- constrained views ---------------------------------------------------

    def constrain(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """Natural-scale parameters assembled from the unconstrained vector."""
        raw = self.unpack(vec)
        spec = self.spec
        out: dict[str, np.ndarray] = {"alpha": raw["alpha"].copy()}
        if spec.include_spatial:
            sigma_state = np.exp(raw["log_sigma_state"])
            xi = 1.0 / (1.0 + np.exp(-raw["logit_xi"]))
            phi = raw["phi"]
            if self.icar.n_free > 0:
                psi = self.icar.basis @ raw["psi_raw"]
            else:
                psi = np.zeros_like(phi)
            lam = sigma_state[None, :] * (
                phi * np.sqrt(1.0 - xi)[None, :]
                + psi * np.sqrt(xi)[None, :] * self.icar.inv_sqrt_eps[:, None]
            )
            out.update(
                sigma_state=sigma_state, xi=xi, phi=phi.copy(), psi=psi, lam=lam
            )
        for e in spec.effects:
            sigma = np.exp(raw[f"log_sigma_{e.title}"])
            delta = raw[f"delta_{e.title}"]
            if e.structure == RANDOM_WALK:
                eff = sigma[None, :] * np.cumsum(delta, axis=0)
            else:
                eff = sigma[None, :] * delta
            out[f"effect_{e.title}"] = eff
            out[f"sigma_{e.title}"] = sigma
        if self.beta_entries:
            out["beta"] = raw["beta"].copy()
        if spec.interaction_title is not None:
            sigma_zeta = np.exp(raw["log_sigma_zeta"])
            out["zeta"] = sigma_zeta[None, :] * raw["zeta_raw"]
            out["sigma_zeta"] = sigma_zeta
        if spec.include_no_state:
            out["no_state"] = raw["no_state"].copy()
        if spec.include_poll_walk:
            sigma_poll = np.exp(raw["log_sigma_poll"][0])
            out["eta_poll"] = sigma_poll * np.cumsum(raw["delta_poll"], axis=0)
            out["sigma_poll"] = np.array([sigma_poll])
        return out

    def area_covariate_term(self, constrained: Mapping[str, np.ndarray]) -> np.ndarray:
        """(S, Jm) array of sum_k beta_{k,j} z[s,k]; zeros when no covariates."""
        s = len(self.spec.areas)
        bz = np.zeros((s, self.jm))
        if self.beta_entries:
            beta = constrained["beta"]
            for val, (a_idx, col) in zip(beta, self.beta_entries):
                bz[:, a_idx] += val * self.z_std[:, col]
        return bz

    def scalar_names(self) -> list[str]:
        """Column labels for the constrained draws table, layout order."""
        spec = self.spec
        names: list[str] = []
        act = spec.active_choices
        for c in act:
            names.append(f"alpha.{c}")
        if spec.include_spatial:
            for s in spec.areas:
                for c in act:
                    names.append(f"lambda.{s}.{c}")
            for c in act:
                names.append(f"sigma_state.{c}")
            for c in act:
                names.append(f"xi.{c}")
        for e in spec.effects:
            for lv in e.levels:
                for c in act:
                    names.append(f"{e.title}.{lv}.{c}")
            for c in act:
                names.append(f"sigma_{e.title}.{c}")
        for a_idx, col in self.beta_entries:
            names.append(f"beta.z{col}.{act[a_idx]}")
        if spec.interaction_title is not None:
            for lv in spec.effect(spec.interaction_title).levels:
                for c in act:
                    names.append(f"zeta.{lv}.{c}")
            for c in act:
                names.append(f"sigma_zeta.{c}")
        if spec.include_no_state:
            for c in act:
                names.append(f"no_state.{c}")
        if spec.include_poll_walk:
            for p in range(spec.n_polls):
                for c in act:
                    names.append(f"poll_walk.{p}.{c}")
            names.append("sigma_poll")
        return names

    def scalar_values(self, constrained: Mapping[str, np.ndarray]) -> np.ndarray:
        spec = self.spec
        cols: list[np.ndarray] = [np.atleast_1d(constrained["alpha"]).ravel()]
        if spec.include_spatial:
            cols.append(constrained["lam"].ravel())
            cols.append(constrained["sigma_state"].ravel())
            cols.append(constrained["xi"].ravel())
        for e in spec.effects:
            cols.append(constrained[f"effect_{e.title}"].ravel())
            cols.append(constrained[f"sigma_{e.title}"].ravel())
        if self.beta_entries:
            cols.append(constrained["beta"].ravel())
        if spec.interaction_title is not None:
            cols.append(constrained["zeta"].ravel())
            cols.append(constrained["sigma_zeta"].ravel())
        if spec.include_no_state:
            cols.append(constrained["no_state"].ravel())
        if spec.include_poll_walk:
            cols.append(constrained["eta_poll"].ravel())
            cols.append(constrained["sigma_poll"].ravel())
        return np.concatenate(cols)

    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        """Draw an unconstrained vector from the prior (for calibration runs)."""
        parts: dict[str, np.ndarray] = {}
        for name, b in self.blocks.items():
            if name.startswith("log_sigma"):
                parts[name] = np.log(np.abs(rng.normal(size=b.shape)))
            elif name == "logit_xi":
                xi = rng.beta(0.5, 0.5, size=b.shape)
                xi = np.clip(xi, 1e-12, 1 - 1e-12)
                parts[name] = np.log(xi) - np.log1p(-xi)
            else:
                parts[name] = rng.normal(size=b.shape)
        return self.pack(parts)


def spec_from_config(obj: dict) -> ModelSpec:
    """Build a ModelSpec from a declarative JSON-style document."""
    graph = AreaGraph.from_pairs(len(obj["areas"]), obj.get("edges", []))
    effects = tuple(
        EffectSpec(title=e["title"], levels=tuple(e["levels"]), structure=e["structure"])
        for e in obj["effects"]
    )
    z = np.asarray(obj["z"], dtype=float) if obj.get("z") is not None else None
    nu = np.asarray(obj["nu"], dtype=float) if obj.get("nu") is not None else None
    return ModelSpec(
        choices=tuple(obj["choices"]),
        reference=obj["reference"],
        areas=tuple(obj["areas"]),
        graph=graph,
        effects=effects,
        covariate_map={k: tuple(v) for k, v in obj.get("covariate_map", {}).items()},
        z=z,
        nu=nu,
        interaction_title=obj.get("interaction_title"),
        include_spatial=obj.get("include_spatial", True),
        include_no_state=obj.get("include_no_state", False),
        include_poll_walk=obj.get("include_poll_walk", False),
        n_polls=obj.get("n_polls", 1),
    )


def load_model_config(path: str | Path) -> ModelSpec:
    return spec_from_config(json.loads(Path(path).read_text(encoding="utf-8")))
