"""
Experiment scenarios: the IEEE-14 region-4 false-data-injection case, synthetic
MIMO blockage, the random {1, 0, -1} systems used for scaling runs, and JSON
scenario files.
"""

import json
import logging
from pathlib import Path
from typing import Callable, List, Literal, Optional, Union

import numpy as np
from pydantic import Field, ValidationError

from .config import ArrayModel, EvidenceConfig, FloatArray, ScenarioFile, SetBlock
from .exceptions import RankDeficient, RankRetryExhausted, ScenarioError
from .model import (
    ChangeScenario,
    InBandInjection,
    RowBlockage,
    SystemModel,
    read_matrix,
    sample_in_band_mu,
    uniform_state,
)
from .uncertainty import AnyUncertaintySet, DNormSet, EllipsoidSet, PolyhedralSet, box_set

logger = logging.getLogger(__name__)

IEEE14_REGION4_H = np.array(
    [
        [-1.0, 3.0, -1.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, -1.0],
        [0.0, -1.0, 1.0],
        [0.0, -1.0, 2.0],
    ]
)
IEEE14_REGION4_C = np.array(
    [
        [-0.5, 0.5, 0.5, 0.5, 0.5, 1.5, 0.5, 0.5, 0.5, 0.5],
        [3.5, -0.5, 0.5, -0.5, -0.5, -2.5, 1.5, 0.5, 1.5, 1.5],
        [-0.5, 0.5, -0.5, 1.5, 2.5, 1.5, 0.5, 1.5, -0.5, -1.5],
    ]
)
IEEE14_ELLIPSOID_CENTERS = np.array(
    [
        [-1.0, 0.1, 0.3, -0.2, 0.0],
        [3.0, -0.7, 0.2, -1.3, -0.9],
        [-1.1, 0.2, -0.6, 0.7, 2.0],
    ]
)
IEEE14_ELLIPSOID_RADIUS = 0.36
IEEE14_DNORM_KAPPA = 4
IEEE14_DNORM_U_HAT = 0.5

RANDOM_PERTURBATION = 0.1
RANDOM_BOX_HALF_WIDTH = 0.1
RANK_RETRIES = 100

SetKind = Literal["polyhedral", "ellipsoid", "dnorm"]


class ScenarioSpec(ArrayModel):
    """
    Everything one experiment needs.

    ``model`` is what the detector knows (nominal H, sigma2); ``true_H`` generates
    the data. ``injection`` builds the post-change perturbation for one run from
    that run's random generator, or is None for scenarios without a change.
    """

    name: str
    model: SystemModel
    true_H: FloatArray
    sets: List[AnyUncertaintySet]
    evidence: EvidenceConfig = Field(default_factory=EvidenceConfig)
    t_a: Optional[int] = Field(None, ge=1)
    injection: Optional[Callable] = None
    theta_gen: Callable = Field(default_factory=uniform_state)

    @property
    def data_model(self) -> SystemModel:
        if np.array_equal(self.true_H, self.model.H):
            return self.model
        return SystemModel(H=self.true_H, sigma2=self.model.sigma2)

    def with_sigma2(self, sigma2: Optional[float]) -> "ScenarioSpec":
        if sigma2 is None:
            return self
        model = SystemModel(H=self.model.H, sigma2=sigma2, rank_tol=self.model.rank_tol)
        return self.model_copy(update={"model": model})

    def with_evidence(self, evidence: Optional[EvidenceConfig]) -> "ScenarioSpec":
        """Swap the magnitude band; an in-band injection follows the new band."""
        if evidence is None:
            return self
        update = {"evidence": evidence}
        if isinstance(self.injection, InBandDraw):
            update["injection"] = in_band_injection(self.model, evidence.rho_L, evidence.rho_U)
        return self.model_copy(update=update)

    def change(self, seed: int, t_a: Optional[int] = None) -> ChangeScenario:
        """Change law for one run; ``t_a`` overrides the scenario's change time."""
        t_a = self.t_a if t_a is None else t_a
        if self.injection is None or t_a is None:
            return ChangeScenario(theta_gen=self.theta_gen, seed=seed)
        rng = np.random.default_rng([seed, 1])
        return ChangeScenario(
            theta_gen=self.theta_gen, deltaH_gen=self.injection(rng), t_a=t_a, seed=seed
        )

    def membership_violations(self) -> List[int]:
        """Columns whose true value lies outside their own uncertainty set."""
        return [i for i, s in enumerate(self.sets) if not s.contains(self.true_H[:, i], tol=1e-9)]


class InBandDraw(ArrayModel):
    """Per-run injection: a random mu in C(H)-perp with entries in the magnitude band."""

    model: SystemModel
    rho_L: float = Field(gt=0)
    rho_U: float = Field(gt=0)

    def __call__(self, rng: np.random.Generator) -> InBandInjection:
        return InBandInjection(mu=sample_in_band_mu(self.model.projector, self.rho_L, self.rho_U, rng))


def in_band_injection(model: SystemModel, rho_L: float, rho_U: float) -> InBandDraw:
    """
    Injection law drawing a fresh in-band target for every run.

    Args:
        model (SystemModel): Supplies the complement C(H)-perp the target lies in.
        rho_L (float): Smallest nonzero |mu_m|.
        rho_U (float): Largest |mu_m|.

    Returns:
        InBandDraw: Maps a run's generator to an ``InBandInjection``.
    """
    return InBandDraw(model=model, rho_L=rho_L, rho_U=rho_U)


def ieee14_region4(
    kind: SetKind = "polyhedral",
    sigma2: float = 1.0,
    evidence: Optional[EvidenceConfig] = None,
    t_a: Optional[int] = None,
) -> ScenarioSpec:
    """
    Region 4 of the IEEE 14-bus measurement matrix with one of its three
    uncertainty set families. Every column is uncertain.
    """
    model = SystemModel(H=IEEE14_REGION4_H, sigma2=sigma2)
    if kind == "polyhedral":
        D = np.vstack([np.eye(5), -np.eye(5)])
        sets = [PolyhedralSet(D=D, d=c) for c in IEEE14_REGION4_C]
    elif kind == "ellipsoid":
        sets = [EllipsoidSet(center=h, radius=IEEE14_ELLIPSOID_RADIUS) for h in IEEE14_ELLIPSOID_CENTERS]
    elif kind == "dnorm":
        sets = [
            DNormSet(center=h, kappa=IEEE14_DNORM_KAPPA, u_hat=IEEE14_DNORM_U_HAT)
            for h in IEEE14_ELLIPSOID_CENTERS
        ]
    else:
        raise ScenarioError(f"unknown uncertainty set kind {kind!r}")
    evidence = evidence or EvidenceConfig(rho_L=1.0, rho_U=3.0)
    spec = ScenarioSpec(
        name=f"ieee14:{kind}",
        model=model,
        true_H=IEEE14_REGION4_H,
        sets=sets,
        evidence=evidence,
        t_a=t_a,
        injection=in_band_injection(model, evidence.rho_L, evidence.rho_U),
    )
    outside = spec.membership_violations()
    if outside:
        logger.warning(f"{spec.name}: true columns {outside} lie outside their printed uncertainty sets")
    logger.info(f"Built scenario {spec.name}")
    return spec


def random_system(
    M: int,
    seed: int = 0,
    N: Optional[int] = None,
    sigma2: float = 1.0,
    evidence: Optional[EvidenceConfig] = None,
    t_a: Optional[int] = None,
) -> ScenarioSpec:
    """
    True H with entries drawn from {1, 0, -1}, nominal columns shifted by up to
    0.1 per entry, and box sets of half-width 0.1 around the nominal columns.

    Raises:
        RankRetryExhausted: If 100 draws in a row are rank deficient.
    """
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    N = max(1, M // 2) if N is None else N
    rng = np.random.default_rng(seed)
    for attempt in range(RANK_RETRIES):
        true_H = rng.choice([-1.0, 0.0, 1.0], size=(M, N))
        nominal = true_H + rng.uniform(-RANDOM_PERTURBATION, RANDOM_PERTURBATION, size=(M, N))
        try:
            SystemModel(H=true_H, sigma2=sigma2)
            model = SystemModel(H=nominal, sigma2=sigma2)
        except RankDeficient:
            logger.debug(f"random_system(M={M}, seed={seed}): draw {attempt} rank deficient, retrying")
            continue
        break
    else:
        raise RankRetryExhausted(f"no full-rank {M}x{N} draw in {RANK_RETRIES} attempts (seed {seed})")
    sets = [box_set(nominal[:, i], RANDOM_BOX_HALF_WIDTH) for i in range(N)]
    evidence = evidence or EvidenceConfig(rho_L=1.0, rho_U=3.0)
    return ScenarioSpec(
        name=f"random:{M}",
        model=model,
        true_H=true_H,
        sets=sets,
        evidence=evidence,
        t_a=t_a,
        injection=in_band_injection(model, evidence.rho_L, evidence.rho_U),
    )


def mimo_blockage(
    M: int = 4,
    N: int = 2,
    blockage_gain: float = 1.0,
    t_a: Optional[int] = 1,
    rows=(0, 1),
    radius: float = 0.1,
    sigma2: float = 0.1,
    seed: int = 0,
    evidence: Optional[EvidenceConfig] = None,
) -> ScenarioSpec:
    """
    Real-valued stand-in for a small MIMO link: Gaussian nominal channel, ball
    uncertainty around each column, and a change that attenuates whole receive
    rows by ``blockage_gain``.
    """
    if not 0.0 <= blockage_gain <= 1.0:
        raise ValueError(f"blockage_gain must lie in [0, 1], got {blockage_gain}")
    rng = np.random.default_rng(seed)
    for _ in range(RANK_RETRIES):
        H = rng.standard_normal((M, N))
        try:
            model = SystemModel(H=H, sigma2=sigma2)
        except RankDeficient:
            continue
        break
    else:
        raise RankRetryExhausted(f"no full-rank {M}x{N} channel in {RANK_RETRIES} attempts")
    sets = [EllipsoidSet(center=H[:, i], radius=radius) for i in range(N)]
    blockage = RowBlockage(rows=tuple(int(r) for r in rows), gain=float(blockage_gain))
    return ScenarioSpec(
        name="mimo",
        model=model,
        true_H=H,
        sets=sets,
        evidence=evidence or EvidenceConfig(rho_L=0.5, rho_U=5.0),
        t_a=t_a if blockage_gain > 0 else None,
        injection=(lambda rng: blockage) if blockage_gain > 0 else None,
    )


def _matrix(value, base: Path) -> np.ndarray:
    if isinstance(value, str):
        return read_matrix(base / value)
    return np.asarray(value, dtype=float)


def _vector(value, base: Path) -> np.ndarray:
    return _matrix(value, base).reshape(-1)


def _set_from_block(block: SetBlock, base: Path):
    if block.kind == "polyhedral":
        return PolyhedralSet(D=_matrix(block.D, base), d=_vector(block.d, base))
    if block.kind == "ellipsoid":
        return EllipsoidSet(center=_vector(block.center, base), radius=block.radius)
    return DNormSet(center=_vector(block.center, base), kappa=block.kappa, u_hat=block.u_hat)


def scenario_from_file(path: Union[str, Path]) -> ScenarioSpec:
    """
    Build a scenario from a JSON file (schema in README). Matrix entries may be
    inline lists or paths, relative to the JSON file, of "M N" text matrices.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(f"cannot read scenario file {path}: {e}") from e
    try:
        doc = ScenarioFile.model_validate_json(text)
    except ValidationError as e:
        logger.error(f"Configuration validation error: {e}")
        raise
    base = path.parent
    model = SystemModel(H=_matrix(doc.H, base), sigma2=doc.sigma2)
    sets = [_set_from_block(block, base) for block in doc.sets]
    injection = None
    if doc.injection == "in-band" and doc.t_a is not None:
        injection = in_band_injection(model, doc.evidence.rho_L, doc.evidence.rho_U)
    spec = ScenarioSpec(
        name=doc.name,
        model=model,
        true_H=model.H,
        sets=sets,
        evidence=doc.evidence,
        t_a=doc.t_a,
        injection=injection,
    )
    logger.info(f"Loaded scenario {doc.name} from {path}")
    return spec


def load_scenario(ref: str, sigma2: Optional[float] = None, seed: int = 0) -> ScenarioSpec:
    """
    Resolve ``ieee14``, ``ieee14:<kind>``, ``random:<M>``, ``mimo`` or a JSON path.
    """
    if ref.endswith(".json") or Path(ref).is_file():
        spec = scenario_from_file(ref)
    elif ref == "ieee14":
        spec = ieee14_region4()
    elif ref.startswith("ieee14:"):
        spec = ieee14_region4(kind=ref.split(":", 1)[1])
    elif ref.startswith("random:"):
        try:
            M = int(ref.split(":", 1)[1])
        except ValueError as e:
            raise ScenarioError(f"bad random scenario reference {ref!r}") from e
        spec = random_system(M, seed=seed)
    elif ref == "mimo":
        spec = mimo_blockage(seed=seed)
    else:
        raise ScenarioError(f"unknown scenario {ref!r}")
    return spec.with_sigma2(sigma2)


def dump_reference_data() -> str:
    """The printed region-4 data as JSON (the format of the checked-in fixture)."""
    doc = {
        "H": IEEE14_REGION4_H.tolist(),
        "c": IEEE14_REGION4_C.tolist(),
        "ellipsoid": {"centers": IEEE14_ELLIPSOID_CENTERS.tolist(), "radius": IEEE14_ELLIPSOID_RADIUS},
        "dnorm": {"kappa": IEEE14_DNORM_KAPPA, "u_hat": IEEE14_DNORM_U_HAT},
    }
    return json.dumps(doc, indent=2)
