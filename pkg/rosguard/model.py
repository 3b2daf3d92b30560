import logging
from itertools import islice
from pathlib import Path
from typing import Callable, Iterator, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
from pydantic import Field, PrivateAttr, field_validator

from .config import ArrayModel, FloatArray
from .exceptions import DimMismatch, RankDeficient, ReportError, ScenarioError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class SystemModel(ArrayModel):
    """
    Nominal pre-change observation model x = H theta + n, n ~ N(0, sigma2 I).

    Construction fails with ``RankDeficient`` when H loses column rank.
    """

    H: FloatArray
    sigma2: float = Field(gt=0)
    rank_tol: float = Field(1e-10, gt=0)

    _projector: Optional["Projector"] = PrivateAttr(default=None)

    @field_validator("H")
    @classmethod
    def _matrix(cls, H: np.ndarray) -> np.ndarray:
        if H.ndim != 2:
            raise ValueError(f"H must be a matrix, got shape {H.shape}")
        M, N = H.shape
        if not M > N >= 1:
            raise ValueError(f"need M > N >= 1, got M={M}, N={N}")
        return H

    def model_post_init(self, __context) -> None:
        self._projector = orthogonal_projector(self)

    @property
    def M(self) -> int:
        return self.H.shape[0]

    @property
    def N(self) -> int:
        return self.H.shape[1]

    @property
    def projector(self) -> "Projector":
        return self._projector

    def residual(self, x) -> np.ndarray:
        return residual(self._projector, x)


class Projector(ArrayModel):
    """Orthogonal projector onto the complement of the column space of H."""

    P: FloatArray
    complement: FloatArray
    rank: int

    @property
    def M(self) -> int:
        return self.P.shape[0]


def orthogonal_projector(model: SystemModel) -> Projector:
    """
    Build P = I - H (H^T H)^-1 H^T from the SVD of H.

    The trailing left singular vectors span C(H)-perp, so P = Z Z^T.

    Raises:
        RankDeficient: If the smallest singular value is below rank_tol times the largest.
    """
    H = model.H
    M, N = H.shape
    U, s, _ = scipy.linalg.svd(H, full_matrices=True)
    if s[-1] < model.rank_tol * s[0]:
        raise RankDeficient(float(s[-1]), float(s[0]), model.rank_tol)
    Z = U[:, N:]
    P = Z @ Z.T
    P = 0.5 * (P + P.T)
    return Projector(P=P, complement=Z, rank=N)


def residual(proj: Projector, x) -> np.ndarray:
    """Project one observation (M,) or a stack of observations (T, M)."""
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != proj.M:
        raise DimMismatch("observation", proj.M, x.shape)
    # P is symmetric; einsum keeps each row independent of the stack size
    return np.einsum("...m,mk->...k", x, proj.P)


class StateGenerator(Protocol):
    def __call__(self, rng: np.random.Generator, t: int, N: int) -> np.ndarray: ...


class PerturbationGenerator(Protocol):
    def __call__(
        self, rng: np.random.Generator, t: int, theta: np.ndarray, H: np.ndarray
    ) -> np.ndarray: ...


class UniformState(ArrayModel):
    low: float = -1.0
    high: float = 1.0

    def __call__(self, rng, t, N):
        return rng.uniform(self.low, self.high, size=N)


class ConstantState(ArrayModel):
    theta: Tuple[float, ...]

    def __call__(self, rng, t, N):
        return np.asarray(self.theta, dtype=float)


def uniform_state(low: float = -1.0, high: float = 1.0) -> UniformState:
    return UniformState(low=low, high=high)


def constant_state(theta: Sequence[float]) -> ConstantState:
    return ConstantState(theta=tuple(float(v) for v in theta))


class ConstantPerturbation(ArrayModel):
    delta_H: FloatArray

    def __call__(self, rng, t, theta, H):
        return self.delta_H


class InBandInjection(ArrayModel):
    """Lift a target mu to Delta H = mu theta^T / ||theta||^2, so Delta H theta = mu."""

    mu: FloatArray

    def __call__(self, rng, t, theta, H):
        norm2 = float(theta @ theta)
        if norm2 == 0.0:
            return np.zeros((self.mu.size, theta.size))
        return np.outer(self.mu, theta) / norm2


class RowBlockage(ArrayModel):
    """Attenuate whole rows of H: Delta H = -gain * diag(mask) H."""

    rows: Tuple[int, ...]
    gain: float

    def __call__(self, rng, t, theta, H):
        delta = np.zeros_like(H)
        rows = list(self.rows)
        delta[rows, :] = -self.gain * H[rows, :]
        return delta


class ChangeScenario(ArrayModel):
    """When and how the system matrix changes; ``t_a=None`` means never."""

    theta_gen: Callable = Field(default_factory=UniformState)
    deltaH_gen: Optional[Callable] = None
    t_a: Optional[int] = None
    seed: int = 0

    @field_validator("t_a")
    @classmethod
    def _change_time(cls, t_a: Optional[int]) -> Optional[int]:
        if t_a is not None and t_a < 1:
            raise ValueError(f"t_a must be >= 1, got {t_a}")
        return t_a

    def changed(self, t: int) -> bool:
        return self.deltaH_gen is not None and self.t_a is not None and t >= self.t_a


def iter_stream(model: SystemModel, scenario: ChangeScenario) -> Iterator[np.ndarray]:
    """Endless observation stream, t = 1, 2, ..."""
    rng = np.random.default_rng(scenario.seed)
    sigma = float(np.sqrt(model.sigma2))
    H = model.H
    t = 0
    while True:
        t += 1
        theta = np.asarray(scenario.theta_gen(rng, t, model.N), dtype=float)
        A = H + scenario.deltaH_gen(rng, t, theta, H) if scenario.changed(t) else H
        yield A @ theta + sigma * rng.standard_normal(model.M)


def generate_stream(model: SystemModel, scenario: ChangeScenario, T: int) -> np.ndarray:
    """Return the first T observations as a (T, M) array."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return np.array(list(islice(iter_stream(model, scenario), T)))


def sample_in_band_mu(
    proj: Projector,
    rho_L: float,
    rho_U: float,
    rng: np.random.Generator,
    max_tries: int = 1000,
    zero_tol: float = 1e-9,
) -> np.ndarray:
    """
    Draw mu in C(H)-perp whose nonzero entries satisfy rho_L <= |mu_m| <= rho_U.

    Entries below zero_tol relative to the largest are structural zeros of the
    complement and are set to exactly 0.
    """
    Z = proj.complement
    for _ in range(max_tries):
        mu = Z @ rng.standard_normal(Z.shape[1])
        scale = np.abs(mu).max()
        if scale == 0.0:
            continue
        mu[np.abs(mu) <= zero_tol * scale] = 0.0
        magnitudes = np.abs(mu[mu != 0.0])
        low = rho_L / magnitudes.min()
        high = rho_U / magnitudes.max()
        if low <= high:
            return mu * rng.uniform(low, high)
    raise ScenarioError(
        f"no in-band direction found in {max_tries} draws "
        f"(rho_L={rho_L}, rho_U={rho_U}, complement dim {Z.shape[1]})"
    )


def read_matrix(path: PathLike) -> np.ndarray:
    """Read the "M N" header text format; a vector is stored as an R x 1 matrix."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: first line must be 'M N'")
        rows, cols = int(header[0]), int(header[1])
        data = np.loadtxt(f, dtype=float, ndmin=2)
    if data.shape != (rows, cols):
        raise DimMismatch(str(path), (rows, cols), data.shape)
    return data


def write_matrix(path: PathLike, A) -> None:
    """
    Write a matrix in the "M N" header text format read by ``read_matrix``.

    Args:
        path (PathLike): Destination file.
        A: Matrix (R, C), or a vector written as an R x 1 matrix.

    Raises:
        ReportError: If the file cannot be written.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    try:
        np.savetxt(path, A, fmt="%.17g", header=f"{A.shape[0]} {A.shape[1]}", comments="")
    except OSError as e:
        raise ReportError(path, e) from e


def write_stream(stream, path: PathLike) -> None:
    """Write observations as CSV "t,x_1,...,x_M"."""
    stream = np.atleast_2d(np.asarray(stream, dtype=float))
    frame = pd.DataFrame(stream, columns=[f"x_{m + 1}" for m in range(stream.shape[1])])
    frame.insert(0, "t", np.arange(1, stream.shape[0] + 1))
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise ReportError(path, e) from e
    logger.info(f"Wrote {stream.shape[0]} observations to {path}")
