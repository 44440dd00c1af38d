"""Near-field uplink synthesis: array geometry, steering vectors, channels and
received signals at the XL-RIS and at the base station.

All position arguments accept either a single point of shape ``(3,)`` or a
batch of points of shape ``(K, 3)``; outputs gain a matching leading axis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_CARRIER_HZ = 28e9
DEFAULT_WAVELENGTH = SPEED_OF_LIGHT / DEFAULT_CARRIER_HZ

_AXES = {"x": 0, "y": 1, "z": 2}

# (row axis, column axis) spanning the plane orthogonal to each normal.
# Rows run vertically whenever the panel is wall-mounted.
_PLANE_AXES = {"x": ("z", "y"), "y": ("z", "x"), "z": ("x", "y")}


class NearFieldWarning(UserWarning):
    """The user lies outside the Fresnel region of the RIS aperture."""


def _unit(axis: str) -> np.ndarray:
    v = np.zeros(3)
    v[_AXES[axis]] = 1.0
    return v


@dataclass(frozen=True)
class ScenarioGeometry:
    bs_position: np.ndarray
    ris_center: np.ndarray
    ris_elements: np.ndarray  # (N, 3), row-major over (n1, n2)
    bs_antennas: np.ndarray  # (M, 3), row-major over (m1, m2)
    element_spacing: float
    wavelength: float
    n1: int
    n2: int
    m1: int
    m2: int
    aperture: float
    ris_row_axis: np.ndarray
    ris_col_axis: np.ndarray

    @property
    def n_elements(self) -> int:
        return self.n1 * self.n2

    @property
    def n_antennas(self) -> int:
        return self.m1 * self.m2

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength


@dataclass(frozen=True)
class ScattererSet:
    positions: np.ndarray  # (Ms, 3)
    gains: np.ndarray  # (Ms,) complex
    los_gain: complex = 1.0 + 0.0j

    def __post_init__(self):
        if len(self.positions) != len(self.gains):
            raise ValueError(
                f"{len(self.positions)} scatterer positions but {len(self.gains)} gains"
            )


def fresnel_bounds(aperture: float, wavelength: float) -> tuple[float, float]:
    """Return ``(d_min, d_max)`` of the radiative near-field region."""
    if aperture <= 0 or wavelength <= 0:
        raise ValueError(
            f"aperture and wavelength must be positive, got {aperture}, {wavelength}"
        )
    d_min = 0.62 * np.sqrt(aperture**3 / wavelength)
    d_max = 2.0 * aperture**2 / wavelength
    return float(d_min), float(d_max)


def planar_grid(center, rows: int, cols: int, spacing: float, normal_axis: str):
    """Centered ``rows x cols`` grid in the plane orthogonal to ``normal_axis``.

    Returns the ``(rows*cols, 3)`` positions in row-major order together with
    the row and column unit vectors. Element ``(0, 0)`` sits at a corner.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"grid counts must be >= 1, got {rows}x{cols}")
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    row_ax, col_ax = (_unit(a) for a in _PLANE_AXES[normal_axis])
    i = np.arange(rows) - (rows - 1) / 2.0
    j = np.arange(cols) - (cols - 1) / 2.0
    offsets = (
        i[:, None, None] * row_ax[None, None, :] + j[None, :, None] * col_ax[None, None, :]
    ) * spacing
    pos = np.asarray(center, dtype=float) + offsets.reshape(-1, 3)
    return pos, row_ax, col_ax


def build_geometry(
    n1: int,
    n2: int,
    m1: int,
    m2: int,
    spacing: float | None = None,
    ris_center=(6.0, 0.0, 2.0),
    bs_center=(0.0, 5.0, 1.5),
    ris_normal_axis: str = "y",
    bs_normal_axis: str = "x",
    wavelength: float = DEFAULT_WAVELENGTH,
) -> ScenarioGeometry:
    """Lay out the RIS and BS uniform planar arrays.

    ``spacing`` defaults to half a wavelength and is shared by both arrays.
    """
    if wavelength <= 0:
        raise ValueError(f"wavelength must be positive, got {wavelength}")
    spacing = wavelength / 2.0 if spacing is None else spacing
    ris, row_ax, col_ax = planar_grid(ris_center, n1, n2, spacing, ris_normal_axis)
    bs, _, _ = planar_grid(bs_center, m1, m2, spacing, bs_normal_axis)
    corners = ris[[0, -1]]
    aperture = float(np.linalg.norm(corners[1] - corners[0]))
    return ScenarioGeometry(
        bs_position=np.asarray(bs_center, dtype=float),
        ris_center=np.asarray(ris_center, dtype=float),
        ris_elements=ris,
        bs_antennas=bs,
        element_spacing=float(spacing),
        wavelength=float(wavelength),
        n1=n1,
        n2=n2,
        m1=m1,
        m2=m2,
        aperture=aperture,
        ris_row_axis=row_ax,
        ris_col_axis=col_ax,
    )


def _distances(points: np.ndarray, elements: np.ndarray) -> np.ndarray:
    # points (..., 3), elements (N, 3) -> (..., N)
    diff = points[..., None, :] - elements
    return np.sqrt(np.einsum("...k,...k->...", diff, diff))


def _check_clear(dist: np.ndarray, what: str) -> None:
    if np.any(dist <= 1e-12):
        raise ValueError(f"{what} coincides with an RIS element; geometry undefined")


def los_steering(p, geom: ScenarioGeometry) -> np.ndarray:
    """Spherical-wavefront LoS response of the RIS, referenced to its center."""
    p = np.asarray(p, dtype=float)
    d_n = _distances(p, geom.ris_elements)
    _check_clear(d_n, "user position")
    d_ref = np.linalg.norm(p - geom.ris_center, axis=-1)[..., None]
    return np.exp(-1j * geom.wavenumber * (d_n - d_ref))


def nlos_steering(p, q, geom: ScenarioGeometry) -> np.ndarray:
    """Response of the single-bounce path user -> scatterer ``q`` -> RIS."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d_pn = _distances(p, geom.ris_elements)
    d_qn = _distances(q, geom.ris_elements)
    _check_clear(d_pn, "user position")
    _check_clear(d_qn, "scatterer position")
    d_pq = np.linalg.norm(p - q, axis=-1)[..., None]
    d_ref = np.linalg.norm(p - geom.ris_center, axis=-1)[..., None]
    return np.exp(-1j * geom.wavenumber * (d_pn + d_qn + d_pq - d_ref))


def mu_ris_channel(p, scat: ScattererSet, geom: ScenarioGeometry) -> np.ndarray:
    h = scat.los_gain * los_steering(p, geom)
    for q, g in zip(scat.positions, scat.gains):
        h = h + g * nlos_steering(p, q, geom)
    return h


def bs_ris_channel(geom: ScenarioGeometry, beta: complex = 1.0) -> np.ndarray:
    """``M x N`` BS-RIS LoS channel ``beta * exp(+j k r_mn)``."""
    r = _distances(geom.bs_antennas, geom.ris_elements)
    return beta * np.exp(1j * geom.wavenumber * r)


def make_phase_profile(n: int, mode: str = "ones", rng=None) -> np.ndarray:
    """Unit-modulus RIS reflection vector: all ones or uniformly random phases."""
    if mode == "ones":
        return np.ones(n, dtype=complex)
    if mode == "random":
        rng = np.random.default_rng(rng)
        return np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, n))
    raise ValueError(f"unknown phase profile mode {mode!r}")


def draw_scatterers(
    n: int,
    bounds,
    rng,
    los_power: float = 1.0,
    power_ratio: float = 10.0,
) -> ScattererSet:
    """Scatterers uniform inside the workspace box, complex Gaussian gains.

    The LoS gain carries ``power_ratio`` times the per-scatterer power.
    """
    rng = np.random.default_rng(rng)
    hi = np.asarray(bounds, dtype=float)
    positions = rng.uniform(0.0, 1.0, size=(n, 3)) * hi

    def cn(power, size=None):
        scale = np.sqrt(power / 2.0)
        return rng.normal(0, scale, size) + 1j * rng.normal(0, scale, size)

    los = complex(cn(los_power))
    gains = cn(los_power / power_ratio, n)
    return ScattererSet(positions=positions, gains=np.asarray(gains, dtype=complex), los_gain=los)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def pilot_from_power(dbm: float) -> complex:
    return complex(np.sqrt(dbm_to_watts(dbm)))


def cascade(H: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Effective ``H diag(omega)`` seen from the RIS input."""
    return H * omega[None, :]


def noise_variance_for_snr(signal_power: float, snr_db: float) -> float:
    return float(signal_power / 10.0 ** (snr_db / 10.0))


def bs_signal_power(H: np.ndarray, omega: np.ndarray, y_r: np.ndarray) -> float:
    """Mean per-antenna noiseless BS power ``E||H diag(w) y_r||^2 / M``."""
    clean = y_r @ cascade(H, omega).T
    return float(np.mean(np.abs(clean) ** 2))


def complex_noise(rng, shape, variance: float) -> np.ndarray:
    scale = np.sqrt(variance / 2.0)
    return rng.normal(0.0, scale, shape) + 1j * rng.normal(0.0, scale, shape)


def check_near_field(p, geom: ScenarioGeometry) -> None:
    if geom.aperture <= 0:
        return
    d_min, d_max = fresnel_bounds(geom.aperture, geom.wavelength)
    d = np.atleast_1d(np.linalg.norm(np.asarray(p, dtype=float) - geom.ris_center, axis=-1))
    outside = (d < d_min) | (d > d_max)
    if np.any(outside):
        warnings.warn(
            f"{int(outside.sum())} of {d.size} positions outside the Fresnel region "
            f"[{d_min:.3f}, {d_max:.3f}] m",
            NearFieldWarning,
            stacklevel=3,
        )


def simulate_uplink(
    p,
    scat: ScattererSet,
    geom: ScenarioGeometry,
    omega: np.ndarray,
    pilot: complex,
    noise_variance: float,
    rng,
    H: np.ndarray | None = None,
    ris_noise: bool = False,
):
    """Return ``(y_r, y)``: the RIS-side signal and the noisy BS signal.

    ``y_r = h(p) s`` is noiseless unless ``ris_noise`` is set. ``H`` may be
    passed in to avoid recomputing the BS-RIS channel for every call.
    """
    if noise_variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {noise_variance}")
    check_near_field(p, geom)
    rng = np.random.default_rng(rng)
    H = bs_ris_channel(geom) if H is None else H
    y_r = mu_ris_channel(p, scat, geom) * pilot
    y = y_r @ cascade(H, omega).T
    if noise_variance > 0:
        y = y + complex_noise(rng, y.shape, noise_variance)
        if ris_noise:
            y_r = y_r + complex_noise(rng, y_r.shape, noise_variance)
    return y_r, y
