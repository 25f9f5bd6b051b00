"""Geometric mmWave channel generation for the reflector-assisted downlink.

Produces the forward matrix (base station to reflector), the per-user
reflector-to-user rows, line-of-sight bookkeeping against the scene
obstacle, and the composite per-user channel that the beamforming
optimizer consumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299792458.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array: ``rows x cols`` elements on a rectangular grid.

    ``element_spacing`` is in meters; the default (None) is half a carrier
    wavelength.
    """

    rows: int
    cols: int
    carrier_frequency: float = 30e9
    element_spacing: float | None = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array must have at least one row and column")
        if self.carrier_frequency <= 0:
            raise ValueError("carrier_frequency must be positive")
        if self.element_spacing is not None and self.element_spacing <= 0:
            raise ValueError("element_spacing must be positive")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def spacing(self) -> float:
        return self.element_spacing if self.element_spacing is not None else 0.5 * self.wavelength


@dataclass(frozen=True)
class SceneGeometry:
    """Static scene: base-station position, one blocking building, body blockage.

    The building is an axis-aligned box footprint (full widths ``building_extents``)
    sitting on the ground with the given height.  ``ue_blockage_probability`` is
    the per-slot probability that a user's reflector link is blocked by a body at
    grazing elevation; the probability tapers linearly to zero between
    ``blockage_elevation_lo_deg`` and ``blockage_elevation_hi_deg`` so that links
    arriving from high above a user are rarely blocked.
    """

    bs_position: tuple[float, float, float] = (0.0, 0.0, 20.0)
    building_center: tuple[float, float] = (10.0, 0.0)
    building_extents: tuple[float, float] = (10.0, 10.0)
    building_height: float = 18.0
    ue_blockage_probability: float = 0.2
    blockage_elevation_lo_deg: float = 35.0
    blockage_elevation_hi_deg: float = 85.0

    def __post_init__(self):
        if self.building_height <= 0:
            raise ValueError("building_height must be positive")
        if min(self.building_extents) <= 0:
            raise ValueError("building_extents must be positive")
        if not 0.0 <= self.ue_blockage_probability <= 1.0:
            raise ValueError("ue_blockage_probability must lie in [0, 1]")
        if not self.blockage_elevation_lo_deg < self.blockage_elevation_hi_deg:
            raise ValueError("blockage elevation ramp must have lo < hi")

    def body_blockage_probability(self, elevation_deg: float) -> float:
        """Per-slot body-blockage probability for a link at the given elevation."""
        lo, hi = self.blockage_elevation_lo_deg, self.blockage_elevation_hi_deg
        ramp = (hi - elevation_deg) / (hi - lo)
        return self.ue_blockage_probability * float(np.clip(ramp, 0.0, 1.0))


@dataclass(frozen=True)
class ChannelParams:
    """Propagation constants of the log-distance / Rician channel model.

    ``forward_rician_k_db`` sets the Rician factor of the base-station to
    reflector matrix separately; a lower value models a richer feed link,
    which raises the rank of the composite two-hop channel and with it the
    number of users the precoder can serve in parallel.  None reuses
    ``rician_k_db``.
    """

    los_exponent: float = 2.0
    nlos_exponent: float = 3.3
    nlos_penalty_db: float = 20.0
    rician_k_db: float = 10.0
    forward_rician_k_db: float | None = None

    @property
    def forward_k_db(self) -> float:
        return self.rician_k_db if self.forward_rician_k_db is None else self.forward_rician_k_db


@dataclass
class ChannelRealization:
    """One coherence-slot draw of all links.

    ``forward`` is the N x M base-station-to-reflector matrix, ``rows`` holds the
    K reflector-to-user row vectors (K x N), ``los_flags[k]`` marks whether user
    k's reflector link is unobstructed this slot, and ``bs_ir_los`` the same for
    the feed link.
    """

    forward: np.ndarray
    rows: np.ndarray
    los_flags: np.ndarray
    bs_ir_los: bool


@dataclass
class EffectiveCsi:
    """Composite per-user channels D_k (K x N x M) plus noise power and bandwidth."""

    D: np.ndarray
    noise_power: float
    bandwidth: float

    def __post_init__(self):
        if self.D.ndim != 3:
            raise ValueError("D must be a K x N x M array")
        if self.noise_power <= 0:
            raise ValueError("noise_power must be positive")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def num_users(self) -> int:
        return self.D.shape[0]


def array_response(geom: ArrayGeometry, azimuth: float, elevation: float) -> np.ndarray:
    """Steering vector of a uniform planar array for a plane wave at (azimuth, elevation).

    Entries are unit-modulus; element (p, q) is flattened row-major to index
    ``p * cols + q``.
    """
    ratio = geom.spacing / geom.wavelength
    p = np.arange(geom.rows)[:, None]
    q = np.arange(geom.cols)[None, :]
    phase = 2.0 * np.pi * ratio * (p * np.sin(elevation) + q * np.sin(azimuth) * np.cos(elevation))
    return np.exp(1j * phase).ravel()


def path_gain(distance: float, is_los: bool, frequency: float,
              params: ChannelParams = ChannelParams()) -> float:
    """Linear large-scale power gain of a link under the log-distance model.

    Anchored at the free-space gain (c / 4 pi f)^2 at the 1 m reference
    distance; distances below the reference are clamped to it, which keeps the
    obstructed branch strictly below the clear branch at every distance.
    """
    if distance <= 0:
        raise ValueError("degenerate geometry: distance must be positive")
    if frequency <= 0:
        raise ValueError("frequency must be positive")
    ref = (SPEED_OF_LIGHT / (4.0 * np.pi * frequency)) ** 2
    d = max(distance, 1.0)
    if is_los:
        return ref * d ** (-params.los_exponent)
    penalty = 10.0 ** (-params.nlos_penalty_db / 10.0)
    return ref * penalty * d ** (-params.nlos_exponent)


def los_visible(p1, p2, scene: SceneGeometry) -> bool:
    """True when the open segment p1-p2 does not pass through the building interior.

    Grazing contact (touching a face or the top edge exactly) counts as visible.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if np.array_equal(p1, p2):
        raise ValueError("degenerate geometry: endpoints coincide")
    cx, cy = scene.building_center
    ex, ey = scene.building_extents
    lo = np.array([cx - 0.5 * ex, cy - 0.5 * ey, -np.inf])
    hi = np.array([cx + 0.5 * ex, cy + 0.5 * ey, scene.building_height])
    d = p2 - p1
    t0, t1 = 0.0, 1.0
    for axis in range(3):
        if d[axis] == 0.0:
            if not (lo[axis] <= p1[axis] <= hi[axis]):
                return True
            continue
        ta = (lo[axis] - p1[axis]) / d[axis]
        tb = (hi[axis] - p1[axis]) / d[axis]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 >= t1:
            return True
    if t1 - t0 <= 1e-12:
        return True
    # interior test at the midpoint of the overlap: strict inequalities so
    # that rays along a face or the top edge stay visible
    mid = p1 + 0.5 * (t0 + t1) * d
    inside = (lo[0] < mid[0] < hi[0]) and (lo[1] < mid[1] < hi[1]) and (mid[2] < hi[2])
    return not inside


def _direction_angles(src, dst):
    d = np.asarray(dst, dtype=float) - np.asarray(src, dtype=float)
    az = float(np.arctan2(d[1], d[0]))
    el = float(np.arctan2(d[2], np.hypot(d[0], d[1])))
    return az, el


def _elevation_deg(src, dst) -> float:
    _, el = _direction_angles(src, dst)
    return float(np.degrees(el))


def _rician_mix(los_component: np.ndarray, scatter: np.ndarray, k_db: float) -> np.ndarray:
    k = 10.0 ** (k_db / 10.0)
    return np.sqrt(k / (1.0 + k)) * los_component + np.sqrt(1.0 / (1.0 + k)) * scatter


def _scatter(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _as_points(positions) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(positions, dtype=float))
    if pts.shape[1] == 2:
        pts = np.hstack([pts, np.zeros((pts.shape[0], 1))])
    if pts.shape[1] != 3:
        raise ValueError("positions must be 2-vectors (ground) or 3-vectors")
    return pts


def sample_channels(scene: SceneGeometry, bs_array: ArrayGeometry, ir_array: ArrayGeometry,
                    ir_position, ue_positions, rng: np.random.Generator,
                    params: ChannelParams = ChannelParams()) -> ChannelRealization:
    """Draw one coherence slot of the reflected channels.

    Small-scale fading is redrawn on every call; with an identical generator
    state the draw is reproducible.  Draw order: forward-link scatter, then
    per-user scatter, then per-user body-blockage uniforms, so consumers can
    rely on stream alignment.
    """
    ir_position = np.asarray(ir_position, dtype=float)
    if ir_position[2] <= 0:
        raise ValueError("reflector must be above ground")
    ue_pts = _as_points(ue_positions)
    if ue_pts.shape[0] < 1:
        raise ValueError("need at least one user")
    bs = np.asarray(scene.bs_position, dtype=float)
    n, m = ir_array.size, bs_array.size

    bs_ir_clear = los_visible(bs, ir_position, scene)
    d_bs_ir = float(np.linalg.norm(ir_position - bs))
    gain_fwd = path_gain(d_bs_ir, bs_ir_clear, bs_array.carrier_frequency, params)
    az_out, el_out = _direction_angles(bs, ir_position)
    az_in, el_in = _direction_angles(ir_position, bs)
    fwd_los = np.outer(array_response(ir_array, az_in, el_in),
                       array_response(bs_array, az_out, el_out))
    fwd_scatter = _scatter(rng, (n, m))
    if bs_ir_clear:
        forward = np.sqrt(gain_fwd) * _rician_mix(fwd_los, fwd_scatter, params.forward_k_db)
    else:
        forward = np.sqrt(gain_fwd) * fwd_scatter

    k_users = ue_pts.shape[0]
    scatters = _scatter(rng, (k_users, n))
    blockage_u = rng.uniform(0.0, 1.0, k_users)
    rows = np.empty((k_users, n), dtype=complex)
    los_flags = np.empty(k_users, dtype=bool)
    for k in range(k_users):
        geom_clear = los_visible(ir_position, ue_pts[k], scene)
        elev = _elevation_deg(ue_pts[k], ir_position)
        blocked = blockage_u[k] < scene.body_blockage_probability(elev)
        los_flags[k] = bool(geom_clear and not blocked)
        d = float(np.linalg.norm(ue_pts[k] - ir_position))
        g = path_gain(d, los_flags[k], ir_array.carrier_frequency, params)
        if los_flags[k]:
            az, el = _direction_angles(ir_position, ue_pts[k])
            los_row = array_response(ir_array, az, el)
            rows[k] = np.sqrt(g) * _rician_mix(los_row, scatters[k], params.rician_k_db)
        else:
            rows[k] = np.sqrt(g) * scatters[k]
    return ChannelRealization(forward=forward, rows=rows, los_flags=los_flags,
                              bs_ir_los=bool(bs_ir_clear))


def effective_csi(real: ChannelRealization, noise_power: float, bandwidth: float) -> EffectiveCsi:
    """Compose the per-user channel D_k = diag(row_k) @ forward.

    Elementwise, D_k[n, m] = rows[k, n] * forward[n, m] exactly.
    """
    forward, rows = real.forward, real.rows
    if rows.ndim != 2 or forward.ndim != 2 or rows.shape[1] != forward.shape[0]:
        raise ValueError("row length and forward matrix height disagree")
    D = rows[:, :, None] * forward[None, :, :]
    return EffectiveCsi(D=D, noise_power=noise_power, bandwidth=bandwidth)


def sample_direct_channels(scene: SceneGeometry, bs_array: ArrayGeometry, ue_positions,
                           rng: np.random.Generator,
                           params: ChannelParams = ChannelParams()):
    """Draw base-station-to-user rows for reflector-free transmission.

    Returns (rows, los_flags) where rows is K x M; a user behind the building
    gets the obstructed path-loss branch and Rayleigh fading.
    """
    ue_pts = _as_points(ue_positions)
    bs = np.asarray(scene.bs_position, dtype=float)
    m = bs_array.size
    k_users = ue_pts.shape[0]
    scatters = _scatter(rng, (k_users, m))
    rows = np.empty((k_users, m), dtype=complex)
    los_flags = np.empty(k_users, dtype=bool)
    for k in range(k_users):
        los_flags[k] = los_visible(bs, ue_pts[k], scene)
        d = float(np.linalg.norm(ue_pts[k] - bs))
        g = path_gain(d, bool(los_flags[k]), bs_array.carrier_frequency, params)
        if los_flags[k]:
            az, el = _direction_angles(bs, ue_pts[k])
            los_row = array_response(bs_array, az, el)
            rows[k] = np.sqrt(g) * _rician_mix(los_row, scatters[k], params.rician_k_db)
        else:
            rows[k] = np.sqrt(g) * scatters[k]
    return rows, los_flags
