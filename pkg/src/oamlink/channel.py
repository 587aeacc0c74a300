"""Element-pair distances and per-subcarrier multi-user channel matrices.

Two generation modes are supported everywhere: ``exact`` keeps the full
square-root distance inside both the amplitude and the phase, while
``farfield`` uses the first-order distance expansion in the phase and a
per-user ``1/(2 k r_p)`` amplitude.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .config import (
    ArrayGeometry,
    SbsPlacement,
    SystemConfig,
    UcaGeometry,
    as_rings,
)

GENERATION_MODES = ("exact", "farfield")


def element_positions(ring: UcaGeometry, placement: SbsPlacement | None = None) -> np.ndarray:
    """3-D Cartesian element positions of a ring, optionally centered at a
    user placement.  Receive rings are parallel to the transmit plane."""
    az = ring.azimuths
    pos = np.stack(
        [ring.radius * np.cos(az), ring.radius * np.sin(az), np.zeros_like(az)],
        axis=1,
    )
    if placement is not None:
        center = placement.range_m * np.array(
            [
                np.sin(placement.elevation) * np.cos(placement.azimuth),
                np.sin(placement.elevation) * np.sin(placement.azimuth),
                np.cos(placement.elevation),
            ]
        )
        pos = pos + center
    return pos


def exact_distance(
    tx_index: int,
    rx_index: int,
    tx: UcaGeometry,
    rx: UcaGeometry,
    placement: SbsPlacement,
) -> float:
    """Exact element-pair distance (0-based element indices)."""
    return float(
        distance_matrix(tx, rx, placement, "exact")[rx_index, tx_index]
    )


def farfield_distance(
    tx_index: int,
    rx_index: int,
    tx: UcaGeometry,
    rx: UcaGeometry,
    placement: SbsPlacement,
) -> float:
    """First-order far-field element-pair distance (0-based element indices)."""
    return float(
        distance_matrix(tx, rx, placement, "farfield")[rx_index, tx_index]
    )


def distance_matrix(
    tx: UcaGeometry,
    rx: UcaGeometry,
    placement: SbsPlacement,
    mode: str = "exact",
) -> np.ndarray:
    """All element-pair distances as an (M, N) matrix, receive rows."""
    r = placement.range_m
    st = np.sin(placement.elevation)
    phi_p = placement.azimuth
    r_t = tx.radius
    r_r = rx.radius
    alpha = rx.azimuths[:, None]
    phi = tx.azimuths[None, :]

    if mode == "exact":
        sq = (
            r_t**2
            + r_r**2
            + r**2
            + 2.0 * r * r_r * st * np.cos(phi_p - alpha)
            - 2.0 * r * r_t * st * np.cos(phi_p - phi)
            - 2.0 * r_t * r_r * np.cos(alpha - phi)
        )
        return np.sqrt(sq)
    if mode == "farfield":
        return (
            r
            + r_r * st * np.cos(phi_p - alpha)
            - r_t * st * np.cos(phi_p - phi)
            - (r_t * r_r / r) * np.cos(alpha - phi)
        )
    raise ValueError(f"unknown generation mode {mode!r}")


def channel_coefficient(k: float, d, r_amp, beta: float = 1.0):
    """Free-space coefficient beta/(2 k r_amp) * exp(-i k d).

    In exact mode r_amp is the element-pair distance itself; in far-field
    mode it is the user range, which leaves a constant magnitude per user.
    """
    return beta / (2.0 * k * r_amp) * np.exp(-1j * k * np.asarray(d))


def user_channel_matrix(
    k: float,
    tx: UcaGeometry,
    rx: UcaGeometry,
    placement: SbsPlacement,
    beta: float = 1.0,
    mode: str = "farfield",
) -> np.ndarray:
    """(M, N) downlink channel from one transmit ring to one receive ring."""
    d = distance_matrix(tx, rx, placement, mode)
    r_amp = d if mode == "exact" else placement.range_m
    return channel_coefficient(k, d, r_amp, beta)


def group_columns(q: int, user_count: int, per_group: int) -> np.ndarray:
    """0-based transmit element indices of group q (1-based): q, q+P, ..."""
    return (q - 1) + user_count * np.arange(per_group)


def group_submatrix(h_user: np.ndarray, q: int, user_count: int) -> np.ndarray:
    """(M, M) submatrix of a user channel for transmit group q (1-based)."""
    m = h_user.shape[0]
    return h_user[:, group_columns(q, user_count, m)]


@dataclass(frozen=True)
class ChannelTensor:
    """Per-subcarrier stacked channel matrices.

    ``data`` has shape (W, P*R*M, R*N) where R is the ring count (1 for a
    plain UCA system).  Rows are ordered (user, ring, element); columns are
    ordered (ring, element).
    """

    data: np.ndarray
    wave_numbers: np.ndarray
    generation: str
    user_count: int
    ring_count: int
    rx_elements: int
    tx_elements: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("channel tensor contains non-finite entries")

    @property
    def subcarrier_count(self) -> int:
        return self.data.shape[0]

    def user_block(self, w: int, p: int) -> np.ndarray:
        """(R*M, R*N) channel of user p (1-based) at subcarrier w (0-based)."""
        rm = self.ring_count * self.rx_elements
        return self.data[w, (p - 1) * rm : p * rm, :]


def assemble_channel(
    config: SystemConfig,
    placements: Sequence[SbsPlacement] | None = None,
    mode: str = "farfield",
) -> ChannelTensor:
    """Build the per-subcarrier channel for a UCA or UCCA scenario.

    For a UCCA scenario each (receive ring, transmit ring) pair forms one
    (M, N) block; blocks keep the same element grouping as the UCA case.
    """
    if mode not in GENERATION_MODES:
        raise ValueError(f"unknown generation mode {mode!r}")
    if placements is None:
        placements = config.placements
    tx_rings = as_rings(config.tx)
    ks = config.carriers.wave_numbers
    n_rings = len(tx_rings)
    m = config.rx_element_count
    n = config.tx_element_count

    rows = config.user_count * n_rings * m
    cols = n_rings * n
    data = np.empty((len(ks), rows, cols), dtype=complex)
    for p, ((geom, _), placement) in enumerate(zip(config.users, placements)):
        rx_rings = as_rings(geom)
        if len(rx_rings) != n_rings:
            raise ValueError("user ring count differs from transmit ring count")
        for mi, rx_ring in enumerate(rx_rings):
            for ni, tx_ring in enumerate(tx_rings):
                d = distance_matrix(tx_ring, rx_ring, placement, mode)
                r_amp = d if mode == "exact" else placement.range_m
                row0 = (p * n_rings + mi) * m
                col0 = ni * n
                phase = np.exp(-1j * np.multiply.outer(ks, d))
                amp = config.beta / (2.0 * np.multiply.outer(ks, np.broadcast_to(r_amp, d.shape)))
                data[:, row0 : row0 + m, col0 : col0 + n] = amp * phase
    return ChannelTensor(
        data=data,
        wave_numbers=ks,
        generation=mode,
        user_count=config.user_count,
        ring_count=n_rings,
        rx_elements=m,
        tx_elements=n,
    )


def assemble_ucca_channel(
    config: SystemConfig,
    placements: Sequence[SbsPlacement] | None = None,
    mode: str = "farfield",
) -> ChannelTensor:
    """UCCA channel assembly; identical to assemble_channel, which already
    handles multi-ring geometries, but insists the scenario has rings."""
    n_rings = config.ring_count
    for geom, _ in config.users:
        if len(as_rings(geom)) != n_rings:
            raise ValueError("ring-count mismatch between transmitter and a user")
    return assemble_channel(config, placements, mode)


def uplink_user_training_channel(
    config: SystemConfig,
    p: int,
    k: float,
    mode: str = "farfield",
) -> np.ndarray:
    """(N, M) uplink channel of user p (1-based) at wave number k.

    The uplink phase reference is conjugate to the downlink one, so the
    entry (n, m) is beta/(2 k r_amp) * exp(+i k d(m, n)); magnitudes match
    the transposed downlink matrix entry for entry.  Only the innermost
    rings matter: training runs on a single ring per array.
    """
    tx_ring = as_rings(config.tx)[0]
    rx_ring = as_rings(config.users[p - 1][0])[0]
    placement = config.placements[p - 1]
    d = distance_matrix(tx_ring, rx_ring, placement, mode)
    r_amp = d if mode == "exact" else placement.range_m
    h_down = config.beta / (2.0 * k * r_amp) * np.exp(-1j * k * d)
    return np.conj(h_down).T
