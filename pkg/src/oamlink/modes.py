"""OAM mode transforms and the mode-domain (effective) channel.

The transmit transform spiralizes per-user symbol vectors onto the
interleaved element groups of the shared transmit ring; the receive
transform despiralizes each user's elements back into modes.  Matrices
are kept unnormalized (unit-modulus entries), so a round trip through
the transform pair scales by the receive element count M.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.special import jv

from .config import ModeSet, SbsPlacement, SystemConfig, as_rings
from .channel import ChannelTensor


def mode_steering_vector(ell: int, m: int) -> np.ndarray:
    """Length-M steering row with entries exp(-i 2 pi ell (j-1) / M)."""
    if abs(ell) >= m / 2:
        raise ValueError(f"mode {ell} is unresolvable on {m} elements")
    j = np.arange(m)
    return np.exp(-2j * np.pi * ell * j / m)


def partial_idft_matrix(modes: Sequence[int], m: int) -> np.ndarray:
    """(M, U) matrix whose columns are conjugated steering rows."""
    return np.stack([np.conj(mode_steering_vector(ell, m)) for ell in modes], axis=1)


@dataclass(frozen=True)
class ModeTransform:
    """Spiralize/despiralize matrices for a P-user, R-ring scenario.

    ``tx_matrix`` (R*N x P*R*U) maps stacked per-user symbol vectors,
    ordered (user, ring, mode), onto transmit elements ordered
    (ring, element), honoring the interleaved element grouping.
    ``rx_matrix`` (P*R*M x P*R*U) holds one despiralizer per user ring.
    """

    modes: Tuple[int, ...]
    rx_elements: int
    user_count: int
    ring_count: int
    f_u: np.ndarray
    tx_matrix: np.ndarray
    rx_matrix: np.ndarray

    @property
    def mode_count(self) -> int:
        return len(self.modes)

    @property
    def block_size(self) -> int:
        """Modes per user across rings."""
        return self.ring_count * self.mode_count

    @property
    def f_grouped(self) -> np.ndarray:
        """I_P kron F_U, the transform in grouped element ordering."""
        return np.kron(np.eye(self.user_count), self.f_u)


def build_mode_transform(
    modes: Sequence[int] | ModeSet,
    rx_elements: int,
    user_count: int,
    ring_count: int = 1,
) -> ModeTransform:
    """Build the transmit/receive mode transforms for P users and R rings."""
    if isinstance(modes, ModeSet):
        modes = modes.data_modes
    modes = tuple(int(ell) for ell in modes)
    m = rx_elements
    p = user_count
    u = len(modes)
    n = p * m

    f_u = partial_idft_matrix(modes, m)

    # Element n of the shared ring is the j-th element of group q, with
    # q = n mod P and j = n // P.
    f_elem = np.zeros((n, p * u), dtype=complex)
    for el in range(n):
        q, j = el % p, el // p
        f_elem[el, q * u : (q + 1) * u] = f_u[j, :]

    if ring_count == 1:
        tx = f_elem
    else:
        # Ring-blocked transmit map with input reordered from
        # (user, ring, mode) to (ring, user, mode).
        tx = np.zeros((ring_count * n, p * ring_count * u), dtype=complex)
        for ring in range(ring_count):
            for q in range(p):
                src = f_elem[:, q * u : (q + 1) * u]
                col0 = (q * ring_count + ring) * u
                tx[ring * n : (ring + 1) * n, col0 : col0 + u] = src

    rx = np.kron(np.eye(p * ring_count), f_u)
    return ModeTransform(
        modes=modes,
        rx_elements=m,
        user_count=p,
        ring_count=ring_count,
        f_u=f_u,
        tx_matrix=tx,
        rx_matrix=rx,
    )


@dataclass(frozen=True)
class EffectiveOamChannel:
    """Mode-domain channel per subcarrier, shape (W, P*B, P*B) with
    B = rings * modes; rows and columns ordered (user, ring, mode)."""

    data: np.ndarray
    wave_numbers: np.ndarray
    user_count: int
    block_size: int

    def user_rows(self, w: int, p: int) -> np.ndarray:
        """(B, P*B) effective channel of user p (1-based) at subcarrier w."""
        b = self.block_size
        return self.data[w, (p - 1) * b : p * b, :]


def effective_oam_channel(
    channel: ChannelTensor, transform: ModeTransform
) -> EffectiveOamChannel:
    """Despiralize/spiralize the raw channel into the mode domain."""
    rx = transform.rx_matrix
    tx = transform.tx_matrix
    if channel.data.shape[1] != rx.shape[0] or channel.data.shape[2] != tx.shape[0]:
        raise ValueError(
            f"channel shape {channel.data.shape[1:]} does not match transforms "
            f"({rx.shape[0]}, {tx.shape[0]})"
        )
    data = np.einsum("mk,wmn,nu->wku", np.conj(rx), channel.data, tx, optimize=True)
    return EffectiveOamChannel(
        data=data,
        wave_numbers=channel.wave_numbers,
        user_count=transform.user_count,
        block_size=transform.block_size,
    )


def effective_oam_entry(
    p: int,
    q: int,
    u: int,
    v: int,
    k: float,
    config: SystemConfig,
    placement: SbsPlacement | None = None,
) -> complex:
    """Closed-form far-field mode-domain coefficient, evaluated as the
    direct double sum over receive and transmit-group elements.

    p, q are 1-based user/group indices; u, v are 1-based indices into the
    data mode list.  Serves as an independent oracle for
    effective_oam_channel in far-field mode (single-ring scenarios).
    """
    if placement is None:
        placement = config.placements[p - 1]
    m_cnt = config.rx_element_count
    n_cnt = config.tx_element_count
    p_cnt = config.user_count
    r_t = as_rings(config.tx)[0].radius
    r_r = as_rings(config.users[p - 1][0])[0].radius
    ell_u = config.modes.data_modes[u - 1]
    ell_v = config.modes.data_modes[v - 1]
    r_p = placement.range_m
    st = np.sin(placement.elevation)
    phi_p = placement.azimuth

    mm = np.arange(m_cnt)
    alpha = 2.0 * np.pi * mm / m_cnt
    phi_ring = 2.0 * np.pi * mm / m_cnt
    phi_elem = 2.0 * np.pi * (mm * p_cnt + q - 1) / n_cnt

    phase = (
        -1j * ell_u * alpha[:, None]
        + 1j * ell_v * phi_ring[None, :]
        + 1j * (k * r_t * r_r / r_p) * np.cos(alpha[:, None] - phi_elem[None, :])
        + 1j * k * r_t * st * np.cos(phi_p - phi_elem[None, :])
        - 1j * k * r_r * st * np.cos(phi_p - alpha[:, None])
    )
    delta = config.beta / (2.0 * k * r_p) * np.exp(-1j * k * r_p)
    return complex(delta * np.exp(phase).sum())


def bessel_combined_signal(
    ell: int,
    k: float,
    config: SystemConfig,
    placements: Sequence[SbsPlacement] | None = None,
    pilot: complex = 1.0,
    fold_orders: int = 2,
) -> complex:
    """Closed-form element-combined uplink training sample on mode ell,
    under the plane-wave phase model.

    The leading term per user is
    sigma * exp(i k r_p)/r_p * exp(i ell phi_p)
    * J_ell(k R_r sin theta_p) * J_0(k R_t sin theta_p)
    with sigma = M N beta i^ell / (2 k) * pilot.  Because both rings are
    discrete, Bessel orders shifted by multiples of the element counts
    alias into the sum; for close-in users J_(ell-M) is comparable to
    J_ell, so the folded orders are kept (fold_orders on each side).
    """
    if placements is None:
        placements = config.placements
    m_cnt = config.rx_element_count
    n_cnt = config.tx_element_count
    r_t = as_rings(config.tx)[0].radius
    scale = m_cnt * n_cnt * config.beta / (2.0 * k) * pilot
    total = 0.0 + 0.0j
    s_orders = np.arange(-fold_orders, fold_orders + 1)
    t_orders = np.arange(-fold_orders, fold_orders + 1)
    for (geom, _), placement in zip(config.users, placements):
        r_r = as_rings(geom)[0].radius
        st = np.sin(placement.elevation)
        b = k * r_r * st
        c = k * r_t * st
        phi_p = placement.azimuth
        # Receive-ring sum: orders -ell + s*M, phase -(sM - ell)phi_p.
        rx_sum = 0.0 + 0.0j
        for s in s_orders:
            order = s * m_cnt - ell
            rx_sum += 1j**order * jv(order, b) * np.exp(-1j * order * phi_p)
        # Transmit-ring sum: orders t*N.
        tx_sum = 0.0 + 0.0j
        for t in t_orders:
            order = t * n_cnt
            tx_sum += (-1j) ** order * jv(order, c) * np.exp(-1j * order * phi_p)
        total += (
            np.exp(1j * k * placement.range_m) / placement.range_m * rx_sum * tx_sum
        )
    return complex(scale * total)
