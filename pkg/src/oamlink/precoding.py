"""Two-stage multi-user preprocessing in the mode domain.

Stage one projects each user's symbols into the null space of every other
user's effective channel (SVD basis); stage two inverts the surviving
per-user channel so the end-to-end chain is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .modes import EffectiveOamChannel

CONDITION_LIMIT = 1e12


class IllConditionedError(np.linalg.LinAlgError):
    """Per-user channel product is numerically singular."""


def stack_other_users(h_oam: np.ndarray, p: int, user_count: int) -> np.ndarray:
    """Stack the row blocks of every user except p (1-based), ascending.

    h_oam is one subcarrier's (P*B, P*B) effective channel.
    """
    if user_count < 2:
        raise ValueError("stacking requires at least two users")
    b = h_oam.shape[0] // user_count
    keep = [q for q in range(user_count) if q != p - 1]
    return np.concatenate([h_oam[q * b : (q + 1) * b, :] for q in keep], axis=0)


def comode_null_basis(
    h_hat: np.ndarray, block: int, anchor: slice | None = None
) -> np.ndarray:
    """Orthonormal basis of the stacked-channel null space: the right
    singular vectors paired with the `block` smallest singular values.

    With `anchor` given, the basis is re-oriented by projecting that
    column block of the identity onto the null space and orthonormalizing.
    The subspace is unchanged, but the orientation then varies
    continuously with the channel instead of jumping with the SVD's
    arbitrary rotation -- so designs from slightly perturbed (estimated)
    positions stay close to the true-position design coordinate-wise.
    """
    cols = h_hat.shape[1]
    if not np.any(h_hat):
        basis = np.zeros((cols, block), dtype=complex)
        basis[cols - block :, :] = np.eye(block)
        return basis
    _, _, vh = np.linalg.svd(h_hat, full_matrices=True)
    basis = np.conj(vh[cols - block :, :]).T
    if anchor is not None:
        projected = basis @ np.conj(basis).T[:, anchor]
        q, r = np.linalg.qr(projected)
        if np.min(np.abs(np.diag(r))) > 1e-10:
            # Fix the residual phase freedom so the basis is unique.
            q = q * np.exp(1j * np.angle(np.diag(r)))[None, :]
            basis = q
    return basis


def refine_null_basis(h_hat: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """One extended-precision correction of the null basis.

    The SVD basis leaks into the stacked channel at the rounding level;
    subtracting the least-squares back-projection of that leakage cuts it
    quadratically.  Returned in extended precision for the inverse stage.
    """
    if not np.any(h_hat):
        return basis.astype(np.clongdouble)
    hq = h_hat.astype(np.clongdouble)
    bq = basis.astype(np.clongdouble)
    leak = hq @ bq
    corr, *_ = np.linalg.lstsq(h_hat, leak.astype(complex), rcond=None)
    return bq - corr.astype(np.clongdouble)


def intermode_inverse(h_user: np.ndarray, e_p: np.ndarray) -> np.ndarray:
    """Inverse of the projected per-user channel, G_p = (H_p E_p)^-1.

    The product is badly conditioned (the weakest mode gains are orders
    of magnitude below the strongest), so a plain double-precision
    inverse leaves residuals above the rounding floor of the precoder
    itself; a few Newton iterations in extended precision push the true
    residual of the rounded result to the limit set by storing the
    precoder in doubles.
    """
    product = np.asarray(h_user @ e_p, dtype=complex)
    cond = np.linalg.cond(product)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IllConditionedError(
            f"per-user channel product condition number {cond:.3e} exceeds "
            f"{CONDITION_LIMIT:.0e}"
        )
    g = np.linalg.inv(product).astype(np.clongdouble)
    aq = (
        h_user.astype(np.clongdouble) @ e_p
        if e_p.dtype == np.clongdouble
        else (h_user @ e_p).astype(np.clongdouble)
    )
    eye = np.eye(g.shape[0], dtype=np.clongdouble)
    for _ in range(3):
        g = g @ (2.0 * eye - aq @ g)
    return g


@dataclass(frozen=True)
class PrecodingSet:
    """Per-subcarrier null-space bases E, inverses G and the cascade P=E G.

    All arrays have shape (W, P*B, P*B); per-user column blocks of E and P
    are (P*B, B), G is block diagonal with (B, B) blocks.
    """

    e: np.ndarray
    g: np.ndarray
    p: np.ndarray
    user_count: int
    block_size: int
    condition_numbers: np.ndarray

    def user_precoder(self, w: int, p: int) -> np.ndarray:
        """(P*B, B) precoder column block of user p (1-based)."""
        b = self.block_size
        return self.p[w, :, (p - 1) * b : p * b]


def build_precoder(eff: EffectiveOamChannel) -> PrecodingSet:
    """Build the cascade precoder for every subcarrier.

    With a single user the null-space stage degenerates to the identity and
    the precoder is the plain channel inverse.
    """
    p_cnt = eff.user_count
    b = eff.block_size
    w_cnt = eff.data.shape[0]
    dim = p_cnt * b

    e_all = np.empty((w_cnt, dim, dim), dtype=complex)
    g_all = np.zeros((w_cnt, dim, dim), dtype=complex)
    p_all = np.empty((w_cnt, dim, dim), dtype=complex)
    conds = np.empty((w_cnt, p_cnt))

    for w in range(w_cnt):
        h = eff.data[w]
        for p in range(1, p_cnt + 1):
            sl = slice((p - 1) * b, p * b)
            h_user = h[sl, :]
            if p_cnt == 1:
                e_p = np.eye(dim, dtype=np.clongdouble)
            else:
                stacked = stack_other_users(h, p, p_cnt)
                e_p = refine_null_basis(
                    stacked, comode_null_basis(stacked, b, anchor=sl)
                )
            g_p = intermode_inverse(h_user, e_p)
            conds[w, p - 1] = np.linalg.cond(np.asarray(h_user @ e_p, dtype=complex))
            e_all[w][:, sl] = e_p.astype(complex)
            g_all[w][sl, sl] = g_p.astype(complex)
            p_all[w][:, sl] = (e_p @ g_p).astype(complex)

    return PrecodingSet(
        e=e_all,
        g=g_all,
        p=p_all,
        user_count=p_cnt,
        block_size=b,
        condition_numbers=conds,
    )


@dataclass(frozen=True)
class DecouplingReport:
    """Frobenius residuals of the preprocessed chain per subcarrier.

    intra[w, p] is ||H_p P_p - I||_F (within-user residual);
    cross[w, p, q] is ||H_p P_q||_F for q != p (leakage between users,
    zero on the diagonal).
    """

    intra: np.ndarray
    cross: np.ndarray

    @property
    def max_intra(self) -> float:
        return float(self.intra.max())

    @property
    def max_cross(self) -> float:
        return float(self.cross.max()) if self.cross.size else 0.0


def verify_decoupling(eff: EffectiveOamChannel, pset: PrecodingSet) -> DecouplingReport:
    """Measure how close the preprocessed channel is to P parallel identities."""
    p_cnt = eff.user_count
    b = eff.block_size
    w_cnt = eff.data.shape[0]
    eye = np.eye(b)

    intra = np.empty((w_cnt, p_cnt))
    cross = np.zeros((w_cnt, p_cnt, p_cnt))
    for w in range(w_cnt):
        # The residual sits near the rounding floor of the stored
        # precoder; evaluating the product in extended precision keeps
        # the measurement itself from dominating it.
        chain = np.asarray(
            eff.data[w].astype(np.clongdouble) @ pset.p[w].astype(np.clongdouble),
            dtype=complex,
        )
        for p in range(p_cnt):
            rows = slice(p * b, (p + 1) * b)
            for q in range(p_cnt):
                cols = slice(q * b, (q + 1) * b)
                block = chain[rows, cols]
                if p == q:
                    intra[w, p] = np.linalg.norm(block - eye)
                else:
                    cross[w, p, q] = np.linalg.norm(block)
    return DecouplingReport(intra=intra, cross=cross)
