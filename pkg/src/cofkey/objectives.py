"""Cross-power-spectral-density objectives on the circle of fifths.

A 12-bin profile y (a probability vector over pitch classes) is summarized by
one Fourier coefficient

    dft(y)[w] = sum_q y[q] * exp(-2i pi w q / 12),

with w coprime to 12. w=7 traverses the circle of fifths, w=1 the semitone
circle. For two profiles, the cross-power spectral density

    cpsd(yA, yB)[w] = dft(yA)[w] * conj(dft(yB)[w])

has unit modulus and phase equal to w times their chroma offset when both are
one-hot. The pairwise distance at a signed pitch interval k is

    D(yA, yB, k) = 0.5 * |exp(+2i pi w k / 12) - cpsd(yA, yB)[w]|^2.

Sign convention (fixed, verified exhaustively in tests): yA one-hot at q and
yB one-hot at (q+k) mod 12 give D == 0. Positive k means yB is transposed UP
by k semitones relative to yA. Values lie in [0, 2]; a uniform profile on
either side gives exactly 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

N_CHROMA = 12
BCE_EPS = 1e-7

ALLOWED_OMEGAS = (1, 5, 7, 11)


class ObjectiveError(ValueError):
    pass


def _check_omega(omega: int) -> int:
    if not isinstance(omega, int) or not (0 <= omega < 12) or math.gcd(omega, 12) != 1:
        raise ObjectiveError(
            f"degenerate CoF frequency: omega={omega!r} must be an integer in [0, 12) "
            f"coprime to 12 (one of {ALLOWED_OMEGAS})")
    return omega


def _as_profile(y) -> torch.Tensor:
    t = torch.as_tensor(y)
    if t.shape[-1] != N_CHROMA:
        raise ObjectiveError(f"profile must have {N_CHROMA} bins, got {t.shape[-1]}")
    if not t.is_floating_point():
        t = t.double()
    return t


def ksp_dft(y, omega: int) -> torch.Tensor:
    """Fourier coefficient of a profile at frequency omega. [..., 12] -> [...]."""
    _check_omega(omega)
    t = _as_profile(y)
    q = torch.arange(N_CHROMA, dtype=t.dtype, device=t.device)
    ang = -2.0 * math.pi * omega * q / N_CHROMA
    re = (t * torch.cos(ang)).sum(dim=-1)
    im = (t * torch.sin(ang)).sum(dim=-1)
    return torch.complex(re, im)


def cpsd(ya, yb, omega: int) -> torch.Tensor:
    """Cross-power spectral density of two profiles at frequency omega."""
    return ksp_dft(ya, omega) * torch.conj(ksp_dft(yb, omega))


def target_phasor(k, omega: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """exp(+2i pi omega k / 12), the CPSD of an ideal pair at interval k."""
    _check_omega(omega)
    kt = torch.as_tensor(k, device=device).to(dtype)
    ang = 2.0 * math.pi * omega * kt / N_CHROMA
    return torch.complex(torch.cos(ang), torch.sin(ang))


def cof_distance(ya, yb, k, omega: int) -> torch.Tensor:
    """Half squared modulus between the interval-k target phasor and the CPSD.

    ya, yb: [..., 12]; k: int or broadcastable tensor of ints. Returns [...].
    """
    z = cpsd(ya, yb, omega)
    t = target_phasor(k, omega, dtype=z.real.dtype, device=z.real.device)
    return 0.5 * ((t.real - z.real) ** 2 + (t.imag - z.imag) ** 2)


def loss_invariance(ya_c, yb_c, omega: int) -> torch.Tensor:
    """Distance at interval 0 between responses of two segments, same crop."""
    return cof_distance(ya_c, yb_c, 0, omega)


def loss_equivariance(ya_c, ya_ck, k, omega: int) -> torch.Tensor:
    """Distance at interval k between same-segment, differently-cropped responses."""
    return cof_distance(ya_c, ya_ck, k, omega)


def loss_combined(yb_c, ya_ck, k, omega: int) -> torch.Tensor:
    """Distance at interval k between segment B at crop c and segment A at c+k."""
    return cof_distance(yb_c, ya_ck, k, omega)


@dataclass
class LossBreakdown:
    """Per-term loss tensors (batch means). BCE terms are None in 12-bin mode."""

    l_ab: torch.Tensor
    l_aa: torch.Tensor
    l_ba: torch.Tensor
    bce_ab: torch.Tensor | None = None
    bce_aa: torch.Tensor | None = None
    bce_ba: torch.Tensor | None = None

    @property
    def total(self) -> torch.Tensor:
        t = self.l_ab + self.l_aa + self.l_ba
        for term in (self.bce_ab, self.bce_aa, self.bce_ba):
            if term is not None:
                t = t + term
        return t

    def as_floats(self) -> dict[str, float]:
        out = {"l_ab": float(self.l_ab.detach()), "l_aa": float(self.l_aa.detach()),
               "l_ba": float(self.l_ba.detach())}
        for name in ("bce_ab", "bce_aa", "bce_ba"):
            term = getattr(self, name)
            if term is not None:
                out[name] = float(term.detach())
        out["total"] = float(self.total.detach())
        return out


def cpsd_loss(ya_c, yb_c, ya_ck, k, omega: int) -> LossBreakdown:
    """The three pairwise CPSD terms, each averaged over the batch."""
    return LossBreakdown(
        l_ab=loss_invariance(ya_c, yb_c, omega).mean(),
        l_aa=loss_equivariance(ya_c, ya_ck, k, omega).mean(),
        l_ba=loss_combined(yb_c, ya_ck, k, omega).mean(),
    )


def bce(mu, mu_prime, eps: float = BCE_EPS) -> torch.Tensor:
    """Binary cross-entropy between two-bin mode marginals; [..., 2] -> [...].

    The second argument (the prediction) is clamped to [eps, 1-eps].
    """
    m = torch.as_tensor(mu)
    p = torch.as_tensor(mu_prime).clamp(eps, 1.0 - eps)
    if m.shape[-1] != 2 or p.shape[-1] != 2:
        raise ObjectiveError("mode marginals must have exactly 2 bins")
    return -(m * torch.log(p)).sum(dim=-1)


def bce_loss(mu_a_c, mu_b_c, mu_a_ck) -> LossBreakdown:
    """Mode-consistency terms. The AB term puts B in the target slot so that a
    supervised one-hot substituted for B never sits inside the log."""
    return LossBreakdown(
        l_ab=bce(mu_b_c, mu_a_c).mean(),
        l_aa=bce(mu_a_c, mu_a_ck).mean(),
        l_ba=bce(mu_b_c, mu_a_ck).mean(),
    )


def supervised_oracles(key_signature_chroma, mode_index, c):
    """Ideal responses for a labeled item at transposition c.

    Returns (lambda_ref [..., 12], mu_ref [..., 2]) float64 tensors: a one-hot
    at (key_signature_chroma + c) mod 12, and a one-hot at the mode index
    (0 major, 1 minor).
    """
    q = torch.as_tensor(key_signature_chroma, dtype=torch.long)
    m = torch.as_tensor(mode_index, dtype=torch.long)
    ct = torch.as_tensor(c, dtype=torch.long)
    if torch.any((q < 0) | (q >= N_CHROMA)):
        raise ObjectiveError("key signature chroma out of range")
    if torch.any((m < 0) | (m > 1)):
        raise ObjectiveError("mode index must be 0 (major) or 1 (minor)")
    lam = torch.zeros(q.shape + (N_CHROMA,), dtype=torch.float64)
    lam.scatter_(-1, ((q + ct) % N_CHROMA).unsqueeze(-1), 1.0)
    mu = torch.zeros(m.shape + (2,), dtype=torch.float64)
    mu.scatter_(-1, m.unsqueeze(-1), 1.0)
    return lam, mu


def crossentropy_ablation_loss(ya_c, yb_c, ya_ck, eps: float = BCE_EPS) -> LossBreakdown:
    """Ablation: plain 12-class cross-entropy replacing the three CPSD terms.

    Targets are detached argmax one-hots of the partner response with no
    transposition compensation: the loss asks every view — including the
    transposed crop — to agree with the partner outright. Unlike the CPSD
    distance, nothing in this objective encodes "same content, shifted", so
    pitch-shift equivariance is absent from the training signal.
    """
    ya_c = _as_profile(ya_c)
    yb_c = _as_profile(yb_c)
    ya_ck = _as_profile(ya_ck)

    def ce(pred, target_idx):
        picked = torch.gather(pred, -1, target_idx.unsqueeze(-1)).squeeze(-1)
        return -torch.log(picked.clamp(eps, 1.0))

    t_a = ya_c.detach().argmax(dim=-1)
    t_b = yb_c.detach().argmax(dim=-1)
    return LossBreakdown(
        l_ab=ce(ya_c, t_b).mean(),
        l_aa=ce(ya_ck, t_a).mean(),
        l_ba=ce(ya_ck, t_b).mean(),
    )
