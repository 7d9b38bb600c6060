"""GPU/NDP load-balance conditions.

Decode::

    t_w*e_g + t_g*e_g'(e_g) = (N+1)*t_a + t_n*(K - e_g)

Prefill adds ``(S-1)*t_a*N`` to the left-hand side (the streamed activations
that must cross PCIe before the GPU-bound weights).  ``e_g'`` is the part of
GPU compute not hidden behind the N-way chunked weight transfer.

Between consecutive integers ``e_g'`` is linear in ``e_g``, so the balance
residual is piecewise linear with downward jumps at integers.  Each piece is
solved in closed form and the smallest root wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .cost import LatencyPrimitives, Stage


class BalanceError(ValueError):
    pass


@dataclass(frozen=True)
class BalanceInputs:
    t_w: float
    t_g: float
    t_n: float
    t_a: float
    n_ndp: int
    topk_effective: int
    stage: Stage = Stage.DECODE
    seq_len: int = 1

    @classmethod
    def from_primitives(cls, p: LatencyPrimitives, n_ndp: int, topk: int,
                        stage: Stage = Stage.DECODE, seq_len: int = 1,
                        t_a: float | None = None) -> "BalanceInputs":
        return cls(p.t_w, p.t_g, p.t_n, p.t_a if t_a is None else t_a,
                   n_ndp, topk, stage, seq_len)

    def check(self) -> None:
        for name in ("t_w", "t_g", "t_n", "t_a"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise BalanceError(f"{name} must be finite, got {v}")
            if v < 0:
                raise BalanceError(f"{name} must be >= 0, got {v}")
        if self.n_ndp < 1:
            raise BalanceError(f"n_ndp must be >= 1, got {self.n_ndp}")
        if self.topk_effective < 1:
            raise BalanceError(f"topk_effective must be >= 1, got {self.topk_effective}")
        if self.seq_len < 1:
            raise BalanceError(f"seq_len must be >= 1, got {self.seq_len}")


@dataclass(frozen=True)
class BalanceSolution:
    e_g: float
    e_n: float
    e_g_prime: float
    residual: float
    lhs_time: float
    rhs_time: float
    clamped: bool = False

    @property
    def predicted_makespan(self) -> float:
        return max(self.lhs_time, self.rhs_time)


def e_g_prime(e_g: float, n: int) -> float:
    """Unhidden GPU compute, in experts.

    ``frac(e_g) / n``, except ``1/n`` when ``e_g`` is an integer multiple of
    ``n`` (zero included).  A non-multiple integer gives 0.
    """
    whole = math.floor(e_g)
    frac = e_g - whole
    if frac == 0.0 and whole % n == 0:
        return 1.0 / n
    return frac / n


def _extra(inp: BalanceInputs) -> float:
    if inp.stage is Stage.PREFILL:
        return (inp.seq_len - 1) * inp.t_a * inp.n_ndp
    return 0.0


def lhs(inp: BalanceInputs, e_g: float) -> float:
    return inp.t_w * e_g + inp.t_g * e_g_prime(e_g, inp.n_ndp) + _extra(inp)


def rhs(inp: BalanceInputs, e_g: float) -> float:
    return (inp.n_ndp + 1) * inp.t_a + inp.t_n * (inp.topk_effective - e_g)


def _solution(inp: BalanceInputs, e_g: float, clamped: bool) -> BalanceSolution:
    left, right = lhs(inp, e_g), rhs(inp, e_g)
    return BalanceSolution(
        e_g=e_g,
        e_n=inp.topk_effective - e_g,
        e_g_prime=e_g_prime(e_g, inp.n_ndp),
        residual=abs(left - right),
        lhs_time=left,
        rhs_time=right,
        clamped=clamped,
    )


def _solve(inp: BalanceInputs) -> BalanceSolution:
    inp.check()
    K, N = inp.topk_effective, inp.n_ndp
    const = _extra(inp) - (N + 1) * inp.t_a - inp.t_n * K
    unhidden = inp.t_g / N

    if lhs(inp, 0.0) == rhs(inp, 0.0):
        return _solution(inp, 0.0, clamped=False)
    # On the open piece (k, k+1): f(e) = slope*e - unhidden*k + const.
    slope = inp.t_w + inp.t_n + unhidden
    # rounding slack so a root landing exactly on a piece end is not skipped
    slack = 1e-12 * (abs(const) + slope * K)
    for k in range(K):
        if slope == 0.0:
            break
        lo = slope * k - unhidden * k + const          # f(k+)
        hi = slope * (k + 1) - unhidden * k + const    # f((k+1)-)
        if lo < 0.0 <= hi + slack:
            e = (unhidden * k - const) / slope
            e = min(max(e, math.nextafter(float(k), math.inf)), float(k + 1))
            if e == k + 1 and (k + 1) % N != 0:
                # the piece's right end is not part of it; stay just inside
                e = math.nextafter(float(k + 1), -math.inf)
            return _solution(inp, e, clamped=False)

    f_top = lhs(inp, float(K)) - rhs(inp, float(K))
    if f_top < 0.0:
        return _solution(inp, float(K), clamped=True)
    return _solution(inp, 0.0, clamped=True)


def solve_decode(inp: BalanceInputs) -> BalanceSolution:
    if inp.stage is not Stage.DECODE:
        raise BalanceError("solve_decode needs a decode-stage input")
    return _solve(inp)


def solve_prefill(inp: BalanceInputs) -> BalanceSolution:
    if inp.stage is not Stage.PREFILL:
        raise BalanceError("solve_prefill needs a prefill-stage input")
    return _solve(inp)


def solve(inp: BalanceInputs) -> BalanceSolution:
    return solve_prefill(inp) if inp.stage is Stage.PREFILL else solve_decode(inp)


def solve_e_max(t_g: float, t_n: float, t_a: float, topk: int, n_ndp: int) -> float:
    """Largest GPU expert count whose compute still balances the NDP side."""
    if t_g + t_n == 0:
        raise BalanceError("degenerate primitives: t_g + t_n == 0")
    e = (topk * t_n + (1 + n_ndp) * t_a) / (t_g + t_n)
    return min(max(e, 0.0), float(topk))
