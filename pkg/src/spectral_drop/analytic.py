"""Closed-form optimal drops for the half-plane, sectors and the strip."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

from .errors import ValidationError


def j0_series(x: float, tol: float = 1e-17) -> float:
    """Bessel J0 from its power series (accurate for moderate ``x``)."""
    q = -(x * x) / 4.0
    term = 1.0
    total = 1.0
    k = 0
    while abs(term) > tol * max(1.0, abs(total)):
        k += 1
        term *= q / (k * k)
        total += term
    return total


@lru_cache(maxsize=1)
def bessel_j0_first_zero() -> float:
    """First positive zero of J0, by bisection on the series over (2.4, 2.41)."""
    lo, hi = 2.4, 2.41
    flo = j0_series(lo)
    if flo * j0_series(hi) >= 0:
        raise ArithmeticError("J0 series has no sign change on the bracket")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        fm = j0_series(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class ReferenceSolution:
    kind: str
    c: float
    lam: float
    shape: dict = field(default_factory=dict)
    note: str = ""

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("reference eigenvalue must be positive")


@dataclass(frozen=True)
class StripReference:
    c: float
    half_disc: ReferenceSolution
    rectangle: ReferenceSolution
    crossover: float
    regime: str  # "half_disc", "rectangle" or "unproved"

    @property
    def lam(self) -> float:
        return min(self.half_disc.lam, self.rectangle.lam)

    @property
    def branch(self) -> str:
        return "rectangle" if self.rectangle.lam < self.half_disc.lam else "half_disc"


def strip_crossover() -> float:
    j = bessel_j0_first_zero()
    return 2.0 * math.pi / (j * j)


def _check_c(c):
    if not (math.isfinite(c) and c > 0):
        raise ValidationError(f"volume c must be positive, got {c}")


def half_plane_reference(c: float) -> ReferenceSolution:
    _check_c(c)
    j = bessel_j0_first_zero()
    r = math.sqrt(2.0 * c / math.pi)
    return ReferenceSolution("half_plane", c, (j / r) ** 2, {"radius": r, "measure": 0.5 * math.pi * r * r},
                             "half-disc centred on the boundary line")


def sector_reference(c: float, alpha: float) -> ReferenceSolution:
    _check_c(c)
    if alpha is None or not (0 < alpha <= math.pi / 2 + 1e-15):
        raise ValidationError("sector alpha must lie in (0, pi/2]")
    j = bessel_j0_first_zero()
    r0 = math.sqrt(c / alpha)
    return ReferenceSolution("sector", c, (j / r0) ** 2, {"radius": r0, "alpha": alpha, "measure": alpha * r0 * r0},
                             "sector truncated at radius r0 around the apex")


def strip_reference(c: float, width: float = 1.0) -> StripReference:
    """Both candidate optima in a strip of unit width (rescaled for other widths)."""
    _check_c(c)
    if width != 1.0:
        s = width
        base = strip_reference(c / s**2)
        scale = s**-2
        hd = ReferenceSolution("strip", c, base.half_disc.lam * scale,
                               {k: (v * s if k == "radius" else v * s * s) for k, v in base.half_disc.shape.items()},
                               base.half_disc.note)
        rect = ReferenceSolution("strip", c, base.rectangle.lam * scale,
                                 {"length": base.rectangle.shape["length"] * s, "measure": c},
                                 base.rectangle.note)
        return StripReference(c, hd, rect, base.crossover * s * s, base.regime)
    j = bessel_j0_first_zero()
    r = math.sqrt(2.0 * c / math.pi)
    hd = ReferenceSolution("strip", c, math.pi * j * j / (2.0 * c),
                           {"radius": r, "measure": 0.5 * math.pi * r * r, "fits": r <= 1.0},
                           "half-disc on one wall")
    rect = ReferenceSolution("strip", c, math.pi**2 / c**2, {"length": c, "measure": c},
                             "full-width rectangle")
    if c <= 2.0 / math.pi:
        regime = "half_disc"
    elif c >= 2.0 * math.sqrt(2.0) * math.pi:
        regime = "rectangle"
    else:
        regime = "unproved"
    return StripReference(c, hd, rect, strip_crossover(), regime)


def reference_solution(kind: str, c: float, alpha: float | None = None):
    """Reference optimum for ``kind`` in {half_plane, sector, strip}."""
    if kind == "half_plane":
        return half_plane_reference(c)
    if kind == "sector":
        return sector_reference(c, alpha)
    if kind == "strip":
        return strip_reference(c)
    raise ValidationError(f"no closed-form optimum for kind {kind!r}")


def strip_reference_table(cs) -> str:
    """CSV text with columns c, lambda_rect, lambda_hd, branch, regime."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["c", "lambda_rect", "lambda_hd", "branch", "regime"])
    for c in cs:
        ref = strip_reference(float(c))
        w.writerow([format(float(c), ".17g"), format(ref.rectangle.lam, ".17g"),
                    format(ref.half_disc.lam, ".17g"), ref.branch, ref.regime])
    return buf.getvalue()
