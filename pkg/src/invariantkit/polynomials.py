"""Sparse multivariate polynomials over float coefficients.

Terms are stored in an exponent-tuple -> coefficient map.  Printing,
serialization and hashing use graded-lexicographic term order so that
identical polynomials always produce identical output.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

# Terms whose coefficient falls below this after arithmetic are dropped;
# keeps composition sizes bounded and stays below the solver tolerances
# used downstream.
COEFF_DROP_TOL = 1e-14

Exponents = tuple[int, ...]


class Polynomial:
    """Immutable sparse polynomial in ``num_vars`` variables."""

    __slots__ = ("num_vars", "terms", "_degree")

    def __init__(self, num_vars: int, terms: Mapping[Exponents, float] | None = None):
        if num_vars < 1:
            raise ValueError(f"num_vars must be positive, got {num_vars}")
        clean: dict[Exponents, float] = {}
        for exps, coeff in (terms or {}).items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != num_vars:
                raise ValueError(
                    f"exponent vector {exps} has length {len(exps)}, expected {num_vars}"
                )
            if any(e < 0 for e in exps):
                raise ValueError(f"negative exponent in {exps}")
            coeff = float(coeff)
            if abs(coeff) >= COEFF_DROP_TOL:
                clean[exps] = clean.get(exps, 0.0) + coeff
        clean = {e: c for e, c in clean.items() if abs(c) >= COEFF_DROP_TOL}
        object.__setattr__(self, "num_vars", num_vars)
        object.__setattr__(self, "terms", clean)
        object.__setattr__(
            self, "_degree", max((sum(e) for e in clean), default=0)
        )

    def __setattr__(self, name, value):
        raise AttributeError("Polynomial is immutable")

    def __reduce__(self):
        # Immutability blocks pickle's default state restore; rebuild instead.
        return (Polynomial, (self.num_vars, dict(self.terms)))

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(num_vars: int) -> "Polynomial":
        return Polynomial(num_vars, {})

    @staticmethod
    def constant(num_vars: int, value: float) -> "Polynomial":
        return Polynomial(num_vars, {(0,) * num_vars: value})

    @staticmethod
    def variable(num_vars: int, index: int) -> "Polynomial":
        if not 0 <= index < num_vars:
            raise ValueError(f"variable index {index} out of range 0..{num_vars - 1}")
        exps = [0] * num_vars
        exps[index] = 1
        return Polynomial(num_vars, {tuple(exps): 1.0})

    @staticmethod
    def monomial(exps: Sequence[int], coeff: float = 1.0) -> "Polynomial":
        return Polynomial(len(exps), {tuple(exps): coeff})

    # -- queries -----------------------------------------------------------

    def degree(self) -> int:
        """Maximum total degree over stored terms, 0 for the zero polynomial."""
        return self._degree

    def is_zero(self) -> bool:
        return not self.terms

    def sorted_terms(self) -> list[tuple[Exponents, float]]:
        """Terms in graded-lexicographic order (degree first, then lex)."""
        return sorted(self.terms.items(), key=lambda t: (sum(t[0]), t[0]))

    # -- arithmetic --------------------------------------------------------

    def _check_same_vars(self, other: "Polynomial") -> None:
        if self.num_vars != other.num_vars:
            raise ValueError(
                f"variable count mismatch: {self.num_vars} vs {other.num_vars}"
            )

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.num_vars, other)
        self._check_same_vars(other)
        terms = dict(self.terms)
        for e, c in other.terms.items():
            terms[e] = terms.get(e, 0.0) + c
        return Polynomial(self.num_vars, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.num_vars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.num_vars, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Polynomial(
                self.num_vars, {e: c * other for e, c in self.terms.items()}
            )
        self._check_same_vars(other)
        terms: dict[Exponents, float] = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                key = tuple(a + b for a, b in zip(e1, e2))
                terms[key] = terms.get(key, 0.0) + c1 * c2
        return Polynomial(self.num_vars, terms)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if k < 0:
            raise ValueError("negative power")
        result = Polynomial.constant(self.num_vars, 1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base if k > 1 else base
            k >>= 1
        return result

    def __eq__(self, other):
        return (
            isinstance(other, Polynomial)
            and self.num_vars == other.num_vars
            and self.terms == other.terms
        )

    def __hash__(self):
        return hash((self.num_vars, tuple(self.sorted_terms())))

    def __repr__(self):
        if not self.terms:
            return "Polynomial(0)"
        parts = [f"{c:g}*x^{list(e)}" for e, c in self.sorted_terms()]
        return "Polynomial(" + " + ".join(parts) + ")"

    # -- evaluation --------------------------------------------------------

    def __call__(self, point: Sequence[float]) -> float:
        return self.eval(point)

    def eval(self, point: Sequence[float]) -> float:
        """Evaluate at a single point (0**0 == 1)."""
        point = np.asarray(point, dtype=float)
        if point.shape != (self.num_vars,):
            raise ValueError(
                f"point has shape {point.shape}, expected ({self.num_vars},)"
            )
        total = 0.0
        for exps, coeff in self.terms.items():
            v = coeff
            for x, e in zip(point, exps):
                if e:
                    v *= x**e
            total += v
        return total

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at an (N, num_vars) array of points, vectorized."""
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.num_vars:
            raise ValueError(
                f"points have shape {points.shape}, expected (N, {self.num_vars})"
            )
        if not self.terms:
            return np.zeros(points.shape[0])
        out = np.zeros(points.shape[0])
        for exps, coeff in self.terms.items():
            term = np.full(points.shape[0], coeff)
            for j, e in enumerate(exps):
                if e == 1:
                    term *= points[:, j]
                elif e:
                    term *= points[:, j] ** e
            out += term
        return out

    def compose(self, subst: Sequence["Polynomial"]) -> "Polynomial":
        """Substitute subst[i] for variable i; fully expanded and normalized."""
        if len(subst) != self.num_vars:
            raise ValueError(
                f"got {len(subst)} substitution polynomials, expected {self.num_vars}"
            )
        nv = subst[0].num_vars
        for q in subst:
            if q.num_vars != nv:
                raise ValueError("substitution polynomials must share a variable count")
        # Cache powers of each substituted polynomial.
        max_pow = [0] * self.num_vars
        for exps in self.terms:
            for j, e in enumerate(exps):
                max_pow[j] = max(max_pow[j], e)
        powers: list[list[Polynomial]] = []
        for j, q in enumerate(subst):
            col = [Polynomial.constant(nv, 1.0)]
            for _ in range(max_pow[j]):
                col.append(col[-1] * q)
            powers.append(col)
        result = Polynomial.zero(nv)
        for exps, coeff in self.terms.items():
            term = Polynomial.constant(nv, coeff)
            for j, e in enumerate(exps):
                if e:
                    term = term * powers[j][e]
            result = result + term
        return result

    def partial(self, index: int) -> "Polynomial":
        """Partial derivative with respect to variable ``index``."""
        terms: dict[Exponents, float] = {}
        for exps, coeff in self.terms.items():
            e = exps[index]
            if e == 0:
                continue
            new = list(exps)
            new[index] = e - 1
            key = tuple(new)
            terms[key] = terms.get(key, 0.0) + coeff * e
        return Polynomial(self.num_vars, terms)

    def interval_eval(self, lo: Sequence[float], hi: Sequence[float]) -> tuple[float, float]:
        """Interval-arithmetic enclosure of the range over the box [lo, hi]."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != (self.num_vars,) or hi.shape != (self.num_vars,):
            raise ValueError("box bounds must have length num_vars")
        if np.any(lo > hi):
            raise ValueError("box has lo > hi")
        total_lo, total_hi = 0.0, 0.0
        for exps, coeff in self.terms.items():
            t_lo, t_hi = coeff, coeff
            for j, e in enumerate(exps):
                if not e:
                    continue
                p_lo, p_hi = _interval_pow(lo[j], hi[j], e)
                cands = (t_lo * p_lo, t_lo * p_hi, t_hi * p_lo, t_hi * p_hi)
                t_lo, t_hi = min(cands), max(cands)
            total_lo += t_lo
            total_hi += t_hi
        return total_lo, total_hi

    # -- serialization -----------------------------------------------------

    def to_json(self) -> list[dict]:
        return [
            {"exponents": list(e), "coefficient": c} for e, c in self.sorted_terms()
        ]

    @staticmethod
    def from_json(num_vars: int, data: Iterable[Mapping]) -> "Polynomial":
        terms: dict[Exponents, float] = {}
        for entry in data:
            key = tuple(int(e) for e in entry["exponents"])
            terms[key] = terms.get(key, 0.0) + float(entry["coefficient"])
        return Polynomial(num_vars, terms)


def _interval_pow(lo: float, hi: float, e: int) -> tuple[float, float]:
    if e == 1:
        return lo, hi
    if e % 2 == 1:
        return lo**e, hi**e
    # Even power: minimum is 0 when the interval straddles 0.
    a, b = lo**e, hi**e
    if lo <= 0.0 <= hi:
        return 0.0, max(a, b)
    return min(a, b), max(a, b)


def lift(p: Polynomial, total_vars: int, offset: int = 0) -> Polynomial:
    """Embed p into a larger variable space, its variables starting at ``offset``."""
    if offset + p.num_vars > total_vars:
        raise ValueError("lift target too small")
    terms = {}
    for exps, coeff in p.terms.items():
        new = [0] * total_vars
        new[offset : offset + p.num_vars] = exps
        terms[tuple(new)] = coeff
    return Polynomial(total_vars, terms)
