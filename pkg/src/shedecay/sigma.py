"""The multiplicative nonlinearity sigma and its cone constants.

The cone condition asks for 0 < L <= |sigma(a)/a| <= Lip for every a != 0,
which forces sigma(0) = 0. Constants are checked numerically on a log-spaced
grid of magnitudes, both signs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# min over a of sin(a)/a, attained at the first positive root of tan(a) = a
SINC_MIN = -0.21723362821122166
VALIDATION_POINTS = 10_000
VALIDATION_RANGE = (1e-8, 1e8)
_REL_SLACK = 1e-12

_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "tanh", "arctan", "exp", "log1p", "expm1", "abs", "sqrt", "sign", "minimum", "maximum", "where")
}
_EXPR_NAMESPACE["pi"] = np.pi


class ConeViolation(ValueError):
    """Declared cone constants do not hold on the validation grid."""


@dataclass(frozen=True)
class SigmaSpec:
    """sigma as one of ``linear`` (c*a), ``shifted_sine`` (a + c sin a), or ``expression``.

    ``expression`` is a numpy expression in the variable ``a``; it must come
    with declared constants.
    """

    kind: str = "linear"
    c: float = 1.0
    L_sigma: float | None = None
    Lip_sigma: float | None = None
    expression: str | None = None
    _fn: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind == "linear":
            if self.c == 0:
                raise ValueError("linear sigma needs c != 0")
            default = (abs(self.c), abs(self.c))
        elif self.kind == "shifted_sine":
            if not 0 <= self.c < 1:
                raise ValueError("shifted_sine needs 0 <= c < 1")
            default = (1.0 + self.c * SINC_MIN, 1.0 + self.c)
        elif self.kind == "expression":
            if not self.expression:
                raise ValueError("expression sigma needs an expression string")
            if self.L_sigma is None or self.Lip_sigma is None:
                raise ValueError("expression sigma needs declared L_sigma and Lip_sigma")
            code = compile(self.expression, "<sigma>", "eval")
            bad = set(code.co_names) - set(_EXPR_NAMESPACE) - {"a"}
            if bad:
                raise ValueError(f"expression uses unknown names {sorted(bad)}")
            object.__setattr__(self, "_fn", code)
            default = (self.L_sigma, self.Lip_sigma)
        else:
            raise ValueError(f"unknown sigma kind {self.kind!r}")
        if self.L_sigma is None:
            object.__setattr__(self, "L_sigma", float(default[0]))
        if self.Lip_sigma is None:
            object.__setattr__(self, "Lip_sigma", float(default[1]))
        if not 0 < self.L_sigma <= self.Lip_sigma:
            raise ValueError(f"need 0 < L_sigma <= Lip_sigma, got {self.L_sigma}, {self.Lip_sigma}")
        if self.kind == "expression" and float(self(0.0)) != 0.0:
            raise ValueError("sigma(0) must be 0")

    @classmethod
    def linear(cls, c: float = 1.0, **kw) -> "SigmaSpec":
        return cls("linear", c, **kw)

    @classmethod
    def shifted_sine(cls, c: float = 0.25, **kw) -> "SigmaSpec":
        return cls("shifted_sine", c, **kw)

    def __call__(self, a):
        if self.kind == "linear":
            return self.c * a
        if self.kind == "shifted_sine":
            return a + self.c * np.sin(a)
        arr = np.asarray(a, dtype=float)
        out = eval(self._fn, {"__builtins__": {}}, {**_EXPR_NAMESPACE, "a": arr})  # noqa: S307
        return np.broadcast_to(out, arr.shape) * 1.0 if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "c": self.c, "L_sigma": self.L_sigma, "Lip_sigma": self.Lip_sigma}
        if self.expression is not None:
            out["expression"] = self.expression
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SigmaSpec":
        allowed = {"kind", "c", "L_sigma", "Lip_sigma", "expression"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown sigma keys {sorted(unknown)}")
        return cls(**data)


def eval_sigma(spec: SigmaSpec, a):
    """sigma(a); sigma(0) is exactly 0 for every accepted spec."""
    return spec(a)


@dataclass(frozen=True)
class ConeCertificate:
    passed: bool
    min_ratio: float
    max_ratio: float
    declared: tuple[float, float]
    offenders: tuple[float, ...] = ()

    def __bool__(self) -> bool:
        return self.passed


def validation_grid(n: int = VALIDATION_POINTS, lo: float = VALIDATION_RANGE[0], hi: float = VALIDATION_RANGE[1]) -> np.ndarray:
    mags = np.logspace(math.log10(lo), math.log10(hi), n)
    return np.concatenate([-mags[::-1], mags])


def validate_cone(spec: SigmaSpec, grid: np.ndarray | None = None, max_offenders: int = 20) -> ConeCertificate:
    """Scan |sigma(a)/a| over the grid against the declared (L_sigma, Lip_sigma)."""
    a = validation_grid() if grid is None else np.asarray(grid, dtype=float)
    a = a[a != 0]
    with np.errstate(all="ignore"):
        ratio = np.abs(np.asarray(spec(a), dtype=float) / a)
    ok = (ratio >= spec.L_sigma * (1 - _REL_SLACK)) & (ratio <= spec.Lip_sigma * (1 + _REL_SLACK)) & np.isfinite(ratio)
    offenders = tuple(float(v) for v in a[~ok][:max_offenders])
    return ConeCertificate(
        passed=bool(ok.all()),
        min_ratio=float(np.nanmin(ratio)),
        max_ratio=float(np.nanmax(ratio)),
        declared=(spec.L_sigma, spec.Lip_sigma),
        offenders=offenders,
    )


def require_cone(spec: SigmaSpec) -> ConeCertificate:
    cert = validate_cone(spec)
    if not cert.passed:
        raise ConeViolation(
            f"cone constants L={spec.L_sigma}, Lip={spec.Lip_sigma} fail; observed ratio range "
            f"[{cert.min_ratio:.6g}, {cert.max_ratio:.6g}], first offending a: {list(cert.offenders[:5])}"
        )
    return cert
