"""
Material permittivity (ITU-R P.2040 power-law fits) and Fresnel reflection.

Time dependence is e^{+jwt}, so lossy media carry a negative imaginary
permittivity. Metals are perfect conductors, represented by an infinite
permittivity sentinel (``PEC``); consumers branch on :func:`is_pec`.
"""

from __future__ import annotations

import cmath
import json
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numba
import numpy as np

from .core_types import MaterialClass, ValidationError

PEC = complex(math.inf, 0.0)

# sigma / (2 pi f eps0) expressed with f in GHz
_CONDUCTIVITY_FACTOR = 17.98


class FrequencyRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MaterialEmProperties:
    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    freq_min_ghz: float = 0.0
    freq_max_ghz: float = math.inf
    is_perfect_conductor: bool = False
    source: str = ""

    def __post_init__(self):
        if not self.is_perfect_conductor:
            if self.a < 1:
                raise ValidationError("dielectric permittivity coefficient must be >= 1", "a")
            if self.c < 0:
                raise ValidationError("conductivity coefficient must be >= 0", "c")
            if self.freq_min_ghz > self.freq_max_ghz:
                raise ValidationError("empty validity range", "freq_min_ghz")

    def permittivity(self, frequency: float, name: str = "material") -> complex:
        if not frequency > 0 or not math.isfinite(frequency):
            raise ValidationError(f"must be a positive frequency in Hz, got {frequency!r}", "frequency")
        if self.is_perfect_conductor:
            return PEC
        f_ghz = frequency / 1e9
        if not self.freq_min_ghz <= f_ghz <= self.freq_max_ghz:
            warnings.warn(
                f"{name}: {f_ghz:g} GHz is outside the fitted range "
                f"[{self.freq_min_ghz:g}, {self.freq_max_ghz:g}] GHz",
                FrequencyRangeWarning,
                stacklevel=3,
            )
        eps_r = self.a * f_ghz**self.b
        sigma = self.c * f_ghz**self.d
        return complex(eps_r, -_CONDUCTIVITY_FACTOR * sigma / f_ghz)


@dataclass(frozen=True)
class FresnelResult:
    gamma_te: complex
    gamma_tm: complex
    incidence_angle: float


def load_material_table(path=None) -> dict[MaterialClass, MaterialEmProperties]:
    """Read a material coefficient file (defaults to the bundled ITU table)."""
    if path is None:
        text = resources.files("sim2radar").joinpath("data/itu_p2040_materials.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    table = {}
    for key, entry in raw.items():
        if key.startswith("_"):
            continue
        mat = MaterialClass.parse(key)
        if not isinstance(entry, dict):
            raise ValidationError("expected an object", f"materials.{key}")
        if entry.get("pec"):
            table[mat] = MaterialEmProperties(is_perfect_conductor=True, source=entry.get("source", ""))
            continue
        try:
            table[mat] = MaterialEmProperties(
                a=float(entry["a"]), b=float(entry["b"]), c=float(entry["c"]), d=float(entry["d"]),
                freq_min_ghz=float(entry.get("freq_min_ghz", 0.0)),
                freq_max_ghz=float(entry.get("freq_max_ghz", math.inf)),
                source=entry.get("source", ""),
            )
        except KeyError as exc:
            raise ValidationError(f"missing coefficient {exc.args[0]!r}", f"materials.{key}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError("coefficients must be numbers", f"materials.{key}") from None
    missing = [m.value for m in MaterialClass if m not in table]
    if missing:
        raise ValidationError(f"material table lacks {missing}", "materials")
    return table


@lru_cache(maxsize=1)
def default_material_table() -> dict[MaterialClass, MaterialEmProperties]:
    return load_material_table()


def is_pec(eta: complex) -> bool:
    return math.isinf(eta.real)


def complex_permittivity(material, frequency: float, table=None) -> complex:
    """Complex relative permittivity eps_r - j*17.98*sigma/f_GHz, or ``PEC`` for metal."""
    material = MaterialClass.parse(material)
    table = default_material_table() if table is None else table
    props = table.get(material, table[MaterialClass.UNKNOWN])
    return props.permittivity(frequency, material.value)


def permittivity_table(frequency: float, table=None, materials=None) -> np.ndarray:
    """Permittivity of every material class, indexed by ordinal.

    When ``materials`` (ordinals) is given, only those entries are evaluated;
    the rest are left as vacuum.
    """
    wanted = set(range(len(MaterialClass))) if materials is None else {int(m) for m in materials}
    out = np.ones(len(MaterialClass), dtype=np.complex128)
    for i, m in enumerate(MaterialClass):
        if i in wanted:
            out[i] = complex_permittivity(m, frequency, table)
    return out


def _check_angle(theta: float) -> float:
    theta = float(theta)
    if not 0.0 <= theta < math.pi / 2:
        raise ValidationError(f"incidence angle must be in [0, pi/2), got {theta!r}", "theta")
    return theta


def fresnel(eta: complex, theta: float) -> FresnelResult:
    """Reflection coefficients for a plane wave from free space onto a half-space of permittivity ``eta``."""
    theta = _check_angle(theta)
    eta = complex(eta)
    if is_pec(eta):
        return FresnelResult(-1.0 + 0j, 1.0 + 0j, theta)
    cos_t = math.cos(theta)
    root = cmath.sqrt(eta - math.sin(theta) ** 2)
    gamma_te = (cos_t - root) / (cos_t + root)
    gamma_tm = (eta * cos_t - root) / (eta * cos_t + root)
    return FresnelResult(gamma_te, gamma_tm, theta)


def combine_polarizations(gamma_te: complex, gamma_tm: complex, polarization: str = "average") -> float:
    if polarization == "average":
        return math.sqrt(0.5 * (abs(gamma_te) ** 2 + abs(gamma_tm) ** 2))
    if polarization == "te":
        return abs(gamma_te)
    if polarization == "tm":
        return abs(gamma_tm)
    raise ValidationError("must be one of average, te, tm", "polarization")


def reflection_amplitude(material, frequency: float, theta: float, polarization: str = "average",
                         table=None) -> float:
    """Single-amplitude reflectance in [0, 1] multiplied into a ray at each bounce."""
    theta = _check_angle(theta)
    r = fresnel(complex_permittivity(material, frequency, table), theta)
    return combine_polarizations(r.gamma_te, r.gamma_tm, polarization)


@numba.njit(cache=True, fastmath=False)
def reflectance_kernel(eta: complex, cos_theta: float, mode: int) -> float:
    """Jitted twin of :func:`reflection_amplitude` for the ray tracer.

    ``mode`` 0 averages TE/TM power, 1 is pure TE, 2 pure TM.
    """
    if math.isinf(eta.real):
        return 1.0
    if cos_theta > 1.0:
        cos_theta = 1.0
    sin2 = 1.0 - cos_theta * cos_theta
    root = np.sqrt(eta - sin2)
    te = abs((cos_theta - root) / (cos_theta + root))
    tm = abs((eta * cos_theta - root) / (eta * cos_theta + root))
    if mode == 1:
        return te
    if mode == 2:
        return tm
    return math.sqrt(0.5 * (te * te + tm * tm))
