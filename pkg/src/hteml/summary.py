from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm


def two_sided_p(t: float) -> float:
    if not np.isfinite(t):
        return 0.0 if np.isinf(t) else float("nan")
    return float(min(1.0, 2.0 * norm.sf(abs(t))))


def z_crit(level: float) -> float:
    return float(norm.ppf(0.5 + level / 2.0))


@dataclass(frozen=True)
class EstimateSummary:
    """Point estimate with normal-reference inference and provenance."""

    theta: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    nominal_level: float = 0.95
    n: int = 0
    per_split: tuple = field(default=())
    method_label: str = ""

    @classmethod
    def from_normal(cls, theta, se, level=0.95, n=0, per_split=(), method_label=""):
        theta = float(theta)
        se = float(se)
        half = z_crit(level) * se
        if se > 0:
            p = two_sided_p(theta / se)
        else:
            p = 1.0 if theta == 0 else 0.0
        return cls(theta, se, theta - half, theta + half, p, level, int(n),
                   tuple((float(a), float(b)) for a, b in per_split), method_label)

    @property
    def t_stat(self) -> float:
        return self.theta / self.se if self.se > 0 else float("nan")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_split"] = [list(t) for t in self.per_split]
        return out

    @classmethod
    def from_dict(cls, d) -> "EstimateSummary":
        d = dict(d)
        d["per_split"] = tuple(tuple(t) for t in d.get("per_split", ()))
        return cls(**d)
