"""Result container shared by estimators, inference and sensitivity analyses."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFinite

ESTIMAND = "ITT(S=t)"


def clamp_estimate(x: float) -> float:
    """Hard threshold to [-1, 1]: 1 above 1, -1 below -1, identity in between."""
    x = float(x)
    if not math.isfinite(x):
        raise NonFinite(f"cannot clamp non-finite value {x}")
    return min(1.0, max(-1.0, x))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        v = float(v)
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass
class EstimateResult:
    """Point estimate with optional standard error and confidence interval.

    ``components`` keeps the per-row factors of product-form estimators
    (``cate``, ``cc`` and the row weights) so that sensitivity transforms can
    be re-averaged; it is not serialized.
    """

    method: str
    point: float
    se: float | None = None
    ci: tuple[float, float] | None = None
    estimand: str = ESTIMAND
    diagnostics: dict = field(default_factory=dict)
    components: dict | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return _jsonable({
            "estimand": self.estimand,
            "method": self.method,
            "point": self.point,
            "se": self.se,
            "ci": None if self.ci is None else list(self.ci),
            "diagnostics": self.diagnostics,
        })

    def to_json(self, **kw) -> str:
        kw.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, raw: dict) -> "EstimateResult":
        ci = raw.get("ci")
        return cls(raw["method"], raw["point"], raw.get("se"), None if ci is None else tuple(ci),
                   raw.get("estimand", ESTIMAND), dict(raw.get("diagnostics", {})))

    def shifted(self, delta: float, **diag) -> "EstimateResult":
        ci = None if self.ci is None else (self.ci[0] + delta, self.ci[1] + delta)
        return replace(self, point=self.point + delta, ci=ci,
                       diagnostics={**self.diagnostics, **diag}, components=None)
