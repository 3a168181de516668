"""Robust design problems and exact worst-case evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .acquisition import DesignBox, UncertaintySet
from .network import FunctionNetwork, evaluate

MAX_ROWS = 1 << 18


@dataclass(frozen=True)
class RobustProblem:
    """``max_x min_{w in W} c^T H(x, w)`` over a known network."""

    name: str
    net: FunctionNetwork
    X: DesignBox
    W: UncertaintySet
    known_optimum: Optional[Tuple[np.ndarray, float]] = None

    def __post_init__(self):
        if self.X.dim != self.net.design_dim:
            raise ValueError(f"design box has {self.X.dim} dims, network expects {self.net.design_dim}")
        if self.W.dim != self.net.uncertainty_dim:
            raise ValueError(
                f"uncertainty set has {self.W.dim} dims, network expects {self.net.uncertainty_dim}"
            )

    @property
    def n_x(self) -> int:
        return self.X.dim

    @property
    def n_w(self) -> int:
        return self.W.dim

    @property
    def n_init(self) -> int:
        return 2 * self.n_x + 2 * self.n_w + 1

    @property
    def ground_truth(self) -> list:
        return self.net.true_evaluators()

    def objective_table(self, x, w_points: Optional[np.ndarray] = None) -> np.ndarray:
        """Exact objective at every ``(x_b, w_j)`` pair, shape ``(B, m)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pts = self.W.points if w_points is None else np.atleast_2d(np.asarray(w_points, dtype=float))
        Wt = torch.as_tensor(pts)
        c = torch.as_tensor(self.net.c)
        rows = max(1, MAX_ROWS // pts.shape[0])
        out = []
        with torch.no_grad():
            for i in range(0, x.shape[0], rows):
                xb = torch.as_tensor(x[i:i + rows])
                B = xb.shape[0]
                state = evaluate(self.net, None, xb.unsqueeze(1).expand(B, pts.shape[0], -1),
                                 Wt.unsqueeze(0).expand(B, -1, -1))
                out.append((state.H * c).sum(-1).numpy())
        return np.concatenate(out, 0) if out else np.zeros((0, pts.shape[0]))

    def worst_case(self, x) -> np.ndarray:
        """``G(x) = min_j g(x, w_j)`` for each row of ``x``."""
        return self.objective_table(x).min(axis=1)

    def nominal_value(self, x) -> np.ndarray:
        return self.objective_table(x, self.W.nominal[None])[:, 0]
