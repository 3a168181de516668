"""Function networks: node wiring, evaluation, and fixed-point solving.

Node evaluators are torch callables mapping a batch of node inputs
``z_k`` of shape ``(..., n_z)`` to outputs of shape ``(...)``. The input
vector of node ``k`` is laid out as (design slice, uncertainty slice, parent
outputs), each in ascending index order.
"""

from __future__ import annotations

import importlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.optimize import least_squares

Evaluator = Callable[[torch.Tensor], torch.Tensor]

WHITE_BOX = "white_box"
BLACK_BOX = "black_box"

FIXED_POINT_TOL = 1e-8
FIXED_POINT_DAMPING = 0.5
FIXED_POINT_MAX_ITER = 200


class CyclicGraphError(ValueError):
    pass


class NodeEvaluationError(RuntimeError):
    def __init__(self, node: int, cause: BaseException):
        super().__init__(f"evaluation of node {node} failed: {cause!r}")
        self.node = node


class FixedPointError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (best residual {residual:.3g})")
        self.residual = residual


class InvalidStateError(ValueError):
    pass


def _resolve(ref: str) -> Callable:
    module, _, attr = ref.partition(":")
    obj = importlib.import_module(module)
    for part in attr.split("."):
        obj = getattr(obj, part)
    return obj


@dataclass(frozen=True)
class NodeSpec:
    """One node: its kind, the indices it reads, and (optionally) its function.

    For a white-box node ``func`` is the known function; for a black-box node it
    is the ground-truth evaluator that stands in for the expensive simulator.
    ``func_ref`` is an optional ``"module:attr"`` import path used when the
    network is loaded from a config file.
    """

    name: str
    kind: str
    design_inputs: tuple = ()
    uncertainty_inputs: tuple = ()
    parents: tuple = ()
    func: Optional[Evaluator] = field(default=None, compare=False, repr=False)
    func_ref: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (WHITE_BOX, BLACK_BOX):
            raise ValueError(f"node {self.name!r}: kind must be {WHITE_BOX!r} or {BLACK_BOX!r}")
        for attr in ("design_inputs", "uncertainty_inputs", "parents"):
            vals = tuple(sorted(int(i) for i in getattr(self, attr)))
            if len(set(vals)) != len(vals):
                raise ValueError(f"node {self.name!r}: duplicate entries in {attr}")
            object.__setattr__(self, attr, vals)
        if self.func is None and self.func_ref is not None:
            object.__setattr__(self, "func", _resolve(self.func_ref))

    @property
    def input_dim(self) -> int:
        return len(self.design_inputs) + len(self.uncertainty_inputs) + len(self.parents)

    @property
    def is_white_box(self) -> bool:
        return self.kind == WHITE_BOX

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "kind": self.kind,
            "design_inputs": list(self.design_inputs),
            "uncertainty_inputs": list(self.uncertainty_inputs),
            "parents": list(self.parents),
        }
        if self.func_ref is not None:
            d["func"] = self.func_ref
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NodeSpec":
        return cls(
            name=d["name"],
            kind=d["kind"],
            design_inputs=tuple(d.get("design_inputs", ())),
            uncertainty_inputs=tuple(d.get("uncertainty_inputs", ())),
            parents=tuple(d.get("parents", ())),
            func_ref=d.get("func"),
        )


class FunctionNetwork:
    """Directed graph of node functions with a linear read-out ``g = c^T H``.

    Node indices are 0-based.
    """

    def __init__(
        self,
        nodes: Sequence[NodeSpec],
        c: Sequence[float],
        design_dim: int,
        uncertainty_dim: int,
    ):
        self.nodes = tuple(nodes)
        self.c = np.asarray(c, dtype=float).reshape(-1)
        self.design_dim = int(design_dim)
        self.uncertainty_dim = int(uncertainty_dim)
        K = len(self.nodes)
        if K == 0:
            raise ValueError("a function network needs at least one node")
        if self.c.size != K:
            raise ValueError(f"c has {self.c.size} entries for {K} nodes")
        for k, node in enumerate(self.nodes):
            if k in node.parents:
                raise ValueError(f"node {k} ({node.name!r}) lists itself as a parent")
            if any(not 0 <= j < K for j in node.parents):
                raise ValueError(f"node {k} has a parent index outside 0..{K - 1}")
            if any(not 0 <= i < self.design_dim for i in node.design_inputs):
                raise ValueError(f"node {k} reads a design index outside 0..{self.design_dim - 1}")
            if any(not 0 <= i < self.uncertainty_dim for i in node.uncertainty_inputs):
                raise ValueError(
                    f"node {k} reads an uncertainty index outside 0..{self.uncertainty_dim - 1}"
                )
        self._c_t = torch.as_tensor(self.c)
        self._order = self._kahn()
        self.is_acyclic = self._order is not None

    @property
    def K(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> frozenset:
        return frozenset((j, k) for k, n in enumerate(self.nodes) for j in n.parents)

    @property
    def black_box_nodes(self) -> list:
        return [k for k, n in enumerate(self.nodes) if not n.is_white_box]

    def _kahn(self) -> Optional[list]:
        indeg = [len(n.parents) for n in self.nodes]
        children = [[] for _ in self.nodes]
        for k, n in enumerate(self.nodes):
            for j in n.parents:
                children[j].append(k)
        ready = sorted(k for k, d in enumerate(indeg) if d == 0)
        order = []
        while ready:
            k = ready.pop(0)
            order.append(k)
            for ch in children[k]:
                indeg[ch] -= 1
                if indeg[ch] == 0:
                    ready.append(ch)
            ready.sort()
        return order if len(order) == self.K else None

    def true_evaluators(self) -> list:
        missing = [n.name for n in self.nodes if n.func is None]
        if missing:
            raise ValueError(f"nodes without functions: {missing}")
        return [n.func for n in self.nodes]

    def with_functions(self, funcs: Sequence[Optional[Evaluator]]) -> "FunctionNetwork":
        nodes = [
            NodeSpec(n.name, n.kind, n.design_inputs, n.uncertainty_inputs, n.parents,
                     f if f is not None else n.func, n.func_ref)
            for n, f in zip(self.nodes, funcs)
        ]
        return FunctionNetwork(nodes, self.c, self.design_dim, self.uncertainty_dim)

    def node_input(self, k: int, x: torch.Tensor, w: torch.Tensor, outputs) -> torch.Tensor:
        """Assemble ``z_k`` from design, uncertainty, and parent outputs.

        ``outputs`` is either a ``(..., K)`` tensor or a list indexed by node.
        """
        node = self.nodes[k]
        parts = []
        if node.design_inputs:
            parts.append(x[..., list(node.design_inputs)])
        if node.uncertainty_inputs:
            parts.append(w[..., list(node.uncertainty_inputs)])
        if node.parents:
            if isinstance(outputs, torch.Tensor):
                parts.append(outputs[..., list(node.parents)])
            else:
                parts.append(torch.stack([outputs[j] for j in node.parents], -1))
        return torch.cat(parts, -1)

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "c": self.c.tolist(),
            "design_dim": self.design_dim,
            "uncertainty_dim": self.uncertainty_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionNetwork":
        return cls([NodeSpec.from_dict(n) for n in d["nodes"]], d["c"],
                   d["design_dim"], d["uncertainty_dim"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "FunctionNetwork":
        return cls.from_dict(json.loads(text))

    def __repr__(self) -> str:
        return (f"FunctionNetwork(K={self.K}, n_x={self.design_dim}, "
                f"n_w={self.uncertainty_dim}, acyclic={self.is_acyclic})")


@dataclass
class NetworkState:
    """Node outputs for a batch of ``(x, w)`` queries.

    ``H`` has shape ``(..., K)``; ``inputs[k]`` is the ``z_k`` batch that
    produced ``H[..., k]``. ``converged`` and ``residual`` are per query.
    """

    H: torch.Tensor
    inputs: list
    converged: torch.Tensor
    residual: torch.Tensor

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == torch.float64 else a.to(torch.float64)
    return torch.as_tensor(np.asarray(a, dtype=float))


def _broadcast(x, w):
    x, w = _as_tensor(x), _as_tensor(w)
    batch = torch.broadcast_shapes(x.shape[:-1], w.shape[:-1])
    return x.expand(*batch, x.shape[-1]), w.expand(*batch, w.shape[-1]), batch


def topological_order(net: FunctionNetwork) -> list:
    if not net.is_acyclic:
        raise CyclicGraphError("network contains a cycle; use solve_fixed_point")
    return list(net._order)


def _call(k: int, f: Evaluator, z: torch.Tensor) -> torch.Tensor:
    try:
        out = f(z)
    except Exception as exc:  # noqa: BLE001 - re-raised with the node index
        raise NodeEvaluationError(k, exc) from exc
    out = _as_tensor(out)
    if out.shape != z.shape[:-1]:
        out = out.reshape(z.shape[:-1])
    return out


def evaluate_acyclic(
    net: FunctionNetwork, evaluators: Optional[Sequence[Evaluator]], x, w
) -> NetworkState:
    """Evaluate every node once, in topological order (differentiable)."""
    evaluators = net.true_evaluators() if evaluators is None else evaluators
    x, w, batch = _broadcast(x, w)
    outputs = [None] * net.K
    inputs = [None] * net.K
    for k in topological_order(net):
        z = net.node_input(k, x, w, outputs)
        inputs[k] = z
        outputs[k] = _call(k, evaluators[k], z)
    H = torch.stack(outputs, -1)
    return NetworkState(H, inputs, torch.ones(batch, dtype=torch.bool),
                        torch.zeros(batch, dtype=torch.float64))


def _lstsq_root(F: Callable, h: np.ndarray, scale: np.ndarray):
    def resid(v):
        return (v - F(v)) / scale

    sol = least_squares(resid, h, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    return sol.x, float(np.max(np.abs(resid(sol.x)))) if sol.x.size else 0.0


def fixed_point(
    F: Callable[[torch.Tensor], torch.Tensor],
    h0: torch.Tensor,
    tol: float = FIXED_POINT_TOL,
    damping: float = FIXED_POINT_DAMPING,
    max_iter: int = FIXED_POINT_MAX_ITER,
    scale=None,
):
    """Damped Picard iteration ``H <- (1 - damping) H + damping F(H)``.

    ``h0`` is ``(..., K)``; ``F`` acts on the last axis. Queries that do not
    reach ``tol`` (infinity norm of ``(H - F(H)) / scale``) are handed to a
    least-squares root solve started from their lowest-residual iterate.
    Converged queries return ``F(H)`` of the accepted iterate. Returns
    ``(H, converged, residual)``.
    """
    h = _as_tensor(h0).clone()
    scale_t = torch.ones(h.shape[-1], dtype=h.dtype) if scale is None else _as_tensor(scale)
    best_h = h.clone()
    best_fh = h.clone()
    best_r = torch.full(h.shape[:-1], float("inf"), dtype=h.dtype)
    with torch.no_grad():
        for _ in range(max_iter + 1):
            fh = F(h)
            r = ((h - fh) / scale_t).abs().amax(-1) if h.shape[-1] else torch.zeros(h.shape[:-1])
            r = torch.where(torch.isfinite(r), r, torch.full_like(r, float("inf")))
            better = r < best_r
            best_r = torch.where(better, r, best_r)
            best_h = torch.where(better.unsqueeze(-1), h, best_h)
            best_fh = torch.where(better.unsqueeze(-1), fh, best_fh)
            if bool((best_r <= tol).all()):
                break
            h = (1.0 - damping) * h + damping * fh
            if not bool(torch.isfinite(h).all()):
                h = torch.where(torch.isfinite(h), h, best_h)
        converged = best_r <= tol
        # the image of a converged iterate is the sharper estimate for contractions
        best_h = torch.where(converged.unsqueeze(-1), best_fh, best_h)
        if not bool(converged.all()):
            flat_h = best_h.reshape(-1, h.shape[-1])
            flat_r = best_r.reshape(-1).clone()
            flat_c = converged.reshape(-1).clone()
            s = scale_t.numpy()
            for i in torch.nonzero(~flat_c).reshape(-1).tolist():
                index = np.unravel_index(i, tuple(best_r.shape)) if best_r.dim() else ()

                def F_i(v, index=index):
                    full = best_h.clone()
                    full[index] = torch.as_tensor(v)
                    return F(full)[index].numpy()

                start = flat_h[i].numpy()
                if not np.all(np.isfinite(start)):
                    start = np.zeros_like(start)
                try:
                    root, res = _lstsq_root(F_i, start, s)
                except (ValueError, FloatingPointError):
                    continue
                if res < flat_r[i]:
                    flat_h[i] = torch.as_tensor(root)
                    flat_r[i] = res
                    flat_c[i] = res <= tol
            best_h = flat_h.reshape(best_h.shape)
            best_r = flat_r.reshape(best_r.shape)
            converged = flat_c.reshape(best_r.shape)
    return best_h, converged, best_r


def solve_fixed_point(
    net: FunctionNetwork,
    evaluators: Optional[Sequence[Evaluator]],
    x,
    w,
    h0=None,
    tol: float = FIXED_POINT_TOL,
    damping: Optional[float] = None,
    max_iter: int = FIXED_POINT_MAX_ITER,
    scale=None,
    raise_on_failure: bool = True,
) -> NetworkState:
    """Solve ``H = F(x, w, H)`` for a (possibly cyclic) network.

    ``damping=None`` uses plain Jacobi sweeps on acyclic graphs (exact after at
    most K sweeps) and the damped default on cyclic ones.
    """
    evaluators = net.true_evaluators() if evaluators is None else evaluators
    x, w, batch = _broadcast(x, w)
    if damping is None:
        damping = 1.0 if net.is_acyclic else FIXED_POINT_DAMPING
    if h0 is None:
        h0 = torch.zeros(*batch, net.K, dtype=torch.float64)
    else:
        h0 = _as_tensor(h0).expand(*batch, net.K)

    def F(H):
        bx = x.expand(*H.shape[:-1], x.shape[-1]) if H.shape[:-1] != x.shape[:-1] else x
        bw = w.expand(*H.shape[:-1], w.shape[-1]) if H.shape[:-1] != w.shape[:-1] else w
        return torch.stack(
            [_call(k, evaluators[k], net.node_input(k, bx, bw, H)) for k in range(net.K)], -1
        )

    H, converged, residual = fixed_point(F, h0, tol, damping, max_iter, scale)
    if raise_on_failure and not bool(converged.all()):
        raise FixedPointError("fixed-point solve failed", float(residual.max()))
    with torch.no_grad():
        inputs = [net.node_input(k, x, w, H) for k in range(net.K)]
    return NetworkState(H, inputs, converged, residual)


def evaluate(net: FunctionNetwork, evaluators, x, w, **fixed_point_kwargs) -> NetworkState:
    """Topological evaluation for DAGs, fixed-point solve otherwise."""
    if net.is_acyclic:
        return evaluate_acyclic(net, evaluators, x, w)
    return solve_fixed_point(net, evaluators, x, w, **fixed_point_kwargs)


def objective(net: FunctionNetwork, state: NetworkState) -> torch.Tensor:
    """``c^T H`` for every query in ``state``."""
    if not state.all_converged:
        raise InvalidStateError("objective requested for a non-converged network state")
    return state.H @ net._c_t
