"""Sparse nonlinear least squares over quadrotor states and rotor-speed inputs.

A :class:`FactorGraph` holds factors; each factor connects a few variables
and contributes ``0.5 * ||W r||^2`` to the cost, ``W`` being the whitening
matrix of its Gaussian noise model. Factors of the same class are evaluated
in batches (see :meth:`Factor.evaluate_batch`), which is what keeps a
100 Hz receding-horizon loop tractable in pure numpy.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .manifold import exp_so3, normalize_rotation, ORTHO_TOL
from .quad_model import State


class Kind(enum.IntEnum):
    STATE = 0
    INPUT = 1


TANGENT_DIM = {Kind.STATE: 12, Kind.INPUT: 4}


class VariableKey(NamedTuple):
    """``x_i`` or ``u_i``. Orders by time index, states before inputs."""

    index: int
    kind: Kind

    @property
    def dim(self) -> int:
        return TANGENT_DIM[self.kind]

    def __repr__(self) -> str:
        return f"{'x' if self.kind == Kind.STATE else 'u'}{self.index}"


def X(i: int) -> VariableKey:
    return VariableKey(i, Kind.STATE)


def U(i: int) -> VariableKey:
    return VariableKey(i, Kind.INPUT)


class GraphError(ValueError):
    pass


class _Layout:
    """Row assignment of the keys of a :class:`Values` in its packed arrays."""

    def __init__(self, skeys, ukeys):
        self.state_index = {k: i for i, k in enumerate(skeys)}
        self.input_index = {k: i for i, k in enumerate(ukeys)}
        self._cache: dict = {}

    def rows(self, keys: Sequence[VariableKey], index: dict) -> np.ndarray:
        # keys is usually a tuple cached by a FactorBatch, so its id is a
        # stable cache key; the tuple is kept alive alongside the rows
        hit = self._cache.get(id(keys))
        if hit is not None and hit[0] is keys:
            return hit[1]
        try:
            idx = np.fromiter((index[k] for k in keys), dtype=int, count=len(keys))
        except KeyError as e:
            raise KeyError(e.args[0]) from None
        if isinstance(keys, tuple):
            self._cache[id(keys)] = (keys, idx)
        return idx


class Values(dict):
    """Mapping ``VariableKey -> State | np.ndarray``.

    :meth:`gather_states` and :meth:`gather_inputs` return stacked arrays
    for batched factor evaluation; the packing is cached until the mapping
    is modified.
    """

    _pack = None

    def __setitem__(self, key, value):
        self._pack = None
        super().__setitem__(key, value)

    def __delitem__(self, key):
        self._pack = None
        super().__delitem__(key)

    def update(self, *args, **kw):
        self._pack = None
        super().update(*args, **kw)

    def _packed(self):
        if self._pack is None:
            skeys = [k for k, v in self.items() if isinstance(v, State)]
            ukeys = [k for k, v in self.items() if not isinstance(v, State)]
            st = [self[k] for k in skeys]
            arrays = tuple(
                np.array([getattr(x, a) for x in st], dtype=float).reshape((len(st),) + shp)
                for a, shp in (("p", (3,)), ("R", (3, 3)), ("v", (3,)), ("w", (3,)))
            )
            ins = [np.asarray(self[k], dtype=float) for k in ukeys]
            if any(u.shape != (4,) for u in ins):
                raise GraphError("input variables must hold 4-vectors")
            U = np.array(ins, dtype=float).reshape(len(ukeys), 4)
            self._pack = (_Layout(skeys, ukeys), arrays, U)
        return self._pack

    def gather_states(self, keys: Sequence[VariableKey]):
        """``(P, R, V, W)`` arrays for the states at ``keys``."""
        layout, arrays, _ = self._packed()
        idx = layout.rows(keys, layout.state_index)
        return tuple(a[idx] for a in arrays)

    def gather_inputs(self, keys: Sequence[VariableKey]) -> np.ndarray:
        layout, _, U = self._packed()
        return U[layout.rows(keys, layout.input_index)]

    def retract(self, delta: np.ndarray, ordering: "Ordering") -> "Values":
        layout, arrays, U = self._packed()
        out = Values(self)
        skeys = ordering.state_keys
        arrays = tuple(a.copy() for a in arrays)
        if skeys:
            rows = layout.rows(ordering.state_keys, layout.state_index)
            d = delta[ordering.state_offsets[:, None] + np.arange(12)]
            P, R, V, W = (a[rows] for a in arrays)
            R = R @ exp_so3(d[:, 3:6])
            drift = np.abs(np.swapaxes(R, 1, 2) @ R - np.eye(3)).max(axis=(1, 2))
            for i in np.flatnonzero(drift > ORTHO_TOL):
                R[i] = normalize_rotation(R[i])
            P, V, W = P + d[:, 0:3], V + d[:, 6:9], W + d[:, 9:12]
            for a, new in zip(arrays, (P, R, V, W)):
                a[rows] = new
            for i, k in enumerate(skeys):
                dict.__setitem__(out, k, State(P[i], R[i], V[i], W[i]))
        U = U.copy()
        if ordering.input_keys:
            rows = layout.rows(ordering.input_keys, layout.input_index)
            U[rows] = U[rows] + delta[ordering.input_offsets[:, None] + np.arange(4)]
            for i, k in enumerate(ordering.input_keys):
                dict.__setitem__(out, k, U[rows[i]])
        out._pack = (layout, arrays, U)
        return out


class FactorBatch(list):
    """Factors evaluated together, with a cache for their constant data."""

    def __init__(self, factors=()):
        super().__init__(factors)
        self.cache: dict = {}

    def constant(self, name: str, fn):
        if name not in self.cache:
            self.cache[name] = fn(self)
        return self.cache[name]


def batch_keys(factors, slot: int) -> tuple:
    """Tuple of the ``slot``-th key of every factor, cached per batch."""
    return batch_constant(factors, ("keys", slot), lambda fs: tuple(f.keys[slot] for f in fs))


def batch_constant(factors, name, fn):
    """``fn(factors)``, memoized when ``factors`` is a :class:`FactorBatch`."""
    if isinstance(factors, FactorBatch):
        return factors.constant(name, fn)
    return fn(factors)


class Ordering:
    """Column layout of the linear system: sorted keys with their offsets."""

    def __init__(self, keys: Iterable[VariableKey]):
        self.keys = sorted(set(keys))
        self.offset = {}
        n = 0
        for k in self.keys:
            self.offset[k] = n
            n += k.dim
        self.size = n
        self.state_keys = tuple(k for k in self.keys if k.kind == Kind.STATE)
        self.input_keys = tuple(k for k in self.keys if k.kind == Kind.INPUT)
        self.state_offsets = np.array([self.offset[k] for k in self.state_keys], dtype=int)
        self.input_offsets = np.array([self.offset[k] for k in self.input_keys], dtype=int)


class Gaussian:
    """Gaussian noise model stored as a whitening matrix ``W`` with ``W^T W = inv(cov)``."""

    def __init__(self, sqrt_info: np.ndarray):
        self.sqrt_info = np.asarray(sqrt_info, dtype=float)
        self.dim = self.sqrt_info.shape[0]
        off = self.sqrt_info - np.diag(np.diag(self.sqrt_info))
        self.is_diagonal = not np.any(off)

    @staticmethod
    def from_sigmas(sigmas: Sequence[float]) -> "Gaussian":
        s = np.asarray(sigmas, dtype=float)
        if np.any(s <= 0):
            raise ValueError("sigmas must be positive")
        return Gaussian(np.diag(1.0 / s))

    @staticmethod
    def from_covariance(cov: np.ndarray) -> "Gaussian":
        cov = np.asarray(cov, dtype=float)
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        L = np.linalg.cholesky(cov)  # raises LinAlgError if not SPD
        return Gaussian(np.linalg.inv(L))

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def covariance(self) -> np.ndarray:
        Winv = np.linalg.inv(self.sqrt_info)
        return Winv @ Winv.T

    def whiten(self, r: np.ndarray) -> np.ndarray:
        return self.sqrt_info @ r

    def scaled(self, factor: float) -> "Gaussian":
        """Same model with every sigma multiplied by ``factor``."""
        return Gaussian(self.sqrt_info / factor)


class Factor:
    """Base class for residual terms.

    Subclasses implement :meth:`error` and :meth:`jacobians` (one block per
    key, each ``dim x key.dim``, derivative of the *unwhitened* residual with
    respect to the right-perturbed tangent of that variable). They may
    override :meth:`evaluate_batch` to vectorize over many instances.
    """

    keys: tuple[VariableKey, ...] = ()
    noise: Gaussian

    @property
    def dim(self) -> int:
        return self.noise.dim

    def error(self, values: Values) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, values: Values) -> list[np.ndarray]:
        raise NotImplementedError

    def linearize(self, values: Values) -> tuple[np.ndarray, list[np.ndarray]]:
        return self.error(values), self.jacobians(values)

    def whitened_error(self, values: Values) -> np.ndarray:
        return self.noise.whiten(self.error(values))

    def cost(self, values: Values) -> float:
        r = self.whitened_error(values)
        return 0.5 * float(r @ r)

    @classmethod
    def evaluate_batch(cls, factors: Sequence["Factor"], values: Values, jacobians: bool):
        """Residuals ``(n, d)`` and, optionally, per-slot Jacobians ``(n, d, dim_k)``."""
        if not jacobians:
            return np.stack([f.error(values) for f in factors]), None
        rs, Js = [], []
        for f in factors:
            r, J = f.linearize(values)
            rs.append(r)
            Js.append(J)
        slots = [np.stack([J[k] for J in Js]) for k in range(len(factors[0].keys))]
        return np.stack(rs), slots


def _group_key(f: Factor):
    return (type(f), f.dim, tuple(k.kind for k in f.keys))


class _Group:
    """Factors of one class with identical shape, plus their scatter indices."""

    def __init__(self, factors: list[Factor], ordering: Ordering):
        self.cls = type(factors[0])
        self.factors = FactorBatch(factors)
        self.n = len(factors)
        self.d = factors[0].dim
        W = np.stack([f.noise.sqrt_info for f in factors])
        self.diag = all(f.noise.is_diagonal for f in factors)
        self.W = np.diagonal(W, axis1=1, axis2=2).copy() if self.diag else W
        self.dims = [k.dim for k in factors[0].keys]
        self.col_off = [
            np.array([ordering.offset[f.keys[s]] for f in factors], dtype=int)
            for s in range(len(self.dims))
        ]

    def evaluate(self, values: Values, jacobians: bool):
        r, J = self.cls.evaluate_batch(self.factors, values, jacobians)
        if self.diag:
            rw = r * self.W
            Jw = None if J is None else [j * self.W[:, :, None] for j in J]
        else:
            rw = np.einsum("nij,nj->ni", self.W, r)
            Jw = None if J is None else [np.einsum("nij,njk->nik", self.W, j) for j in J]
        return rw, Jw


@dataclass
class LinearSystem:
    """Whitened linearization: cost = 0.5 * ||b||^2, model ``J dx + b``."""

    J: sp.csr_matrix
    b: np.ndarray
    ordering: Ordering

    @property
    def cost(self) -> float:
        return 0.5 * float(self.b @ self.b)

    @property
    def gradient(self) -> np.ndarray:
        return self.J.T @ self.b


class FactorGraph:
    def __init__(self, factors: Iterable[Factor] = ()):
        self.factors: list[Factor] = []
        self._cache = None
        for f in factors:
            self.add(f)

    def add(self, factor: Factor) -> None:
        for k in factor.keys:
            if not isinstance(k, VariableKey):
                raise GraphError(f"bad key {k!r}")
        self.factors.append(factor)
        self._cache = None

    def __len__(self) -> int:
        return len(self.factors)

    def __iter__(self):
        return iter(self.factors)

    def keys(self) -> set[VariableKey]:
        return {k for f in self.factors for k in f.keys}

    def count(self, cls: type) -> int:
        return sum(isinstance(f, cls) for f in self.factors)

    # -- structure ---------------------------------------------------------
    def structure(self) -> "_Structure":
        if self._cache is None:
            self._cache = _Structure(self)
        return self._cache

    def check_values(self, values: Values) -> None:
        missing = [k for k in self.keys() if k not in values]
        if missing:
            raise GraphError(f"values missing keys: {sorted(missing)}")

    def error(self, values: Values) -> float:
        """Total cost ``0.5 * sum ||W r||^2``."""
        self.check_values(values)
        return self.structure().cost(values)


class _Structure:
    def __init__(self, graph: FactorGraph):
        self.ordering = Ordering(graph.keys())
        buckets: dict = {}
        for f in graph.factors:
            buckets.setdefault(_group_key(f), []).append(f)
        self.groups = [_Group(fs, self.ordering) for fs in buckets.values()]
        row = 0
        for g in self.groups:
            g.row_off = row + g.d * np.arange(g.n)
            row += g.d * g.n
        self.rows = row
        self._build_indices()

    def _build_indices(self) -> None:
        N = self.ordering.size
        # Upper-triangular (col >= row) entries of H, in banded storage coordinates.
        band = 0
        for g in self.groups:
            for a in range(len(g.dims)):
                for b in range(len(g.dims)):
                    span = np.abs(
                        (g.col_off[b] + g.dims[b] - 1) - g.col_off[a]
                    ).max()
                    band = max(band, int(span))
        self.bandwidth = band
        self.use_banded = band * 4 < N
        self.pair_index = []
        for g in self.groups:
            per_group = []
            for a in range(len(g.dims)):
                for b in range(len(g.dims)):
                    ri = g.col_off[a][:, None, None] + np.arange(g.dims[a])[None, :, None]
                    ci = g.col_off[b][:, None, None] + np.arange(g.dims[b])[None, None, :]
                    ri, ci = np.broadcast_arrays(ri, ci)
                    mask = ci >= ri
                    if self.use_banded:
                        flat = (band + ri - ci) * N + ci
                    else:
                        flat = ri * N + ci
                    per_group.append((a, b, flat[mask], mask))
            self.pair_index.append(per_group)
        self.grad_index = [
            [g.col_off[a][:, None] + np.arange(g.dims[a])[None, :] for a in range(len(g.dims))]
            for g in self.groups
        ]

    def band_scale(self, s: np.ndarray) -> np.ndarray:
        """``s_i * s_j`` laid out in upper banded storage."""
        u, N = self.bandwidth, len(s)
        i = np.arange(N)[None, :] + np.arange(u + 1)[:, None] - u
        valid = i >= 0
        return np.where(valid, s[None, :] * s[np.where(valid, i, 0)], 0.0)

    def cost(self, values: Values) -> float:
        total = 0.0
        for g in self.groups:
            rw, _ = g.evaluate(values, jacobians=False)
            total += float(np.sum(rw * rw))
        return 0.5 * total

    def evaluate(self, values: Values):
        return [g.evaluate(values, jacobians=True) for g in self.groups]

    def normal_equations(self, lin):
        """Upper-triangular H (dense or banded storage) and gradient ``J^T b``."""
        N = self.ordering.size
        idx, vals = [], []
        gidx, gvals = [], []
        cost = 0.0
        for g, (rw, Jw), pairs, gi in zip(self.groups, lin, self.pair_index, self.grad_index):
            cost += float(np.sum(rw * rw))
            JwT = [np.swapaxes(j, 1, 2) for j in Jw]
            for a, b, flat, mask in pairs:
                blk = JwT[a] @ Jw[b]
                idx.append(flat)
                vals.append(blk[mask])
            for a in range(len(g.dims)):
                gidx.append(gi[a].ravel())
                gvals.append((JwT[a] @ rw[:, :, None]).ravel())
        idx = np.concatenate(idx)
        vals = np.concatenate(vals)
        rows = (self.bandwidth + 1) if self.use_banded else N
        H = np.bincount(idx, weights=vals, minlength=rows * N).reshape(rows, N)
        grad = np.bincount(np.concatenate(gidx), weights=np.concatenate(gvals), minlength=N)
        return H, grad, 0.5 * cost

    def jacobian_matrix(self, lin) -> tuple[sp.csr_matrix, np.ndarray]:
        N = self.ordering.size
        rows, cols, data, b = [], [], [], []
        for g, (rw, Jw) in zip(self.groups, lin):
            b.append(rw.ravel())
            for a in range(len(g.dims)):
                ri = g.row_off[:, None, None] + np.arange(g.d)[None, :, None]
                ci = g.col_off[a][:, None, None] + np.arange(g.dims[a])[None, None, :]
                ri, ci = np.broadcast_arrays(ri, ci)
                rows.append(ri.ravel())
                cols.append(ci.ravel())
                data.append(Jw[a].ravel())
        J = sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.rows, N),
        )
        return J, np.concatenate(b)


def linearize(graph: FactorGraph, values: Values) -> LinearSystem:
    """Whitened Jacobian and residual of ``graph`` at ``values``."""
    graph.check_values(values)
    st = graph.structure()
    _check_dims(st, values)
    J, b = st.jacobian_matrix(st.evaluate(values))
    return LinearSystem(J, b, st.ordering)


def _check_dims(st: _Structure, values: Values) -> None:
    for g in st.groups:
        for s, dim in enumerate(g.dims):
            k = g.factors[0].keys[s]
            v = values[k]
            if k.kind == Kind.STATE and not isinstance(v, State):
                raise GraphError(f"{k!r} must hold a State")
            if k.kind == Kind.INPUT and np.shape(v) != (4,):
                raise GraphError(f"{k!r} must hold a 4-vector, got shape {np.shape(v)}")


def _perturb(value, kind: Kind, d: np.ndarray):
    if kind == Kind.STATE:
        return value.retract(d)
    return value + d


def finite_difference_jacobian(factor: Factor, values: Values, eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences of ``factor.error`` in each variable's tangent space.

    Rotations are perturbed on the right. For vector-valued variables the step
    is scaled by ``max(1, |x_i|)`` so rotor speeds (~1e4) get a usable step.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    blocks = []
    for key in factor.keys:
        base = values[key]
        cols = []
        for i in range(key.dim):
            if key.kind == Kind.INPUT:
                h = eps * max(1.0, abs(float(base[i])))
            else:
                h = eps
            d = np.zeros(key.dim)
            d[i] = h
            vp, vm = Values(values), Values(values)
            vp[key] = _perturb(base, key.kind, d)
            vm[key] = _perturb(base, key.kind, -d)
            cols.append((factor.error(vp) - factor.error(vm)) / (2.0 * h))
        blocks.append(np.column_stack(cols))
    return blocks


def finite_difference_batch(factors: Sequence[Factor], values: Values, eps: float = 1e-6) -> list[np.ndarray]:
    """Vectorized :func:`finite_difference_jacobian` for same-shaped factors
    with pairwise disjoint keys; returns per-slot ``(n, d, dim_k)`` arrays."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    factors = FactorBatch(factors)
    cls = type(factors[0])
    keys = [k for f in factors for k in f.keys]
    if len(set(keys)) != len(keys):
        raise GraphError("batched finite differences need disjoint factor keys")
    ordering = Ordering(keys)
    blocks = []
    for slot, key0 in enumerate(factors[0].keys):
        slot_keys = [f.keys[slot] for f in factors]
        off = np.array([ordering.offset[k] for k in slot_keys])
        cols = []
        for i in range(key0.dim):
            if key0.kind == Kind.INPUT:
                base = np.array([values[k][i] for k in slot_keys], dtype=float)
                h = eps * np.maximum(1.0, np.abs(base))
            else:
                h = np.full(len(factors), eps)
            delta = np.zeros(ordering.size)
            delta[off + i] = h
            rp, _ = cls.evaluate_batch(factors, values.retract(delta, ordering), False)
            rm, _ = cls.evaluate_batch(factors, values.retract(-delta, ordering), False)
            cols.append((rp - rm) / (2.0 * h[:, None]))
        blocks.append(np.stack(cols, axis=-1))
    return blocks


def jacobian_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor: float = 1e-6) -> float:
    """Largest column-wise relative difference between two Jacobian block lists."""
    worst = 0.0
    for A, N in zip(analytic, numeric):
        if A.shape != N.shape:
            raise ValueError(f"Jacobian shape mismatch {A.shape} vs {N.shape}")
        diff = np.linalg.norm(A - N, axis=0)
        scale = np.maximum(np.linalg.norm(N, axis=0), floor)
        worst = max(worst, float(np.max(diff / scale)))
    return worst
