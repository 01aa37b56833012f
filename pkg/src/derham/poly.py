"""Polynomial calculus on simplices in barycentric coordinates.

Polynomials are stored in the canonical reduced representation: on a
d-simplex with barycentric coordinates (l_0, ..., l_d), the last coordinate
is eliminated via l_d = 1 - sum(l_i) and coefficients are kept over the
monomials l_0^a0 * ... * l_{d-1}^a_{d-1} of total degree <= k.  This makes
coefficient arrays unique, so equality and zero tests are cheap.

Value shapes: a scalar polynomial has coefficients of shape (nmono,), a
vector one (nmono, arity); an extra trailing axis is allowed for batches of
polynomials sharing the monomial basis.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


class PolyError(ValueError):
    """Raised for arity/degree misuse of polynomial operations."""


@lru_cache(maxsize=None)
def multi_indices(dim: int, degree: int) -> np.ndarray:
    """All exponent vectors in dim variables with total degree <= degree.

    Returned in graded lexicographic order as an int array of shape (n, dim).
    """
    if dim == 0:
        return np.zeros((1, 0), dtype=int)
    out = []

    def rec(prefix, rem):
        if len(prefix) == dim - 1:
            out.append(prefix + (rem,))
            return
        for a in range(rem, -1, -1):
            rec(prefix + (a,), rem - a)

    for total in range(degree + 1):
        rec((), total)
    return np.array(out, dtype=int)


@lru_cache(maxsize=None)
def _index_lookup(dim, degree):
    mi = multi_indices(dim, degree)
    return {tuple(row): i for i, row in enumerate(mi)}


@lru_cache(maxsize=None)
def _mul_table(dim, deg1, deg2):
    """Index map for products: entry (i, j) -> index in basis of deg1+deg2."""
    m1 = multi_indices(dim, deg1)
    m2 = multi_indices(dim, deg2)
    look = _index_lookup(dim, deg1 + deg2)
    table = np.empty((len(m1), len(m2)), dtype=int)
    for i, a in enumerate(m1):
        for j, b in enumerate(m2):
            table[i, j] = look[tuple(a + b)]
    return table


def n_poly(dim: int, degree: int) -> int:
    """Dimension of P_degree on a dim-simplex."""
    return math.comb(degree + dim, dim)


class BaryPoly:
    """Polynomial on a d-simplex in reduced barycentric monomials.

    Attributes:
        dim: simplex dimension d (reduced variables l_0..l_{d-1}).
        degree: total degree cap of the stored basis.
        coeffs: array of shape (nmono, *vshape).
    """

    __slots__ = ("dim", "degree", "coeffs")

    def __init__(self, dim, degree, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[0] != len(multi_indices(dim, degree)):
            raise PolyError("coefficient length does not match degree cap")
        self.dim = dim
        self.degree = degree
        self.coeffs = coeffs

    # -- constructors -------------------------------------------------

    @staticmethod
    def zero(dim, degree, vshape=()):
        n = len(multi_indices(dim, degree))
        return BaryPoly(dim, degree, np.zeros((n,) + tuple(vshape)))

    @staticmethod
    def constant(dim, value):
        value = np.asarray(value, dtype=float)
        c = np.zeros((1,) + value.shape)
        c[0] = value
        return BaryPoly(dim, 0, c)

    @staticmethod
    def coordinate(dim, i, degree=1):
        """The barycentric coordinate l_i (any 0 <= i <= dim) as a polynomial."""
        p = BaryPoly.zero(dim, degree)
        look = _index_lookup(dim, degree)
        if i < dim:
            e = tuple(1 if j == i else 0 for j in range(dim))
            p.coeffs[look[e]] = 1.0
        else:
            p.coeffs[look[tuple([0] * dim)]] = 1.0
            for j in range(dim):
                e = tuple(1 if m == j else 0 for m in range(dim))
                p.coeffs[look[e]] = -1.0
        return p

    @staticmethod
    def monomial(dim, alpha, degree=None):
        """Monomial in the reduced variables, alpha over l_0..l_{dim-1}."""
        alpha = tuple(alpha)
        if degree is None:
            degree = sum(alpha)
        p = BaryPoly.zero(dim, degree)
        p.coeffs[_index_lookup(dim, degree)[alpha]] = 1.0
        return p

    # -- bookkeeping ----------------------------------------------------

    @property
    def vshape(self):
        return self.coeffs.shape[1:]

    @property
    def arity(self):
        return 1 if self.coeffs.ndim == 1 else self.coeffs.shape[1]

    def raised(self, degree):
        """Same polynomial in the degree-`degree` basis."""
        if degree < self.degree:
            raise PolyError("cannot lower the degree cap")
        if degree == self.degree:
            return self
        out = BaryPoly.zero(self.dim, degree, self.vshape)
        mi = multi_indices(self.dim, self.degree)
        look = _index_lookup(self.dim, degree)
        idx = np.array([look[tuple(a)] for a in mi], dtype=int)
        out.coeffs[idx] = self.coeffs
        return out

    def __add__(self, other):
        d = max(self.degree, other.degree)
        a, b = self.raised(d), other.raised(d)
        return BaryPoly(self.dim, d, a.coeffs + b.coeffs)

    def __sub__(self, other):
        d = max(self.degree, other.degree)
        a, b = self.raised(d), other.raised(d)
        return BaryPoly(self.dim, d, a.coeffs - b.coeffs)

    def __mul__(self, other):
        if isinstance(other, BaryPoly):
            table = _mul_table(self.dim, self.degree, other.degree)
            n = len(multi_indices(self.dim, self.degree + other.degree))
            a, b = self.coeffs, other.coeffs
            va, vb = a.shape[1:], b.shape[1:]
            if va and vb and va != vb:
                raise PolyError("cannot multiply polynomials of mismatched arity")
            prod_shape = va if va else vb
            out = np.zeros((n,) + prod_shape)
            for i in range(a.shape[0]):
                ai = a[i]
                if not np.any(ai):
                    continue
                if va and not vb:
                    contrib = b.reshape(b.shape + (1,) * len(va)) * ai
                else:
                    contrib = ai * b
                np.add.at(out, table[i], contrib)
            return BaryPoly(self.dim, self.degree + other.degree, out)
        return BaryPoly(self.dim, self.degree, self.coeffs * other)

    __rmul__ = __mul__

    def __neg__(self):
        return BaryPoly(self.dim, self.degree, -self.coeffs)

    def component(self, c):
        return BaryPoly(self.dim, self.degree, self.coeffs[:, c])

    def max_abs(self):
        return float(np.max(np.abs(self.coeffs))) if self.coeffs.size else 0.0

    # -- evaluation -----------------------------------------------------

    def eval(self, bary):
        """Evaluate at barycentric points.

        bary: (N, dim+1) full coordinates or (N, dim) reduced.
        Returns (N, *vshape).
        """
        bary = np.asarray(bary, dtype=float)
        x = bary[:, : self.dim]
        mi = multi_indices(self.dim, self.degree)
        # vandermonde (N, nmono)
        van = np.ones((x.shape[0], mi.shape[0]))
        for j in range(self.dim):
            pw = np.power.outer(x[:, j], np.arange(self.degree + 1))
            van *= pw[:, mi[:, j]]
        return np.tensordot(van, self.coeffs, axes=(1, 0))

    # -- calculus in barycentric variables --------------------------------

    def dmono(self, i):
        """Partial derivative with respect to reduced variable l_i."""
        if not 0 <= i < self.dim:
            raise PolyError("reduced variable index out of range")
        deg = max(self.degree - 1, 0)
        out = BaryPoly.zero(self.dim, deg, self.vshape)
        mi = multi_indices(self.dim, self.degree)
        look = _index_lookup(self.dim, deg)
        for idx, a in enumerate(mi):
            if a[i] == 0:
                continue
            b = list(a)
            b[i] -= 1
            out.coeffs[look[tuple(b)]] += a[i] * self.coeffs[idx]
        return out

    def compose_affine(self, lin_polys):
        """Substitute each reduced variable with an affine BaryPoly.

        lin_polys: list of dim scalar polynomials (degree 1) on the target
        simplex.  Returns the composed polynomial there.
        """
        tdim = lin_polys[0].dim if lin_polys else 0
        mi = multi_indices(self.dim, self.degree)
        out = BaryPoly.zero(tdim, self.degree, self.vshape)
        # powers of the substituted variables, built incrementally
        pow_cache = [[BaryPoly.constant(tdim, 1.0)] for _ in range(self.dim)]
        for j in range(self.dim):
            for p in range(self.degree):
                pow_cache[j].append(pow_cache[j][-1] * lin_polys[j])
        for idx, a in enumerate(mi):
            c = self.coeffs[idx]
            if not np.any(c):
                continue
            term = BaryPoly.constant(tdim, 1.0)
            for j in range(self.dim):
                if a[j]:
                    term = term * pow_cache[j][a[j]]
            term = term.raised(self.degree)
            out.coeffs += term.coeffs.reshape(
                term.coeffs.shape[:1] + (1,) * len(self.vshape)
            ) * c
        return out


def restrict_to_subsimplex(p: BaryPoly, positions) -> BaryPoly:
    """Trace of p onto a subsimplex of its simplex.

    positions: for each vertex j of the subsimplex, the local index of that
    vertex within the parent simplex (both in their canonical sorted order).
    The result lives in the subsimplex's own reduced coordinates.
    """
    m = len(positions) - 1
    parent_coord = {}
    for j, pos in enumerate(positions):
        parent_coord[pos] = BaryPoly.coordinate(m, j)
    lin = []
    for i in range(p.dim):
        lin.append(parent_coord.get(i, BaryPoly.zero(m, 1)))
    return p.compose_affine([q.raised(1) for q in lin])


# -- geometry ------------------------------------------------------------


class SimplexGeometry:
    """Affine geometry of an m-simplex embedded in R^n.

    Provides the m-dimensional measure and the true barycentric gradients
    (within the affine hull for embedded simplices).
    """

    __slots__ = ("vertices", "dim", "space_dim", "measure", "bary_grads")

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        m = v.shape[0] - 1
        edges = v[1:] - v[0]
        gram = edges @ edges.T
        det = np.linalg.det(gram) if m else 1.0
        if det <= 0:
            raise PolyError("degenerate simplex")
        self.vertices = v
        self.dim = m
        self.space_dim = v.shape[1]
        self.measure = math.sqrt(det) / math.factorial(m)
        if m:
            red = np.linalg.solve(gram, edges)  # rows: grad l_1..l_m
            grads = np.empty((m + 1, v.shape[1]))
            grads[1:] = red
            grads[0] = -red.sum(axis=0)
        else:
            grads = np.zeros((1, v.shape[1]))
        self.bary_grads = grads

    def physical_points(self, bary):
        bary = np.asarray(bary, dtype=float)
        if bary.shape[1] == self.dim:  # reduced -> full
            last = 1.0 - bary.sum(axis=1, keepdims=True)
            bary = np.hstack([bary, last])
        return bary @ self.vertices


# -- quadrature -----------------------------------------------------------


class QuadratureRule:
    """Conical-product rule on the reference d-simplex.

    points are full barycentric tuples; weights sum to the reference simplex
    volume 1/d!.  The constructor cross-validates every barycentric monomial
    of total degree <= degree against the factorial formula.
    """

    __slots__ = ("dim", "degree", "points", "weights")

    def __init__(self, dim, degree, points, weights):
        self.dim = dim
        self.degree = degree
        self.points = points
        self.weights = weights

    def __len__(self):
        return len(self.weights)


def _gauss01(n, alpha):
    """Gauss-Jacobi nodes/weights on [0,1] for weight (1-x)^alpha."""
    t, w = roots_jacobi(n, alpha, 0.0)
    x = (t + 1.0) / 2.0
    w = w / 2.0 ** (alpha + 1)
    return x, w


@lru_cache(maxsize=None)
def simplex_quadrature(dim: int, degree: int) -> QuadratureRule:
    """Quadrature exact for polynomials of total degree <= degree."""
    n = degree // 2 + 1
    if dim == 0:
        rule = QuadratureRule(0, degree, np.ones((1, 1)), np.array([1.0]))
    elif dim == 1:
        x, w = _gauss01(n, 0)
        pts = np.stack([1.0 - x, x], axis=1)
        rule = QuadratureRule(1, degree, pts, w)
    elif dim == 2:
        xi, wx = _gauss01(n, 0)
        eta, we = _gauss01(n, 1)
        XI, ETA = np.meshgrid(xi, eta, indexing="ij")
        x = (XI * (1.0 - ETA)).ravel()
        y = ETA.ravel()
        w = np.outer(wx, we).ravel()
        pts = np.stack([1.0 - x - y, x, y], axis=1)
        rule = QuadratureRule(2, degree, pts, w)
    elif dim == 3:
        xi, wx = _gauss01(n, 0)
        eta, we = _gauss01(n, 1)
        zeta, wz = _gauss01(n, 2)
        XI, ETA, ZETA = np.meshgrid(xi, eta, zeta, indexing="ij")
        x = (XI * (1.0 - ETA) * (1.0 - ZETA)).ravel()
        y = (ETA * (1.0 - ZETA)).ravel()
        z = ZETA.ravel()
        w = np.einsum("i,j,k->ijk", wx, we, wz).ravel()
        pts = np.stack([1.0 - x - y - z, x, y, z], axis=1)
        rule = QuadratureRule(3, degree, pts, w)
    else:
        raise PolyError("unsupported simplex dimension")
    _validate_rule(rule)
    return rule


def factorial_integral(alpha, dim: int) -> float:
    """Exact integral of a barycentric monomial over the reference simplex.

    alpha is the exponent vector over all dim+1 coordinates.
    """
    num = math.prod(math.factorial(a) for a in alpha)
    return num / math.factorial(sum(alpha) + dim)


def _validate_rule(rule):
    mi = multi_indices(rule.dim + 1, rule.degree)
    mi = mi[mi.sum(axis=1) <= rule.degree]
    van = np.ones((len(rule), mi.shape[0]))
    for j in range(rule.dim + 1):
        pw = np.power.outer(rule.points[:, j], np.arange(rule.degree + 1))
        van *= pw[:, mi[:, j]]
    got = rule.weights @ van
    want = np.array([factorial_integral(a, rule.dim) for a in mi])
    err = np.max(np.abs(got - want) / np.abs(want))
    if err > 1e-13:
        raise PolyError(f"quadrature self-check failed at degree {rule.degree}: {err}")


def integrate(p: BaryPoly, geom: SimplexGeometry, rule: QuadratureRule | None = None):
    """Exact integral of p over the physical simplex."""
    if rule is None:
        rule = simplex_quadrature(geom.dim, p.degree)
    if rule.degree < p.degree:
        raise PolyError("quadrature rule degree is below the polynomial degree")
    vals = p.eval(rule.points)
    scale = geom.measure * math.factorial(geom.dim)
    return scale * np.tensordot(rule.weights, vals, axes=(0, 0))


# -- differential operators ------------------------------------------------


def _check_arity(p, arity, what):
    got = 1 if p.coeffs.ndim == 1 else p.coeffs.shape[1]
    if got != arity:
        raise PolyError(f"{what} expects arity {arity}, got {got}")


def grad(p: BaryPoly, geom: SimplexGeometry) -> BaryPoly:
    """Physical gradient of a scalar polynomial (vector valued result)."""
    _check_arity(p, 1, "grad")
    deg = max(p.degree - 1, 0)
    out = BaryPoly.zero(p.dim, deg, (geom.space_dim,))
    for i in range(p.dim):
        out.coeffs += p.dmono(i).coeffs[:, None] * geom.bary_grads[i][None, :]
    return out


def deriv_dir(p: BaryPoly, geom: SimplexGeometry, direction) -> BaryPoly:
    """Directional derivative d p / d direction of a scalar polynomial."""
    _check_arity(p, 1, "deriv_dir")
    direction = np.asarray(direction, dtype=float)
    deg = max(p.degree - 1, 0)
    out = BaryPoly.zero(p.dim, deg)
    for i in range(p.dim):
        out.coeffs += p.dmono(i).coeffs * float(geom.bary_grads[i] @ direction)
    return out


def deriv_cart(p: BaryPoly, geom: SimplexGeometry, axis: int) -> BaryPoly:
    e = np.zeros(geom.space_dim)
    e[axis] = 1.0
    return deriv_dir(p, geom, e)


def _vec_deriv(p, geom, axis, comp):
    """d p_comp / d x_axis for vector p."""
    return deriv_cart(p.component(comp), geom, axis)


def grad2d(p, geom):
    return grad(p, geom)


def curl2d(p: BaryPoly, geom: SimplexGeometry) -> BaryPoly:
    """Rotated gradient (du/dy, -du/dx) mapping H^1 into H(div)."""
    g = grad(p, geom)
    out = BaryPoly.zero(p.dim, g.degree, g.vshape)
    out.coeffs[:, 0] = g.coeffs[:, 1]
    out.coeffs[:, 1] = -g.coeffs[:, 0]
    return out


def div2d(p: BaryPoly, geom: SimplexGeometry) -> BaryPoly:
    _check_arity(p, 2, "div2d")
    return _vec_deriv(p, geom, 0, 0) + _vec_deriv(p, geom, 1, 1)


def rot2d(p: BaryPoly, geom: SimplexGeometry) -> BaryPoly:
    """Scalar curl dv2/dx - dv1/dy."""
    _check_arity(p, 2, "rot2d")
    return _vec_deriv(p, geom, 0, 1) - _vec_deriv(p, geom, 1, 0)


def grad3d(p, geom):
    return grad(p, geom)


def div3d(p: BaryPoly, geom: SimplexGeometry) -> BaryPoly:
    _check_arity(p, 3, "div3d")
    return sum(
        (_vec_deriv(p, geom, a, a) for a in range(1, 3)),
        _vec_deriv(p, geom, 0, 0),
    )


def curl3d(p: BaryPoly, geom: SimplexGeometry) -> BaryPoly:
    _check_arity(p, 3, "curl3d")
    comps = [
        _vec_deriv(p, geom, 1, 2) - _vec_deriv(p, geom, 2, 1),
        _vec_deriv(p, geom, 2, 0) - _vec_deriv(p, geom, 0, 2),
        _vec_deriv(p, geom, 0, 1) - _vec_deriv(p, geom, 1, 0),
    ]
    deg = max(c.degree for c in comps)
    nb = comps[0].vshape
    out = BaryPoly.zero(p.dim, deg, (3,) + tuple(nb))
    for c, q in enumerate(comps):
        out.coeffs[:, c] = q.raised(deg).coeffs
    return out


def diff(op: str, p: BaryPoly, geom: SimplexGeometry) -> BaryPoly:
    """Dispatch d^k by name: grad | curl2d | div2d | rot2d | grad3d | curl3d | div3d."""
    table = {
        "grad": grad,
        "grad2d": grad,
        "grad3d": grad,
        "curl2d": curl2d,
        "div2d": div2d,
        "rot2d": rot2d,
        "curl3d": curl3d,
        "div3d": div3d,
    }
    if op not in table:
        raise PolyError(f"unknown differential operator {op!r}")
    return table[op](p, geom)


# -- surface calculus on 3D faces ------------------------------------------


def tangential_part(p: BaryPoly, t1, t2) -> BaryPoly:
    """E_f v = (v.t1, v.t2) for a 3-vector polynomial on a face."""
    _check_arity(p, 3, "tangential_part")
    nb = p.vshape[1:]
    out = BaryPoly.zero(p.dim, p.degree, (2,) + tuple(nb))
    out.coeffs[:, 0] = np.tensordot(p.coeffs, np.asarray(t1), axes=(1, 0))
    out.coeffs[:, 1] = np.tensordot(p.coeffs, np.asarray(t2), axes=(1, 0))
    return out


def grad_f(p: BaryPoly, geom: SimplexGeometry, t1, t2) -> BaryPoly:
    """In-plane gradient (t1.grad u, t2.grad u) on a face."""
    a = deriv_dir(p, geom, t1)
    b = deriv_dir(p, geom, t2)
    out = BaryPoly.zero(p.dim, max(a.degree, b.degree), (2,))
    out.coeffs[:, 0] = a.coeffs
    out.coeffs[:, 1] = b.coeffs
    return out


def curl_f(p: BaryPoly, geom: SimplexGeometry, t1, t2) -> BaryPoly:
    """Rotated in-plane gradient (-t2.grad u, t1.grad u)."""
    g = grad_f(p, geom, t1, t2)
    out = BaryPoly.zero(p.dim, g.degree, (2,))
    out.coeffs[:, 0] = -g.coeffs[:, 1]
    out.coeffs[:, 1] = g.coeffs[:, 0]
    return out


def div_f(p: BaryPoly, geom: SimplexGeometry, t1, t2) -> BaryPoly:
    """In-plane divergence of a 2-vector field given in the (t1, t2) frame."""
    _check_arity(p, 2, "div_f")
    return deriv_dir(p.component(0), geom, t1) + deriv_dir(p.component(1), geom, t2)


def rot_f(p: BaryPoly, geom: SimplexGeometry, t1, t2) -> BaryPoly:
    """In-plane rotation -d v2/d t1 + d v1/d t2."""
    _check_arity(p, 2, "rot_f")
    return deriv_dir(p.component(1), geom, t1) * (-1.0) + deriv_dir(
        p.component(0), geom, t2
    )


# -- common polynomial families ---------------------------------------------


def monomial_basis(dim: int, degree: int) -> list[BaryPoly]:
    """Scalar monomial basis of P_degree on a dim-simplex."""
    if degree < 0:
        return []
    return [
        BaryPoly.monomial(dim, a, degree) for a in multi_indices(dim, degree)
    ]


def bubble(dim: int, power: int = 1) -> BaryPoly:
    """(l_0 * ... * l_dim)^power."""
    p = BaryPoly.constant(dim, 1.0)
    for i in range(dim + 1):
        c = BaryPoly.coordinate(dim, i)
        for _ in range(power):
            p = p * c
    return p


def vector_basis(scalars: list[BaryPoly], arity: int) -> list[BaryPoly]:
    """Each scalar times each coordinate direction."""
    out = []
    for comp in range(arity):
        for s in scalars:
            v = BaryPoly.zero(s.dim, s.degree, (arity,))
            v.coeffs[:, comp] = s.coeffs
            out.append(v)
    return out
