"""Row systems of degree-two polynomials with exact symbolic derivatives.

Every function in the lower-level and equilibrium models is at most bilinear
in the decision variables (flows are quadratic in voltages, the contract term
is alpha times dispatch, KKT rows are multipliers times first derivatives).
``Poly2`` stores such systems as triplets::

    g_r(x) = const_r + sum lin_v * x[lin_c] + sum quad_v * x[quad_a] * x[quad_b]

and differentiates them symbolically.  ``weighted_grad`` returns the rows
``sum_r y_r dg_r/dz_j``: derivatives are affine and the multiplier enters
linearly, so the result is again a ``Poly2``.
"""
from collections import OrderedDict

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

_INT = np.int64


def _ints(a):
    return np.asarray(a, dtype=_INT).reshape(-1)


def _floats(a):
    return np.asarray(a, dtype=float).reshape(-1)


class Poly2:
    def __init__(self, m, n, const=None, lin=None, quad=None):
        self.m, self.n = int(m), int(n)
        self.const = np.zeros(self.m) if const is None else _floats(const).copy()
        lin = lin if lin is not None else ((), (), ())
        quad = quad if quad is not None else ((), (), (), ())
        self.lin_r, self.lin_c, self.lin_v = _ints(lin[0]), _ints(lin[1]), _floats(lin[2])
        self.quad_r, self.quad_a, self.quad_b, self.quad_v = _ints(quad[0]), _ints(quad[1]), _ints(quad[2]), \
            _floats(quad[3])
        assert self.const.shape == (self.m,)
        assert len(self.lin_r) == len(self.lin_c) == len(self.lin_v)
        assert len(self.quad_r) == len(self.quad_a) == len(self.quad_b) == len(self.quad_v)
        for idx, bound in ((self.lin_r, self.m), (self.quad_r, self.m), (self.lin_c, self.n),
                           (self.quad_a, self.n), (self.quad_b, self.n)):
            assert idx.size == 0 or (idx.min() >= 0 and idx.max() < bound), 'index out of range'

    @classmethod
    def zeros(cls, m, n):
        return cls(m, n)

    @property
    def nnz_terms(self):
        return len(self.lin_v) + len(self.quad_v)

    @property
    def lin(self):
        return self.lin_r, self.lin_c, self.lin_v

    @property
    def quad(self):
        return self.quad_r, self.quad_a, self.quad_b, self.quad_v

    # ---- evaluation

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        out = self.const.copy()
        if len(self.lin_v):
            out += np.bincount(self.lin_r, self.lin_v * x[self.lin_c], minlength=self.m)
        if len(self.quad_v):
            out += np.bincount(self.quad_r, self.quad_v * x[self.quad_a] * x[self.quad_b], minlength=self.m)
        return out

    def jacobian(self, x) -> csr_matrix:
        x = np.asarray(x, dtype=float)
        rows = np.concatenate([self.lin_r, self.quad_r, self.quad_r])
        cols = np.concatenate([self.lin_c, self.quad_a, self.quad_b])
        vals = np.concatenate([self.lin_v, self.quad_v * x[self.quad_b], self.quad_v * x[self.quad_a]])
        return coo_matrix((vals, (rows, cols)), shape=(self.m, self.n)).tocsr()

    def hessian(self, y) -> csr_matrix:
        """``sum_r y_r * Hess(g_r)``; constant in x."""
        y = _floats(y)
        assert y.shape == (self.m,)
        w = y[self.quad_r] * self.quad_v
        rows = np.concatenate([self.quad_a, self.quad_b])
        cols = np.concatenate([self.quad_b, self.quad_a])
        return coo_matrix((np.concatenate([w, w]), (rows, cols)), shape=(self.n, self.n)).tocsr()

    # ---- symbolic derivatives

    def _positions(self, wrt):
        wrt = _ints(wrt)
        pos = np.full(self.n, -1, dtype=_INT)
        pos[wrt] = np.arange(len(wrt))
        return wrt, pos

    def gradient_rows(self, wrt):
        """Rows ``d(sum_r g_r)/dx_j`` for j in ``wrt``."""
        wrt, pos = self._positions(wrt)
        const = np.zeros(len(wrt))
        p = pos[self.lin_c]
        k = p >= 0
        np.add.at(const, p[k], self.lin_v[k])
        pa, pb = pos[self.quad_a], pos[self.quad_b]
        ka, kb = pa >= 0, pb >= 0
        lin = (np.concatenate([pa[ka], pb[kb]]),
               np.concatenate([self.quad_b[ka], self.quad_a[kb]]),
               np.concatenate([self.quad_v[ka], self.quad_v[kb]]))
        return Poly2(len(wrt), self.n, const, lin)

    def weighted_grad(self, mult_cols, wrt):
        """Rows ``sum_r x[mult_cols[r]] * dg_r/dx_j`` for j in ``wrt``."""
        mult_cols = _ints(mult_cols)
        assert mult_cols.shape == (self.m,)
        wrt, pos = self._positions(wrt)
        p = pos[self.lin_c]
        k = p >= 0
        lin = (p[k], mult_cols[self.lin_r[k]], self.lin_v[k])
        pa, pb = pos[self.quad_a], pos[self.quad_b]
        ka, kb = pa >= 0, pb >= 0
        quad = (np.concatenate([pa[ka], pb[kb]]),
                np.concatenate([mult_cols[self.quad_r[ka]], mult_cols[self.quad_r[kb]]]),
                np.concatenate([self.quad_b[ka], self.quad_a[kb]]),
                np.concatenate([self.quad_v[ka], self.quad_v[kb]]))
        return Poly2(len(wrt), self.n, None, lin, quad)

    # ---- algebra

    def _check_same(self, other):
        assert isinstance(other, Poly2) and (self.m, self.n) == (other.m, other.n), \
            f'shape mismatch {(self.m, self.n)} vs {(other.m, other.n)}'

    def __add__(self, other):
        self._check_same(other)
        return Poly2(self.m, self.n, self.const + other.const,
                     [np.concatenate([a, b]) for a, b in zip(self.lin, other.lin)],
                     [np.concatenate([a, b]) for a, b in zip(self.quad, other.quad)])

    def scaled(self, c):
        return Poly2(self.m, self.n, c * self.const, (self.lin_r, self.lin_c, c * self.lin_v),
                     (self.quad_r, self.quad_a, self.quad_b, c * self.quad_v))

    def __neg__(self):
        return self.scaled(-1.)

    def __sub__(self, other):
        return self + (-other)

    @staticmethod
    def vstack(polys):
        polys = [p for p in polys]
        n = polys[0].n
        assert all(p.n == n for p in polys)
        offsets = np.cumsum([0] + [p.m for p in polys])
        const = np.concatenate([p.const for p in polys])
        lin = [np.concatenate([p.lin_r + o for p, o in zip(polys, offsets)]),
               np.concatenate([p.lin_c for p in polys]),
               np.concatenate([p.lin_v for p in polys])]
        quad = [np.concatenate([p.quad_r + o for p, o in zip(polys, offsets)]),
                np.concatenate([p.quad_a for p in polys]),
                np.concatenate([p.quad_b for p in polys]),
                np.concatenate([p.quad_v for p in polys])]
        return Poly2(offsets[-1], n, const, lin, quad)

    def take_rows(self, rows):
        rows = _ints(rows)
        new = np.full(self.m, -1, dtype=_INT)
        new[rows] = np.arange(len(rows))
        kl, kq = new[self.lin_r] >= 0, new[self.quad_r] >= 0
        return Poly2(len(rows), self.n, self.const[rows],
                     (new[self.lin_r[kl]], self.lin_c[kl], self.lin_v[kl]),
                     (new[self.quad_r[kq]], self.quad_a[kq], self.quad_b[kq], self.quad_v[kq]))

    def embed(self, colmap, n):
        """Same rows in a larger variable space; column j becomes ``colmap[j]``."""
        colmap = _ints(colmap)
        assert colmap.shape == (self.n,)
        return Poly2(self.m, n, self.const, (self.lin_r, colmap[self.lin_c], self.lin_v),
                     (self.quad_r, colmap[self.quad_a], colmap[self.quad_b], self.quad_v))

    def substitute(self, fixed, values):
        """Fix the columns in ``fixed`` at ``values``; remaining columns keep their order.

        Returns ``(poly, free)`` where ``free`` lists the surviving original columns.
        """
        fixed = _ints(fixed)
        xfix = np.zeros(self.n)
        xfix[fixed] = _floats(values)
        is_free = np.ones(self.n, dtype=bool)
        is_free[fixed] = False
        free = np.flatnonzero(is_free)
        new = np.full(self.n, -1, dtype=_INT)
        new[free] = np.arange(len(free))

        const = self.const.copy()
        lf = ~is_free[self.lin_c]
        np.add.at(const, self.lin_r[lf], self.lin_v[lf] * xfix[self.lin_c[lf]])
        lin_r, lin_c, lin_v = [self.lin_r[~lf]], [new[self.lin_c[~lf]]], [self.lin_v[~lf]]

        fa, fb = ~is_free[self.quad_a], ~is_free[self.quad_b]
        both = fa & fb
        np.add.at(const, self.quad_r[both], self.quad_v[both] * xfix[self.quad_a[both]] * xfix[self.quad_b[both]])
        only_a, only_b = fa & ~fb, fb & ~fa
        lin_r += [self.quad_r[only_a], self.quad_r[only_b]]
        lin_c += [new[self.quad_b[only_a]], new[self.quad_a[only_b]]]
        lin_v += [self.quad_v[only_a] * xfix[self.quad_a[only_a]], self.quad_v[only_b] * xfix[self.quad_b[only_b]]]
        keep = ~fa & ~fb
        quad = (self.quad_r[keep], new[self.quad_a[keep]], new[self.quad_b[keep]], self.quad_v[keep])
        poly = Poly2(self.m, len(free), const,
                     (np.concatenate(lin_r), np.concatenate(lin_c), np.concatenate(lin_v)), quad)
        return poly, free


class Poly2Builder:
    """Row-by-row construction of a ``Poly2`` over ``n`` variables."""
    def __init__(self, n):
        self.n = n
        self.m = 0
        self._const = []
        self._lin = ([], [], [])
        self._quad = ([], [], [], [])

    def row(self, const=0.):
        self._const.append(float(const))
        self.m += 1
        return self.m - 1

    def lin(self, r, c, v):
        for lst, val in zip(self._lin, (r, c, v)):
            lst.append(val)

    def quad(self, r, a, b, v):
        for lst, val in zip(self._quad, (r, a, b, v)):
            lst.append(val)

    def build(self):
        return Poly2(self.m, self.n, self._const, self._lin, self._quad)


class Layout:
    """Named contiguous blocks of a flat variable vector."""
    def __init__(self):
        self.blocks = OrderedDict()
        self.n = 0
        self._labels = []

    def add(self, name, size, labels=None):
        assert name not in self.blocks, name
        cols = np.arange(self.n, self.n + size, dtype=_INT)
        self.blocks[name] = cols
        self.n += size
        self._labels += list(labels) if labels is not None else [f'{name}[{k}]' for k in range(size)]
        assert len(self._labels) == self.n
        return cols

    def __getitem__(self, name):
        return self.blocks[name]

    def __contains__(self, name):
        return name in self.blocks

    def get(self, name, default=None):
        return self.blocks.get(name, default)

    @property
    def labels(self):
        return list(self._labels)

    def zeros(self):
        return np.zeros(self.n)
