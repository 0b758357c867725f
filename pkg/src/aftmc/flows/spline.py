"""Mean-field monotone rational-quadratic spline flow.

Each coordinate is transformed independently by a rational-quadratic
spline with ``num_bins`` bins on ``[-bound, bound]`` and the identity
outside.  Per coordinate the parameter block is

    [width logits (num_bins) | height logits (num_bins) | derivative params (num_bins - 1)]

and theta is the row-major concatenation of the ``dim`` blocks.  Widths and
heights are softmaxed, given a floor of ``min_size`` and rescaled to fill
the interval; interior knot derivatives are ``nu + softplus(u)`` and the two
boundary derivatives are fixed at 1 so the map joins the identity tails
with matching slope.
"""

from __future__ import annotations

import math

import numpy as np

from .base import Flow, FlowParams

MIN_SIZE = 1e-4
MIN_DERIV = 1e-4


def _softmax(u):
    z = np.exp(u - np.max(u, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def _softplus(u):
    return np.logaddexp(0.0, u)


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class RQSplineFlow(Flow):
    family = "rq_spline_mf"

    def __init__(self, dim: int, num_bins: int = 10, bound: float = 4.0,
                 min_size: float = MIN_SIZE, min_deriv: float = MIN_DERIV):
        if num_bins * min_size >= 2 * bound:
            raise ValueError("minimum bin size leaves no room inside the interval")
        self.dim = int(dim)
        self.num_bins = int(num_bins)
        self.bound = float(bound)
        self.min_size = float(min_size)
        self.min_deriv = float(min_deriv)
        self.block = 3 * self.num_bins - 1
        self.num_params = self.dim * self.block
        # softplus(u) + min_deriv == 1.0 exactly in float64 at this value
        self.unit_deriv_param = math.log(math.expm1(1.0 - self.min_deriv))

    def init_params(self, rng=None) -> FlowParams:
        theta = np.zeros((self.dim, self.block))
        theta[:, 2 * self.num_bins :] = self.unit_deriv_param
        return FlowParams(self.family, theta.ravel())

    def knots(self, theta):
        """Knot abscissae, ordinates and derivatives, each of shape (dim, num_bins + 1)."""
        n = self.num_bins
        p = theta.reshape(self.dim, self.block)
        sm_w = _softmax(p[:, :n])
        sm_h = _softmax(p[:, n : 2 * n])
        span = 2.0 * self.bound - n * self.min_size
        widths = self.min_size + span * sm_w
        heights = self.min_size + span * sm_h
        kx = self._edges(widths)
        ky = self._edges(heights)
        kd = np.ones((self.dim, n + 1))
        kd[:, 1:n] = self.min_deriv + _softplus(p[:, 2 * n :])
        return kx, ky, kd, (sm_w, sm_h, p[:, 2 * n :])

    def _edges(self, sizes):
        edges = np.empty((self.dim, self.num_bins + 1))
        edges[:, 0] = -self.bound
        edges[:, 1:-1] = -self.bound + np.cumsum(sizes, axis=1)[:, :-1]
        edges[:, -1] = self.bound
        return edges

    def forward_cached(self, theta, x):
        n = self.num_bins
        kx, ky, kd, aux = self.knots(theta)
        inside = (x >= -self.bound) & (x <= self.bound)
        idx = np.empty(x.shape, dtype=np.intp)
        for j in range(self.dim):
            idx[:, j] = np.searchsorted(kx[j], x[:, j], side="right") - 1
        np.clip(idx, 0, n - 1, out=idx)
        cols = np.arange(self.dim)[None, :]
        xk = kx[cols, idx]
        w = kx[cols, idx + 1] - xk
        yk = ky[cols, idx]
        h = ky[cols, idx + 1] - yk
        dk = kd[cols, idx]
        dk1 = kd[cols, idx + 1]

        s = h / w
        rel = x - xk
        xi = rel / w
        a = xi * (1.0 - xi)
        curv = dk1 + dk - 2.0 * s
        den = s + curv * a
        # algebraically y_k + h*(s xi^2 + d_k a)/den, arranged so s = d = 1 is exactly x
        y_in = x + (yk - xk) + rel * (s - 1.0) + h * a * ((dk - s) - curv * xi) / den
        e = s + (dk1 - s) * xi * xi + (dk - s) * (1.0 - xi) ** 2
        # lanes outside the bound are discarded below and may be invalid here
        with np.errstate(invalid="ignore", divide="ignore"):
            ld_in = 2.0 * np.log(s) + np.log(e) - 2.0 * np.log(den)

        y = np.where(inside, y_in, x)
        ld_elem = np.where(inside, ld_in, 0.0)
        cache = dict(inside=inside, idx=idx, w=w, h=h, s=s, xi=xi, a=a, dk=dk, dk1=dk1,
                     den=den, e=e, curv=curv, aux=aux)
        return y, np.sum(ld_elem, axis=1), cache

    def backward(self, theta, cache, gy, gld):
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            return self._backward(cache, gy, gld)

    def _backward(self, cache, gy, gld):
        n = self.num_bins
        c = cache
        inside = c["inside"]
        w, h, s, xi, a = c["w"], c["h"], c["s"], c["xi"], c["a"]
        dk, dk1, den, e, curv = c["dk"], c["dk1"], c["den"], c["e"], c["curv"]
        gl = np.broadcast_to(gld[:, None], gy.shape)

        num = s * xi * xi + dk * a
        den2 = den * den
        one_m2xi = 1.0 - 2.0 * xi
        # partials of y
        y_xi = h * ((2.0 * s * xi + dk * one_m2xi) * den - num * curv * one_m2xi) / den2
        y_s = h * (xi * xi * den - num * (1.0 - 2.0 * a)) / den2
        y_h = num / den
        y_dk = h * a * (den - num) / den2
        y_dk1 = -h * a * num / den2
        # partials of the per-coordinate log-derivative
        e_xi = 2.0 * dk1 * xi + 2.0 * s * one_m2xi - 2.0 * dk * (1.0 - xi)
        l_xi = e_xi / e - 2.0 * curv * one_m2xi / den
        l_s = 2.0 / s + 2.0 * a / e - 2.0 * (1.0 - 2.0 * a) / den
        l_dk = (1.0 - xi) ** 2 / e - 2.0 * a / den
        l_dk1 = xi * xi / e - 2.0 * a / den

        g_xi = gy * y_xi + gl * l_xi
        g_s = gy * y_s + gl * l_s
        g_xk = -g_xi / w
        g_w = -(g_xi * xi + g_s * s) / w
        g_h = gy * y_h + g_s / w
        g_yk = gy
        g_dk = gy * y_dk + gl * l_dk
        g_dk1 = gy * y_dk1 + gl * l_dk1

        m = n + 1
        flat = c["idx"] + m * np.arange(self.dim)[None, :]
        size = self.dim * m

        def scatter(lo_vals, hi_vals):
            lo_vals = np.where(inside, lo_vals, 0.0)
            hi_vals = np.where(inside, hi_vals, 0.0)
            out = np.bincount(flat.ravel(), weights=lo_vals.ravel(), minlength=size)
            out += np.bincount((flat + 1).ravel(), weights=hi_vals.ravel(), minlength=size)
            return out.reshape(self.dim, m)

        g_kx = scatter(g_xk - g_w, g_w)
        g_ky = scatter(g_yk - g_h, g_h)
        g_kd = scatter(g_dk, g_dk1)

        sm_w, sm_h, u_d = c["aux"]
        span = 2.0 * self.bound - n * self.min_size
        grad = np.zeros((self.dim, self.block))
        grad[:, :n] = self._edge_backward(g_kx, sm_w, span)
        grad[:, n : 2 * n] = self._edge_backward(g_ky, sm_h, span)
        grad[:, 2 * n :] = g_kd[:, 1:n] * _sigmoid(u_d)
        return grad.ravel()

    def _edge_backward(self, g_edges, sm, span):
        # interior edge k is -bound + sum_{m<k} size_m; the end edges are constants
        n = self.num_bins
        g_sizes = np.zeros((self.dim, n))
        g_sizes[:, : n - 1] = np.cumsum(g_edges[:, 1:n][:, ::-1], axis=1)[:, ::-1]
        g_sm = span * g_sizes
        return sm * (g_sm - np.sum(sm * g_sm, axis=1, keepdims=True))


def forward_rq_spline_mf(theta, x, **kwargs):
    x = np.asarray(x, dtype=np.float64)
    flow = RQSplineFlow(x.shape[-1], **kwargs)
    return flow.forward(np.asarray(theta, dtype=np.float64), x)
