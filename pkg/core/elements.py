"""
Reference-element shape functions and quadrature
"""

from enum import Enum
from typing import Tuple

import numpy as np


class LayerOrder(str, Enum):
    LINEAR = 'linear'
    QUADRATIC = 'quadratic'


def gauss_rule(n_points: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights mapped to [0, 1]"""
    xi, wt = np.polynomial.legendre.leggauss(n_points)
    return 0.5 * (xi + 1.0), 0.5 * wt


def hermite_cubic(xi: np.ndarray, h: float) -> np.ndarray:
    """Hermite cubic basis and x-derivatives on an element of length h.

    Returns an array of shape (4, 4, len(xi)): [derivative order, dof, point],
    dofs ordered (w_left, w'_left, w_right, w'_right).
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    one = np.ones_like(xi)
    out = np.empty((4, 4, xi.size))
    out[0] = [1 - 3 * xi**2 + 2 * xi**3,
              h * (xi - 2 * xi**2 + xi**3),
              3 * xi**2 - 2 * xi**3,
              h * (-xi**2 + xi**3)]
    out[1] = np.array([-6 * xi + 6 * xi**2,
                       h * (1 - 4 * xi + 3 * xi**2),
                       6 * xi - 6 * xi**2,
                       h * (-2 * xi + 3 * xi**2)]) / h
    out[2] = np.array([-6 + 12 * xi,
                       h * (-4 + 6 * xi),
                       6 - 12 * xi,
                       h * (-2 + 6 * xi)]) / h**2
    out[3] = np.array([12 * one,
                       6 * h * one,
                       -12 * one,
                       6 * h * one]) / h**3
    return out


def lagrange(xi: np.ndarray, h: float, order: LayerOrder) -> np.ndarray:
    """Lagrange basis with first and second x-derivatives.

    Shape (3, n_local, len(xi)); local nodes are ordered left to right.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    order = LayerOrder(order)
    if order is LayerOrder.LINEAR:
        out = np.zeros((3, 2, xi.size))
        out[0] = [1 - xi, xi]
        out[1] = np.array([-np.ones_like(xi), np.ones_like(xi)]) / h
        return out

    out = np.empty((3, 3, xi.size))
    out[0] = [2 * (xi - 0.5) * (xi - 1), -4 * xi * (xi - 1), 2 * xi * (xi - 0.5)]
    out[1] = np.array([4 * xi - 3, -8 * xi + 4, 4 * xi - 1]) / h
    out[2] = np.array([4 * np.ones_like(xi), -8 * np.ones_like(xi), 4 * np.ones_like(xi)]) / h**2
    return out


def nodes_per_element(order: LayerOrder) -> int:
    return 2 if LayerOrder(order) is LayerOrder.LINEAR else 3
