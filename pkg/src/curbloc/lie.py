"""SO(3) exponential/logarithm maps and Jacobians for the optimizers.

All formulas switch to truncated series below a small-angle threshold so
gradients stay finite and smooth through the identity.
"""

from __future__ import annotations

import numpy as np

__all__ = ["hat", "vee", "so3_exp", "so3_log", "jr_inv"]

_SMALL = 1e-7


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula."""
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < _SMALL:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, angle in [0, pi]."""
    cos_theta = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < _SMALL:
        return vee(rot - rot.T) * 0.5
    if theta > np.pi - 1e-5:
        # Near pi the skew part vanishes; recover the axis from the
        # symmetric part: R + R^T = 2 cos(t) I + 2 (1 - cos(t)) a a^T.
        outer = (rot + rot.T - 2.0 * cos_theta * np.eye(3)) / (2.0 * (1.0 - cos_theta))
        k = int(np.argmax(np.diag(outer)))
        axis = outer[:, k] / np.sqrt(max(outer[k, k], 1e-12))
        axis = axis / np.linalg.norm(axis)
        if np.dot(vee(rot - rot.T), axis) < 0.0:
            axis = -axis
        return axis * theta
    return vee(rot - rot.T) * (theta / (2.0 * np.sin(theta)))


def jr_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of the right Jacobian of SO(3) at phi.

    Satisfies so3_log(so3_exp(phi) @ so3_exp(delta)) ~= phi + jr_inv(phi) @ delta
    to first order in delta.
    """
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < 1e-4:
        coeff = 1.0 / 12.0 + theta * theta / 720.0
    else:
        coeff = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * k + coeff * (k @ k)
