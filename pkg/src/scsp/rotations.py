"""Quaternion helpers. Quaternions are stored (w, x, y, z); all functions
accept a trailing axis of size 4 (or 3 for vectors) and broadcast over
leading batch axes."""
import numpy as np


def quat_identity():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_exp(rotvec):
    """Unit quaternion of a rotation vector (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x with a series fallback near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * rotvec], axis=-1)


def quat_log(q):
    """Rotation vector of a unit quaternion, taking the short way round."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    w = np.clip(q[..., :1], -1.0, 1.0)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    k = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, s))
    return k * v


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return quat_exp(axis * angle)


def quat_from_euler(roll, pitch, yaw):
    """Intrinsic z-y-x (yaw, pitch, roll) convention."""
    qz = quat_from_axis_angle([0, 0, 1], yaw)
    qy = quat_from_axis_angle([0, 1, 0], pitch)
    qx = quat_from_axis_angle([1, 0, 0], roll)
    return quat_mul(qz, quat_mul(qy, qx))


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), v)


def integrate_quat(q, omega, h):
    """psi_{k+1} = exp(0.5 * omega * h) (x) psi_k with a world-frame omega."""
    return quat_normalize(quat_mul(quat_exp(np.asarray(omega) * h), q))


def integrate_quat_jacobian(q, omega, h):
    """d integrate_quat / d omega, shape (..., 4, 3), including renormalization.

    Computed analytically from the half-angle map; used by the surrogate model
    gradient."""
    omega = np.asarray(omega, dtype=float)
    r = omega * h
    theta = np.linalg.norm(r, axis=-1)
    # exp map e(r) = [cos(t/2), s(t) r] with s = sin(t/2)/t
    if np.ndim(theta) == 0:
        return _integrate_quat_jacobian_single(np.asarray(q, dtype=float), r, float(theta), h)
    out = np.empty(omega.shape[:-1] + (4, 3))
    for idx in np.ndindex(omega.shape[:-1]):
        out[idx] = _integrate_quat_jacobian_single(np.asarray(q)[idx], r[idx], float(theta[idx]), h)
    return out


def _integrate_quat_jacobian_single(q, r, theta, h):
    if theta < 1e-6:
        s = 0.5 - theta ** 2 / 48.0
        ds = -1.0 / 24.0  # ds/dt divided by t
        dc = -0.25        # d cos(t/2)/dt divided by t  (-sin(t/2)/(2t))
    else:
        s = np.sin(0.5 * theta) / theta
        ds = (0.5 * np.cos(0.5 * theta) * theta - np.sin(0.5 * theta)) / theta ** 3
        dc = -0.5 * np.sin(0.5 * theta) / theta
    # de/dr: rows w, x, y, z
    de = np.zeros((4, 3))
    de[0] = dc * r
    de[1:] = s * np.eye(3) + ds * np.outer(r, r)
    e = np.concatenate([[np.cos(0.5 * theta)], s * r])
    # left multiplication by e: p = e (x) q is linear in e
    w, x, y, z = q
    Lq = np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])
    p = Lq @ e
    dp = Lq @ de * h
    n = np.linalg.norm(p)
    pn = p / n
    return (np.eye(4) - np.outer(pn, pn)) @ dp / n
