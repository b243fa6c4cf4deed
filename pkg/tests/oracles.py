"""Independent reference implementations used as test oracles.

Nothing here imports the code under test's numerics.
"""
import math

import numpy as np


def trans_x(a):
    T = np.eye(4)
    T[0, 3] = a
    return T


def trans_z(d):
    T = np.eye(4)
    T[2, 3] = d
    return T


def rot_x(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[1, 0, 0, 0], [0, c, -s, 0], [0, s, c, 0], [0, 0, 0, 1.0]])


def rot_z(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])


def chain_suction(q, l2, l5):
    """Suction & Irrigation chain written out frame by frame."""
    q1, q2, q3, q5, q6 = q
    hp = math.pi / 2
    return (
        rot_x(hp) @ rot_z(q1 + hp)
        @ rot_x(-hp) @ rot_z(q2 - hp)
        @ rot_x(hp) @ trans_z(q3 - l2)
        @ rot_x(-hp) @ rot_z(q5 - hp)
        @ trans_x(l5) @ rot_x(-hp) @ rot_z(q6 - hp)
    )


def chain_lnd(q, l1, l3, l4):
    q1, q2, q3, q4, q5, q6 = q
    hp = math.pi / 2
    return (
        rot_x(hp) @ rot_z(q1 + hp)
        @ rot_x(-hp) @ rot_z(q2 - hp)
        @ rot_x(hp) @ trans_z(q3 - l1)
        @ trans_z(l3) @ rot_z(q4)
        @ rot_x(-hp) @ rot_z(q5 - hp)
        @ trans_x(l4) @ rot_x(-hp) @ rot_z(q6 - hp)
    )


def suction_position_closed_form(q, l2, l5):
    """Tip position expanded by hand from the chain above."""
    q1, q2, q3, q5, q6 = q
    radial = l5 * math.cos(q2 + q5) + (q3 - l2) * math.cos(q2)
    return np.array(
        [
            radial * math.sin(q1),
            -l5 * math.sin(q2 + q5) - (q3 - l2) * math.sin(q2),
            -radial * math.cos(q1),
        ]
    )


def central_difference(f, x, h=1e-5):
    """Gradient of scalar f at flat array x by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
