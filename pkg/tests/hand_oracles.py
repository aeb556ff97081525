"""Independent reference computations for the fingertip oracle."""
import itertools

import numpy as np


def rodrigues(axis, angles):
    """Batched rotation matrices ``(n, 3, 3)`` about one fixed axis."""
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    a = np.asarray(angles)[:, None, None]
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * (K @ K)


def finger_links(hand, finger):
    """Link indices from the wrist to the finger's tip."""
    tip = hand.sets["fingertips"][finger]
    path = []
    i = tip
    while i is not None:
        path.append(i)
        i = hand.links[i].parent
    return path[::-1]


def grid_tips(hand, finger, points=25):
    """Wrist-frame tip positions over a ``points**4`` joint grid, plus the grid itself."""
    path = finger_links(hand, finger)
    joints = [i for i in path if hand.links[i].joint is not None]
    axes = [np.linspace(hand.links[i].joint.lower, hand.links[i].joint.upper, points) for i in joints]
    grid = np.array(list(itertools.product(*axes)))
    n = len(grid)
    R = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    p = np.zeros((n, 3))
    k = 0
    for i in path[1:]:
        link = hand.links[i]
        p = p + R @ link.offset_translation
        R = R @ link.offset_rotation
        if link.joint is not None:
            R = R @ rodrigues(link.joint.axis, grid[:, k])
            k += 1
    return grid, p


def resolution_bound(hand, finger, points=25):
    """Upper bound on how far the best grid point can sit from an exact solution.

    Moving joint j by at most half a grid step moves the tip by at most
    (lever arm) * step / 2; the lever arm is bounded by the summed lengths
    of the links beyond the joint.
    """
    path = finger_links(hand, finger)
    lengths = [np.linalg.norm(hand.links[i].offset_translation) for i in path]
    bound = 0.0
    for pos, i in enumerate(path):
        j = hand.links[i].joint
        if j is None:
            continue
        lever = sum(lengths[pos + 1:])
        bound += lever * (j.upper - j.lower) / (points - 1) / 2
    return bound
