"""Regenerate the bundled model files under src/teledex/models/.

Geometry is a plausible stand-in (G1-like body proportions, Wuji-like
finger lengths), not calibrated to real hardware.  Frames: x forward,
y left, z up for the body; for the hand, x toward the fingers, y toward the
thumb, z out of the back of the hand.
"""
import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "teledex" / "models"
X, Y, Z = [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]
NEG_Z = [0.0, 0.0, -1.0]


def rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Body joints keep G1-like centres but are clipped to this half-width: wider
# windows let orientation errors approach pi, where the objective has
# spurious minima for a local solver started at the range midpoint.
BODY_HALF_RANGE = 1.4


def capped(lo, hi, half=BODY_HALF_RANGE):
    mid = 0.5 * (lo + hi)
    h = min(0.5 * (hi - lo), half)
    return round(mid - h, 4), round(mid + h, 4)


def link(name, parent, t, axis=None, lower=None, upper=None, rot=None, cap=False):
    rot = np.eye(3) if rot is None else rot
    if cap and axis is not None:
        lower, upper = capped(lower, upper)
    return {
        "name": name,
        "parent": parent,
        "offset": {"rotation": [float(round(v, 15)) for v in rot.ravel()], "translation": [float(v) for v in t]},
        "joint": None if axis is None else {"axis": axis, "lower": lower, "upper": upper},
    }


def body():
    links = [link("pelvis", None, [0.0, 0.0, 0.793])]
    for side, s in (("left", 1.0), ("right", -1.0)):
        # roll/yaw limits mirror across the sagittal plane
        def m(lo, hi):
            return (lo, hi) if s > 0 else (-hi, -lo)
        p = f"{side}_"
        links += [
            link(p + "hip_pitch", "pelvis", [0.0, s * 0.0875, -0.1742], Y, -2.53, 2.88, cap=True),
            link(p + "hip_roll", p + "hip_pitch", [0.0, s * 0.052, -0.030], X, *m(-0.52, 2.97), cap=True),
            link(p + "hip_yaw", p + "hip_roll", [0.025, 0.0, -0.124], Z, *m(-2.76, 2.76), cap=True),
            link(p + "knee", p + "hip_yaw", [-0.078, s * 0.002, -0.177], Y, -0.087, 2.88, cap=True),
            link(p + "ankle_pitch", p + "knee", [0.0, -s * 0.009, -0.300], Y, -0.87, 0.52, cap=True),
            link(p + "ankle_roll", p + "ankle_pitch", [0.0, 0.0, -0.017], X, -0.26, 0.26, cap=True),
        ]
    links += [
        link("waist_yaw", "pelvis", [0.0, 0.0, 0.0], Z, -2.62, 2.62, cap=True),
        link("waist_roll", "waist_yaw", [-0.004, 0.0, 0.044], X, -0.52, 0.52, cap=True),
        link("torso", "waist_roll", [0.0, 0.0, 0.0], Y, -0.52, 0.52, cap=True),
        link("head", "torso", [0.0, 0.0, 0.45]),
    ]
    for side, s in (("left", 1.0), ("right", -1.0)):
        def m(lo, hi):
            return (lo, hi) if s > 0 else (-hi, -lo)
        p = f"{side}_"
        links += [
            link(p + "shoulder_pitch", "torso", [0.004, s * 0.100, 0.290], Y, -3.09, 2.67, cap=True),
            link(p + "shoulder_roll", p + "shoulder_pitch", [0.0, s * 0.038, -0.014], X, *m(-1.59, 2.25), cap=True),
            link(p + "shoulder_yaw", p + "shoulder_roll", [0.0, s * 0.006, -0.100], Z, *m(-2.62, 2.62), cap=True),
            link(p + "elbow", p + "shoulder_yaw", [0.016, 0.0, -0.080], Y, -1.05, 2.09, cap=True),
            link(p + "wrist_roll", p + "elbow", [0.100, s * 0.002, -0.010], X, *m(-1.97, 1.97), cap=True),
            link(p + "wrist_pitch", p + "wrist_roll", [0.038, 0.0, 0.0], Y, -1.61, 1.61, cap=True),
            link(p + "wrist_yaw", p + "wrist_pitch", [0.046, 0.0, 0.0], Z, *m(-1.61, 1.61), cap=True),
        ]
    names = [l["name"] for l in links]
    sets = {
        "pelvis": ["pelvis"],
        "end_effectors": ["left_wrist_yaw", "right_wrist_yaw", "left_ankle_roll", "right_ankle_roll", "head"],
        "feet": ["left_ankle_roll", "right_ankle_roll"],
        "body": names,
    }
    return {
        "name": "g1body",
        "description": "29-DoF humanoid stand-in: 2x6 leg, 3 waist, 2x7 arm revolute joints; G1-like limit "
                       "centres clipped to a 2.8 rad teleoperation window; "
                       "thigh 0.30 m, shin 0.30 m, upper arm 0.18 m, forearm 0.18 m. Not calibrated.",
        "links": links,
        "sets": sets,
    }


FINGERS = ("thumb", "index", "middle", "ring", "little")


def hand():
    links = [link("wrist", None, [0.0, 0.0, 0.0])]
    # thumb: roll about its own long axis, then three flexion joints that curl toward the fingers
    links += [
        link("thumb_rot", "wrist", [0.030, 0.025, -0.015], X, 0.0, 1.6, rot=rz(0.8)),
        link("thumb_mcp", "thumb_rot", [0.040, 0.0, 0.0], NEG_Z, -0.3, 1.0),
        link("thumb_pip", "thumb_mcp", [0.040, 0.0, 0.0], NEG_Z, 0.0, 1.2),
        link("thumb_dip", "thumb_pip", [0.032, 0.0, 0.0], NEG_Z, -0.35, 1.3),
        link("thumb_tip", "thumb_dip", [0.028, 0.0, 0.0]),
    ]
    bases = {"index": (0.090, 0.025), "middle": (0.095, 0.0), "ring": (0.090, -0.022), "little": (0.080, -0.042)}
    lengths = {"index": (0.045, 0.027, 0.022), "middle": (0.048, 0.030, 0.023),
               "ring": (0.045, 0.028, 0.022), "little": (0.036, 0.022, 0.020)}
    for f in FINGERS[1:]:
        bx, by = bases[f]
        l1, l2, l3 = lengths[f]
        # positive flexion about +y curls the finger toward the palm (-z)
        links += [
            link(f + "_abd", "wrist", [bx, by, 0.0], Z, -0.35, 0.35),
            link(f + "_mcp", f + "_abd", [0.0, 0.0, 0.0], Y, -0.2, 1.6),
            link(f + "_pip", f + "_mcp", [l1, 0.0, 0.0], Y, 0.0, 1.75),
            link(f + "_dip", f + "_pip", [l2, 0.0, 0.0], Y, -0.35, 1.5),
            link(f + "_tip", f + "_dip", [l3, 0.0, 0.0]),
        ]
    sets = {"fingertips": [f + "_tip" for f in FINGERS]}
    for f in FINGERS:
        sets[f] = [l["name"] for l in links if l["name"].startswith(f + "_") and l["joint"] is not None]
    return {
        "name": "wuji20",
        "description": "20-DoF five-finger hand stand-in, 4 revolute joints per finger (thumb->little, "
                       "proximal->distal); finger lengths 0.08-0.10 m. Not calibrated.",
        "links": links,
        "sets": sets,
    }


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for doc in (body(), hand()):
        (OUT / f"{doc['name']}.model.json").write_text(json.dumps(doc, indent=1) + "\n")
        print("wrote", doc["name"])
