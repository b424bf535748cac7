"""Five hand-built scenes with a hand-traced PR curve.

All counted cars are easy (50 px, unoccluded, untruncated), so the same AP
holds at every difficulty, and boxes share z and height, so BEV and 3D IoU
coincide.

Detections pooled by score, with their fate:

    0.95  scene 0  exact on g0                 TP
    0.90  scene 0  g0 shifted 0.1 m (dup)      FP (g0 already taken)
    0.88  scene 1  exact on a DontCare-level   dropped (occlusion 3)
    0.85  scene 1  exact on g2                 TP
    0.80  scene 2  exact on g3                 TP
    0.70  scene 2  g4 shifted 1.0 m, IoU 0.6   FP
    0.60  scene 3  exact on g5                 TP
    0.50  scene 4  no ground truth             FP

Six counted ground truths (g0..g5); g1 and g4 are never found.

PR points: (1, 1/6) (1/2, 1/6) (2/3, 2/6) (3/4, 3/6) (3/5, 3/6) (2/3, 4/6) (4/7, 4/6)
Interpolated precision: 1 up to r = 1/6, 3/4 up to 1/2, 2/3 up to 2/3, then 0.

R40: 6 samples at 1, 14 at 3/4, 6 at 2/3  -> 20.5 / 40 = 41/80
R11: r = 0, 0.1 at 1; 0.2..0.5 at 3/4; 0.6 at 2/3 -> (17/3) / 11 = 17/33
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from sessd.detections import Detections
from sessd.geom import Box3D
from sessd.scene import ObjectLabel

EXPECTED_R40 = Fraction(41, 80)
EXPECTED_R11 = Fraction(17, 33)
Z = -0.98


def car(x, y=0.0, occ=0):
    return ObjectLabel("Car", Box3D(x, y, Z, 1.6, 4.0, 1.5, 0.0), 0.0, occ, 50.0)


def logit(p):
    return math.log(p / (1 - p))


def _dets(rows):
    if not rows:
        return Detections.empty()
    boxes = np.array([[x, y, Z, 1.6, 4.0, 1.5, 0.0] for x, y, _ in rows])
    return Detections(boxes, [logit(s) for *_, s in rows])


def hand_fixture():
    gts = [
        [car(20, 0), car(20, 10)],  # g0, g1
        [car(20, 0), car(30, -6, occ=3)],  # g2 + a don't-care object
        [car(15, 5), car(15, -5)],  # g3, g4
        [car(25, 3)],  # g5
        [],
    ]
    preds = [
        _dets([(20, 0, 0.95), (20.1, 0, 0.90)]),
        _dets([(30, -6, 0.88), (20, 0, 0.85)]),
        _dets([(15, 5, 0.80), (16, -5, 0.70)]),
        _dets([(25, 3, 0.60)]),
        _dets([(12, 8, 0.50)]),
    ]
    return preds, gts
