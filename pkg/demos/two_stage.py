"""Single-pass vs two-stage inference on pairs rotated beyond the training range.

Usage: python3 demos/two_stage.py MODEL.ckpt [degrees] [pairs]

The checkpoint should come from a 64x64 run (for example
``models/constrained.ckpt`` written by ``denseprob ablate``).
"""

import sys

import numpy as np

from denseprob import metrics, storage
from denseprob.datagen import homography_from_corners, random_texture, render_homography_pair
from denseprob.geometry import two_stage_inference


def rotated_pair(rng, degrees, size=64):
    c = np.array([[0, 0], [size - 1, 0], [size - 1, size - 1], [0, size - 1]], dtype=float)
    mid = 0.5 * (size - 1)
    a = np.deg2rad(degrees) * rng.choice([-1, 1])
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    H = homography_from_corners(c, (c - mid) @ rot.T + mid)
    return render_homography_pair(random_texture(rng, 3, flat_fraction=0.0), H, (size, size))


def main():
    net = storage.load_checkpoint(sys.argv[1])
    degrees = float(sys.argv[2]) if len(sys.argv) > 2 else 25.0
    n = int(sys.argv[3]) if len(sys.argv) > 3 else 10
    rng = np.random.default_rng(0)
    for i in range(n):
        t = rotated_pair(rng, degrees)
        single = net.predict(t.ref[None], t.query[None]).flow[0]
        staged = two_stage_inference(net, t.ref, t.query)
        print(f"pair {i}: single {metrics.aepe(single, t.flow, t.valid):.2f} px, "
              f"two-stage {metrics.aepe(staged.flow, t.flow, t.valid):.2f} px"
              f"{' (fallback)' if staged.fallback else f', inliers {staged.inlier_ratio:.2f}'}")


if __name__ == "__main__":
    main()
