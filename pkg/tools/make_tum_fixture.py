"""Generate the committed TUM-layout fixture used by the loader tests.

Produces a 5-frame sequence with the standard fr1 directory structure:
separate rgb/ and depth/ listings with realistically jittered timestamps,
a 100 Hz groundtruth.txt, 640x480 8-bit gray PNGs and 16-bit depth PNGs.
Run from the repository root; output is deterministic.
"""

import os
import sys

import cv2
import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cfslam.geometry import PinholeIntrinsics, look_at_pose
from cfslam.synthetic import Plane, Sphere, SyntheticScene, render_synthetic
from cfslam.tum import write_trajectory_file

OUT = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures", "tum_fr1_snippet")
K_RAW = PinholeIntrinsics(517.3, 516.5, 318.6, 255.3, 640, 480)
T0 = 1305031102.175304
DT = 1.0 / 30.0


def main():
    rng = np.random.default_rng(2024)
    scene = SyntheticScene(
        [
            Plane(np.array([0.0, 0.0, 2.1]), np.array([0.08, -0.05, -1.0])),
            Sphere(np.array([0.4, 0.2, 1.8]), 0.5, albedo=0.85),
        ],
        texture_seed=17,
    )
    os.makedirs(os.path.join(OUT, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(OUT, "depth"), exist_ok=True)

    rgb_lines = [
        "# color images",
        "# file: 'rgbd_dataset_freiburg1_snippet.bag'",
        "# timestamp filename",
    ]
    depth_lines = [
        "# depth maps",
        "# file: 'rgbd_dataset_freiburg1_snippet.bag'",
        "# timestamp filename",
    ]
    gt = []
    poses = []
    for k in range(5):
        eye = np.array([0.04 * k, 0.01 * k, -0.05])
        poses.append(look_at_pose(eye, np.array([0.2, 0.0, 2.0])))

    for k, pose in enumerate(poses):
        ts_rgb = T0 + k * DT + float(rng.uniform(-0.002, 0.002))
        ts_depth = ts_rgb + float(rng.uniform(0.004, 0.012))
        image, depth = render_synthetic(scene, pose, K_RAW)
        noisy = np.clip(image + rng.normal(0, 0.004, image.shape), 0, 1)
        rgb_name = f"{ts_rgb:.6f}.png"
        depth_name = f"{ts_depth:.6f}.png"
        cv2.imwrite(os.path.join(OUT, "rgb", rgb_name), (noisy * 255).astype(np.uint8))
        cv2.imwrite(
            os.path.join(OUT, "depth", depth_name),
            np.clip(depth * 5000.0, 0, 65535).astype(np.uint16),
        )
        rgb_lines.append(f"{ts_rgb:.6f} rgb/{rgb_name}")
        depth_lines.append(f"{ts_depth:.6f} depth/{depth_name}")

    # 100 Hz mocap-style ground truth spanning the sequence
    t = T0 - 0.05
    while t < T0 + 5 * DT + 0.05:
        f = np.clip((t - T0) / (4 * DT), 0.0, 1.0)
        idx = min(int(f * 4), 3)
        alpha = f * 4 - idx
        interp = poses[idx].t * (1 - alpha) + poses[idx + 1].t * alpha
        gt.append((t, look_at_pose(interp, np.array([0.2, 0.0, 2.0]))))
        t += 0.01

    with open(os.path.join(OUT, "rgb.txt"), "w") as f:
        f.write("\n".join(rgb_lines) + "\n")
    with open(os.path.join(OUT, "depth.txt"), "w") as f:
        f.write("\n".join(depth_lines) + "\n")
    write_trajectory_file(os.path.join(OUT, "groundtruth.txt"), gt)
    print(f"fixture written to {OUT}")


if __name__ == "__main__":
    main()
