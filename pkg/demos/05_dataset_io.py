"""Dataset and decoder file interop.

Renders a short synthetic sequence into a TUM-layout directory (16-bit depth
PNGs at 5000 units/m, rgb/depth/groundtruth listings), loads it back through
the dataset loader, and round-trips a decoder through its binary format. Run:

    python3 demos/05_dataset_io.py
"""

import os
import tempfile

import numpy as np

from cfslam.decoder import build_synthetic_decoder, load_decoder, save_decoder
from cfslam.synthetic import (
    DEFAULT_INTRINSICS,
    Plane,
    SyntheticScene,
    generate_sequence,
    orbit_trajectory,
)
from cfslam.tum import load_tum_sequence, write_tum_sequence

root = tempfile.mkdtemp(prefix="cfslam_io_")

scene = SyntheticScene(
    [Plane(np.array([0, 0, 2.1]), np.array([0.05, -0.03, -1.0]))],
    texture_seed=7,
    trajectory=orbit_trajectory(np.array([0.0, 0.0, 2.0]), 2.0, 8, span_degrees=20),
)
frames = generate_sequence(scene, DEFAULT_INTRINSICS, noise_sigma=0.004)

dataset = os.path.join(root, "dataset")
write_tum_sequence(dataset, frames, DEFAULT_INTRINSICS)
print(f"wrote {len(frames)} frames to {dataset}")
print("layout:", sorted(os.listdir(dataset)))

seq = load_tum_sequence(dataset, intrinsics=DEFAULT_INTRINSICS,
                        working_size=(DEFAULT_INTRINSICS.width, DEFAULT_INTRINSICS.height))
print(f"loaded {len(seq)} associated frames, {len(seq.groundtruth)} ground-truth poses")
img = seq.read_image(0)
depth = seq.read_depth(0)
print(f"frame 0: image {img.shape} in [{img.min():.2f}, {img.max():.2f}], "
      f"depth median {np.median(depth[depth > 0]):.3f} m")
print(f"reload error vs render: image {np.abs(img - frames[0].image).max():.5f} "
      f"(8-bit), depth {np.abs(depth - frames[0].depth).max()*1000:.2f} mm (16-bit)")

# decoder binary format
dec = build_synthetic_decoder(64, 48, 8, d0=2.0)
path = os.path.join(root, "decoder.cfdc")
save_decoder(dec, path)
loaded = load_decoder(path)
print(f"decoder file: {os.path.getsize(path)} bytes "
      f"(32-byte header + f32 zero-depth + f32 basis)")
save_decoder(loaded, path + ".again")
same = open(path, "rb").read() == open(path + ".again", "rb").read()
print(f"save(load(file)) byte-identical: {same}")
