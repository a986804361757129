#!/usr/bin/env python3
"""Offline converter stub: pack a reflectance cube into an HSIC container.

The training tools only read HSIC, so external scenes have to be converted
once, offline. This script covers the common case where the scene is already
available as numpy arrays:

  cube.npy         float array, shape (H, W, C), reflectance
  labels.npy       integer array, shape (H, W); 0 = unlabeled, 1..K = classes
  wavelengths.npy  float array, shape (C,), band centers in nm, increasing

For MATLAB distributions, load and re-save first, e.g.:

  from scipy.io import loadmat
  import numpy as np
  np.save("cube.npy", loadmat("scene.mat")["data"])
  np.save("labels.npy", loadmat("scene_gt.mat")["groundtruth"])
  # band centers come from the sensor documentation
  np.save("wavelengths.npy", np.linspace(400.0, 2500.0, cube.shape[2]))

Usage:
  hsic_convert.py cube.npy labels.npy wavelengths.npy out.hsic [name1 name2 ...]
"""

import struct
import sys

import numpy as np


def write_hsic(path, cube, labels, wavelengths, class_names=None):
    cube = np.asarray(cube, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint16)
    wavelengths = np.asarray(wavelengths, dtype=np.float32)

    if cube.ndim != 3:
        raise ValueError(f"cube must be (H, W, C), got {cube.shape}")
    h, w, c = cube.shape
    if labels.shape != (h, w):
        raise ValueError(f"labels must be ({h}, {w}), got {labels.shape}")
    if wavelengths.shape != (c,):
        raise ValueError(f"wavelengths must be ({c},), got {wavelengths.shape}")
    if not np.all(np.diff(wavelengths) > 0):
        raise ValueError("wavelengths must be strictly increasing")

    k = int(labels.max())
    if class_names is None:
        class_names = [f"class_{i + 1}" for i in range(k)]
    if len(class_names) != k:
        raise ValueError(f"need {k} class names, got {len(class_names)}")

    with open(path, "wb") as out:
        out.write(b"HSIC")
        out.write(struct.pack("<HIII", 1, h, w, c))
        out.write(wavelengths.tobytes())
        # band-interleaved by pixel: (H*W, C) rows
        out.write(np.ascontiguousarray(cube.reshape(h * w, c)).tobytes())
        out.write(np.ascontiguousarray(labels.reshape(h * w)).tobytes())
        out.write(struct.pack("<H", k))
        for name in class_names:
            raw = name.encode("utf-8")
            out.write(struct.pack("<H", len(raw)))
            out.write(raw)


def main(argv):
    if len(argv) < 5:
        print(__doc__)
        return 2
    cube = np.load(argv[1])
    labels = np.load(argv[2])
    wavelengths = np.load(argv[3])
    names = argv[5:] or None
    write_hsic(argv[4], cube, labels, wavelengths, names)
    print(f"wrote {argv[4]}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
