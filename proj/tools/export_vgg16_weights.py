#!/usr/bin/env python3
"""Convert torchvision's ImageNet VGG-16 weights into a styleshift backbone file.

Usage: export_vgg16_weights.py OUT [--state-dict PATH]

Without --state-dict the weights come from torchvision (which may download them). The
backbone applies ImageNet mean/std normalisation itself, so the weights are stored as is.
"""
import argparse
import json
import struct
import sys

import numpy as np

# torchvision vgg16().features indices of the 13 convolutions, in stage order
CONV_INDICES = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28]
CONVS_PER_STAGE = [2, 2, 3, 3, 3]


def layer_names():
    for stage, count in enumerate(CONVS_PER_STAGE, start=1):
        for j in range(1, count + 1):
            yield f"conv{stage}_{j}"


def load_state_dict(path):
    import torch

    if path:
        return torch.load(path, map_location="cpu")
    from torchvision.models import VGG16_Weights, vgg16

    return vgg16(weights=VGG16_Weights.IMAGENET1K_V1).state_dict()


def write_checkpoint(out, tensors, meta):
    directory, offset = [], 0
    for name, array in tensors:
        directory.append({"name": name, "shape": list(array.shape), "dtype": "f32", "offset": offset, "count": int(array.size)})
        offset += array.size * 4
    header = json.dumps({"format": "styleshift-checkpoint", "version": 1, "meta": meta, "tensors": directory}).encode()
    with open(out, "wb") as f:
        f.write(b"SSHCKPT1")
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for _, array in tensors:
            f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def main(argv):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out")
    parser.add_argument("--state-dict", help="a saved torchvision vgg16 state_dict instead of downloading")
    args = parser.parse_args(argv)

    state = load_state_dict(args.state_dict)
    tensors = []
    for name, index in zip(layer_names(), CONV_INDICES):
        tensors.append((f"{name}.weight", state[f"features.{index}.weight"].numpy()))
        tensors.append((f"{name}.bias", state[f"features.{index}.bias"].numpy()))
    widths = [int(state[f"features.{CONV_INDICES[i]}.weight"].shape[0]) for i in (0, 2, 4, 7, 10)]
    meta = {"kind": "backbone", "arch": "vgg16", "widths": widths, "identifier": "vgg16-imagenet-torchvision"}
    write_checkpoint(args.out, tensors, meta)
    print(f"wrote {len(tensors)} tensors, widths {widths} -> {args.out}")


if __name__ == "__main__":
    main(sys.argv[1:])
