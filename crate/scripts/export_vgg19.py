#!/usr/bin/env python3
"""Export torchvision VGG-19 convolution weights to a penh archive.

Usage: python3 scripts/export_vgg19.py OUT.penh

Needs torch and torchvision; the ImageNet weights are downloaded or taken
from the torch hub cache. Pass the result to `penh train --vgg19 OUT.penh`.
"""

import argparse
import hashlib
import json
import struct
import sys

MAGIC = b"PENHARCH"
VERSION = 1


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", help="archive to write")
    parser.add_argument("--untrained", action="store_true", help="random initialization, for format checks offline")
    args = parser.parse_args()

    try:
        import torchvision
    except ImportError:
        print("error: torchvision is not installed", file=sys.stderr)
        return 2

    weights = None if args.untrained else torchvision.models.VGG19_Weights.IMAGENET1K_V1
    model = torchvision.models.vgg19(weights=weights)
    tensors = []
    payload = bytearray()
    for name, value in model.features.state_dict().items():
        data = value.detach().cpu().float().contiguous().numpy().astype("<f4").tobytes()
        tensors.append({
            "name": f"features.{name}",
            "dtype": "f32",
            "shape": list(value.shape),
            "offset": len(payload),
            "nbytes": len(data),
        })
        payload += data

    header = json.dumps({
        "version": VERSION,
        "meta": {"kind": "feature_extractor", "source": f"torchvision vgg19 {weights.name if weights else 'untrained'}"},
        "tensors": tensors,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }, separators=(",", ":")).encode()

    with open(args.out, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        f.write(payload)
    print(f"wrote {len(tensors)} tensors to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
