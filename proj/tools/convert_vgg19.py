#!/usr/bin/env python3
"""Dump the ImageNet VGG-19 convolution weights in the layout the C++
feature extractor reads.

File layout (little endian):
    b"VGG19F32"
    per conv layer, in network order (16 layers):
        uint32 out_channels, uint32 in_channels
        float32 weight[out][in][3][3]
        float32 bias[out]

Usage: python3 tools/convert_vgg19.py vgg19.bin
Needs torch and torchvision; the weights are downloaded on first use.
"""

import argparse
import struct
import sys


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("out", help="output file")
    args = parser.parse_args()

    import numpy as np
    import torch
    from torchvision.models import VGG19_Weights, vgg19

    model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).eval()
    convs = [m for m in model.features if isinstance(m, torch.nn.Conv2d)]
    if len(convs) != 16:
        print(f"expected 16 conv layers, found {len(convs)}", file=sys.stderr)
        return 1

    with open(args.out, "wb") as f:
        f.write(b"VGG19F32")
        for conv in convs:
            w = conv.weight.detach().cpu().numpy().astype("<f4")
            b = conv.bias.detach().cpu().numpy().astype("<f4")
            f.write(struct.pack("<II", w.shape[0], w.shape[1]))
            f.write(np.ascontiguousarray(w).tobytes())
            f.write(b.tobytes())
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
