"""Render a phantom, locate both sacroiliac joints from its label mask, and crop.

Run: python demos/anatomy_crop.py [out_dir]
Writes the radiograph, the label mask, the dilated joint regions and the
anatomy-aware crop as PNGs, and prints the located boxes next to the truth.
"""

import sys
from pathlib import Path

import numpy as np

from sacropipe import anatomy, phantom
from sacropipe.manifest import write_png


def to_u8(a):
    a = a.astype(float)
    return np.uint8(np.rint(255 * (a - a.min()) / max(np.ptp(a), 1e-9)))


def main(out="demo_out"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sample = phantom.generate_phantom(phantom.PhantomSpec(seed=3, grade_left=3, grade_right=1))
    print(f"grades {sample.grades}, mNY label {sample.label}, image {sample.image.shape}")

    regions = anatomy.sij_regions(sample.mask)
    boxes = anatomy.sij_bounding_boxes(regions)
    for side in ("left", "right"):
        found, truth = getattr(boxes, side), getattr(sample.truth_boxes, side)
        print(f"  {side:>5}: located {found.to_list()}  truth {truth.to_list()}  "
              f"IoU {found.iou(truth):.3f}  contains truth {found.contains(truth)}")

    crop = anatomy.crop_to_sij(sample.image, boxes)
    print(f"crop {crop.shape} from union box {anatomy.crop_box(boxes).to_list()}")

    write_png(out / "radiograph.png", sample.image)
    write_png(out / "mask.png", np.uint8(sample.mask * 127))
    write_png(out / "joint_regions.png", np.uint8(regions > 0) * 255)
    write_png(out / "crop.png", to_u8(crop))
    print(f"wrote PNGs to {out}/")


if __name__ == "__main__":
    main(*sys.argv[1:])
