#!/usr/bin/env python3
"""Slice AMOS-style CT volumes into a raw manifest for `semdiff ingest`.

Writes <out>/images/<stem>.png (uint16, HU + 32768), <out>/masks/<stem>.png
(uint8 source labels) and <out>/manifest.jsonl. Only slices with at least one
labelled voxel are kept. Subjects are split by a seeded shuffle.

Requires numpy, nibabel and Pillow.
"""
import argparse
import json
import random
from pathlib import Path

import nibabel as nib
import numpy as np
from PIL import Image

HU_OFFSET = 32768


def volumes(images_dir: Path, labels_dir: Path, max_id: int):
    for image_path in sorted(images_dir.glob("*.nii.gz")):
        subject = image_path.name[: -len(".nii.gz")]
        digits = "".join(ch for ch in subject if ch.isdigit())
        if max_id and digits and int(digits) > max_id:
            continue  # MRI cases share the directory in AMOS22
        label_path = labels_dir / image_path.name
        if label_path.exists():
            yield subject, image_path, label_path


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--images", type=Path, required=True, help="directory of CT volumes (*.nii.gz)")
    ap.add_argument("--labels", type=Path, required=True, help="directory of label volumes with matching names")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-id", type=int, default=500, help="skip cases with a larger numeric id (0 keeps all)")
    args = ap.parse_args()

    cases = list(volumes(args.images, args.labels, args.max_id))
    if not cases:
        raise SystemExit("no image/label pairs found")
    order = [c[0] for c in cases]
    random.Random(args.seed).shuffle(order)
    n_test = max(1, round(args.test_fraction * len(order)))
    test = set(order[:n_test])

    (args.out / "images").mkdir(parents=True, exist_ok=True)
    (args.out / "masks").mkdir(parents=True, exist_ok=True)
    written = 0
    with open(args.out / "manifest.jsonl", "w") as manifest:
        for subject, image_path, label_path in cases:
            ct = nib.as_closest_canonical(nib.load(str(image_path)))
            seg = nib.as_closest_canonical(nib.load(str(label_path)))
            hu = np.asarray(ct.dataobj, dtype=np.float32)
            lab = np.asarray(seg.dataobj).astype(np.int64)
            if hu.shape != lab.shape:
                raise SystemExit(f"{subject}: image {hu.shape} and label {lab.shape} differ")
            for z in range(hu.shape[2]):
                labels = lab[:, :, z]
                if not labels.any():
                    continue
                if labels.max() > 255:
                    raise SystemExit(f"{subject}: label {labels.max()} does not fit in 8 bits")
                # radiological display orientation
                image = np.rot90(hu[:, :, z])
                mask = np.rot90(labels)
                stem = f"{subject}_{z:04d}"
                raw = np.clip(np.rint(image + HU_OFFSET), 0, 65535).astype(np.uint16)
                Image.fromarray(raw).save(args.out / "images" / f"{stem}.png")
                Image.fromarray(mask.astype(np.uint8)).save(args.out / "masks" / f"{stem}.png")
                manifest.write(json.dumps({
                    "subject_id": subject,
                    "slice_index": z,
                    "image_path": f"images/{stem}.png",
                    "mask_path": f"masks/{stem}.png",
                    "split": "test" if subject in test else "train",
                    "prewindowed": False,
                }) + "\n")
                written += 1
    print(f"wrote {written} slices from {len(cases)} subjects ({len(test)} test)")


if __name__ == "__main__":
    main()
