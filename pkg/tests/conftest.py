import json

import numpy as np
import pytest
from skimage import data as skdata

from textrsir.imagecore import from_uint8, write_image

# offline natural images shipped with scikit-image
_SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "retina")


def natural_images(n, side, offset=(100, 150)):
    """``n`` distinct ``side x side`` natural crops in ``[0, 1]``."""
    out = []
    for i in range(n):
        src = from_uint8(getattr(skdata, _SOURCES[i % len(_SOURCES)])()[..., :3])
        top = min(offset[0] + 37 * (i // len(_SOURCES)), src.shape[0] - side)
        left = min(offset[1] + 29 * (i // len(_SOURCES)), src.shape[1] - side)
        out.append(src[top : top + side, left : left + side].copy())
    return out


def make_toy_dataset(root, n=4, side=64, n_test=1, captions=None):
    """HR TIFFs plus a manifest; the last ``n_test`` records form the test split."""
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, img in enumerate(natural_images(n, side)):
        rid = f"img{i:02d}"
        write_image(root / f"{rid}.tif", img)
        lines.append(json.dumps({
            "id": rid,
            "hr_path": f"{rid}.tif",
            "split": "test" if i >= n - n_test else "train",
            "class_label": "ab"[i % 2],
            "caption": captions[i] if captions else f"scene number {i}",
        }))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def frontend():
    from textrsir.clipfrontend import get_frontend

    return get_frontend()
