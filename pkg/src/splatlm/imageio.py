"""Image file IO: PFM for lossless float interchange, PNG for previews."""

import numpy as np
from PIL import Image


def write_pfm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image as a little-endian RGB PFM."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        # PFM stores rows bottom to top.
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read an RGB PFM file into an (H, W, 3) float64 array."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"PF":
            raise ValueError(f"not a color PFM file: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(w * h * 3 * 4), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w, 3)[::-1].astype(np.float64)


def write_png(path, image: np.ndarray) -> None:
    """Write a float image as 8-bit PNG after clamping to [0, 1] (gamma 1)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0
