"""Grayscale images as P1 fields, synthetic speckle, deformation rendering and PGM I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.tri import Triangulation

from .mesh import Mesh, OutOfDomainError

BACKGROUND = 255.0
DEFAULT_PADDING = 0.2


class ImageField:
    """Nodal grayscale values on a structured image mesh (P1 interpolation).

    The image domain usually extends ``padding`` beyond the unit square on
    each side.  Gradients are the containing triangle's constant gradient.
    """

    def __init__(self, mesh: Mesh, values: np.ndarray, padding: float = DEFAULT_PADDING):
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.num_vertices,):
            raise ValueError(f"image needs {mesh.num_vertices} nodal values, got {values.shape}")
        self.mesh = mesh
        self.values = values
        self.padding = padding

    def __call__(self, points) -> np.ndarray:
        return self.mesh.evaluate(self.values, points)

    def value_and_gradient(self, points):
        return self.mesh.evaluate_with_gradient(self.values, points)

    def hessian(self, points) -> np.ndarray:
        # piecewise linear: zero inside every triangle
        return np.zeros((np.asarray(points).reshape(-1, 2).shape[0], 2, 2))

    def with_values(self, values) -> "ImageField":
        return ImageField(self.mesh, values, self.padding)

    def quantized(self) -> "ImageField":
        return self.with_values(np.clip(np.rint(self.values), 0, 255))

    def as_array(self) -> np.ndarray:
        """Pixel array with row 0 at the top (largest y)."""
        return self.values.reshape(self.mesh.ny + 1, self.mesh.nx + 1)[::-1]


class AnalyticImage:
    """Image given by closed-form value, gradient and Hessian (for derivative checks)."""

    def __init__(self, fn, grad, hess=None):
        self._fn, self._grad, self._hess = fn, grad, hess

    def __call__(self, points):
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        return self._fn(p[:, 0], p[:, 1])

    def value_and_gradient(self, points):
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        return self._fn(p[:, 0], p[:, 1]), np.column_stack(self._grad(p[:, 0], p[:, 1]))

    def hessian(self, points):
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        if self._hess is None:
            raise NotImplementedError("no Hessian supplied for this image")
        hxx, hxy, hyy = self._hess(p[:, 0], p[:, 1])
        return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)


def sine_image(amplitude: float = 100.0, offset: float = 128.0, freq: float = 1.0, shift=(0.0, 0.0)) -> AnalyticImage:
    """``offset + amplitude sin(2 pi f (x - sx)) sin(2 pi f (y - sy))``."""
    k = 2 * np.pi * freq
    sx, sy = shift

    def fn(x, y):
        return offset + amplitude * np.sin(k * (x - sx)) * np.sin(k * (y - sy))

    def grad(x, y):
        return (amplitude * k * np.cos(k * (x - sx)) * np.sin(k * (y - sy)),
                amplitude * k * np.sin(k * (x - sx)) * np.cos(k * (y - sy)))

    def hess(x, y):
        s = np.sin(k * (x - sx)) * np.sin(k * (y - sy))
        c = np.cos(k * (x - sx)) * np.cos(k * (y - sy))
        return -amplitude * k * k * s, amplitude * k * k * c, -amplitude * k * k * s

    return AnalyticImage(fn, grad, hess)


def image_mesh(pixels_per_unit: int, padding: float = DEFAULT_PADDING) -> Mesh:
    """Structured mesh covering ``[-padding, 1 + padding]^2`` with grid lines on 0 and 1."""
    n = int(pixels_per_unit)
    pad_cells = padding * n
    if abs(pad_cells - round(pad_cells)) > 1e-9:
        raise ValueError(f"padding {padding} is not a whole number of pixels at resolution {n}")
    pad_cells = int(round(pad_cells))
    h = 1.0 / n
    return Mesh(n + 2 * pad_cells, n + 2 * pad_cells, h, -pad_cells * h, -pad_cells * h)


# -- speckle -------------------------------------------------------------------

@dataclass(frozen=True)
class SpeckleParams:
    correlation_length: float = 0.01
    seed: int = 0
    pixels_per_unit: int = 200

    def __post_init__(self):
        if not 0 < self.correlation_length <= 1:
            raise ValueError("speckle correlation length must lie in (0, 1]")


def sample_grf(params: SpeckleParams, mesh: Mesh | None = None) -> np.ndarray:
    """Stationary Gaussian random field on the nodes of a structured mesh.

    Spectral synthesis with density ``(kappa^2 + |xi|^2)^-2``,
    ``kappa = sqrt(8) / ell``, on a periodic grid padded by several
    correlation lengths; scaled to unit pointwise variance.
    """
    if mesh is None:
        mesh = image_mesh(params.pixels_per_unit)
    h = mesh.h
    ell = params.correlation_length
    margin = int(np.ceil(4 * ell / h))
    shape = (_fft_size(mesh.ny + 1 + margin), _fft_size(mesh.nx + 1 + margin))
    kappa = np.sqrt(8.0) / ell
    fy = 2 * np.pi * np.fft.fftfreq(shape[0], d=h)
    fx = 2 * np.pi * np.fft.fftfreq(shape[1], d=h)
    xi2 = fy[:, None] ** 2 + fx[None, :] ** 2
    amp = (kappa**2 + xi2) ** -1.0
    amp /= np.sqrt(np.mean(amp**2))
    rng = np.random.default_rng(params.seed)
    white = rng.standard_normal(shape)
    field = np.fft.ifft2(amp * np.fft.fft2(white)).real
    return field[: mesh.ny + 1, : mesh.nx + 1].ravel().copy()


def _fft_size(n: int) -> int:
    from scipy.fft import next_fast_len

    return next_fast_len(int(n))


def threshold_speckle(i) -> np.ndarray:
    """Map a random field to gray levels: ``255 - 255 tanh(100 i + 1)``, clamped to [0, 255]."""
    i = np.asarray(i, dtype=float)
    return np.clip(255.0 - 255.0 * np.tanh(100.0 * i + 1.0), 0.0, 255.0)


def speckle_image(params: SpeckleParams, padding: float = DEFAULT_PADDING) -> ImageField:
    """Thresholded speckle covering the whole padded image domain."""
    mesh = image_mesh(params.pixels_per_unit, padding)
    return ImageField(mesh, threshold_speckle(sample_grf(params, mesh)), padding)


def reference_image(speckle: ImageField, background: float = BACKGROUND) -> ImageField:
    """Undeformed image: speckle on the unit-square specimen, background elsewhere."""
    x, y = speckle.mesh.vertices.T
    tol = 1e-9
    inside = (x >= -tol) & (x <= 1 + tol) & (y >= -tol) & (y <= 1 + tol)
    return speckle.with_values(np.where(inside, speckle.values, background))


def render_deformed(speckle: ImageField, u, specimen: Mesh | None = None,
                    background: float = BACKGROUND) -> ImageField:
    """Deformed image with ``I1(X + u(X)) = I_speckle(X)`` for material points X.

    Each image node is located in the deformed specimen triangulation; since
    ``u`` is piecewise linear, the map is affine per triangle and its inverse is
    exact.  Nodes outside the deformed footprint get the background value.
    """
    if specimen is None:
        specimen = u.mesh
    disp = np.asarray(getattr(u, "values", u), dtype=float).reshape(-1, 2)
    X = specimen.vertices
    x = X + disp
    tri = specimen.triangles
    d1 = x[tri[:, 1]] - x[tri[:, 0]]
    d2 = x[tri[:, 2]] - x[tri[:, 0]]
    if np.any(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] <= 0):
        raise ValueError("deformation inverts at least one element; cannot render")
    finder = Triangulation(x[:, 0], x[:, 1], tri).get_trifinder()
    nodes = speckle.mesh.vertices
    cells = finder(nodes[:, 0], nodes[:, 1])
    # nodes lying exactly on the footprint boundary can be missed by the
    # finder; probe tiny offsets and keep hits whose barycentrics are ~valid
    eps = 1e-9 * speckle.mesh.h
    for off in ((eps, 0), (-eps, 0), (0, eps), (0, -eps)):
        miss = np.nonzero(cells < 0)[0]
        if miss.size == 0:
            break
        cells[miss] = finder(nodes[miss, 0] + off[0], nodes[miss, 1] + off[1])
    found = cells >= 0
    out = np.full(speckle.mesh.num_vertices, float(background))
    c = cells[found]
    y = nodes[found]
    p0 = x[tri[c, 0]]
    a = d1[c]
    b = d2[c]
    det = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    r = y - p0
    s = (r[:, 0] * b[:, 1] - r[:, 1] * b[:, 0]) / det
    t = (a[:, 0] * r[:, 1] - a[:, 1] * r[:, 0]) / det
    bary = np.clip(np.column_stack([1 - s - t, s, t]), 0.0, 1.0)
    bary /= bary.sum(axis=1, keepdims=True)
    Xp = np.einsum("pa,pad->pd", bary, X[tri[c]])
    out[found] = speckle(Xp)
    return speckle.with_values(out)


def add_brightness_noise(image: ImageField, level: float, seed: int = 0) -> ImageField:
    """Additive Gaussian noise with ``sigma = level * 255``, then clamp to [0, 255]."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0:
        return image.with_values(image.values.copy())
    rng = np.random.default_rng(seed)
    noisy = image.values + rng.normal(0.0, level * 255.0, size=image.values.shape)
    return image.with_values(np.clip(noisy, 0.0, 255.0))


def eval_composed(image, u_at_points: np.ndarray, points: np.ndarray):
    """Value and gradient of ``I(x + u(x))`` at the given points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2) + np.asarray(u_at_points).reshape(-1, 2)
    return image.value_and_gradient(pts)


# -- PGM I/O -------------------------------------------------------------------

def write_pgm(path, image: ImageField, binary: bool = True) -> None:
    """8-bit PGM plus a ``.hdr`` sidecar recording the physical extent."""
    path = Path(path)
    arr = np.clip(np.rint(image.as_array()), 0, 255).astype(np.uint8)
    h, w = arr.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(arr.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(f"P2\n{w} {h}\n255\n")
            for row in arr:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")
    mesh = image.mesh
    header = {"x0": mesh.x0, "y0": mesh.y0, "h": mesh.h, "nx": mesh.nx, "ny": mesh.ny,
              "padding": image.padding}
    with open(path.with_suffix(".hdr"), "w") as fh:
        for k, v in header.items():
            fh.write(f"{k} = {v!r}\n")


def _pgm_tokens(data: bytes):
    """Header tokens of a PGM file and the byte offset after the header."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_pgm(path) -> ImageField:
    """Read a PGM written by :func:`write_pgm` (or any 8-bit P2/P5 with a sidecar)."""
    path = Path(path)
    data = path.read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(data)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError("only 8-bit PGM images are supported")
    if magic == "P5":
        arr = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)
    elif magic == "P2":
        arr = np.array(data[offset:].split(), dtype=int)[: w * h].reshape(h, w)
    else:
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    arr = arr.astype(float) * (255.0 / maxval)
    hdr = _read_header(path.with_suffix(".hdr"))
    mesh = Mesh(int(hdr["nx"]), int(hdr["ny"]), float(hdr["h"]), float(hdr["x0"]), float(hdr["y0"]))
    if (mesh.ny + 1, mesh.nx + 1) != arr.shape:
        raise ValueError(f"{path}: pixel grid {arr.shape} does not match header {mesh.ny + 1}x{mesh.nx + 1}")
    return ImageField(mesh, arr[::-1].ravel().copy(), float(hdr.get("padding", DEFAULT_PADDING)))


def _read_header(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


__all__ = [
    "AnalyticImage", "ImageField", "OutOfDomainError", "SpeckleParams", "add_brightness_noise",
    "eval_composed", "image_mesh", "read_pgm", "reference_image", "render_deformed", "sample_grf",
    "sine_image", "speckle_image", "threshold_speckle", "write_pgm",
]
