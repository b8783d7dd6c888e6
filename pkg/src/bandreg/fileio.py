"""Binary containers, PGM images, weights files and dataset directories.

Every little-endian container is ``magic(4) | version u32 | payload header |
payload | crc32 u32`` where the CRC covers everything before it. Each writer
also drops a JSON sidecar (``<file>.json``) that mirrors the header.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .freq import BandSpec, FreqVectorField
from .shooting import DeformationField

VERSION = 1


class FormatError(ValueError):
    pass


def _write(path, blob: bytes, sidecar: dict | None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


class _Reader:
    def __init__(self, path, magic: bytes):
        self.path = Path(path)
        raw = self.path.read_bytes()
        if len(raw) < 12:
            raise FormatError(f"{self.path}: file too short for a container")
        if raw[:4] != magic:
            raise FormatError(f"{self.path}: bad magic {raw[:4]!r}, expected {magic!r}")
        self.body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        self.pos = 4
        version = self.u32()
        if version != VERSION:
            raise FormatError(f"{self.path}: unsupported version {version}")
        self._crc = crc

    def u32(self, n: int = 1):
        end = self.pos + 4 * n
        if end > len(self.body):
            raise FormatError(f"{self.path}: truncated header")
        vals = struct.unpack(f"<{n}I", self.body[self.pos: end])
        self.pos = end
        return vals[0] if n == 1 else vals

    def f64(self, count: int) -> np.ndarray:
        end = self.pos + 8 * count
        if end != len(self.body):
            # a short file shifts the CRC into the payload, so report the size problem first
            raise FormatError(
                f"{self.path}: payload has {len(self.body) - self.pos} bytes, expected {8 * count}"
            )
        if zlib.crc32(self.body) != self._crc:
            raise FormatError(f"{self.path}: checksum mismatch")
        out = np.frombuffer(self.body, dtype="<f8", count=count, offset=self.pos)
        self.pos = end
        return out.astype(np.float64)


# --- band fields --------------------------------------------------------------

def save_freq_field(path, v: FreqVectorField):
    spec = v.spec
    if v.batch_shape:
        raise ValueError("only unbatched fields can be saved")
    head = b"BLFF" + struct.pack(f"<{2 + 2 * spec.dim}I", VERSION, spec.dim,
                                 *(spec.band,) * spec.dim, *spec.grid)
    inter = np.stack([v.coeffs.real, v.coeffs.imag], axis=-1).astype("<f8")
    sidecar = {"magic": "BLFF", "version": VERSION, "dim": spec.dim,
               "band": [spec.band] * spec.dim, "grid": list(spec.grid),
               "components": spec.dim, "layout": "component, centered row-major, (re, im)"}
    _write(path, head + inter.tobytes(), sidecar)


def load_freq_field(path) -> FreqVectorField:
    r = _Reader(path, b"BLFF")
    d = r.u32()
    if d not in (2, 3):
        raise FormatError(f"{path}: bad dimension {d}")
    band = r.u32(d)
    grid = r.u32(d)
    if len(set(band)) != 1:
        raise FormatError(f"{path}: anisotropic bands are not supported")
    spec = BandSpec(d, band[0], grid)
    shape = (d,) + spec.shape + (2,)
    vals = r.f64(int(np.prod(shape))).reshape(shape)
    return FreqVectorField(spec, vals[..., 0] + 1j * vals[..., 1])


# --- deformations and images --------------------------------------------------

def save_deformation(path, psi: DeformationField):
    u = np.asarray(psi.displacement, dtype="<f8")
    d, grid = psi.dim, tuple(psi.grid)
    if u.shape != (d,) + grid:
        raise ValueError("only unbatched deformations can be saved")
    head = b"SPDF" + struct.pack(f"<{2 + 2 * d}I", VERSION, d, *grid, *grid)
    _write(path, head + u.tobytes(), {"magic": "SPDF", "version": VERSION, "dim": d, "grid": list(grid)})


def load_deformation(path) -> DeformationField:
    r = _Reader(path, b"SPDF")
    d = r.u32()
    if d not in (2, 3):
        raise FormatError(f"{path}: bad dimension {d}")
    r.u32(d)
    grid = r.u32(d)
    return DeformationField(r.f64(d * int(np.prod(grid))).reshape((d,) + tuple(grid)), d)


def save_spim(path, img: np.ndarray):
    img = np.asarray(img, dtype="<f8")
    if img.ndim not in (2, 3):
        raise ValueError(f"images must be 2-D or 3-D, got shape {img.shape}")
    head = b"SPIM" + struct.pack(f"<{2 + img.ndim}I", VERSION, img.ndim, *img.shape)
    _write(path, head + img.tobytes(), {"magic": "SPIM", "version": VERSION, "shape": list(img.shape)})


def load_spim(path) -> np.ndarray:
    r = _Reader(path, b"SPIM")
    d = r.u32()
    if d not in (2, 3):
        raise FormatError(f"{path}: bad dimension {d}")
    shape = r.u32(d)
    return r.f64(int(np.prod(shape))).reshape(shape)


def save_pgm(path, img: np.ndarray, maxval: int = 65535):
    """16-bit binary PGM of an image in [0, 1] (quantized)."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM holds 2-D images only")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(">u2")
    # PGM width is the number of columns
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(head + q.tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos: pos + 1].isspace():
            pos += 1
        if raw[pos: pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos: pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    n = width * height * np.dtype(dtype).itemsize
    if len(raw) - pos < n:
        raise FormatError(f"{path}: truncated PGM payload")
    q = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    return q.reshape(height, width).astype(float) / maxval


def save_label_pgm(path, mask: np.ndarray):
    """8-bit PGM holding integer labels verbatim (no intensity scaling)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("PGM holds 2-D images only")
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("labels must lie in [0, 255]")
    head = f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(head + mask.astype("u1").tobytes())


def load_label_pgm(path) -> np.ndarray:
    return np.rint(load_pgm(path) * 255).astype(np.int64)


def save_image(path, img):
    path = Path(path)
    if path.suffix == ".pgm":
        save_pgm(path, img)
    else:
        save_spim(path, img)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    return load_pgm(path) if path.suffix == ".pgm" else load_spim(path)


# --- network weights ----------------------------------------------------------

def save_weights(path, w, meta: dict | None = None):
    """``DFW1`` file: arch block then R_net and I_net kernels/biases as f64."""
    from .dualnet import DualNetWeights

    assert isinstance(w, DualNetWeights)
    arch = [(s.in_ch, s.out_ch, s.kernel, s.stride, int(s.activation)) for s in w.arch]
    head = b"DFW1" + struct.pack("<4I", VERSION, w.dim, len(arch), int(w.tie_weights))
    head += struct.pack("<2d", w.input_scale, w.output_scale)
    head += b"".join(struct.pack("<5I", *a) for a in arch)
    payload = b"".join(np.asarray(a, "<f8").tobytes()
                       for net in (w.r_layers, w.i_layers) for layer in net for a in layer)
    sidecar = {"magic": "DFW1", "version": VERSION, "dim": w.dim, "tie_weights": w.tie_weights,
               "input_scale": w.input_scale, "output_scale": w.output_scale,
               "arch": [dict(zip(("in_ch", "out_ch", "kernel", "stride", "activation"), a)) for a in arch],
               "meta": meta or {}}
    _write(path, head + payload, sidecar)


def load_weights(path):
    from .dualnet import DualNetWeights, LayerSpec

    r = _Reader(path, b"DFW1")
    dim, n_layers, tie = r.u32(3)
    if r.pos + 16 > len(r.body):
        raise FormatError(f"{path}: truncated header")
    in_s, out_s = struct.unpack("<2d", r.body[r.pos: r.pos + 16])
    r.pos += 16
    arch = []
    for _ in range(n_layers):
        i, o, k, s, act = r.u32(5)
        arch.append(LayerSpec(i, o, k, s, bool(act)))
    shapes = [((s.out_ch, s.in_ch) + (s.kernel,) * dim, (s.out_ch,)) for s in arch]
    per_net = sum(int(np.prod(a)) + int(np.prod(b)) for a, b in shapes)
    flat = r.f64(2 * per_net)
    nets, off = [], 0
    for _ in range(2):
        layers = []
        for ks, bs in shapes:
            nk, nb = int(np.prod(ks)), int(np.prod(bs))
            layers.append((flat[off: off + nk].reshape(ks).copy(), flat[off + nk: off + nk + nb].copy()))
            off += nk + nb
        nets.append(layers)
    return DualNetWeights(tuple(arch), dim, nets[0], nets[1], bool(tie), in_s, out_s)


# --- datasets -------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(root, ds):
    """Directory with ``manifest.json`` and per-example containers under ``images/`` and ``labels/``."""
    root = Path(root)
    entries = []
    for i, ex in enumerate(ds.examples):
        files = {}
        for key, arr in (("source", ex.source), ("target", ex.target),
                         ("source_mask", ex.source_mask), ("target_mask", ex.target_mask)):
            if arr is not None:
                rel = f"images/{i:05d}_{key}.spim"
                save_spim(root / rel, arr)
                files[key] = rel
        if ex.v_opt is not None:
            rel = f"labels/{i:05d}_v0.blff"
            save_freq_field(root / rel, ex.v_opt)
            files["label"] = rel
        entry = dict(files)
        entry["pair_id"] = ex.pair_id
        entry["diagnostics"] = ex.diagnostics
        entry["sha256"] = {k: _sha256(root / rel) for k, rel in files.items()}
        entries.append(entry)
    spec = ds.examples[0].spec if ds.examples else None
    manifest = {
        "format": "bandreg-dataset",
        "version": VERSION,
        "band_spec": None if spec is None else {"dim": spec.dim, "band": spec.band, "grid": list(spec.grid)},
        "examples": entries,
        "split": ds.split,
        "provenance": ds.provenance,
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(root):
    from .data import Dataset, example_from_images

    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"dataset manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    bs = manifest["band_spec"]
    spec = None if bs is None else BandSpec(bs["dim"], bs["band"], bs["grid"])
    examples = []
    for entry in manifest["examples"]:
        arrays = {}
        for key in ("source", "target", "source_mask", "target_mask", "label"):
            if key not in entry:
                continue
            path = root / entry[key]
            if not path.exists():
                raise FileNotFoundError(f"dataset file missing: {path}")
            digest = entry.get("sha256", {}).get(key)
            if digest is not None and _sha256(path) != digest:
                raise FormatError(f"{path}: checksum mismatch against manifest")
            arrays[key] = load_freq_field(path) if key == "label" else load_spim(path)
        masks = {k: arrays[k].astype(np.int64) for k in ("source_mask", "target_mask") if k in arrays}
        examples.append(example_from_images(
            arrays["source"], arrays["target"], spec, v_opt=arrays.get("label"),
            diagnostics=entry.get("diagnostics", {}), pair_id=entry.get("pair_id", 0), **masks,
        ))
    split = {k: list(v) for k, v in manifest["split"].items()}
    return Dataset(examples, split, manifest.get("provenance", {}))
