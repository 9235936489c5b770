"""On-disk formats: MIFT tensor files, JSON-lines manifests, images, checkpoints."""
import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import FormatError, NonFiniteData, ShapeMismatch

MAGIC = b"MIFT"
_HEADER_LEN = struct.Struct("<I")
# Fixed timestamp so checkpoint archives are byte-reproducible.
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


def encode_tensor(array):
    arr = np.asarray(array, dtype="<f4")
    header = json.dumps(
        {"dtype": "f32", "shape": list(arr.shape), "layout": "row-major", "endian": "little"},
        sort_keys=True,
    ).encode("utf-8")
    return MAGIC + _HEADER_LEN.pack(len(header)) + header + arr.tobytes(order="C")


def decode_tensor(blob):
    """Parse MIFT bytes: 4-byte magic, u32 LE header length, JSON header, f32 payload."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("bad magic, not a MIFT tensor")
    (hlen,) = _HEADER_LEN.unpack(blob[4:8])
    if 8 + hlen > len(blob):
        raise FormatError("truncated header")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable header: {exc}") from None
    if header.get("dtype") != "f32" or header.get("layout") != "row-major" or header.get("endian") != "little":
        raise FormatError(f"unsupported header {header}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FormatError(f"bad shape {shape!r}")
    payload = blob[8 + hlen :]
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path):
    return decode_tensor(Path(path).read_bytes())


def read_manifest(path):
    """Read a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if "image" not in entry:
            raise FormatError(f"{path}:{lineno}: entry has no 'image'")
        for key, value in list(entry.items()):
            if isinstance(value, str) and key != "id":
                p = Path(value)
                entry[key] = str(p if p.is_absolute() else base / p)
        entries.append(entry)
    return entries


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_image(path):
    """Load an image as a float64 grayscale array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr


def write_image(path, image):
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def check_finite(array, name):
    if not np.all(np.isfinite(array)):
        raise NonFiniteData(f"{name} contains non-finite values")


def save_checkpoint(path, tensors, metadata):
    """Write named tensors plus JSON metadata into a single zip archive."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("metadata.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(metadata, sort_keys=True, indent=1))
        for name in sorted(tensors):
            info = zipfile.ZipInfo(f"tensors/{name}.mift", date_time=_ZIP_DATE)
            zf.writestr(info, encode_tensor(tensors[name]))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    tensors = {}
    with zipfile.ZipFile(path) as zf:
        try:
            metadata = json.loads(zf.read("metadata.json"))
        except KeyError:
            raise FormatError(f"{path}: no metadata.json") from None
        for name in zf.namelist():
            if name.startswith("tensors/") and name.endswith(".mift"):
                tensors[name[len("tensors/") : -len(".mift")]] = decode_tensor(zf.read(name))
    return tensors, metadata


def require_shape(array, ndim, name, ncols=None):
    if array.ndim != ndim or (ncols is not None and array.shape[-1] != ncols):
        raise ShapeMismatch(f"{name} has shape {array.shape}")
