"""Volume container and the portable ``.svol`` on-disk format.

An ``.svol`` file is a text header followed by a raw little-endian
float32 payload:

    SVOL1\\n
    dims=X Y Z\\n
    spacing=sx sy sz\\n
    domain=hu\\n
    dtype=f32le\\n
    \\n
    <X*Y*Z little-endian float32, row-major>

Domains tag the value semantics: ``hu`` (raw CT intensities), ``unit``
(values in [0,1]), ``std`` (zero-mean standardized) and ``label``
(exactly 0/1). Round trips are bit-exact.
"""

import numpy as np

from .errors import FormatError, InputError

DOMAINS = ("hu", "unit", "std", "label")


class Volume:
    def __init__(self, voxels, spacing=(1.0, 1.0, 1.0), domain="hu"):
        voxels = np.ascontiguousarray(voxels, dtype=np.float32)
        if voxels.ndim != 3:
            raise InputError(f"volume must be 3D, got shape {voxels.shape}")
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise InputError(f"spacing must be three positive values, got {spacing}")
        if domain not in DOMAINS:
            raise InputError(f"unknown domain {domain!r}, expected one of {DOMAINS}")
        if domain == "label" and not np.all((voxels == 0.0) | (voxels == 1.0)):
            raise InputError("label volume must contain exactly 0/1 values")
        if domain == "unit" and (voxels.min() < 0.0 or voxels.max() > 1.0):
            raise InputError("unit-domain volume must lie in [0, 1]")
        self.voxels = voxels
        self.spacing = spacing
        self.domain = domain

    @property
    def dims(self):
        return self.voxels.shape

    def with_voxels(self, voxels, domain=None, spacing=None):
        return Volume(
            voxels,
            self.spacing if spacing is None else spacing,
            self.domain if domain is None else domain,
        )


def save_volume(vol, path):
    header = (
        "SVOL1\n"
        f"dims={vol.dims[0]} {vol.dims[1]} {vol.dims[2]}\n"
        f"spacing={vol.spacing[0]!r} {vol.spacing[1]!r} {vol.spacing[2]!r}\n"
        f"domain={vol.domain}\n"
        "dtype=f32le\n"
        "\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vol.voxels.astype("<f4").tobytes())


def _read_line(f, offset):
    raw = bytearray()
    while True:
        b = f.read(1)
        if not b:
            raise FormatError("unexpected end of file inside header", offset=offset + len(raw))
        if b == b"\n":
            return raw.decode("ascii", errors="replace"), offset + len(raw) + 1
        raw += b


def load_volume(path):
    with open(path, "rb") as f:
        line, offset = _read_line(f, 0)
        if line != "SVOL1":
            raise FormatError(f"bad magic {line!r}, expected 'SVOL1'", offset=0)
        fields = {}
        while True:
            line, offset = _read_line(f, offset)
            if line == "":
                break
            if "=" not in line:
                raise FormatError(f"malformed header line {line!r}", offset=offset - len(line) - 1)
            key, val = line.split("=", 1)
            fields[key] = val
        for key in ("dims", "spacing", "domain", "dtype"):
            if key not in fields:
                raise FormatError(f"missing header field {key!r}", offset=offset)
        if fields["dtype"] != "f32le":
            raise FormatError(f"unsupported dtype {fields['dtype']!r}", offset=offset)
        try:
            dims = tuple(int(v) for v in fields["dims"].split())
            spacing = tuple(float(v) for v in fields["spacing"].split())
        except ValueError as e:
            raise FormatError(f"unparseable dims/spacing: {e}", offset=offset) from e
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise FormatError(f"inconsistent dims {dims}", offset=offset)
        count = dims[0] * dims[1] * dims[2]
        payload = f.read(4 * count)
        if len(payload) < 4 * count:
            raise FormatError(
                f"truncated payload: expected {4 * count} bytes, got {len(payload)}",
                offset=offset + len(payload),
            )
        trailing = f.read(1)
        if trailing:
            raise FormatError("trailing bytes after payload", offset=offset + 4 * count)
        voxels = np.frombuffer(payload, dtype="<f4").reshape(dims)
        try:
            return Volume(voxels, spacing, fields["domain"])
        except InputError as e:
            raise FormatError(str(e), offset=offset) from e
