"""Binary PLY export/import for world-frame splat sets.

Layout per vertex, all float32 little-endian, in declared order:
x, y, z, scale_0..2 (stored as ln scale), rot_0..3 (w, x, y, z),
f_dc_0..2 (DC color SH per channel), f_rest_* (higher color SH,
channel-major), opacity (DC opacity coefficient, pre-sigmoid),
op_rest_* (higher opacity SH), srot_0..3 (source camera rotation
quaternion). Degree-0 sets carry no f_rest_/op_rest_ properties.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .decoder import GaussianSplatSet, FrameMismatch
from .geometry import quat_from_rotation, rotation_from_quat

__all__ = ["MalformedPly", "export_ply", "import_ply"]


class MalformedPly(ValueError):
    """PLY parse failure; carries the byte offset where parsing stopped."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _val(x):
    return x.value if isinstance(x, ad.Tensor) else np.asarray(x)


def _property_names(kc, ko):
    names = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3",
             "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (kc - 1))]
    names += ["opacity"]
    names += [f"op_rest_{i}" for i in range(ko - 1)]
    names += ["srot_0", "srot_1", "srot_2", "srot_3"]
    return names


def export_ply(splats: GaussianSplatSet, path):
    """Write a world-frame splat set; all fields stored float32."""
    if splats.frame != "world":
        raise FrameMismatch(f"PLY export expects world frame, got {splats.frame!r}")
    pos = _val(splats.position)
    scale = _val(splats.scale)
    rot = _val(splats.rotation)
    csh = _val(splats.color_sh)
    osh = _val(splats.opacity_sh)
    m = pos.shape[0]
    kc = csh.shape[-1]
    ko = osh.shape[-1]

    if splats.source_rotation is None:
        srot = np.tile([1.0, 0.0, 0.0, 0.0], (m, 1))
    else:
        per_view = np.stack([quat_from_rotation(R)
                             for R in splats.source_rotation])
        srot = per_view[splats.source_view]

    cols = [pos, np.log(scale), rot, csh[:, :, 0]]
    if kc > 1:
        cols.append(csh[:, :, 1:].reshape(m, 3 * (kc - 1)))
    cols.append(osh[:, :1])
    if ko > 1:
        cols.append(osh[:, 1:])
    cols.append(srot)
    data = np.concatenate(cols, axis=1).astype("<f4")

    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {m}"]
    header += [f"property float {n}" for n in _property_names(kc, ko)]
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def import_ply(path) -> GaussianSplatSet:
    """Read a splat PLY written by export_ply; arrays come back float64."""
    with open(path, "rb") as f:
        blob = f.read()

    # header is ascii lines terminated by end_header
    end_tag = b"end_header\n"
    end = blob.find(end_tag)
    if end < 0:
        raise MalformedPly("no end_header line", len(blob))
    lines = blob[:end].decode("ascii", errors="replace").split("\n")
    offset = 0
    if not lines or lines[0] != "ply":
        raise MalformedPly("missing 'ply' magic", 0)
    offset += len(lines[0]) + 1
    if len(lines) < 2 or lines[1] != "format binary_little_endian 1.0":
        raise MalformedPly("unsupported format line", offset)

    count = None
    props = []
    for ln in lines[1:]:
        if ln.startswith("element vertex "):
            try:
                count = int(ln.split()[-1])
            except ValueError:
                raise MalformedPly("bad vertex count", offset) from None
        elif ln.startswith("element "):
            raise MalformedPly(f"unsupported element {ln.split()[1]!r}", offset)
        elif ln.startswith("property "):
            parts = ln.split()
            if len(parts) != 3 or parts[1] != "float":
                raise MalformedPly(f"unsupported property line {ln!r}", offset)
            props.append(parts[2])
        offset += len(ln) + 1
    if count is None:
        raise MalformedPly("no vertex element", end)

    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    n_oprest = sum(1 for p in props if p.startswith("op_rest_"))
    if n_rest % 3 != 0:
        raise MalformedPly(f"f_rest count {n_rest} not divisible by 3", end)
    kc = n_rest // 3 + 1
    ko = n_oprest + 1
    squares = (1, 4, 9, 16)
    if kc not in squares or ko not in squares:
        raise MalformedPly(f"coefficient counts ({kc}, {ko}) are not SH band sizes", end)
    expected = _property_names(kc, ko)
    if props != expected:
        for i in range(max(len(props), len(expected))):
            a = props[i] if i < len(props) else None
            b = expected[i] if i < len(expected) else None
            if a != b:
                raise MalformedPly(f"property {i}: found {a!r}, expected {b!r}", end)

    body = blob[end + len(end_tag):]
    n_props = len(props)
    need = count * n_props * 4
    if len(body) != need:
        raise MalformedPly(
            f"expected {need} data bytes for {count} vertices, found {len(body)}",
            end + len(end_tag) + min(len(body), need))
    table = np.frombuffer(body, dtype="<f4").reshape(count, n_props).astype(np.float64)

    col = 0
    def take(n):
        nonlocal col
        out = table[:, col:col + n]
        col += n
        return out

    pos = take(3)
    scale = np.exp(take(3))
    rot = take(4)
    f_dc = take(3)
    f_rest = take(3 * (kc - 1)).reshape(count, 3, kc - 1)
    csh = np.concatenate([f_dc[:, :, None], f_rest], axis=-1)
    osh = take(1 + (ko - 1))
    srot = take(4)

    if count == 0 or np.abs(srot - np.array([1.0, 0, 0, 0])).max() == 0.0:
        source_rotation, source_view = None, np.zeros(count, dtype=np.int64)
    else:
        source_rotation = np.stack([rotation_from_quat(q) for q in srot])
        source_view = np.arange(count, dtype=np.int64)
    return GaussianSplatSet(position=pos, rotation=rot, scale=scale,
                            color_sh=csh, opacity_sh=osh,
                            source_view=source_view,
                            source_rotation=source_rotation, frame="world")
