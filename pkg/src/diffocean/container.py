"""Self-describing binary dataset container (``.nogc``).

Layout, all integers and floats little-endian::

    magic       4 bytes   b"NOGC"
    version     uint32
    n_time, n_ocean, n_forcing, n_lat, n_lon    uint32 x 5
    extras_len  uint32, then that many bytes of UTF-8 JSON
               (start_date and free-form attributes)
    channel table, one 40-byte record per channel (ocean first):
        name 24s, variable 8s, level int32, periodic uint8, kind uint8, 2 pad
    times       float64[n_time]            days since start_date
    mask        float64[n_lat * n_lon]     1.0 ocean, 0.0 land
    ocean       float64[n_time, n_ocean, n_lat, n_lon]
    forcing     float64[n_time, n_forcing, n_lat, n_lon]

A sidecar ``<file>.json`` mirrors the header for humans.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import ChannelInfo, Dataset, fill_nans
from .errors import DataError

MAGIC = b"NOGC"
VERSION = 1
_DIMS = struct.Struct("<4sI5II")
_CHANNEL = struct.Struct("<24s8siBB2x")
_F64 = np.dtype("<f8")


def _pack_channel(info: ChannelInfo, kind: int) -> bytes:
    name = info.name.encode("ascii")
    var = info.variable.encode("ascii")
    if len(name) > 24 or len(var) > 8:
        raise DataError(f"channel name too long for container: {info.name!r}")
    return _CHANNEL.pack(name, var, int(info.level), int(info.periodic), kind)


def header_dict(ds: Dataset) -> dict:
    t, co, h, w = ds.ocean.shape
    return {
        "format": "NOGC", "version": VERSION,
        "dims": {"time": t, "ocean": co, "forcing": ds.forcing.shape[1], "lat": h, "lon": w},
        "start_date": ds.start_date,
        "attrs": ds.attrs,
        "ocean_channels": [vars(c) for c in ds.ocean_info],
        "forcing_channels": [vars(c) for c in ds.forcing_info],
    }


def write_dataset(path, ds: Dataset, sidecar=True) -> Path:
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    t, co, h, w = ds.ocean.shape
    extras = json.dumps({"start_date": ds.start_date, "attrs": ds.attrs}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_DIMS.pack(MAGIC, VERSION, t, co, ds.forcing.shape[1], h, w, len(extras)))
        fh.write(extras)
        for info in ds.ocean_info:
            fh.write(_pack_channel(info, 0))
        for info in ds.forcing_info:
            fh.write(_pack_channel(info, 1))
        for arr in (ds.times, ds.mask.astype(np.float64), ds.ocean, ds.forcing):
            fh.write(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    if sidecar:
        Path(str(path) + ".json").write_text(json.dumps(header_dict(ds), indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path) -> Dataset:
    """Load a container; NaNs are zeroed and their points masked as land."""
    raw = Path(path).read_bytes()
    if len(raw) < _DIMS.size or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a NOGC container")
    magic, version, t, co, ca, h, w, n_extra = _DIMS.unpack_from(raw, 0)
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    off = _DIMS.size
    extras = json.loads(raw[off:off + n_extra].decode())
    off += n_extra
    infos = []
    for _ in range(co + ca):
        name, var, level, periodic, kind = _CHANNEL.unpack_from(raw, off)
        off += _CHANNEL.size
        infos.append((kind, ChannelInfo(name.rstrip(b"\0").decode(), var.rstrip(b"\0").decode(),
                                        level, bool(periodic))))
    sizes = [t, h * w, t * co * h * w, t * ca * h * w]
    expected = off + 8 * sum(sizes)
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(raw, dtype=_F64, count=n, offset=off).astype(np.float64))
        off += 8 * n
    ds = Dataset(
        times=arrays[0],
        ocean=arrays[2].reshape(t, co, h, w),
        forcing=arrays[3].reshape(t, ca, h, w),
        mask=arrays[1].reshape(h, w) > 0.5,
        ocean_info=[c for k, c in infos if k == 0],
        forcing_info=[c for k, c in infos if k == 1],
        start_date=extras.get("start_date", "1993-01-01"),
        attrs=extras.get("attrs", {}),
    )
    return fill_nans(ds)


def write_npz(path, ds: Dataset) -> Path:
    """Plain ``.npz`` export (arrays plus a JSON header) for external tools."""
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    meta = np.frombuffer(json.dumps(header_dict(ds), sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, header=meta, times=ds.times, mask=ds.mask, ocean=ds.ocean, forcing=ds.forcing)
    return path


def read_npz(path) -> Dataset:
    with np.load(path) as z:
        try:
            head = json.loads(bytes(z["header"]).decode())
            arrays = {k: z[k] for k in ("times", "mask", "ocean", "forcing")}
        except KeyError as exc:
            raise DataError(f"{path}: missing array {exc}") from None
    mk = lambda rows: [ChannelInfo(**r) for r in rows]  # noqa: E731
    ds = Dataset(arrays["times"], arrays["ocean"], arrays["forcing"], arrays["mask"].astype(bool),
                 mk(head["ocean_channels"]), mk(head["forcing_channels"]),
                 head.get("start_date", "1993-01-01"), head.get("attrs", {}))
    return fill_nans(ds)


def load_any(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return read_npz(path) if path.suffix == ".npz" else read_dataset(path)


def save_any(path, ds: Dataset) -> Path:
    path = Path(path)
    return write_npz(path, ds) if path.suffix == ".npz" else write_dataset(path, ds)
