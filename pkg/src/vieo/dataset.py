"""Dataset container and the on-disk record format.

A dataset is a directory with a ``meta`` file (UTF-8 ``key = value`` lines)
and four append-only record files, each UTF-8 lines of tab-separated decimal
fields with timestamps printed to 9 decimal places:

* ``imu``      ``t gx gy gz ax ay az``
* ``encoder``  ``t theta``            (wrapped to [0, 2pi), quantized)
* ``frames``   ``t n id u v id u v ...``  (n count-prefixed id/u/v triples,
  normalized image coordinates)
* ``truth``    ``t px py pz s1 s2 s3 vx vy vz bgx bgy bgz bax bay baz theta``
  (base pose with attitude as the Gibbs/Rodrigues vector of the body-to-world
  rotation, velocity, IMU biases, unwrapped true spin angle)

Optionally ``commands`` (``t rate``) stores the spin-rate stream of
policy-driven runs.  Non-timestamp floats are printed with ``repr`` so the
round trip is bit-exact; timestamps are canonicalized to the 9-decimal grid
at synthesis time.
"""

import os
from dataclasses import dataclass, field

import numpy as np

FORMAT_NAME = "vieo-dataset"
FORMAT_VERSION = "1"


class DatasetFormatError(ValueError):
    """Malformed or truncated dataset file; message carries file and line."""


@dataclass
class CameraFrame:
    t: float
    ids: np.ndarray   # (k,) int landmark ids
    uv: np.ndarray    # (k, 2) normalized image coordinates


@dataclass
class Dataset:
    meta: dict
    imu_t: np.ndarray
    imu_gyro: np.ndarray
    imu_accel: np.ndarray
    enc_t: np.ndarray
    enc_theta: np.ndarray
    frames: list                     # list[CameraFrame]
    truth_t: np.ndarray
    truth_p: np.ndarray
    truth_s: np.ndarray              # CGR of body-to-world rotation
    truth_v: np.ndarray
    truth_bg: np.ndarray
    truth_ba: np.ndarray
    truth_theta: np.ndarray          # unwrapped spin angle
    commands: np.ndarray = field(default=None)   # (n, 2) of (t, rate) or None

    def validate(self):
        for name, t in (("imu", self.imu_t), ("encoder", self.enc_t),
                        ("truth", self.truth_t)):
            if len(t) and np.any(np.diff(t) <= 0):
                raise DatasetFormatError("%s timestamps not strictly increasing" % name)
        ft = np.array([f.t for f in self.frames])
        if len(ft) and np.any(np.diff(ft) <= 0):
            raise DatasetFormatError("frame timestamps not strictly increasing")
        # hardware sync: every camera frame coincides with an encoder sample
        if set(np.round(ft, 9)) != set(np.round(self.enc_t, 9)):
            raise DatasetFormatError("camera frames and encoder samples are not synchronized")


def _fmt(x):
    return repr(float(x))


def _fmt_t(t):
    return "%.9f" % t


def round9(t):
    """Canonicalize timestamps to the 9-decimal grid used on disk."""
    return np.round(np.asarray(t, dtype=float), 9)


def write_dataset(ds, path):
    """Write a dataset directory (created if missing); lossless round trip."""
    os.makedirs(path, exist_ok=True)
    meta_lines = ["format = %s" % FORMAT_NAME, "version = %s" % FORMAT_VERSION]
    for k in sorted(ds.meta):
        if k in ("format", "version"):
            continue
        meta_lines.append("%s = %s" % (k, ds.meta[k]))
    with open(os.path.join(path, "meta"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(meta_lines) + "\n")

    with open(os.path.join(path, "imu"), "w", encoding="utf-8") as fh:
        for i in range(len(ds.imu_t)):
            row = [_fmt_t(ds.imu_t[i])]
            row += [_fmt(v) for v in ds.imu_gyro[i]]
            row += [_fmt(v) for v in ds.imu_accel[i]]
            fh.write("\t".join(row) + "\n")

    with open(os.path.join(path, "encoder"), "w", encoding="utf-8") as fh:
        for i in range(len(ds.enc_t)):
            fh.write("%s\t%s\n" % (_fmt_t(ds.enc_t[i]), _fmt(ds.enc_theta[i])))

    with open(os.path.join(path, "frames"), "w", encoding="utf-8") as fh:
        for fr in ds.frames:
            row = [_fmt_t(fr.t), "%d" % len(fr.ids)]
            for j in range(len(fr.ids)):
                row += ["%d" % fr.ids[j], _fmt(fr.uv[j, 0]), _fmt(fr.uv[j, 1])]
            fh.write("\t".join(row) + "\n")

    with open(os.path.join(path, "truth"), "w", encoding="utf-8") as fh:
        for i in range(len(ds.truth_t)):
            row = [_fmt_t(ds.truth_t[i])]
            for arr in (ds.truth_p, ds.truth_s, ds.truth_v, ds.truth_bg, ds.truth_ba):
                row += [_fmt(v) for v in arr[i]]
            row.append(_fmt(ds.truth_theta[i]))
            fh.write("\t".join(row) + "\n")

    if ds.commands is not None:
        with open(os.path.join(path, "commands"), "w", encoding="utf-8") as fh:
            for t, r in ds.commands:
                fh.write("%s\t%s\n" % (_fmt_t(t), _fmt(r)))


def _parse_floats(fields, n_expected, fname, lineno):
    if len(fields) != n_expected:
        raise DatasetFormatError(
            "%s line %d: expected %d fields, found %d" % (fname, lineno, n_expected, len(fields)))
    try:
        return [float(x) for x in fields]
    except ValueError as exc:
        raise DatasetFormatError("%s line %d: %s" % (fname, lineno, exc)) from None


def _read_lines(path, fname):
    full = os.path.join(path, fname)
    if not os.path.exists(full):
        raise DatasetFormatError("missing dataset file %r" % fname)
    with open(full, "r", encoding="utf-8") as fh:
        return fh.read().splitlines()


def read_dataset(path):
    """Read a dataset directory; raises DatasetFormatError with the exact
    file and line on any malformed record."""
    meta = {}
    for lineno, line in enumerate(_read_lines(path, "meta"), 1):
        if not line.strip():
            continue
        if " = " not in line:
            raise DatasetFormatError("meta line %d: expected 'key = value'" % lineno)
        k, v = line.split(" = ", 1)
        meta[k.strip()] = v.strip()
    if meta.get("format") != FORMAT_NAME:
        raise DatasetFormatError("not a %s directory" % FORMAT_NAME)
    if meta.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            "unsupported dataset version %r (expected %s)" % (meta.get("version"), FORMAT_VERSION))

    imu_rows = []
    for lineno, line in enumerate(_read_lines(path, "imu"), 1):
        imu_rows.append(_parse_floats(line.split("\t"), 7, "imu", lineno))
    imu = np.array(imu_rows) if imu_rows else np.zeros((0, 7))

    enc_rows = []
    for lineno, line in enumerate(_read_lines(path, "encoder"), 1):
        enc_rows.append(_parse_floats(line.split("\t"), 2, "encoder", lineno))
    enc = np.array(enc_rows) if enc_rows else np.zeros((0, 2))

    frames = []
    for lineno, line in enumerate(_read_lines(path, "frames"), 1):
        fields = line.split("\t")
        if len(fields) < 2:
            raise DatasetFormatError("frames line %d: truncated record" % lineno)
        try:
            t = float(fields[0])
            n = int(fields[1])
        except ValueError as exc:
            raise DatasetFormatError("frames line %d: %s" % (lineno, exc)) from None
        if len(fields) != 2 + 3 * n:
            raise DatasetFormatError(
                "frames line %d: expected %d id/u/v triples, found %d fields"
                % (lineno, n, len(fields) - 2))
        ids = np.empty(n, dtype=np.int64)
        uv = np.empty((n, 2))
        try:
            for j in range(n):
                ids[j] = int(fields[2 + 3 * j])
                uv[j, 0] = float(fields[3 + 3 * j])
                uv[j, 1] = float(fields[4 + 3 * j])
        except ValueError as exc:
            raise DatasetFormatError("frames line %d: %s" % (lineno, exc)) from None
        frames.append(CameraFrame(t, ids, uv))

    truth_rows = []
    for lineno, line in enumerate(_read_lines(path, "truth"), 1):
        truth_rows.append(_parse_floats(line.split("\t"), 17, "truth", lineno))
    truth = np.array(truth_rows) if truth_rows else np.zeros((0, 17))

    commands = None
    if os.path.exists(os.path.join(path, "commands")):
        cmd_rows = []
        for lineno, line in enumerate(_read_lines(path, "commands"), 1):
            cmd_rows.append(_parse_floats(line.split("\t"), 2, "commands", lineno))
        commands = np.array(cmd_rows) if cmd_rows else np.zeros((0, 2))

    ds = Dataset(
        meta=meta,
        imu_t=imu[:, 0], imu_gyro=imu[:, 1:4], imu_accel=imu[:, 4:7],
        enc_t=enc[:, 0], enc_theta=enc[:, 1],
        frames=frames,
        truth_t=truth[:, 0], truth_p=truth[:, 1:4], truth_s=truth[:, 4:7],
        truth_v=truth[:, 7:10], truth_bg=truth[:, 10:13], truth_ba=truth[:, 13:16],
        truth_theta=truth[:, 16],
        commands=commands,
    )
    ds.validate()
    return ds
