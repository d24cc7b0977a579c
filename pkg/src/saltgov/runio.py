"""CSV/JSON serialization contracts shared by the runner and the CLI.

Floats are written with 17 significant digits so that write -> read ->
write round-trips are byte identical, and JSON documents are emitted with
sorted keys so reruns of the same configuration produce identical bytes.
Nothing here embeds wall-clock time.
"""

import hashlib
import json

import numpy as np

TRACE_COLUMNS = (
    "t", "m_dot_s_ref", "T_p_in_ref", "m_dot_s", "T_p_in", "T_p_out",
    "T_s_out", "T_p_1", "T_p_3", "P_p_out", "P_p_1", "Q_dot", "u_s",
    "I_pi_mdot_s",
)

GOVERNOR_COLUMNS = (
    "t", "r_m_dot_s_ref", "r_T_p_in_ref", "v_m_dot_s_ref", "v_T_p_in_ref",
    "kappa_or_nan", "margin", "flag",
)

SLICE_COLUMNS = ("dm_dot_s_ref", "dT_p_in_ref")


def fmt(x):
    return format(float(x), ".17g")


def write_columns_csv(path, header, columns):
    """Write named float columns; `columns` maps name -> 1-D array."""
    arrays = [np.asarray(columns[name], dtype=float) for name in header]
    nrows = len(arrays[0])
    for name, arr in zip(header, arrays):
        if len(arr) != nrows:
            raise ValueError(f"column {name!r} has {len(arr)} rows, expected {nrows}")
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(nrows):
            fh.write(",".join(fmt(arr[i]) for arr in arrays) + "\n")


def read_columns_csv(path):
    """Read a float CSV into {name: array}; binding is by column name."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: {data.shape[1]} columns for {len(header)} names")
    return {name: data[:, i].copy() for i, name in enumerate(header)}


def require_columns(columns, names, path="trace"):
    missing = [name for name in names if name not in columns]
    if missing:
        raise ValueError(f"{path} is missing column(s): {', '.join(missing)}")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
