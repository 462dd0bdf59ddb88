"""Deterministic JSON/CSV output written atomically, plus run manifests."""

import csv
import io
import json
import os
import tempfile
import time

import numpy as np

from . import __version__


def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return _clean(float(obj))
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _clean(x):
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def _sanitize(obj):
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float):
        return _clean(obj)
    return obj


def dumps(obj):
    return json.dumps(_sanitize(json.loads(json.dumps(obj, default=_default,
                                                      allow_nan=True))),
                      indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_atomic(path, text):
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    write_atomic(path, dumps(obj))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns):
    write_atomic(path, csv_text(rows, columns))


def field_to_json(field):
    return dumps([float(x) for x in np.asarray(field).ravel()])


def field_to_csv(field):
    rows = [{"node_index": i, "value": float(v)} for i, v in enumerate(np.asarray(field).ravel())]
    return csv_text(rows, ("node_index", "value"))


def state_to_csv(U):
    U = np.atleast_2d(U)
    cols = ["node_index"] + [f"u{i + 1}" for i in range(U.shape[0])]
    rows = [dict(zip(cols, [j] + [float(x) for x in U[:, j]])) for j in range(U.shape[1])]
    return csv_text(rows, cols)


def write_gnuplot(directory, stem, rows, columns, title=""):
    """Write ``stem.dat`` (whitespace separated) and ``stem.gp`` plotting every column against the first."""
    lines = ["# " + " ".join(columns)]
    lines += [" ".join(_fmt(r.get(c, "nan")) for c in columns) for r in rows]
    write_atomic(os.path.join(directory, stem + ".dat"), "\n".join(lines) + "\n")
    plots = ", ".join(f"'{stem}.dat' using 1:{i + 1} with linespoints title '{c}'"
                      for i, c in enumerate(columns) if i > 0)
    script = (f"set title '{title or stem}'\nset xlabel '{columns[0]}'\nset key outside\n"
              f"set terminal pngcairo size 900,600\nset output '{stem}.png'\nplot {plots}\n")
    write_atomic(os.path.join(directory, stem + ".gp"), script)


def write_manifest(directory, command, config, outputs, status, started):
    write_json(os.path.join(directory, "manifest.json"), {
        "command": command,
        "config": config,
        "version": __version__,
        "outputs": sorted(outputs),
        "status": status,
        "wall_clock_seconds": round(time.time() - started, 6),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })
