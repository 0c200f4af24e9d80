"""CSV loaders for the three model schemas and exact-float writers.

Every float written by this module uses 17 significant digits so files
round-trip exactly and reruns with the same seed are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from cutvi.errors import DataFileError
from cutvi.models.agri import CROPS, LEVELS, AgriData
from cutvi.models.biased_normal import BiasedNormalModel
from cutvi.models.hpv import HpvModel

HPV_COLUMNS = ("country", "z", "n", "w", "T")
AGRI_COLUMNS = ("dataset", "nitrogen", "crop", "location", "size", "rainfall", "manure")


def fmt(x) -> str:
    """17-significant-digit text for a float; ints and strings pass through."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return format(x, ".17g")
    return str(x)


# -- reading ---------------------------------------------------------------------


def _read_rows(path):
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataFileError(f"cannot read file ({exc.strerror})", path) from None
    # (line number, cells) with blank lines dropped
    rows = [(i + 1, [c.strip() for c in r]) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not rows:
        raise DataFileError("file is empty", path)
    return path, rows


def _float(text, path, line, column):
    try:
        x = float(text)
    except ValueError:
        raise DataFileError(f"column {column!r}: {text!r} is not a number", path, line) from None
    if not math.isfinite(x):
        raise DataFileError(f"column {column!r}: value must be finite", path, line)
    return x


def read_column(path) -> np.ndarray:
    """One numeric column, with an optional non-numeric header line."""
    path, rows = _read_rows(path)
    try:
        float(rows[0][1][0])
    except ValueError:
        rows = rows[1:]
    out = []
    for line, cells in rows:
        if len(cells) != 1:
            raise DataFileError(f"expected 1 column, found {len(cells)}", path, line)
        out.append(_float(cells[0], path, line, "value"))
    if not out:
        raise DataFileError("no data rows", path)
    return np.array(out)


def _table(path, columns, required):
    path, rows = _read_rows(path)
    header = [h.lower() if h.lower() != "t" else "T" for h in rows[0][1]]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataFileError(f"missing column(s) {', '.join(missing)}; expected {', '.join(columns)}", path, rows[0][0])
    idx = {c: header.index(c) for c in columns if c in header}
    out = []
    for line, cells in rows[1:]:
        if len(cells) != len(header):
            raise DataFileError(f"expected {len(header)} fields, found {len(cells)}", path, line)
        out.append((line, {c: cells[i] for c, i in idx.items()}))
    if not out:
        raise DataFileError("no data rows", path)
    return path, out


def load_biased_normal(z_path, w_path, delta1: float = 1.0, delta2: float = 100.0) -> BiasedNormalModel:
    return BiasedNormalModel(read_column(z_path), read_column(w_path), delta1, delta2)


def load_hpv(path) -> HpvModel:
    path, rows = _table(path, HPV_COLUMNS, HPV_COLUMNS)
    country, z, n, w, T = [], [], [], [], []
    for line, r in rows:
        zi, ni = _float(r["z"], path, line, "z"), _float(r["n"], path, line, "n")
        wi, Ti = _float(r["w"], path, line, "w"), _float(r["T"], path, line, "T")
        if ni <= 0 or not 0 <= zi <= ni:
            raise DataFileError("need n > 0 and 0 <= z <= n", path, line)
        if wi < 0 or Ti <= 0:
            raise DataFileError("need w >= 0 and T > 0", path, line)
        country.append(r["country"])
        z.append(zi)
        n.append(ni)
        w.append(wi)
        T.append(Ti)
    return HpvModel(np.array(z), np.array(n), np.array(w), np.array(T), tuple(country))


def _manure(text, path, line):
    t = text.lower()
    if t in LEVELS:
        return LEVELS.index(t)
    if t in ("0", "1", "2"):
        return int(t)
    raise DataFileError(f"column 'manure': {text!r} is not one of low/med/high or 0/1/2", path, line)


def load_agri(path, logR_prior=None) -> AgriData:
    """Archaeological (``A``) and modern (``M``) rows from one file.

    ``rainfall`` and ``manure`` must be blank on archaeological rows and
    present on modern rows; ``size`` is required on archaeological rows.
    Location labels are mapped to slots in order of first appearance, and PO
    slots cover the locations that have archaeological rows.
    """
    path, rows = _table(path, AGRI_COLUMNS, ("dataset", "nitrogen", "crop", "location", "size"))
    locs, arch, modern = {}, [], []
    for line, r in rows:
        ds = r["dataset"].upper()
        if ds not in ("A", "M"):
            raise DataFileError(f"column 'dataset': {r['dataset']!r} is not A or M", path, line)
        crop = r["crop"].lower()
        if crop not in CROPS:
            raise DataFileError(f"column 'crop': {r['crop']!r} is not one of {', '.join(CROPS)}", path, line)
        if not r["location"]:
            raise DataFileError("column 'location' is blank", path, line)
        loc = locs.setdefault(r["location"], len(locs))
        Z = _float(r["nitrogen"], path, line, "nitrogen")
        rain, man = r.get("rainfall", ""), r.get("manure", "")
        if ds == "A":
            if rain or man:
                raise DataFileError("rainfall and manure must be blank for archaeological rows", path, line)
            arch.append((Z, crop == "wheat", loc, _float(r["size"], path, line, "size")))
        else:
            if not rain or not man:
                raise DataFileError("rainfall and manure are required for modern rows", path, line)
            modern.append((Z, crop == "wheat", loc, _float(rain, path, line, "rainfall"), _manure(man, path, line)))
    if not arch:
        raise DataFileError("no archaeological rows", path)
    labels = tuple(locs)
    po_slots = sorted({a[2] for a in arch})
    po_index = {s: i for i, s in enumerate(po_slots)}
    mean, var = (None, None) if logR_prior is None else logR_prior
    A = list(zip(*arch))
    M = list(zip(*modern)) if modern else [[]] * 5
    return AgriData(
        Z_A=np.array(A[0]), wheat_A=np.array(A[1]), loc_A=np.array(A[2]),
        po_loc_A=np.array([po_index[s] for s in A[2]]), S_A=np.array(A[3]),
        Z_M=np.array(M[0], dtype=float), wheat_M=np.array(M[1], dtype=bool), loc_M=np.array(M[2], dtype=int),
        R_M=np.array(M[3], dtype=float), M_M=np.array(M[4], dtype=int),
        location_labels=labels, po_location_labels=tuple(labels[s] for s in po_slots),
        logR_mean=mean, logR_var=var,
    )


# -- writing ---------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj, indent: int = 2) -> str:
    """JSON text with floats at 17 significant digits and sorted-as-given keys."""

    def enc(o, level):
        pad, inner = " " * (indent * level), " " * (indent * (level + 1))
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{inner}{json.dumps(k)}: {enc(v, level + 1)}" for k, v in o.items()]
            return "{\n" + ",\n".join(items) + "\n" + pad + "}"
        if isinstance(o, list):
            if not o:
                return "[]"
            if all(not isinstance(v, (dict, list)) for v in o):
                return "[" + ", ".join(enc(v, level) for v in o) + "]"
            return "[\n" + ",\n".join(inner + enc(v, level + 1) for v in o) + "\n" + pad + "]"
        if o is None:
            return "null"
        if isinstance(o, str):
            return json.dumps(o)
        return fmt(o)

    return enc(_plain(obj), 0) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj))
    return path


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])
    return path


def write_column(path, x, name="value") -> Path:
    return write_csv(path, [name], ([v] for v in np.asarray(x).reshape(-1)))


def write_hpv(path, model: HpvModel) -> Path:
    rows = zip(model.country, model.z, model.n, model.w, model.T)
    return write_csv(path, HPV_COLUMNS, rows)


def write_agri(path, data: AgriData) -> Path:
    labels = data.location_labels or tuple(f"L{i + 1:02d}" for i in range(data.q_hm))
    rows = []
    for i in range(data.n_A):
        rows.append(["A", data.Z_A[i], CROPS[int(data.wheat_A[i])], labels[data.loc_A[i]], data.S_A[i], "", ""])
    for i in range(data.n_M):
        rows.append(["M", data.Z_M[i], CROPS[int(data.wheat_M[i])], labels[data.loc_M[i]], "",
                     data.R_M[i], LEVELS[data.M_M[i]]])
    return write_csv(path, AGRI_COLUMNS, rows)
