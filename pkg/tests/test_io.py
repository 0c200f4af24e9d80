import json

import numpy as np
import pytest

from cutvi.errors import DataFileError
from cutvi.io import (
    dumps,
    fmt,
    load_agri,
    load_biased_normal,
    load_hpv,
    read_column,
    write_agri,
    write_column,
    write_hpv,
)
from cutvi.models import AgriModel, HpvModel


class TestFormatting:
    def test_floats_round_trip(self, rng):
        for x in rng.normal(size=50) * 10.0 ** rng.integers(-300, 300, size=50):
            assert float(fmt(x)) == x

    def test_special_values(self):
        assert fmt(True) == "true" and fmt(np.int64(3)) == "3"
        assert fmt(float("nan")) == "NaN" and fmt(-np.inf) == "-Infinity"
        assert fmt(0.1) == "0.10000000000000001"

    def test_dumps_is_json(self):
        obj = {"a": [1.5, 2], "b": {"c": np.float64(0.25), "d": None}, "e": [], "f": [{"g": "h"}]}
        back = json.loads(dumps(obj))
        assert back == {"a": [1.5, 2], "b": {"c": 0.25, "d": None}, "e": [], "f": [{"g": "h"}]}
        assert dumps(obj) == dumps(obj)


class TestColumns:
    def test_round_trip(self, tmp_path, rng):
        x = rng.normal(size=20)
        p = write_column(tmp_path / "x.csv", x, "z")
        assert np.array_equal(read_column(p), x)

    def test_headerless(self, tmp_path):
        p = tmp_path / "z.csv"
        p.write_text("1.5\n\n-2\n")
        np.testing.assert_array_equal(read_column(p), [1.5, -2.0])

    def test_bad_value_names_line(self, tmp_path):
        p = tmp_path / "z.csv"
        p.write_text("z\n1.0\nabc\n")
        with pytest.raises(DataFileError, match=r"z\.csv, line 3: ") as exc:
            read_column(p)
        assert exc.value.row == 3

    def test_non_finite_rejected(self, tmp_path):
        p = tmp_path / "z.csv"
        p.write_text("z\ninf\n")
        with pytest.raises(DataFileError, match="line 2"):
            read_column(p)

    def test_missing_and_empty(self, tmp_path):
        with pytest.raises(DataFileError, match="cannot read"):
            read_column(tmp_path / "nope.csv")
        (tmp_path / "e.csv").write_text("\n")
        with pytest.raises(DataFileError, match="empty"):
            read_column(tmp_path / "e.csv")

    def test_biased_normal_loader(self, tmp_path):
        write_column(tmp_path / "z.csv", [1.0, 2.0], "z")
        write_column(tmp_path / "w.csv", [3.0], "w")
        m = load_biased_normal(tmp_path / "z.csv", tmp_path / "w.csv", 2.0, 50.0)
        assert m.n1 == 2 and m.n2 == 1 and m.delta2 == 50.0


class TestHpvFiles:
    def test_round_trip(self, tmp_path):
        m = HpvModel.synthetic(np.random.default_rng(0))
        back = load_hpv(write_hpv(tmp_path / "hpv.csv", m))
        for f in ("z", "n", "w", "T"):
            assert np.array_equal(getattr(back, f), getattr(m, f))
        assert back.country == m.country

    def test_invalid_row(self, tmp_path):
        p = tmp_path / "hpv.csv"
        p.write_text("country,z,n,w,T\na,1,10,2,100\nb,11,10,2,100\n")
        with pytest.raises(DataFileError, match="line 3"):
            load_hpv(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "hpv.csv"
        p.write_text("country,z,n,w\na,1,10,2\n")
        with pytest.raises(DataFileError, match="missing column"):
            load_hpv(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "hpv.csv"
        p.write_text("country,z,n,w,T\na,1,10,2\n")
        with pytest.raises(DataFileError, match="line 2: expected 5 fields"):
            load_hpv(p)


class TestAgriFiles:
    def test_round_trip(self, tmp_path):
        model, _ = AgriModel.synthetic(np.random.default_rng(0), n_A=8, n_M=20, q_hm=5, q_po=3)
        d = model.data
        back = load_agri(write_agri(tmp_path / "agri.csv", d))
        for f in ("Z_A", "wheat_A", "S_A", "Z_M", "wheat_M", "R_M", "M_M"):
            assert np.array_equal(getattr(back, f), getattr(d, f)), f
        # slots are relabelled by first appearance, so compare through labels
        assert [back.location_labels[i] for i in back.loc_A] == [d.location_labels[i] for i in d.loc_A]
        assert [back.location_labels[i] for i in back.loc_M] == [d.location_labels[i] for i in d.loc_M]
        assert [back.po_location_labels[i] for i in back.po_loc_A] == [d.location_labels[i] for i in d.loc_A]

    @pytest.mark.parametrize("row,msg", [
        ("X,1,wheat,L1,0.5,,", "not A or M"),
        ("A,1,rye,L1,0.5,,", "crop"),
        ("A,1,wheat,L1,0.5,0.3,", "blank for archaeological"),
        ("M,1,wheat,L1,,0.3,", "required for modern"),
        ("M,1,wheat,L1,,0.3,lots", "manure"),
    ])
    def test_schema_errors(self, tmp_path, row, msg):
        p = tmp_path / "agri.csv"
        p.write_text("dataset,nitrogen,crop,location,size,rainfall,manure\nA,2,barley,L1,0.1,,\n" + row + "\n")
        with pytest.raises(DataFileError, match=f"line 3: .*{msg}"):
            load_agri(p)

    def test_needs_archaeological_rows(self, tmp_path):
        p = tmp_path / "agri.csv"
        p.write_text("dataset,nitrogen,crop,location,size,rainfall,manure\nM,2,barley,L1,,0.3,med\n")
        with pytest.raises(DataFileError, match="no archaeological"):
            load_agri(p)
