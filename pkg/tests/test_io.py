from __future__ import annotations

import json
import os

import numpy as np
import pytest

from bayes_sandwich import io
from bayes_sandwich.errors import DataError
from bayes_sandwich.io import Formula, atomic_write, ingest_csv, parse_config, render_table


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestFormula:
    def test_needs_one_outcome(self):
        with pytest.raises(DataError):
            Formula()
        with pytest.raises(DataError):
            Formula(outcome="y", average=("a", "b"))

    def test_average_needs_two(self):
        with pytest.raises(DataError):
            Formula(average=("a",))

    def test_survival_needs_both(self):
        with pytest.raises(DataError):
            Formula(event="d")
        with pytest.raises(DataError):
            Formula(outcome="y", event="d", time="t")

    def test_empty_design(self):
        with pytest.raises(DataError):
            Formula(outcome="y", intercept=False)

    def test_term_names(self):
        assert Formula(outcome="y", covariates=["x"]).term_names == ("(Intercept)", "x")
        assert Formula(outcome="y", covariates=["x"], intercept=False).term_names == ("x",)


class TestIngest:
    def test_three_rows(self, tmp_path):
        path = write(tmp_path, "y,x1,x2\n1,2,3\n4,5,6\n7,8,10\n")
        ing = ingest_csv(path, Formula(outcome="y", covariates=["x1", "x2"]))
        assert (ing.data.n, ing.data.p) == (3, 3)
        np.testing.assert_array_equal(ing.data.X, [[1, 2, 3], [1, 5, 6], [1, 8, 10]])
        np.testing.assert_array_equal(ing.data.y, [1, 4, 7])
        assert ing.n_dropped == 0

    def test_non_numeric_dropped(self, tmp_path):
        path = write(tmp_path, "y,x1,x2\n1,2,3\n4,abc,6\n7,8,10\n")
        ing = ingest_csv(path, Formula(outcome="y", covariates=["x1", "x2"]))
        assert ing.data.n == 2 and ing.n_dropped == 1 and ing.dropped_rows == (2,)
        assert "x1" in ing.messages[0]

    def test_strict_names_row(self, tmp_path):
        path = write(tmp_path, "y,x1,x2\n1,2,3\n4,abc,6\n7,8,10\n")
        with pytest.raises(DataError, match="row 2"):
            ingest_csv(path, Formula(outcome="y", covariates=["x1", "x2"]), strict=True)

    def test_missing_cells_dropped_even_when_strict(self, tmp_path):
        path = write(tmp_path, "y,x\n1,2\n,3\n4,NA\n5,6\n6,7\n")
        ing = ingest_csv(path, Formula(outcome="y", covariates=["x"]), strict=True)
        assert ing.data.n == 3 and ing.dropped_rows == (2, 3)

    def test_unreferenced_columns_ignored(self, tmp_path):
        path = write(tmp_path, "id,y,x,note\n1,1,2,hello\n2,3,4,\n3,5,7,x\n")
        assert ingest_csv(path, Formula(outcome="y", covariates=["x"])).data.n == 3

    def test_missing_column(self, tmp_path):
        path = write(tmp_path, "y,x\n1,2\n")
        with pytest.raises(DataError, match="z"):
            ingest_csv(path, Formula(outcome="y", covariates=["z"]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            ingest_csv(tmp_path / "nope.csv", Formula(outcome="y"))

    def test_no_usable_rows(self, tmp_path):
        path = write(tmp_path, "y,x\nfoo,2\n")
        with pytest.raises(DataError):
            ingest_csv(path, Formula(outcome="y", covariates=["x"]))

    def test_average_outcome(self, tmp_path):
        path = write(tmp_path, "a,b,x\n1,3,0\n2,6,1\n5,5,2\n")
        ing = ingest_csv(path, Formula(average=("a", "b"), covariates=["x"]))
        np.testing.assert_array_equal(ing.data.y, [2, 4, 5])

    def test_survival(self, tmp_path):
        path = write(tmp_path, "t,d,x\n1.5,1,0\n2.0,0,1\n0.3,1,1\n")
        ing = ingest_csv(path, Formula(covariates=["x"], time="t", event="d"))
        np.testing.assert_array_equal(ing.data.event, [1, 0, 1])
        np.testing.assert_array_equal(ing.data.time, [1.5, 2.0, 0.3])

    def test_event_coding(self, tmp_path):
        path = write(tmp_path, "t,d,x\n1.5,2,0\n2.0,0,1\n")
        with pytest.raises(DataError, match="0/1"):
            ingest_csv(path, Formula(covariates=["x"], time="t", event="d"))

    def test_bundled_dataset(self):
        ing = ingest_csv(io.bundled_dataset(), Formula(average=("sbp1", "sbp2"), covariates=["male", "age"]))
        assert ing.data.n == 200 and ing.n_dropped == 0
        with pytest.raises(DataError):
            io.bundled_dataset("missing.csv")


class TestFiles:
    def test_atomic_write(self, tmp_path):
        path = tmp_path / "sub" / "out.txt"
        atomic_write(path, "one")
        atomic_write(path, "two")
        assert path.read_text() == "two"
        assert os.listdir(path.parent) == ["out.txt"]

    def test_parse_config(self):
        cfg = parse_config("# comment\nburnin = 10\n beta-var=5 # trailing\n\nburnin = 20\n")
        assert cfg == {"burnin": "20", "beta_var": "5"}

    def test_bad_config_line(self):
        with pytest.raises(DataError, match="line 1"):
            parse_config("just words\n")


class TestTables:
    header = ("name", "value")
    rows = [["a", 1.23456], ["bb", float("nan")]]

    def test_csv(self):
        assert render_table(self.header, self.rows, "csv") == "name,value\na,1.235\nbb,NA\n"

    def test_markdown_aligned(self):
        text = render_table(self.header, self.rows, "markdown")
        lines = text.splitlines()
        assert len({len(line) for line in lines}) == 1
        assert lines[1].endswith(":|")

    def test_json_full_precision(self):
        records = json.loads(render_table(self.header, self.rows, "json"))
        assert records[0]["value"] == 1.23456 and records[1]["value"] is None

    def test_unknown_format(self):
        with pytest.raises(DataError):
            render_table(self.header, self.rows, "xml")
