import json

import numpy as np
import pytest

from spatial_conformal.ingest import (
    IngestError,
    center,
    load_csv,
    split_holdout,
    uncenter,
    unit_square_map,
    write_csv,
)
from spatial_conformal.kriging import SpatialDataset
from spatial_conformal.simulate import ScenarioSpec, generate_scenario


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_well_formed(tmp_path):
    data, rep = load_csv(write(tmp_path, "s_x,s_y,y\n0,0,1\n0.5,1,2\n1,0.25,-3\n"))
    assert len(data) == 3
    assert (rep.rows_read, rep.rows_accepted, rep.rows_rejected) == (3, 3, 0)
    assert rep.bounding_box == (0.0, 0.0, 1.0, 1.0)
    assert rep.response_summary["min"] == -3.0


def test_nan_rows_rejected(tmp_path, caplog):
    data, rep = load_csv(write(tmp_path, "s_x,s_y,y\n0,0,1\n0.5,1,NaN\n1,0.25,oops\n2,2,2\n"))
    assert len(data) == 2
    assert rep.rows_read == rep.rows_accepted + rep.rows_rejected == 4
    assert "line 3" in rep.rejections[0] and "non-finite" in rep.rejections[0]
    assert "unparsable" in rep.rejections[1]
    assert "rejected" in caplog.text


def test_columns_by_name_and_index(tmp_path):
    p = write(tmp_path, "id,east,north,z\n1,0.1,0.2,5\n2,0.3,0.4,6\n")
    a, _ = load_csv(p, x="east", y="north", response="z")
    b, _ = load_csv(p, x=1, y=2, response=3)
    assert a == b


def test_errors(tmp_path):
    with pytest.raises(IngestError):
        load_csv(tmp_path / "missing.csv")
    with pytest.raises(IngestError):
        load_csv(write(tmp_path, "a,b,c\n1,2,3\n"))
    with pytest.raises(IngestError):
        load_csv(write(tmp_path, "s_x,s_y,y\n1,2,nan\n"))
    with pytest.raises(IngestError):
        load_csv(write(tmp_path, ""))


def test_rescale_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.uniform([500_000, 4_000_000], [503_000, 4_002_000], size=(50, 2))
    p = tmp_path / "utm.csv"
    write_csv(SpatialDataset(raw, rng.normal(size=50)), p)
    data, rep = load_csv(p, rescale=True)
    assert data.locations.min() >= 0 and data.locations.max() <= 1
    assert "post-rescale" in rep.distance_units
    np.testing.assert_allclose(rep.rescale.from_unit(data.locations), raw, rtol=0, atol=1e-12 * 4e6)
    np.testing.assert_allclose(rep.rescale.to_unit(raw), data.locations, atol=1e-12)
    json.loads(rep.to_json())


def test_unit_map_is_isotropic():
    m = unit_square_map([[0, 0], [4, 2]])
    np.testing.assert_allclose(m.to_unit([[4, 2]]), [[1.0, 0.5]])


def test_export_round_trip_exact(tmp_path):
    data = generate_scenario(ScenarioSpec(4, 6, 3))
    p = tmp_path / "x.csv"
    write_csv(data, p)
    back, _ = load_csv(p)
    assert back == data
    write_csv(back, tmp_path / "y.csv")
    assert (tmp_path / "y.csv").read_bytes() == p.read_bytes()


def test_split_holdout():
    tr, va, te = split_holdout(20, 0, 0, 1)
    np.testing.assert_array_equal(tr, np.arange(20))
    assert va.size == te.size == 0
    a = split_holdout(100, 10, 20, 7)
    b = split_holdout(100, 10, 20, 7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    tr, va, te = a
    assert (tr.size, va.size, te.size) == (70, 10, 20)
    assert set(tr) | set(va) | set(te) == set(range(100))
    assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))
    with pytest.raises(ValueError):
        split_holdout(10, 6, 5, 0)


def test_center_uncenter():
    d = SpatialDataset([[0, 0], [1, 1], [2, 0]], [1.0, 2.0, 6.0])
    c, off = center(d)
    assert off == 3.0
    assert c.responses.mean() == 0
    np.testing.assert_array_equal(uncenter(c.responses, off), d.responses)
