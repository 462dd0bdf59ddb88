import json
import os

import numpy as np

from rothedual import io


def test_dumps_is_stable_and_handles_numpy():
    obj = {"b": np.float64(1.5), "a": np.arange(3), "c": np.bool_(True), "d": float("inf"),
           "e": np.int64(4)}
    text = io.dumps(obj)
    assert text == io.dumps(dict(reversed(list(obj.items()))))
    data = json.loads(text)
    assert data == {"a": [0, 1, 2], "b": 1.5, "c": True, "d": "inf", "e": 4}


def test_atomic_write_leaves_no_temp(tmp_path):
    path = tmp_path / "sub" / "x.json"
    io.write_json(str(path), {"k": 1})
    io.write_json(str(path), {"k": 2})
    assert json.loads(path.read_text()) == {"k": 2}
    assert os.listdir(path.parent) == ["x.json"]


def test_field_formats():
    f = np.array([0.5, -1.25, 3.0])
    assert json.loads(io.field_to_json(f)) == [0.5, -1.25, 3.0]
    lines = io.field_to_csv(f).splitlines()
    assert lines[0] == "node_index,value" and lines[2] == "1,-1.25"
    state = io.state_to_csv(np.vstack([f, 2 * f])).splitlines()
    assert state[0] == "node_index,u1,u2" and state[1] == "0,0.5,1.0"


def test_csv_and_gnuplot(tmp_path):
    rows = [{"x": 1, "y": 0.1, "ok": True}, {"x": 2, "y": 0.2, "ok": False}]
    io.write_csv(str(tmp_path / "t.csv"), rows, ("x", "y", "ok"))
    assert (tmp_path / "t.csv").read_text() == "x,y,ok\n1,0.1,true\n2,0.2,false\n"
    io.write_gnuplot(str(tmp_path), "t", rows, ("x", "y"))
    assert (tmp_path / "t.dat").read_text().splitlines()[1] == "1 0.1"
    assert "using 1:2" in (tmp_path / "t.gp").read_text()
