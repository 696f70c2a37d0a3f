import numpy as np
import pytest

from pnrtomo.io import (
    TraceFileError,
    encode_traces,
    fmt,
    load_arrays,
    read_csv,
    read_traces,
    save_arrays,
    trace_file_size,
    write_csv,
    write_traces,
)


def test_trace_round_trip(tmp_path, rng):
    data = rng.normal(size=(6, 5))
    labels = np.array([0, 0, 1, 1, 1, 2])
    p = tmp_path / "t.pnr"
    write_traces(p, data, [0.0, 1.5, 3.0], labels)
    tf = read_traces(p)
    np.testing.assert_array_equal(tf.data, data)
    np.testing.assert_array_equal(tf.labels, labels)
    np.testing.assert_array_equal(tf.ranges, [[0, 2], [2, 5], [5, 6]])
    assert p.stat().st_size == trace_file_size(6, 5, 3)


def test_int16_format(tmp_path):
    data = np.array([[1.4, -2.6], [40000.0, -40000.0]])
    p = tmp_path / "t.pnr"
    write_traces(p, data, [1.0], [0, 0], "int16")
    tf = read_traces(p)
    assert tf.sample_format == "int16"
    np.testing.assert_array_equal(tf.data, [[1, -3], [32767, -32768]])
    assert p.stat().st_size == trace_file_size(2, 2, 1, "int16")


def test_corrupt_trace_files(tmp_path, rng):
    raw = encode_traces(rng.normal(size=(3, 4)), [1.0], [0, 0, 0])
    p = tmp_path / "bad.pnr"
    for blob in (raw[:10], b"XXXXXXXX" + raw[8:], raw[:-8]):
        p.write_bytes(blob)
        with pytest.raises(TraceFileError):
            read_traces(p)
    with pytest.raises(TraceFileError):
        encode_traces(np.zeros((2, 2)), [1.0, 2.0], [1, 0])


def test_array_archive_deterministic(tmp_path):
    a = {"x": np.arange(5.0), "y": np.eye(3)}
    save_arrays(tmp_path / "a.npz", **a)
    save_arrays(tmp_path / "b.npz", **a)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = load_arrays(tmp_path / "a.npz")
    np.testing.assert_array_equal(back["y"], np.eye(3))


def test_csv_round_trip_exact(tmp_path, rng):
    vals = rng.normal(size=(4, 3)) * 10.0 ** rng.integers(-200, 200, (4, 3))
    write_csv(tmp_path / "c.csv", ["a (s)", "b", "c"], vals.tolist())
    header, back = read_csv(tmp_path / "c.csv")
    assert header == ["a (s)", "b", "c"]
    np.testing.assert_array_equal(back, vals)
    assert float(fmt(0.1)) == 0.1
