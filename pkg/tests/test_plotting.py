import re

import pytest

from case_lab.cli import EXIT_OK, EXIT_RUNTIME, main
from case_lab.evaluate import RUN_HEADER
from case_lab.plotting import PlotError, read_sweep_csv, render_svg, series_stats


def write_csv(path, rows, header=RUN_HEADER):
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


def ablation_rows():
    return [["CASE_CI_L", k, s, 50, round(0.1 * k + 0.01 * s, 4), 10.0, 1.0] for k in range(1, 9) for s in range(8)]


def test_single_row_single_point(tmp_path):
    path = write_csv(tmp_path / "one.csv", [["CASE", 4, 0, 10, 0.5, 3.0, 1.0]])
    series, xcol = read_sweep_csv(path)
    assert xcol == "k" and series == {"CASE": {4: [0.5]}}
    svg = render_svg(series, xcol)
    assert svg.count("<svg") == 1


def test_ablation_means_and_stds(tmp_path):
    series, _ = read_sweep_csv(write_csv(tmp_path / "k.csv", ablation_rows()))
    xs, means, stds = series_stats(series["CASE_CI_L"])
    assert xs == list(range(1, 9))
    for k, m, s in zip(xs, means, stds):
        rates = [round(0.1 * k + 0.01 * i, 4) for i in range(8)]
        mu = sum(rates) / 8
        assert m == pytest.approx(mu)
        assert s == pytest.approx((sum((r - mu) ** 2 for r in rates) / 7) ** 0.5)


def test_svg_bytes_deterministic(tmp_path):
    path = write_csv(tmp_path / "k.csv", ablation_rows())
    assert render_svg(*read_sweep_csv(path)) == render_svg(*read_sweep_csv(path))
    assert not re.search(r"<dc:date>", render_svg(*read_sweep_csv(path)))


def test_length_column_preferred(tmp_path):
    header = ("length",) + RUN_HEADER
    path = write_csv(tmp_path / "s.csv", [[2, "CASE", 4, 0, 5, 0.4, 1, 0], [3, "CASE", 4, 0, 5, 0.2, 1, 0]], header)
    series, xcol = read_sweep_csv(path)
    assert xcol == "length" and sorted(series["CASE"]) == [2, 3]


def test_malformed_rows_name_line(tmp_path):
    bad = write_csv(tmp_path / "bad.csv", [["CASE", 4, 0, 10, 0.5, 3.0, 1.0], ["CASE", "four", 0, 10, 0.5, 3.0, 1.0]])
    with pytest.raises(PlotError, match=r"bad\.csv:3"):
        read_sweep_csv(bad)
    short = write_csv(tmp_path / "short.csv", [["CASE", 4, 0]])
    with pytest.raises(PlotError, match=r"short\.csv:2"):
        read_sweep_csv(short)
    nohead = tmp_path / "nohead.csv"
    nohead.write_text("a,b\n1,2\n")
    with pytest.raises(PlotError, match=r"nohead\.csv:1"):
        read_sweep_csv(nohead)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(PlotError):
        read_sweep_csv(empty)


def test_cli_plot(tmp_path, capsys):
    path = write_csv(tmp_path / "k.csv", ablation_rows())
    assert main(["plot", str(path), "--out", str(tmp_path / "a.svg")]) == EXIT_OK
    assert main(["plot", str(path), "--out", str(tmp_path / "b.svg")]) == EXIT_OK
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    bad = write_csv(tmp_path / "bad.csv", [["CASE", "x", 0, 1, 0.1, 1, 1]])
    assert main(["plot", str(bad)]) == EXIT_RUNTIME
    assert "bad.csv:2" in capsys.readouterr().err
