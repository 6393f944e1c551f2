import json
import subprocess
import sys

import numpy as np
import pytest
import scipy.sparse as sp

from _oracles import d2d_oracle
from matrel.cli import main
from matrel.dsl import parse_script
from matrel.errors import IndexOutOfRange, ParseError
from matrel.io import (load_matrix, read_csv, read_matrix_market, read_tensor, write_csv,
                       write_matrix_market)

MM = "%%MatrixMarket matrix coordinate real general\n"


def write(path, text):
    path.write_text(text)
    return str(path)


# -- matrix files --------------------------------------------------------------------

def test_mm_by_hand(tmp_path):
    p = write(tmp_path / "a.mtx", MM + "% comment\n3 3 2\n1 1 1.0\n3 2 5.0\n")
    m = read_matrix_market(p)
    assert m.shape == (3, 3) and m.nnz == 2
    assert m.toarray().tolist() == [[1, 0, 0], [0, 0, 0], [0, 5, 0]]
    d = load_matrix(p, "mm", 2, 3)
    assert d.is_sparse and d.nnz == 2


def test_csv_rows(tmp_path):
    p = write(tmp_path / "a.csv", "1,2\n3,4\n")
    assert read_csv(p).tolist() == [[1, 2], [3, 4]]
    d = load_matrix(p, "csv", 2, 2)
    assert not d.is_sparse and d.to_dense().tolist() == [[1, 2], [3, 4]]


def test_mm_out_of_range(tmp_path):
    p = write(tmp_path / "a.mtx", MM + "3 3 1\n4 1 2.0\n")
    with pytest.raises(IndexOutOfRange):
        read_matrix_market(p)


@pytest.mark.parametrize("body, line", [
    ("3 3 1\n1 x 2.0\n", 3),
    ("3 3\n", 2),
    ("3 3 2\n1 1 1\n", 3),
    ("% only a comment\n2 2 1\n1 1 1 1\n", 4),
])
def test_mm_parse_errors_report_lines(tmp_path, body, line):
    p = write(tmp_path / "a.mtx", MM + body)
    with pytest.raises(ParseError) as err:
        read_matrix_market(p)
    assert err.value.line == line


def test_mm_header_required(tmp_path):
    p = write(tmp_path / "a.mtx", "3 3 0\n")
    with pytest.raises(ParseError) as err:
        read_matrix_market(p)
    assert err.value.line == 1


def test_csv_ragged(tmp_path):
    p = write(tmp_path / "a.csv", "1,2\n3\n")
    with pytest.raises(ParseError) as err:
        read_csv(p)
    assert err.value.line == 2


def test_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    arr = np.where(rng.random((13, 9)) < 0.3, rng.normal(size=(13, 9)), 0.0)
    arr[0, 0] = 0.1
    write_matrix_market(str(tmp_path / "x.mtx"), sp.csr_matrix(arr))
    assert np.array_equal(read_matrix_market(str(tmp_path / "x.mtx")).toarray(), arr)
    write_csv(str(tmp_path / "x.csv"), arr)
    assert np.array_equal(read_csv(str(tmp_path / "x.csv")), arr)


# -- script parsing ---------------------------------------------------------------------

def test_script_names_must_be_defined():
    with pytest.raises(ParseError) as err:
        parse_script('A = load_sparse("a.mtx")\nsave(B, "out")\n')
    assert err.value.line == 2


def test_script_single_assignment():
    with pytest.raises(ParseError):
        parse_script('A = load_sparse("a.mtx")\nA = t(A)\n')


def test_script_statements():
    s = parse_script('A = load_dense("a.csv"); B = A %*% t(A) + A %*% A\n'
                     'save(B, "b.csv")\nexplain(B)\n')
    assert [type(x).__name__ for x in s.statements] == ["Assign", "Assign", "Save", "Explain"]
    assert s.loads == {"A": ("a.csv", "csv")}


# -- CLI ------------------------------------------------------------------------------------

@pytest.fixture
def matrices(tmp_path):
    rng = np.random.default_rng(1)
    A = np.where(rng.random((12, 10)) < 0.3, rng.integers(1, 5, (12, 10)), 0).astype(float)
    B = np.where(rng.random((12, 8)) < 0.3, rng.integers(1, 5, (12, 8)), 0).astype(float)
    write_matrix_market(str(tmp_path / "a.mtx"), sp.csr_matrix(A))
    write_matrix_market(str(tmp_path / "b.mtx"), sp.csr_matrix(B))
    return tmp_path, A, B


def cli(tmp_path, text, *flags):
    script = tmp_path / "q.mr"
    script.write_text(text)
    return main(["--script", str(script), "--workers", "3", "--block-size", "4", *flags])


def test_cli_trace_of_gram(matrices, capsys):
    tmp, A, _ = matrices
    out = tmp / "trace.txt"
    stats = tmp / "stats.json"
    code = cli(tmp, f'A = load_sparse("a.mtx")\nG = t(A) %*% A\ns = agg(sum, diag, G)\n'
               f'save(s, "{out}")\n', "--stats", str(stats))
    assert code == 0
    assert float(out.read_text()) == pytest.approx(np.trace(A.T @ A), abs=1e-9)
    report = json.loads(stats.read_text())
    assert report["ops"]["matmul_block_events"] == 0
    assert report["rewrite_trace"][0]["rule"] == "sum_matmul"
    assert report["result"] == {"shape": [1, 1], "nnz": 1}
    assert "saved s" in capsys.readouterr().out


def test_cli_explain_runs_nothing(matrices, capsys):
    tmp, _, _ = matrices
    out = tmp / "never.txt"
    code = cli(tmp, f'A = load_sparse("a.mtx")\ns = agg(sum, r, t(A) %*% A)\n'
               f'save(s, "{out}")\n', "--explain")
    text = capsys.readouterr().out
    assert code == 0 and not out.exists()
    assert "logical:   agg(sum, r, (t(A) %*% A))" in text
    assert "optimized: (t(A) %*% agg(sum, r, A))" in text
    assert "sum_matmul" in text and "costs" in text


def test_cli_join_saves_tensor(matrices):
    tmp, A, B = matrices
    out = tmp / "c.tsv"
    code = cli(tmp, f'A = load_sparse("a.mtx")\nB = load_sparse("b.mtx")\n'
               f'C = join(A, B, "rid_a=rid_b", "x*y")\nsave(C, "{out}")\n')
    assert code == 0
    coords, vals = read_tensor(str(out), 3)
    got = {tuple(map(int, c)): v for c, v in zip(coords, vals)}
    assert got == d2d_oracle(A, B, ("RID", "RID"), lambda x, y: x * y)
    lines = out.read_text().splitlines()
    keys = [tuple(map(int, ln.split("\t")[:3])) for ln in lines]
    assert keys == sorted(keys)


def test_cli_no_opt_agrees(matrices):
    tmp, A, B = matrices
    script = (f'A = load_sparse("a.mtx")\nB = load_sparse("b.mtx")\n'
              f'x = agg(avg, c, (t(A) %*% B) .* 2 + 1)\nsave(x, "{{}}")\n')
    cli(tmp, script.format(tmp / "opt.csv"))
    cli(tmp, script.format(tmp / "naive.csv"), "--no-opt")
    a, b = read_csv(str(tmp / "opt.csv")), read_csv(str(tmp / "naive.csv"))
    assert np.allclose(a, b, atol=1e-9, rtol=0)
    want = ((A.T @ B) * 2 + 1)
    assert np.allclose(a, (want.sum(0) / np.count_nonzero(want, 0)).reshape(1, -1))


def test_cli_rules_subset(matrices, capsys):
    tmp, _, _ = matrices
    code = cli(tmp, 'A = load_sparse("a.mtx")\ns = agg(avg, a, t(A))\nexplain(s)\n',
               "--rules", "AvgExpand")
    text = capsys.readouterr().out
    assert code == 0
    assert "optimized: (agg(sum, a, t(A)) ./ agg(nnz, a, t(A)))" in text


def test_cli_errors_exit_nonzero(matrices, capsys):
    tmp, _, _ = matrices
    code = cli(tmp, 'A = load_sparse("a.mtx")\nB = A %*% A\nsave(B, "x")\n')
    assert code == 1
    assert "DimMismatch" in capsys.readouterr().err
    code = cli(tmp, 'A = load_sparse("missing.mtx")\nsave(A, "x")\n')
    assert code == 1


def test_block_size_env_var(matrices, monkeypatch, capsys):
    tmp, _, _ = matrices
    script = tmp / "q.mr"
    script.write_text(f'A = load_sparse("a.mtx")\nsave(A, "{tmp / "a2.mtx"}")\n')
    stats = tmp / "s.json"
    monkeypatch.setenv("MATREL_BLOCK_SIZE", "5")
    from matrel import cli as cli_mod
    args = cli_mod.build_parser().parse_args(["--script", str(script)])
    assert cli_mod._block_size(args) == 5
    args = cli_mod.build_parser().parse_args(["--script", str(script), "--block-size", "7"])
    assert cli_mod._block_size(args) == 7
    assert main(["--script", str(script), "--stats", str(stats)]) == 0


def test_module_entry_point(matrices):
    tmp, A, _ = matrices
    script = tmp / "q.mr"
    out = tmp / "rows.csv"
    script.write_text(f'A = load_sparse("a.mtx")\nr = agg(sum, r, A)\nsave(r, "{out}")\n')
    res = subprocess.run([sys.executable, "-m", "matrel.cli", "--script", str(script),
                          "--block-size", "4"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert np.allclose(read_csv(str(out)).ravel(), A.sum(axis=1))
