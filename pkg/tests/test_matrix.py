import pytest

from keyflip.engine import AttackConfig
from keyflip.matrix import MatrixCell, columns, default_cells, read_rows, run_experiment_matrix
from keyflip.objective import write_sample_file


@pytest.fixture(scope="module")
def truth_sample(tmp_path_factory, world):
    rec = world.by_id()["mountain-world"]
    path = tmp_path_factory.mktemp("matrix") / "truth.json"
    write_sample_file([{"question": rec.question, "true_answer": rec.answer, "keywords": "everest",
                        "benign_questions": [world.by_id()["leader-second-avalon"].question]}], path)
    return str(path)


def test_one_cell_one_row(victim0_path, truth_sample, world, tok):
    cell = MatrixCell("c0", str(victim0_path), truth_sample, AttackConfig(strategy="impact_noaux"))
    rows, text = run_experiment_matrix([cell], world, tok)
    assert len(rows) == 1 and rows[0]["status"] == "Success" and rows[0]["flips"] == 0
    assert rows[0]["pre_mean"] == rows[0]["post_mean"]
    lines = text.splitlines()
    assert lines[0].split(",") == columns() and len(lines) == 2


def test_rerun_is_identical_and_errors_are_rows(victim0_path, truth_sample, world, tok, tmp_path):
    cells = [MatrixCell("ok", str(victim0_path), truth_sample, AttackConfig(strategy="grad_inrange")),
             MatrixCell("bad", str(victim0_path), str(tmp_path / "missing.json"))]
    rows_a, text_a = run_experiment_matrix(cells, world, tok)
    rows_b, text_b = run_experiment_matrix(cells, world, tok)
    assert text_a == text_b
    assert [r["status"] for r in rows_a] == ["Success", "Error"]
    assert "missing.json" in rows_a[1]["error"]
    (tmp_path / "m.csv").write_text(text_a)
    assert [r["cell_id"] for r in read_rows(tmp_path / "m.csv")] == ["ok", "bad"]


def test_default_grid():
    cells = default_cells("v.kflp", {"rel": "r.json", "irr": "i.json"}, seed=3)
    assert len(cells) == 2 * 3 * 3
    assert len({c.cell_id for c in cells}) == len(cells)
    assert {str(c.attack.search_range) for c in cells} == {"head", "tail:0.5", "full"}
    assert all(c.attack.seed == 3 for c in cells)
