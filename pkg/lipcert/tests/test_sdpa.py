# Copyright (c) 2023-2024 Datalayer, Inc.
#
# BSD 3-Clause License

import math

import numpy as np
import pytest

from lipcert.assembly import AffineLmiBlock, BoundSemantics, SdpProblem, assemble_l2_feedforward
from lipcert.exceptions import ParseError
from lipcert.sdpa import export_sdpa, export_sdpa_solution, import_sdpa_solution, read_sdpa
from lipcert.solver import SdpaConvention, SolveStatus, solve


@pytest.mark.parametrize(
    "convention, golden",
    [
        (SdpaConvention.NEGATED, "lambda_max.dat-s"),
        (SdpaConvention.SDPA, "lambda_max.sdpa.dat-s"),
    ],
)
def test_export_sdpa__matches_golden_file(tmp_path, lambda_max, fixtures_dir, convention, golden):
    path = tmp_path / golden
    export_sdpa(lambda_max(np.diag([1.0, 3.0])), path, convention)
    assert path.read_bytes() == (fixtures_dir / golden).read_bytes()


def test_export_sdpa__negated_convention_writes_negated_constant(tmp_path, lambda_max):
    path = tmp_path / "lambda_max.dat-s"
    export_sdpa(lambda_max(np.diag([1.0, 3.0])), path)
    entries = path.read_text().splitlines()[-4:]
    assert entries == ["0 1 1 1 -1", "0 1 2 2 -3", "1 1 1 1 -1", "1 1 2 2 -1"]


@pytest.mark.parametrize("golden", ["lambda_max.dat-s", "lambda_max.sdpa.dat-s"])
def test_read_sdpa__restores_the_golden_problem(fixtures_dir, golden):
    problem = read_sdpa(fixtures_dir / golden)
    assert problem.name == "lambda_max"
    assert problem.var_names == ("t",)
    assert problem.bound_semantics is BoundSemantics.RHO
    assert problem.rho_index == 0
    np.testing.assert_array_equal(problem.blocks[0].F0, np.diag([1.0, 3.0]))
    np.testing.assert_array_equal(problem.blocks[0].terms[0][1], -np.eye(2))


@pytest.mark.parametrize("convention", list(SdpaConvention))
def test_read_sdpa__restores_an_assembled_problem(tmp_path, feedforward, rng, convention):
    problem = assemble_l2_feedforward(feedforward([3, 4, 2]))
    path = tmp_path / "ff.dat-s"
    export_sdpa(problem, path, convention)
    restored = read_sdpa(path)
    assert restored.name == problem.name
    assert restored.var_names == problem.var_names
    assert [b.diagonal for b in restored.blocks] == [b.diagonal for b in problem.blocks]
    z = rng.standard_normal(problem.num_vars)
    for expected, actual in zip(problem.evaluate(z), restored.evaluate(z)):
        np.testing.assert_allclose(actual, expected, atol=1e-12)


def test_read_sdpa__plain_file_is_a_feasibility_problem(tmp_path):
    path = tmp_path / "plain.dat-s"
    path.write_text(
        "* from elsewhere\n2 =mdim\n1 =nblock\n{2}\n{1.0, 0.0}\n1 1 1 1 1.0\n2 1 2 2 1.0\n"
    )
    problem = read_sdpa(path)
    assert problem.bound_semantics is BoundSemantics.FEASIBILITY
    assert problem.var_names == ("z[0]", "z[1]")
    assert problem.rho_index is None
    np.testing.assert_array_equal(problem.objective, [1.0, 0.0])
    np.testing.assert_array_equal(problem.blocks[0].terms[0][1], np.diag([-1.0, 0.0]))


def test_read_sdpa__explicit_convention_overrides_the_header(fixtures_dir):
    problem = read_sdpa(fixtures_dir / "lambda_max.dat-s", SdpaConvention.SDPA)
    np.testing.assert_array_equal(problem.blocks[0].F0, np.diag([-1.0, -3.0]))
    np.testing.assert_array_equal(problem.blocks[0].terms[0][1], np.eye(2))


@pytest.mark.parametrize(
    "content",
    [
        "1\n1\n",
        "1\n1\n2\n1\n3 1 1 1 1.0\n",
        "1\n1\n2\n1\n1 1 3 1 1.0\n",
        "1\n1\n2\n1\n1 1 1 x 1.0\n",
        '"convention upside-down\n1\n1\n2\n1\n1 1 1 1 1.0\n',
    ],
)
def test_read_sdpa__rejects_malformed_files(tmp_path, content):
    path = tmp_path / "bad.dat-s"
    path.write_text(content)
    with pytest.raises(ParseError):
        read_sdpa(path)


def test_export_sdpa__rejects_problem_without_blocks(tmp_path):
    problem = SdpProblem(
        num_vars=1,
        objective=np.ones(1),
        blocks=(),
        var_names=("t",),
        bound_semantics=BoundSemantics.FEASIBILITY,
    )
    with pytest.raises(ValueError):
        export_sdpa(problem, tmp_path / "empty.dat-s")


def test_import_sdpa_solution__external_optimum(fixtures_dir, lambda_max):
    result = import_sdpa_solution(fixtures_dir / "lambda_max.out", lambda_max(np.diag([1.0, 3.0])))
    assert result.status is SolveStatus.OPTIMAL
    assert result.rho == 3.0
    assert result.lipschitz_bound == 3.0
    assert result.dual_obj == pytest.approx(3.0)


def test_import_sdpa_solution__truncated_file(fixtures_dir, lambda_max):
    with pytest.raises(ParseError):
        import_sdpa_solution(fixtures_dir / "truncated.out", lambda_max(np.diag([1.0, 3.0])))


def test_import_sdpa_solution__wrong_vector_length(tmp_path, lambda_max):
    path = tmp_path / "long.out"
    path.write_text("phase.value = pdOPT\nxVec = \n{3.0,1.0}\n")
    with pytest.raises(ParseError):
        import_sdpa_solution(path, lambda_max(np.diag([1.0, 3.0])))


def test_import_sdpa_solution__without_dual_is_not_certified(tmp_path, lambda_max):
    path = tmp_path / "primal_only.out"
    path.write_text("phase.value = pdOPT\nxVec = \n{3.0}\n")
    result = import_sdpa_solution(path, lambda_max(np.diag([1.0, 3.0])))
    assert result.status is SolveStatus.NUMERICAL_ERROR
    assert math.isnan(result.lipschitz_bound)


def test_import_sdpa_solution__wrong_dual_is_not_certified(tmp_path, lambda_max):
    path = tmp_path / "wrong_dual.out"
    path.write_text(
        "phase.value = pdOPT\nxVec = \n{3.0}\nyMat = \n{\n{ {1.0,0.0}, {0.0,0.0} }\n}\n"
    )
    result = import_sdpa_solution(path, lambda_max(np.diag([1.0, 3.0])))
    assert result.status is SolveStatus.NUMERICAL_ERROR
    assert result.kkt_residuals.gap == pytest.approx(2.0)


def test_import_sdpa_solution__mismatched_dual_blocks(tmp_path, lambda_max):
    path = tmp_path / "ragged.out"
    path.write_text("phase.value = pdOPT\nxVec = \n{3.0}\nyMat = \n{\n{ {1.0} }\n}\n")
    with pytest.raises(ParseError):
        import_sdpa_solution(path, lambda_max(np.diag([1.0, 3.0])))


def test_export_sdpa_solution__round_trips_an_optimum(tmp_path, lambda_max, random_symmetric):
    problem = lambda_max(random_symmetric(5))
    result = solve(problem)
    path = tmp_path / "solution.out"
    export_sdpa_solution(problem, result, path)
    restored = import_sdpa_solution(path, problem)
    assert restored.status is SolveStatus.OPTIMAL
    assert restored.rho == result.rho
    np.testing.assert_array_equal(restored.z, result.z)


def test_export_sdpa_solution__round_trips_an_infeasibility_ray(tmp_path):
    blocks = (
        AffineLmiBlock(size=1, F0=np.ones((1, 1)), terms=((0, -np.ones((1, 1))),)),
        AffineLmiBlock(size=1, F0=np.ones((1, 1)), terms=((0, np.ones((1, 1))),)),
    )
    problem = SdpProblem(
        num_vars=1,
        objective=np.ones(1),
        blocks=blocks,
        var_names=("z",),
        bound_semantics=BoundSemantics.RHO_LINF_L1,
        rho_index=0,
    )
    result = solve(problem)
    path = tmp_path / "infeasible.out"
    export_sdpa_solution(problem, result, path)
    assert "pINF_dFEAS" in path.read_text()
    restored = import_sdpa_solution(path, problem)
    assert restored.status is SolveStatus.INFEASIBLE
    assert restored.dual_obj == pytest.approx(1.0)
