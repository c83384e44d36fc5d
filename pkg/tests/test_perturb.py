from fractions import Fraction

import pytest
import sympy as sp

from src.charnum import par_c1_flat, par_ch2_flat
from src.generators import GeneratorFactory, TableKind
from src.models import InvalidDataError, KmsError
from src.perturb import (
    NilpotentBlockData,
    ch2_convergence,
    ch2_shift_bound,
    gap,
    graded_semisimple_check,
    min_admissible_m,
    perturb_data,
    perturb_I,
    perturb_II,
    perturbed_blocks,
    refine,
    round_half_away,
    weight_filtration,
)

J2 = [[0, 0], [1, 0]]


@pytest.fixture
def jordan_blocks():
    return NilpotentBlockData(blocks={"D1": [J2]})


def test_weight_filtration_examples():
    assert weight_filtration(J2).graded == [(-1, 1), (1, 1)]
    assert weight_filtration([[0, 0, 0], [1, 0, 0], [0, 1, 0]]).graded == [(-2, 1), (0, 1), (2, 1)]
    assert weight_filtration([[0, 0], [0, 0]]).graded == [(0, 2)]


def test_weight_filtration_basis_is_adapted():
    wf = weight_filtration(J2)
    assert wf.levels() == [-1, 1]
    # W_-1 = Im N = ker N, spanned by e2
    first = wf.basis[:, 0]
    assert first[0] == 0 and first[1] != 0


def test_weight_filtration_rejects_non_nilpotent():
    with pytest.raises(KmsError):
        weight_filtration([[1, 0], [0, 0]])
    with pytest.raises(KmsError):
        weight_filtration([[0, 1, 0], [0, 0, 1]])


def test_block_data_validation():
    with pytest.raises(ValueError):
        NilpotentBlockData(blocks={"D1": [[[1, 0], [0, 1]]]})
    blocks = NilpotentBlockData(blocks={"D1": [[["0", "0"], ["1/2", "0"]]]})
    assert blocks.block("D1", 0, 2)[1, 0] == sp.Rational(1, 2)
    assert blocks.block("D1", 1, 3).is_zero_matrix
    assert blocks.model_dump()["blocks"]["D1"][0] == [["0", "0"], ["1/2", "0"]]


def test_refine(jordan_divisor, jordan_blocks):
    refined = refine(jordan_divisor, jordan_blocks)
    assert [(level.a, level.k, level.r) for level in refined.levels["D1"]] == [
        (Fraction(-1, 4), -1, 1),
        (Fraction(-1, 4), 1, 1),
    ]


def test_refine_rejects_wrong_block_size(jordan_divisor):
    with pytest.raises(InvalidDataError):
        refine(jordan_divisor, NilpotentBlockData(blocks={"D1": [[[0]]]}))


def test_gap(jordan_divisor, jordan_blocks):
    assert gap(refine(jordan_divisor, jordan_blocks)) == Fraction(1, 4)


def test_round_half_away():
    assert round_half_away(Fraction(-5, 2)) == -3
    assert round_half_away(Fraction(5, 2)) == 3
    assert round_half_away(Fraction(-12, 5)) == -2


def test_perturb_II_example(jordan_divisor, jordan_blocks):
    plan = perturb_II(refine(jordan_divisor, jordan_blocks), 10)
    assert plan.eps == Fraction(1, 10)
    assert plan.a_prime["D1"] == {"-1/4": Fraction(-3, 10)}
    assert plan.L["D1"] == Fraction(-1, 20)
    assert plan.phi("D1", Fraction(-1, 4), -1) == Fraction(-7, 20)
    assert plan.phi("D1", Fraction(-1, 4), 1) == Fraction(-3, 20)
    assert plan.gamma["D1"] == Fraction(-1, 20)
    for shift in plan.new_weights["D1"]:
        assert ((shift.new - plan.gamma["D1"]) * 10).denominator == 1


def test_perturb_II_rejects_small_m(jordan_divisor, jordan_blocks):
    refined = refine(jordan_divisor, jordan_blocks)
    with pytest.raises(InvalidDataError):
        perturb_II(refined, 5)
    with pytest.raises(InvalidDataError):
        perturb_II(refined, 8)
    with pytest.raises(InvalidDataError):
        perturb_II(refined, 0)


def test_perturb_I_targets(jordan_divisor, jordan_blocks):
    refined = refine(jordan_divisor, jordan_blocks)
    result = perturb_I(refined, "1/10", {"D1": ["-3/10", "-1/5"]})
    assert result.phi("D1", Fraction(-1, 4), 1) == Fraction(-1, 5)

    keyed = perturb_I(refined, "1/10", {"D1": {(Fraction(-1, 4), -1): "-3/10", (Fraction(-1, 4), 1): "-1/5"}})
    assert keyed.new_weights == result.new_weights

    with pytest.raises(InvalidDataError):
        perturb_I(refined, "1/10", {"D1": ["-1/5", "-3/10"]})
    with pytest.raises(InvalidDataError):
        perturb_I(refined, "1/100", {"D1": ["-3/10", "-1/5"]})
    with pytest.raises(InvalidDataError):
        perturb_I(refined, "1/10", {"D1": ["-3/10"]})


def test_perturb_data_splits_levels(jordan_divisor, jordan_blocks):
    plan = perturb_II(refine(jordan_divisor, jordan_blocks), 10)
    perturbed = perturb_data(jordan_divisor, jordan_blocks, plan)
    assert [(p.a, p.r) for p in perturbed.divisor_spectra["D1"]] == [
        (Fraction(-7, 20), 1),
        (Fraction(-3, 20), 1),
    ]
    assert par_c1_flat(perturbed) == par_c1_flat(jordan_divisor)
    assert par_ch2_flat(jordan_divisor) == Fraction(-1, 16)
    assert par_ch2_flat(perturbed) == Fraction(-29, 400)


def test_ch2_convergence_example(jordan_divisor, jordan_blocks):
    result = ch2_convergence(jordan_divisor, jordan_blocks, [1000, 10, 100])
    assert list(result["table"]["m"]) == [10, 100, 1000]
    assert list(result["table"]["delta"]) == [Fraction(1, 100), Fraction(1, 10 ** 4), Fraction(1, 10 ** 6)]
    assert result["K"] == Fraction(1, 10)
    assert result["decreasing"]


def test_graded_semisimple(jordan_divisor, jordan_blocks):
    assert not graded_semisimple_check(jordan_blocks)
    assert graded_semisimple_check(perturbed_blocks(jordan_divisor, jordan_blocks))


def test_lattice_perturbation_on_random_tables():
    for data, blocks in GeneratorFactory.draw(TableKind.NILPOTENT, 15, seed=2):
        result = ch2_convergence(data, blocks, [10, 100, 1000])
        assert result["decreasing"] and result["within_bound"]
        assert graded_semisimple_check(perturbed_blocks(data, blocks))


def test_lattice_perturbation_with_split_weights():
    for data, blocks in GeneratorFactory.draw(TableKind.NILPOTENT, 10, seed=5, rank=2, split=1.0):
        result = ch2_convergence(data, blocks, [10, 100, 1000])
        assert result["within_bound"]
        assert par_c1_flat(perturb_data(data, blocks, perturb_II(refine(data, blocks), 10))) == par_c1_flat(data)


def test_ch2_shift_bound_example(jordan_divisor, jordan_blocks):
    assert ch2_shift_bound(jordan_divisor, 10) == Fraction(7, 5)
    result = ch2_convergence(jordan_divisor, jordan_blocks, [10, 100, 1000])
    assert list(result["table"]["bound"])[0] == Fraction(7, 5)
    assert result["within_bound"]


def test_gap_guard_on_jordan_example(jordan_divisor, jordan_blocks):
    refined = refine(jordan_divisor, jordan_blocks)
    assert gap(refined) == Fraction(1, 4)
    assert min_admissible_m(refined) == 9
    assert perturb_II(refined, 10).m == 10
    with pytest.raises(InvalidDataError) as excinfo:
        perturb_II(refined, 8)
    assert "smallest admissible m is 9" in excinfo.value.errors[0]
