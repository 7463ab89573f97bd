import numpy as np
import pytest

from fracimp.formula import column_names, design_matrix, parse_terms, terms_involving
from fracimp.rng import PURPOSE_IMPUTE, StreamFactory, stream


def test_parse_terms_string_and_list():
    assert parse_terms("Y ~ 1 + X1 + A + A:X1") == ("Y", "X1", "A", "A:X1")
    assert parse_terms(["X1", "X1", " A:X2 "]) == ("X1", "A:X2")
    with pytest.raises(ValueError):
        parse_terms("X1 + A:")


def test_design_matrix_products_and_intercept():
    cols = {"X1": np.array([1.0, 2.0]), "A": np.array([0.0, 1.0])}
    X = design_matrix(("X1", "A", "A:X1"), cols)
    np.testing.assert_array_equal(X, [[1, 1, 0, 0], [1, 2, 1, 2]])
    assert column_names(("X1",)) == ["(Intercept)", "X1"]
    assert terms_involving(("X1", "A", "A:X1"), "X1") == [1, 3]
    with pytest.raises(KeyError, match="unknown column 'Z'"):
        design_matrix(("Z",), cols)


def test_streams_are_keyed_not_ordered():
    f = StreamFactory(7)
    a = f.child(3, PURPOSE_IMPUTE).generator(12).random(4)
    f.generator(99).random(100)  # unrelated consumption
    b = StreamFactory(7, (3,)).child(PURPOSE_IMPUTE).generator(12).random(4)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, stream(7, 3, PURPOSE_IMPUTE, 12).random(4))
    assert not np.array_equal(a, stream(7, 3, PURPOSE_IMPUTE, 13).random(4))
    assert not np.array_equal(a, stream(8, 3, PURPOSE_IMPUTE, 12).random(4))
