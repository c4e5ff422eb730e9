"""Tests for expression parsing, printing, evaluation and simplification."""

from __future__ import annotations

import math

import numpy as np
import pytest

from kansym import expr
from kansym.errors import ExprSyntaxError


def random_tree(rng: np.random.Generator, depth: int) -> expr.Expr:
    """Random tree over three variables with nonzero constants."""
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.6:
            return expr.var(int(rng.integers(1, 4)))
        return expr.const(float(rng.uniform(0.1, 5.0)))
    choice = int(rng.integers(5))
    left = random_tree(rng, depth - 1)
    if choice == 0:
        name = expr.FUNCTIONS[int(rng.integers(len(expr.FUNCTIONS)))]
        return expr.unary(name, left)
    if choice == 1:
        return expr.power(left, int(rng.choice([-2, -1, 2, 3])))
    if choice == 2:
        return expr.neg(left)
    right = random_tree(rng, depth - 1)
    return expr.add(left, right) if choice == 3 else expr.mul(left, right)


class TestParse:
    def test_sum_is_ordered_by_variable(self):
        assert expr.to_text(expr.parse("2*x2 + x1")) == "x1 + 2*x2"

    def test_product_is_ordered(self):
        assert expr.parse("x2*x1") == expr.parse("x1*x2")

    def test_double_star_power(self):
        assert expr.parse("x1**3") == expr.parse("x1^3")

    def test_subtraction_and_negation(self):
        assert expr.to_text(expr.parse("x1 - x2")) == "x1 - x2"
        assert expr.to_text(expr.parse("-x1")) == "-x1"

    def test_division_becomes_inverse_power(self):
        assert expr.to_text(expr.parse("x1/x2")) == "x1*x2^-1"

    def test_pi_constant(self):
        node = expr.parse("pi")
        assert node.is_const
        assert node.value == pytest.approx(math.pi)

    def test_named_variables(self):
        node = expr.parse("m*v^2", ["m", "v"])
        assert expr.variables(node) == {1, 2}
        assert expr.to_text(node, names=["m", "v"]) == "m*v^2"

    def test_full_precision_round_trip(self):
        node = expr.parse("2.5*sin(x1) - x2^-1")
        assert expr.parse(expr.to_text(node, digits=None)) == node

    def test_random_trees_round_trip(self, rng):
        for _ in range(300):
            node = random_tree(rng, depth=3)
            text = expr.to_text(node, digits=None)
            again = expr.parse(text)
            assert again == node, text
            assert expr.to_text(again, digits=None) == text

    def test_negated_sum_keeps_parentheses(self):
        node = expr.add(expr.var(3), expr.neg(expr.add(expr.var(1), expr.var(2))))
        assert expr.to_text(node) == "x3 - (x1 + x2)"
        assert expr.parse(expr.to_text(node)) == node

    @pytest.mark.parametrize("text", [
        "x1^0.5", "foo(x1)", "x1 +", "(x1", "x1 $ x2", "y",
    ])
    def test_syntax_errors(self, text):
        with pytest.raises(ExprSyntaxError):
            expr.parse(text)

    def test_error_reports_position(self):
        with pytest.raises(ExprSyntaxError) as info:
            expr.parse("x1 + foo(x2)")
        assert info.value.position == 5

    def test_unknown_named_variable(self):
        with pytest.raises(ExprSyntaxError):
            expr.parse("m*q", ["m", "v"])

    def test_variables_start_at_one(self):
        with pytest.raises(ValueError):
            expr.var(0)


class TestEvaluate:
    def test_matches_numpy(self):
        x = np.array([[0.3, 2.0], [-1.0, 0.5]])
        node = expr.parse("x1*x2 + sin(x1) + gauss(x2)")
        expected = x[:, 0] * x[:, 1] + np.sin(x[:, 0]) + np.exp(-x[:, 1] ** 2)
        assert np.allclose(expr.evaluate(node, x), expected)

    def test_guarded_log(self):
        node = expr.parse("log(x1)")
        assert np.isnan(expr.evaluate(node, [[-1.0]])[0])
        guarded = expr.evaluate(node, [[-1.0]], guarded=True)[0]
        assert guarded == pytest.approx(math.log(1e-8))

    def test_opaque_is_nan(self):
        node = expr.add(expr.var(1), expr.opaque("spline", expr.var(1)))
        assert expr.has_opaque(node)
        assert np.isnan(expr.evaluate(node, [[1.0]])[0])


class TestSimplify:
    @pytest.mark.parametrize(("text", "expected"), [
        ("x1 + x1", "2*x1"),
        ("0*x1 + 3", "3"),
        ("(x1^2)^3", "x1^6"),
        ("sin(0)", "0"),
        ("x1^1", "x1"),
        ("2*(x1 + 1)", "2*x1 + 2"),
    ])
    def test_canonical(self, text, expected):
        assert expr.canonical(expr.parse(text)) == expected

    def test_like_terms_cancel(self):
        assert expr.canonical(expr.parse("x1*x2 - x2*x1 + x3")) == "x3"
