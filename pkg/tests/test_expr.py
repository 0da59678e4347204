"""Expression language: parsing, printing, evaluation, Wirtinger calculus."""

import math
import warnings

import numpy as np
import pytest

from heismod import expr as E
from heismod.errors import (
    BranchCutWarning,
    DivisionNearZero,
    ExprSyntaxError,
    NonLiteralExponent,
    UnknownIdentifier,
    VariableMismatch,
)

Q0_TEXT = ("conj(z)^2 * (t^2 + (z*conj(z))^2)^(2/3)"
           " / ((z*conj(z))^(4/3) * (t + i*z*conj(z))^2)")


def bind(z, t=0.0, **extra):
    b = {"z": z, "zb": complex(z).conjugate(), "t": t}
    b.update(extra)
    return b


# ---------------------------------------------------------------------------
# parsing

def test_parse_variable():
    e = E.parse("z")
    assert isinstance(e, E.Var) and e.name == "z"


def test_parse_conj_desugars_to_zb():
    e = E.parse("conj(z)")
    assert isinstance(e, E.Var) and e.name == "zb"
    e2 = E.parse("conj(z)*z")
    assert E.evaluate(e2, bind(3 + 4j)) == pytest.approx(25.0)


def test_parse_precedence():
    assert E.evaluate(E.parse("1+2*3"), {}) == 7
    assert E.evaluate(E.parse("(1+2)*3"), {}) == 9
    assert E.evaluate(E.parse("2*3^2"), {}) == 18
    # '^' grabs the whole unary, so -z^2 is (-z)^2
    assert E.evaluate(E.parse("-z^2"), bind(2.0)) == 4
    # bare '/' after an exponent is division, parenthesized it is rational
    assert E.evaluate(E.parse("z^2/3"), bind(3.0)) == pytest.approx(3.0)
    assert E.evaluate(E.parse("z^(1/2)"), bind(9.0)) == pytest.approx(3.0)


def test_parse_rational_and_negative_exponents():
    assert E.evaluate(E.parse("z^(2/3)"), bind(8.0)).real == pytest.approx(4.0)
    assert E.evaluate(E.parse("z^-2"), bind(2.0)) == pytest.approx(0.25)
    assert E.evaluate(E.parse("z^(-1/2)"), bind(4.0)) == pytest.approx(0.5)


def test_parse_imaginary_unit():
    assert E.evaluate(E.parse("i*i"), {}) == -1
    assert E.evaluate(E.parse("exp(i*t)"), {"t": math.pi}) == pytest.approx(-1.0)


def test_parse_errors_carry_offsets():
    with pytest.raises(NonLiteralExponent) as err:
        E.parse("z^t")
    assert err.value.offset == 2
    with pytest.raises(UnknownIdentifier):
        E.parse("z + bogus")
    with pytest.raises(UnknownIdentifier):
        E.parse("frob(z)")
    with pytest.raises(ExprSyntaxError):
        E.parse("z + ")
    with pytest.raises(ExprSyntaxError):
        E.parse("(z")
    with pytest.raises(ExprSyntaxError):
        E.parse("z^2^3")  # no chained exponents in the grammar


def test_nested_conj():
    assert E.parse("conj(conj(z))") is E.parse("z")
    e = E.parse("conj(i*z + t)")
    v = E.evaluate(e, bind(1 + 2j, 0.5))
    assert v == pytest.approx((1j * (1 + 2j) + 0.5).conjugate())


# ---------------------------------------------------------------------------
# evaluation semantics

def test_eval_examples():
    assert E.evaluate(E.parse("z*conj(z)"), bind(3 + 4j)) == pytest.approx(25.0)
    v = E.evaluate(E.parse("t + i*z*conj(z)"), bind(1 + 0j, 2.0))
    assert v == pytest.approx(2 + 1j)
    v = E.evaluate(E.parse("(z*conj(z))^(2/3)"), bind(8.0))
    assert v == pytest.approx(16.0)


def test_eval_requires_consistent_conjugates():
    with pytest.raises(VariableMismatch):
        E.evaluate(E.parse("z*zb"), {"z": 1 + 1j, "zb": 1 + 1j})
    # consistent binding passes
    E.evaluate(E.parse("z*zb"), {"z": 1 + 1j, "zb": 1 - 1j})


def test_eval_unbound_variable():
    with pytest.raises(VariableMismatch):
        E.evaluate(E.parse("z + s"), bind(1.0))


def test_division_near_zero():
    with pytest.raises(DivisionNearZero):
        E.evaluate(E.parse("1/z"), bind(0.0))
    with pytest.raises(DivisionNearZero):
        E.evaluate(E.parse("z^-2"), bind(0.0))


def test_branch_cut_warnings():
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        E.evaluate(E.parse("log(z)"), bind(-1.0))
        E.evaluate(E.parse("z^0.5"), bind(-4.0))
    assert [type(w.message) for w in rec] == [BranchCutWarning] * 2
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        E.evaluate(E.parse("z^2"), bind(-4.0))  # integer powers never warn
    assert rec == []


def test_eval_array_matches_scalar():
    e = E.parse(Q0_TEXT)
    rng = np.random.default_rng(7)
    zs = rng.normal(size=8) + 1j * rng.normal(size=8)
    ts = rng.normal(size=8)
    arr = E.eval_array(e, {"z": zs, "zb": zs.conj(), "t": ts})
    for k in range(8):
        v = E.evaluate(e, bind(zs[k], ts[k]))
        assert abs(arr[k] - v) <= 1e-13 * abs(v)


def test_eval_array_broadcasts():
    e = E.parse("z + t")
    out = E.eval_array(e, {"z": np.ones((3, 1)), "t": np.arange(4.0)})
    assert out.shape == (3, 4)


# ---------------------------------------------------------------------------
# printing round trip

def random_expr(rng, depth=0):
    leaves = [lambda: E.var(rng.choice(["z", "zb", "t", "s", "p1", "p2"])),
              lambda: E.const(complex(round(rng.uniform(-3, 3), 3),
                                      round(rng.uniform(-3, 3), 3)))]
    if depth > 4:
        return leaves[rng.integers(len(leaves))]()
    r = rng.integers(10)
    if r < 2:
        return leaves[r]()
    a = random_expr(rng, depth + 1)
    b = random_expr(rng, depth + 1)
    ops = [lambda: E.add(a, b), lambda: E.sub(a, b), lambda: E.mul(a, b),
           lambda: E.div(a, b), lambda: E.neg(a),
           lambda: E.powr(a, float(rng.integers(-3, 4))),
           lambda: E.powr(a, round(rng.uniform(-2, 2), 2)),
           lambda: E.sin(a), lambda: E.cos(a), lambda: E.exp(a),
           lambda: E.re_part(a), lambda: E.im_part(a), lambda: E.abs2(a)]
    return ops[rng.integers(len(ops))]()


def test_print_parse_round_trip_random():
    rng = np.random.default_rng(42)
    pts = []
    for _ in range(12):
        z = complex(rng.uniform(0.2, 2), rng.uniform(0.2, 2))
        pts.append({"z": z, "zb": z.conjugate(), "t": rng.uniform(0.5, 2),
                    "s": rng.uniform(0.5, 2), "p1": rng.uniform(0.5, 2),
                    "p2": rng.uniform(0.5, 2)})
    for _ in range(200):
        e = random_expr(rng)
        text = E.to_string(e)
        e2 = E.parse(text)
        for b in pts[:3]:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    v1 = E.evaluate(e, b)
                except DivisionNearZero:
                    continue
            v2 = E.evaluate(e2, b)
            if np.isfinite(v1) and np.isfinite(v2):
                assert v1 == v2, f"{text}: {v1} != {v2}"


def test_print_negative_power_base():
    e = E.powr(E.const(-2j), 3.0)
    assert E.evaluate(E.parse(E.to_string(e)), {}) == (-2j) ** 3
    e = E.neg(E.powr(E.var("z"), 2.0))
    assert E.evaluate(E.parse(E.to_string(e)), bind(3.0)) == -9


# ---------------------------------------------------------------------------
# derivatives

def test_diff_basic():
    z = E.var("z")
    d = E.diff(E.mul(z, z), "z")
    assert E.evaluate(d, bind(3 + 1j)) == pytest.approx(2 * (3 + 1j))
    assert E.diff(E.var("z"), "zb") is E.ZERO
    assert E.diff(E.var("zb"), "z") is E.ZERO


def test_diff_power_example():
    e = E.parse("(z*conj(z))^(2/3)")
    d = E.diff(e, "z")
    z = 1.5 + 0.5j
    expected = (2 / 3) * (z * z.conjugate()) ** (-1 / 3) * z.conjugate()
    assert E.evaluate(d, bind(z)) == pytest.approx(expected, rel=1e-12)


def test_diff_through_im_in_composite():
    e = E.mul(E.var("t"), E.im_part(E.var("z")))
    d = E.diff(e, "zb")
    # t * d_zb[(z - zb)/(2i)] = t * i/2
    assert E.evaluate(d, bind(2 + 3j, 5.0)) == pytest.approx(2.5j)


def central_wirtinger(e, b, h=1e-5):
    """Finite-difference Wirtinger partials (d_z, d_zb, d_t)."""
    def at(dz=0.0, dt=0.0):
        z = complex(b["z"]) + dz
        return E.evaluate(e, {**b, "z": z, "zb": z.conjugate(),
                              "t": b.get("t", 0.0) + dt})
    fx = (at(dz=h) - at(dz=-h)) / (2 * h)
    fy = (at(dz=1j * h) - at(dz=-1j * h)) / (2 * h)
    ft = (at(dt=h) - at(dt=-h)) / (2 * h)
    return 0.5 * (fx - 1j * fy), 0.5 * (fx + 1j * fy), ft


@pytest.mark.parametrize("text", [
    "z^3 + conj(z)*t",
    "sin(z)*cos(conj(z))",
    "exp(i*t + z)",
    "abs2(z)^(2/3)",
    "im(z*z) + re(conj(z)*t)",
    "1/(t + i*z*conj(z))",
    "sqrt(z*conj(z))",
    "log(z*conj(z) + t^2)",
])
def test_diff_matches_finite_differences(text):
    e = E.parse(text)
    rng = np.random.default_rng(hash(text) % 2**32)
    for _ in range(5):
        z = complex(rng.uniform(0.4, 1.6), rng.uniform(0.3, 1.5))
        b = bind(z, rng.uniform(0.5, 2.0))
        fd = central_wirtinger(e, b)
        for v, ref in zip(("z", "zb", "t"), fd):
            got = E.evaluate(E.diff(e, v), b)
            tol = 1e-6 * max(abs(ref), abs(got)) + 1e-8
            assert abs(got - ref) <= tol, (text, v, got, ref)


def test_apply_field_examples():
    assert E.apply_field(E.var("z"), "Z") is E.ONE
    assert E.apply_field(E.var("z"), "Zbar") is E.ZERO
    got = E.evaluate(E.apply_field(E.var("t"), "Z"), bind(2 - 1j))
    assert got == pytest.approx(1j * (2 + 1j))
    cr = E.parse("t + i*z*conj(z)")
    rng = np.random.default_rng(3)
    for _ in range(6):
        b = bind(complex(rng.normal(), rng.normal()), rng.normal())
        assert abs(E.evaluate(E.apply_field(cr, "Zbar"), b)) < 1e-14


def test_apply_field_rejects_parameter_expressions():
    with pytest.raises(VariableMismatch):
        E.apply_field(E.parse("z + s"), "Z")


def test_conj_expr_commutes_with_evaluation():
    rng = np.random.default_rng(11)
    for _ in range(60):
        e = random_expr(rng)
        ce = E.conj_expr(e)
        z = complex(rng.uniform(0.2, 1.5), rng.uniform(0.2, 1.5))
        b = {"z": z, "zb": z.conjugate(), "t": rng.uniform(0.3, 1.5),
             "s": rng.uniform(0.3, 1.5), "p1": rng.uniform(0.3, 1.5),
             "p2": rng.uniform(0.3, 1.5)}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                v = E.evaluate(e, b)
                vc = E.evaluate(ce, b)
            except DivisionNearZero:
                continue
        if np.isfinite(v):
            assert vc == pytest.approx(v.conjugate(), rel=1e-12, abs=1e-12)


def test_conj_of_derivative_identity():
    # d_z(conj(e)) == conj(d_zb(e)) pointwise
    rng = np.random.default_rng(5)
    for _ in range(40):
        e = random_expr(rng)
        lhs = E.diff(E.conj_expr(e), "z")
        rhs = E.conj_expr(E.diff(e, "zb"))
        z = complex(rng.uniform(0.3, 1.4), rng.uniform(0.3, 1.4))
        b = {"z": z, "zb": z.conjugate(), "t": rng.uniform(0.4, 1.5),
             "s": 1.0, "p1": 1.0, "p2": 1.0}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                a, c = E.evaluate(lhs, b), E.evaluate(rhs, b)
            except DivisionNearZero:
                continue
        if np.isfinite(a) and np.isfinite(c):
            assert a == pytest.approx(c, rel=1e-10, abs=1e-12)


def test_substitute():
    e = E.parse("z^2 + t")
    sub = E.substitute(e, {"z": E.parse("s + i*p1"), "t": E.parse("p2")})
    v = E.evaluate(sub, {"s": 1.0, "p1": 2.0, "p2": 3.0})
    assert v == pytest.approx((1 + 2j) ** 2 + 3)


def test_interning_shares_structure():
    assert E.parse("z*conj(z)") is E.parse("z*zb")
    assert E.parse("z + 0") is E.parse("z")
    assert E.parse("1*z") is E.parse("z")


def test_compile_scalar_matches_evaluate():
    e = E.parse(Q0_TEXT)
    f = E.compile_scalar(e, ("z", "zb", "t"))
    rng = np.random.default_rng(9)
    for _ in range(20):
        z = complex(rng.uniform(0.3, 1.5), rng.uniform(-1, 1))
        t = rng.uniform(-1, 1)
        v = E.evaluate(e, bind(z, t))
        assert abs(f(z, z.conjugate(), t) - v) <= 1e-12 * max(1.0, abs(v))
