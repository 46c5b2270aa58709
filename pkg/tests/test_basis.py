import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pamarctl.basis import DecisionRule, StepBasis, build_basis, decompose_state, eval_policy
from pamarctl.pamar import SeasonCalendar

CALENDARS = [(4,), (2, 4), (3, 12), (2, 6, 12), (7,)]


def full_harmonics(cal):
    return [p // 2 for p in cal.periods]


@st.composite
def rules(draw):
    cal = SeasonCalendar(draw(st.sampled_from(CALENDARS)))
    basis = build_basis(cal, [draw(st.integers(0, p // 2)) for p in cal.periods])
    nx, nu = draw(st.integers(1, 3)), draw(st.integers(1, 2))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    lo = -rng.uniform(0.5, 2.0, nu)
    return DecisionRule(basis, rng.normal(size=(basis.n_atoms, nu)),
                        rng.normal(size=(basis.n_atoms, nu, nx)), lo, -lo), rng


@settings(max_examples=50, deadline=None)
@given(rules(), st.integers(0, 1000), st.integers(1, 5))
def test_rule_is_exactly_periodic(rule_rng, t, cycles):
    rule, rng = rule_rng
    T = rule.basis.calendar.master_period
    x = rng.normal(size=rule.state_dim) * 3
    assert np.array_equal(eval_policy(rule, t, x), eval_policy(rule, t + cycles * T, x))


@settings(max_examples=50, deadline=None)
@given(rules(), st.integers(0, 1000))
def test_controls_respect_the_box(rule_rng, t):
    rule, rng = rule_rng
    X = rng.normal(size=(20, rule.state_dim)) * 10
    U, raw = rule.controls(t, X)
    assert np.all(U >= rule.lower) and np.all(U <= rule.upper)
    np.testing.assert_array_equal(U, np.clip(raw, rule.lower, rule.upper))
    # batch and single-point paths may round differently in the last bit
    np.testing.assert_allclose(U[3], eval_policy(rule, t, X[3]), rtol=1e-12, atol=1e-12)


@given(rules())
def test_flat_round_trip(rule_rng):
    rule, _ = rule_rng
    back = rule.from_flat(rule.flat())
    np.testing.assert_array_equal(back.intercepts, rule.intercepts)
    np.testing.assert_array_equal(back.gains, rule.gains)


@pytest.mark.parametrize("periods", CALENDARS)
def test_atoms_match_direct_evaluation(periods):
    cal = SeasonCalendar(periods)
    b = build_basis(cal, full_harmonics(cal))
    for t in range(3 * cal.master_period):
        direct = np.array([b.atom_value(m, t) for m in range(b.n_atoms)])
        assert np.max(np.abs(direct - b.values_at(t))) <= 1e-12
    # atoms of period T_i repeat after T_i steps
    for m, a in enumerate(b.atoms):
        col = b.table[:, m]
        assert np.array_equal(col, np.roll(col, a.period))


@pytest.mark.parametrize("periods", CALENDARS)
def test_frequency_sets_are_disjoint_and_full_rank(periods):
    cal = SeasonCalendar(periods)
    b = build_basis(cal, full_harmonics(cal))
    freqs = set()
    for a in b.atoms:
        if a.kind != "const":
            f = (a.harmonic * cal.master_period // a.period, a.kind)
            assert f not in freqs
            freqs.add(f)
    assert np.linalg.matrix_rank(b.table) == b.n_atoms
    # with every harmonic present the basis spans all T-periodic sequences
    assert b.n_atoms == cal.master_period


def test_nested_harmonics_belong_to_the_shortest_period():
    b = build_basis(SeasonCalendar((2, 4)), [1, 2])
    owners = {(a.harmonic, a.period): a.owner for a in b.atoms if a.kind == "cos"}
    # cos(pi t) has period 2 and is owned there, not by the period-4 component
    assert owners == {(1, 2): 0, (1, 4): 1}
    assert b.frequency_sets() == [[1], [1]]


def test_nyquist_and_shape_checks():
    cal = SeasonCalendar((4,))
    with pytest.raises(ValueError, match="Nyquist"):
        build_basis(cal, [3])
    with pytest.raises(ValueError):
        build_basis(cal, [1, 1])
    with pytest.raises(ValueError):
        build_basis(cal, [-1])
    b = build_basis(cal, [2])
    assert sum(a.kind == "sin" for a in b.atoms) == 1  # sin(pi t) vanishes on integers


def test_rule_validation():
    b = build_basis(SeasonCalendar((4,)), [1])
    with pytest.raises(ValueError):
        DecisionRule(b, np.zeros((2, 1)), np.zeros((3, 1, 1)), [0.0], [1.0])
    with pytest.raises(ValueError):
        DecisionRule(b, np.zeros((3, 1)), np.zeros((3, 1, 1)), [1.0], [0.0])
    r = DecisionRule.zeros(b, 2, 1, [0.0], [1.0])
    with pytest.raises(ValueError):
        eval_policy(r, 0, [1.0])
    with pytest.raises(ValueError):
        eval_policy(r, 0, [1.0, np.nan])
    with pytest.raises(ValueError):
        r.intercepts[0, 0] = 1.0


def test_step_basis_window():
    s = StepBasis(start=5, horizon=3)
    np.testing.assert_array_equal(s.values_at(6), [0.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        s.values_at(8)


def test_decomposition_recovers_components():
    cal = SeasonCalendar((2, 6))
    b = build_basis(cal, [1, 2])
    t = np.arange(12)
    slow = 2.0 * np.cos(2 * np.pi * t / 6) + 0.5 * np.sin(4 * np.pi * t / 6) + 3.0
    fast = 1.5 * np.cos(np.pi * t)
    X = np.stack([slow + fast, 2 * slow])[..., None]
    d = decompose_state(X, b)
    np.testing.assert_allclose(d.components[0, 0, :, 0], fast, atol=1e-12)
    np.testing.assert_allclose(d.components[1, 0, :, 0], slow, atol=1e-12)
    np.testing.assert_allclose(d.residual, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        decompose_state(X[:, :5], b)
