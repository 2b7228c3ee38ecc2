import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphmem.energy import (
    BadPriority,
    ClockInconsistency,
    EnergyError,
    EnergyParams,
    ItemModality,
    S_TOTAL_DEFAULT,
    VisualItem,
    allocate_budget,
    budget_to_resolution,
    intrinsic_energy,
    normalize_priority,
    recursive_energy,
    select_top_k,
    shape_memory,
)
from graphmem.graph import new_graph
from helpers import naive_intrinsic, naive_omega, random_graph_with_items


def chain_graph():
    """root -> v1 (item A: p=5, t=1) -> v2 (item B: p=3, t=2), T=2."""
    g = new_graph("chain")
    g.add_search_node("v1", {"root"}, "q1")
    g.add_search_node("v2", {"v1"}, "q2")
    g.append_item(VisualItem(0, 1, 0, ItemModality.TEXT, "a", priority=5))
    g.append_item(VisualItem(1, 2, 0, ItemModality.TEXT, "b", priority=3))
    g.populate_node(1, "s1", [0])
    g.populate_node(2, "s2", [1])
    assert g.step == 2
    return g


def flat_graph(priorities, saliencies=None, n_nodes=1):
    """Root with ``n_nodes`` children; items distributed round-robin."""
    g = new_graph("flat")
    for i in range(n_nodes):
        g.add_search_node(f"s{i}", {"root"}, f"q{i}")
    refs = {i: [] for i in range(1, n_nodes + 1)}
    for k, priority in enumerate(priorities):
        owner = 1 + (k % n_nodes)
        saliency = 1 if saliencies is None else saliencies[k]
        item = VisualItem(
            k, owner, len(refs[owner]), ItemModality.TEXT, f"r{k}",
            saliency=saliency, priority=priority,
        )
        g.append_item(item)
        refs[owner].append(k)
    for owner, owned in refs.items():
        g.populate_node(owner, f"summary {owner}", owned)
    return g


class TestNormalizePriority:
    def test_endpoints_and_midpoint(self):
        assert normalize_priority(1) == 0.0
        assert normalize_priority(5) == 1.0
        assert normalize_priority(3) == 0.5

    def test_out_of_range(self):
        for bad in (0, 6, -1):
            with pytest.raises(BadPriority):
                normalize_priority(bad)
        with pytest.raises(BadPriority):
            normalize_priority(True)


class TestIntrinsicEnergy:
    def test_identity_factors(self):
        g = new_graph("q")
        g.add_search_node("s", {"root"}, "q1")
        g.append_item(VisualItem(0, 1, 0, ItemModality.TEXT, "r", priority=5))
        g.populate_node(1, "s", [0])
        g.step = 1  # T == t_i
        assert intrinsic_energy(g.memory_bank[0], g, EnergyParams()) == pytest.approx(1.0)

    def test_decayed_with_degree(self):
        # p=5, deg+=1, lambda=0.1, T - t_i = 1  ->  2 * e^(-0.1)
        # frozen from a 40-digit evaluation: 1.809674836071919146328498...
        g = chain_graph()
        value = intrinsic_energy(g.memory_bank[0], g, EnergyParams(lambda_decay=0.1))
        assert abs(value - 1.8096748360719192) < 1e-12

    def test_zero_decay_is_age_independent(self):
        g = chain_graph()
        params = EnergyParams(lambda_decay=0.0)
        young = intrinsic_energy(g.memory_bank[0], g, params)
        g.step = 50
        old = intrinsic_energy(g.memory_bank[0], g, params)
        assert young == old

    def test_clock_inconsistency(self):
        g = chain_graph()
        g.step = 0  # behind node creation steps
        with pytest.raises(ClockInconsistency):
            intrinsic_energy(g.memory_bank[1], g, EnergyParams())

    def test_dropped_item_rejected(self):
        g = chain_graph()
        g.memory_bank[0].dropped = True
        with pytest.raises(EnergyError):
            intrinsic_energy(g.memory_bank[0], g, EnergyParams())


class TestRecursiveEnergy:
    def test_leaf_item_equals_intrinsic(self):
        g = flat_graph([4])
        report = recursive_energy(g, EnergyParams())
        assert report.total[0] == report.intrinsic[0]

    def test_chain_example(self):
        # expected values from the naive definitional oracle (and a 40-digit
        # hand evaluation): omega(B) = 0.5, mean(v2) = 0.5,
        # omega(A) = 2 e^(-0.1) + 0.3 * 0.5 = 1.959674836071919146...
        g = chain_graph()
        params = EnergyParams(lambda_decay=0.1, gamma_feedback=0.3)
        report = recursive_energy(g, params)
        oracle = naive_omega(g, params)
        assert abs(report.total[1] - 0.5) < 1e-12
        assert abs(report.node_mean[2] - 0.5) < 1e-12
        assert abs(report.total[0] - 1.9596748360719192) < 1e-9
        for ordinal, expected in oracle.items():
            assert abs(report.total[ordinal] - expected) < 1e-9

    def test_itemless_nodes_contribute_zero(self):
        g = new_graph("q")
        g.add_search_node("s1", {"root"}, "q1")
        g.add_search_node("s2", {"s1"}, "q2")
        g.append_item(VisualItem(0, 1, 0, ItemModality.TEXT, "r", priority=5))
        g.populate_node(1, "s", [0])
        g.populate_node(2, "nothing useful", [])
        report = recursive_energy(g, EnergyParams(gamma_feedback=0.7))
        assert report.node_mean[2] == 0.0
        assert report.total[0] == report.intrinsic[0]

    @settings(max_examples=120, deadline=None)
    @given(
        st.integers(min_value=0, max_value=2**32 - 1),
        st.floats(min_value=0.0, max_value=1.0),
        st.floats(min_value=0.0, max_value=1.0),
    )
    def test_matches_naive_oracle_on_random_dags(self, seed, lam, gamma):
        rng = random.Random(seed)
        g = random_graph_with_items(rng, max_nodes=20, max_items_per_node=4)
        params = EnergyParams(lambda_decay=lam, gamma_feedback=gamma)
        report = recursive_energy(g, params)
        oracle = naive_omega(g, params)
        intrinsic_oracle = naive_intrinsic(g, params)
        assert set(report.total) == set(oracle)
        for ordinal, expected in oracle.items():
            assert abs(report.total[ordinal] - expected) < 1e-9
        for ordinal, expected in intrinsic_oracle.items():
            assert abs(report.intrinsic[ordinal] - expected) < 1e-9

    def test_feedback_positivity(self):
        # with gamma > 0 and a child holding items, omega > intrinsic
        g = chain_graph()
        report = recursive_energy(g, EnergyParams(gamma_feedback=0.3))
        assert report.total[0] > report.intrinsic[0]

    def test_decay_strictly_decreasing_in_age(self):
        g = flat_graph([5])
        params = EnergyParams(lambda_decay=0.25)
        values = []
        for extra in range(4):
            g.step = 1 + extra
            values.append(recursive_energy(g, params).total[0])
        assert all(a > b for a, b in zip(values, values[1:]))


class TestReportExport:
    def test_report_and_assignment_export_canonically(self):
        from graphmem.canon import canonical_dumps
        from graphmem.energy import BudgetAssignment

        g = chain_graph()
        report = recursive_energy(g, EnergyParams())
        dumped = canonical_dumps(report.to_dict())
        assert '"evaluation_step":2' in dumped
        assert canonical_dumps(report.to_dict()) == dumped
        assignment = BudgetAssignment((1, 0), {0: 25, 1: 75}, 0, 2)
        assert BudgetAssignment.from_dict(assignment.to_dict()) == assignment


class TestSelection:
    def test_all_retained_when_under_k(self):
        g = flat_graph([3, 4])
        params = EnergyParams(top_k=5)
        report = recursive_energy(g, params)
        retained = select_top_k(report, params, g.memory_bank)
        assert set(retained) == {0, 1}

    def test_order_by_energy(self):
        g = flat_graph([4, 2, 3])  # distinct priorities -> distinct energies
        params = EnergyParams(top_k=2)
        report = recursive_energy(g, params)
        retained = select_top_k(report, params, g.memory_bank)
        assert retained == (0, 2)

    def test_tie_break_owner_then_slot(self):
        g = flat_graph([3, 3, 3, 3], n_nodes=2)
        # no decay, no feedback: every item scores exactly the same
        params = EnergyParams(lambda_decay=0.0, gamma_feedback=0.0, top_k=3)
        report = recursive_energy(g, params)
        retained = select_top_k(report, params, g.memory_bank)
        # owners: item0 -> node1 slot0, item1 -> node2 slot0, item2 -> node1 slot1
        assert retained == (0, 2, 1)


class TestAllocation:
    def test_proportional_case(self):
        g = flat_graph([5, 3])
        g.step = 0
        params = EnergyParams(lambda_decay=0.0, gamma_feedback=0.0, s_total=100, top_k=2)
        report = recursive_energy(g, params)
        # priorities 5 and 3 -> omegas 1.0 and 0.5; pin the canonical {3, 1} case
        report.total[0] = 3.0
        report.total[1] = 1.0
        assignment = allocate_budget((0, 1), report, params)
        assert assignment.budgets == {0: 75, 1: 25}
        assert assignment.slack == 0

    def test_floor_rounding_slack(self):
        g = flat_graph([3, 3, 3])
        params = EnergyParams(s_total=100, top_k=3)
        report = recursive_energy(g, params)
        assignment = allocate_budget((0, 1, 2), report, params)
        assert list(assignment.budgets.values()) == [33, 33, 33]
        assert assignment.slack == 1

    def test_default_budget_constant(self):
        assert EnergyParams().s_total == 1_310_720 == S_TOTAL_DEFAULT

    def test_uniform_mode(self):
        g = flat_graph([5, 1, 3])
        params = EnergyParams(s_total=100, top_k=3, uniform_mode=True)
        report = recursive_energy(g, params)
        assignment = allocate_budget((0, 1, 2), report, params)
        assert set(assignment.budgets.values()) == {33}
        assert assignment.slack == 1

    def test_zero_energy_falls_back_to_uniform(self):
        g = flat_graph([1, 1])  # p=1 -> normalized priority 0 -> omega 0
        params = EnergyParams(s_total=100, top_k=2)
        report = recursive_energy(g, params)
        assignment = allocate_budget((0, 1), report, params)
        assert assignment.budgets == {0: 50, 1: 50}

    def test_empty_retained(self):
        g = new_graph("q")
        params = EnergyParams(s_total=100)
        report = recursive_energy(g, params)
        assignment = allocate_budget((), report, params)
        assert assignment.budgets == {}
        assert assignment.slack == 100

    @settings(max_examples=200, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_conservation_and_monotonicity(self, seed):
        rng = random.Random(seed)
        g = random_graph_with_items(rng, max_nodes=10, max_items_per_node=4)
        params = EnergyParams(
            lambda_decay=rng.uniform(0, 1),
            gamma_feedback=rng.uniform(0, 1),
            s_total=rng.randint(1, 10**7),
            top_k=rng.randint(1, 8),
        )
        report = recursive_energy(g, params)
        live = [it for it in g.memory_bank if it.saliency == 1]
        retained = select_top_k(report, params, live)
        assignment = allocate_budget(retained, report, params)
        assert sum(assignment.budgets.values()) <= params.s_total
        for a in retained:
            for b in retained:
                if report.total[a] >= report.total[b]:
                    assert assignment.budgets[a] >= assignment.budgets[b]


class TestShaping:
    def test_empty_bank(self):
        g = new_graph("q")
        assignment = shape_memory(g, EnergyParams(s_total=100))
        assert assignment.retained == ()
        assert assignment.budgets == {}

    def test_idempotent_at_fixed_step_with_eviction(self):
        params = EnergyParams(s_total=1000, top_k=2)
        g = flat_graph([5, 4, 3, 2], n_nodes=2)
        first = shape_memory(g, params)
        second = shape_memory(g, params)
        assert first == second
        assert sum(1 for it in g.memory_bank if not it.dropped) == 2

    def test_salient_zero_always_dropped(self):
        g = flat_graph([5, 3], saliencies=[0, 1])
        assignment = shape_memory(g, EnergyParams(s_total=100))
        assert g.memory_bank[0].dropped
        assert g.memory_bank[0].allocated_budget == 0
        assert assignment.retained == (1,)

    def test_writes_budgets_back(self):
        g = flat_graph([5, 3])
        assignment = shape_memory(g, EnergyParams(s_total=100, top_k=5))
        for ordinal, budget in assignment.budgets.items():
            assert g.memory_bank[ordinal].allocated_budget == budget

    def test_eviction_is_permanent(self):
        params = EnergyParams(s_total=100, top_k=1)
        g = flat_graph([5, 4])
        shape_memory(g, params)
        assert g.memory_bank[1].dropped
        # raise the evicted item's priority; it must not come back
        g.memory_bank[1].priority = 5
        g.step += 1
        assignment = shape_memory(g, params)
        assert g.memory_bank[1].dropped
        assert assignment.retained == (0,)


class TestResolution:
    def test_perfect_square(self):
        assert budget_to_resolution(1024, 32) == (1024, 1024)

    def test_zero_budget(self):
        assert budget_to_resolution(0, 32) == (0, 0)

    def test_single_patch(self):
        assert budget_to_resolution(1, 32) == (32, 32)

    def test_never_exceeds_budget(self):
        for budget in range(0, 2000, 7):
            w, h = budget_to_resolution(budget, 32)
            assert (w // 32) * (h // 32) <= budget
            # near-square: aspect at most ~2:1 for the grid
            if budget >= 1:
                assert h >= w

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            budget_to_resolution(-1, 32)
        with pytest.raises(ValueError):
            budget_to_resolution(10, 0)
