import numpy as np
import pytest

from vsrprune import rewrite, tensorcore as tc
from vsrprune.graphir import make_network, instantiate, validate
from vsrprune.regularizer import inject_scaling, mark_unimportant
from vsrprune.rewrite import CostReport, RewriteError, apply_rsc_rewrite, compile_plan, cost
from vsrprune.scoring import PruningPlan, plan_for
from vsrprune.tensorcore import KernelTensor, ValueTensor
from vsrprune.vsrmodel import Sequence, run_network


def toy(width=8, blocks=2, bidirectional=True):
    spec = make_network(trunk_width=width, blocks_per_cell=blocks, bidirectional=bidirectional)
    return spec, instantiate(spec, 0)


def rand_seq(rng, t=3, size=8):
    frames = [ValueTensor(rng.random((1, 3, size, size)).astype(np.float32)) for _ in range(t)]
    motion = [(int(rng.integers(-1, 2)), int(rng.integers(-1, 2))) for _ in range(t - 1)]
    return Sequence(frames=frames, motion=motion)


def randomized_state(spec, weights, plan, rng):
    """Scaling state with random kept factors and pruned factors forced to zero."""
    state = inject_scaling(spec)
    mark_unimportant(state, plan)
    for site in state.sites():
        state.factors[site][:] = rng.uniform(0.5, 1.5, state.factors[site].size).astype(np.float32)
        dead = state.pruned_indices(site)
        state.factors[site][dead] = 0.0
    return state


def empty_plan() -> PruningPlan:
    return PruningPlan(ratio=0.0, policy="min-global", seed=None, pruned={}, kept={}, site_counts={})


# ---------------------------------------------------------------------------
# cost model


def test_cost_single_conv_arithmetic():
    spec, _ = toy(width=8, blocks=1)
    report = cost(spec, (180, 320))
    row = next(r for r in report.rows if r.layer == "forward.b0.c1")
    assert row.macs == 180 * 320 * 8 * 8 * 9
    assert row.params == 8 * 8 * 9 + 8


def test_cost_totals_equal_sum_of_parts():
    spec, _ = toy()
    report = cost(spec, (16, 16))
    assert report.total_params == sum(r.params for r in report.rows)
    assert report.total_macs == sum(r.macs for r in report.rows)
    subnets = {r.subnet for r in report.rows}
    assert subnets == {"forward", "backward", "upsampler"}
    assert sum(report.subnet_macs(s) for s in subnets) == report.total_macs


def test_cost_full_scale_reference():
    spec = make_network(trunk_width=64, blocks_per_cell=30)
    report = cost(spec, (180, 320))
    # single 64 -> 64 3x3 conv at 180x320: 57600 * 64 * 64 * 9 MACs
    row = next(r for r in report.rows if r.layer == "forward.b0.c1")
    assert row.macs == 2_123_366_400
    assert abs(report.total_params - 4.9e6) / 4.9e6 <= 0.10
    assert abs(report.total_macs - 338.5e9) / 338.5e9 <= 0.10
    assert abs(report.subnet_share("upsampler") - 0.22) <= 0.04


def test_cost_upsampler_resolutions():
    spec, _ = toy(width=8, blocks=1)
    report = cost(spec, (10, 10))
    s2 = next(r for r in report.rows if r.layer == "up.s2")
    hr = next(r for r in report.rows if r.layer == "up.hr")
    assert s2.macs == 20 * 20 * 32 * 8 * 9
    assert hr.macs == 40 * 40 * 8 * 8 * 9


def test_cost_csv(tmp_path):
    spec, _ = toy(width=8, blocks=1)
    report = cost(spec, (8, 8))
    report.write_csv(tmp_path / "cost.csv")
    lines = (tmp_path / "cost.csv").read_text().splitlines()
    assert lines[0] == "layer,params,macs,subnet"
    assert lines[-1].startswith("total,")


# ---------------------------------------------------------------------------
# block rewrite


def test_rsc_identity_when_all_kept():
    spec, weights = toy()
    blk = spec.forward_cell.blocks[0]
    new_blk, folded = apply_rsc_rewrite(blk, weights, None, list(range(8)), list(range(8)), list(range(8)))
    assert np.array_equal(folded[blk.conv1.id].data, weights[blk.conv1.id].data)
    assert np.array_equal(folded[blk.conv2.id].data, weights[blk.conv2.id].data)
    assert new_blk.conv1.read_indices is None
    assert new_blk.conv2.write_indices is None


def test_rsc_empty_kept_set_raises():
    spec, weights = toy()
    blk = spec.forward_cell.blocks[0]
    with pytest.raises(RewriteError):
        apply_rsc_rewrite(blk, weights, None, [], [0], [0])


def test_rsc_hand_evaluated_1x1_instance():
    # C=4 trunk, 1x1 kernels: reads {0,2}, mid {1}, writes {3}
    spec = make_network(trunk_width=4, blocks_per_cell=1)
    blk = spec.forward_cell.blocks[0]
    blk.conv1.kernel_size = blk.conv2.kernel_size = 1
    blk.conv1.padding = blk.conv2.padding = 0
    rng = np.random.default_rng(5)
    w1 = KernelTensor(rng.standard_normal((4, 4, 1, 1)).astype(np.float32))
    w2 = KernelTensor(rng.standard_normal((4, 4, 1, 1)).astype(np.float32))
    weights = {blk.conv1.id: w1, blk.conv2.id: w2}
    new_blk, folded = apply_rsc_rewrite(blk, weights, None, [0, 2], [1], [3])

    trunk = rng.standard_normal((1, 4, 3, 3)).astype(np.float32)
    x = ValueTensor(trunk)
    u = tc.gather_channels(x, new_blk.conv1.read_indices)
    y = tc.leaky_relu(tc.conv2d(u, folded[blk.conv1.id]), 0.1)
    z = tc.conv2d(y, folded[blk.conv2.id])
    out = tc.scatter_add_channels(x, z, new_blk.conv2.write_indices)

    # channels 0..2 pass through untouched
    assert np.array_equal(out.data[:, :3], trunk[:, :3])
    # channel 3 = trunk[3] + w2[3,1] * lrelu(w1[1,0]*t0 + w1[1,2]*t2)
    mid = w1.data[1, 0, 0, 0] * trunk[:, 0] + w1.data[1, 2, 0, 0] * trunk[:, 2]
    mid = np.where(mid >= 0, mid, 0.1 * mid)
    want = trunk[:, 3] + w2.data[3, 1, 0, 0] * mid
    assert np.abs(out.data[:, 3] - want).max() <= 1e-6


def test_rsc_masked_equivalence_per_block():
    spec, weights = toy()
    rng = np.random.default_rng(6)
    blk = spec.forward_cell.blocks[0]
    plan = plan_for(spec, weights, 0.5, "rand-global", seed=1)
    state = randomized_state(spec, weights, plan, rng)
    x = ValueTensor(rng.standard_normal((1, 8, 6, 6)).astype(np.float32))

    # instrumented: full-width convs with scaling applied, pruned factors zero
    y = tc.conv2d(x, weights[blk.conv1.id], padding=1,
                  gamma_in=state.factors[f"{blk.conv1.id}:in"],
                  gamma_out=state.factors[f"{blk.conv1.id}:out"])
    y = tc.leaky_relu(y, 0.1)
    z = tc.conv2d(y, weights[blk.conv2.id], padding=1,
                  gamma_out=state.factors[f"{blk.conv2.id}:out"])
    masked = tc.add(x, z)

    read_pos = plan.kept[f"{blk.conv1.id}:in"]
    mid_pos = plan.kept[f"{blk.conv1.id}:out"]
    write_pos = plan.kept[f"{blk.conv2.id}:out"]
    new_blk, folded = apply_rsc_rewrite(blk, weights, state, read_pos, mid_pos, write_pos)
    u = tc.gather_channels(x, read_pos)
    y2 = tc.leaky_relu(tc.conv2d(u, folded[blk.conv1.id], padding=1), 0.1)
    z2 = tc.conv2d(y2, folded[blk.conv2.id], padding=1)
    pruned = tc.scatter_add_channels(x, z2, write_pos)
    assert np.abs(masked.data - pruned.data).max() <= 1e-5


# ---------------------------------------------------------------------------
# shuffle rewrite


@pytest.mark.parametrize("seed", range(8))
def test_shuffle_prune_commutes_with_channel_select(seed):
    # prune-then-shuffle == shuffle-then-select, bitwise
    rng = np.random.default_rng(800 + seed)
    groups_total = 4
    keep = sorted(rng.choice(groups_total, size=int(rng.integers(1, groups_total + 1)), replace=False).tolist())
    w = KernelTensor(
        rng.standard_normal((4 * groups_total, 3, 3, 3)).astype(np.float32),
        rng.standard_normal(4 * groups_total).astype(np.float32),
    )
    x = ValueTensor(rng.standard_normal((1, 3, 5, 5)).astype(np.float32))
    full = tc.pixel_shuffle(tc.conv2d(x, w, padding=1), 2)
    selected = full.data[:, keep]

    rows = [4 * g + j for g in keep for j in range(4)]
    wp = KernelTensor(w.data[rows], w.bias[rows])
    pruned = tc.pixel_shuffle(tc.conv2d(x, wp, padding=1), 2)
    assert np.array_equal(pruned.data, selected)


def test_shuffle_rewrite_all_groups_kept_identity():
    spec, weights = toy()
    s1 = spec.upsampler[1]
    new_layer, folded = rewrite.apply_shuffle_rewrite(s1, weights[s1.id], None, list(range(8)), list(range(8)))
    assert np.array_equal(folded.data, weights[s1.id].data)
    assert np.array_equal(folded.bias, weights[s1.id].bias)
    assert new_layer.out_channels == s1.out_channels
    assert new_layer.group_indices is None


def test_shuffle_rewrite_zeroed_groups_match_unpruned_channels():
    spec, weights = toy()
    rng = np.random.default_rng(9)
    s1 = spec.upsampler[1]
    state = inject_scaling(spec)
    keep = [1, 3, 4, 6]
    dead = [g for g in range(8) if g not in keep]
    state.factors["up.s1:group"][dead] = 0.0
    x = ValueTensor(rng.standard_normal((1, 8, 5, 5)).astype(np.float32))
    from vsrprune.regularizer import shuffle_gamma_expanded

    full = tc.pixel_shuffle(tc.conv2d(x, weights[s1.id], padding=1, gamma_out=shuffle_gamma_expanded(state, "up.s1")), 2)
    new_layer, folded = rewrite.apply_shuffle_rewrite(s1, weights[s1.id], state, keep, list(range(8)))
    pruned = tc.pixel_shuffle(tc.conv2d(x, folded, padding=1), 2)
    assert np.abs(pruned.data - full.data[:, keep]).max() <= 1e-6
    assert new_layer.out_channels == 16
    assert new_layer.group_indices == keep


# ---------------------------------------------------------------------------
# compile


def test_compile_empty_plan_is_identity():
    spec, weights = toy()
    res = compile_plan(spec, weights, None, empty_plan())
    assert res.cost_before.total_params == res.cost_after.total_params
    assert res.cost_before.total_macs == res.cost_after.total_macs
    for lid, kt in weights.items():
        assert np.array_equal(res.weights[lid].data, kt.data)
        assert np.array_equal(res.weights[lid].bias, kt.bias)
    rng = np.random.default_rng(0)
    seq = rand_seq(rng)
    a, _ = run_network(spec, weights, seq)
    b, _ = run_network(res.spec, res.weights, seq)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.data, fb.data)


def test_compile_is_idempotent_on_output():
    spec, weights = toy()
    plan = plan_for(spec, weights, 0.5, "min-global")
    res = compile_plan(spec, weights, None, plan)
    again = compile_plan(res.spec, res.weights, None, empty_plan())
    assert again.cost_after.total_params == res.cost_after.total_params
    for lid in res.weights:
        assert np.array_equal(again.weights[lid].data, res.weights[lid].data)


@pytest.mark.parametrize("ratio", [0.3, 0.5, 0.7])
def test_compile_masked_equivalence(ratio):
    spec, weights = toy()
    rng = np.random.default_rng(int(ratio * 100))
    plan = plan_for(spec, weights, ratio, "min-global")
    state = randomized_state(spec, weights, plan, rng)
    res = compile_plan(spec, weights, state, plan)
    assert validate(res.spec) == []
    assert res.cost_after.total_params < res.cost_before.total_params
    seq = rand_seq(rng)
    masked, trace_m = run_network(spec, weights, seq, scaling=state)
    pruned, trace_p = run_network(res.spec, res.weights, seq)
    for a, b in zip(masked, pruned):
        assert np.abs(a.data - b.data).max() <= 1e-5
    for a, b in zip(trace_m.forward, trace_p.forward):
        assert np.abs(a.data - b.data).max() <= 1e-5


def test_compile_unidirectional_has_no_backward_entries():
    spec, weights = toy(bidirectional=False)
    plan = plan_for(spec, weights, 0.5, "min-global")
    res = compile_plan(spec, weights, None, plan)
    assert all(not site.startswith("backward") for site in res.kept)
    assert not any("backward" in line for line in res.fold_report)


def test_compile_monotone_in_nested_plans():
    spec, weights = toy()
    small = plan_for(spec, weights, 0.3, "min-global")
    big = plan_for(spec, weights, 0.6, "min-global")
    # min-global plans at increasing ratio are nested by construction
    for site in small.pruned:
        assert set(small.pruned[site]) <= set(big.pruned[site])
    res_small = compile_plan(spec, weights, None, small)
    res_big = compile_plan(spec, weights, None, big)
    assert res_big.cost_after.total_params <= res_small.cost_after.total_params


def test_rsc_zero_cost_overhead():
    # cost of the gather/scatter block equals a plain dense block with the
    # same kept extents, for randomized index sets
    rng = np.random.default_rng(11)
    for _ in range(10):
        spec, weights = toy()
        n_read = int(rng.integers(1, 9))
        n_mid = int(rng.integers(1, 9))
        n_write = int(rng.integers(1, 9))
        plan = empty_plan()
        plan.kept = {
            "forward.b0.c1:in": sorted(rng.choice(8, n_read, replace=False).tolist()),
            "forward.b0.c1:out": sorted(rng.choice(8, n_mid, replace=False).tolist()),
            "forward.b0.c2:out": sorted(rng.choice(8, n_write, replace=False).tolist()),
        }
        res = compile_plan(spec, weights, None, plan, resolution=(8, 8))
        report = res.cost_after
        c1 = next(r for r in report.rows if r.layer == "forward.b0.c1")
        c2 = next(r for r in report.rows if r.layer == "forward.b0.c2")
        assert c1.params == n_mid * n_read * 9 + n_mid
        assert c2.params == n_write * n_mid * 9 + n_write
        assert c1.macs == 8 * 8 * n_mid * n_read * 9
        assert c2.macs == 8 * 8 * n_write * n_mid * 9


def test_compile_trunk_width_invariant():
    spec, weights = toy()
    plan = plan_for(spec, weights, 0.7, "min-global")
    res = compile_plan(spec, weights, None, plan)
    assert res.spec.trunk_width == spec.trunk_width
    for cell in res.spec.cells():
        assert cell.trunk_width == spec.trunk_width


def test_compile_rejects_unknown_site():
    spec, weights = toy()
    plan = empty_plan()
    plan.kept = {"nonexistent:out": [0]}
    with pytest.raises(RewriteError):
        compile_plan(spec, weights, None, plan)


def test_fusion_conv_untouched():
    spec, weights = toy()
    plan = plan_for(spec, weights, 0.7, "min-global")
    res = compile_plan(spec, weights, None, plan)
    assert np.array_equal(res.weights["up.fuse"].data, weights["up.fuse"].data)
    fuse = res.spec.upsampler[0]
    assert fuse.in_channels == 2 * spec.trunk_width
