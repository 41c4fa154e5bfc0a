"""Latency table bookkeeping and the greedy block-edit search."""

import math

import pytest
import torch

from snaplab.evaldata import make_conditional_mixture, train_probe
from snaplab.evolve import (
    ActionScore,
    EvolveConfig,
    LatencyTable,
    LatencyTableError,
    UnreachableTargetError,
    ValSet,
    build_latency_table,
    evaluate_action,
    evolve,
    genome_latency,
    total_denoising_latency,
    write_history_csv,
)
from snaplab.nets import (
    Action,
    ActionDirection,
    ArchitectureGenome,
    BlockKind,
    StageSpec,
    build_model,
    uniform_genome,
)
from snaplab.schedule import make_schedule


def genome_from_counts(widths, resnets, attentions):
    return ArchitectureGenome(
        tuple(StageSpec(w, r, a) for w, r, a in zip(widths, resnets, attentions))
    )


def two_block_setup():
    """Block A (stage 0): costly but nearly free to remove in quality.
    Block B (stage 1): cheap in latency, much more valuable."""
    genome = genome_from_counts(
        [8, 16, 4, 4, 4, 4, 4], [1, 1, 0, 0, 0, 0, 0], [0] * 7
    )
    table = LatencyTable(
        entries={("resnet", 0, 8): 100.0, ("resnet", 1, 16): 10.0}, reps=1
    )
    drops = {(0, "resnet", 0): 0.001, (1, "resnet", 0): 0.01}

    def quality(model, mask):
        q = 1.0
        if mask is not None:
            for key, keep in mask.items():
                if not keep:
                    q -= drops[key]
        return q

    return genome, table, quality


# ---------------------------------------------------------------------------
# latency table


def test_table_rejects_bad_entries():
    with pytest.raises(LatencyTableError):
        LatencyTable(entries={})
    for bad in [0.0, -1.0, float("nan"), float("inf")]:
        with pytest.raises(LatencyTableError):
            LatencyTable(entries={("resnet", 0, 8): bad})


def test_table_csv_round_trip_is_bitwise(tmp_path):
    g = torch.Generator().manual_seed(3)
    entries = {}
    for kind in ["resnet", "cross_attention"]:
        for stage in range(7):
            w = int(torch.randint(4, 64, (1,), generator=g))
            entries[(kind, stage, w)] = float(torch.rand(1, generator=g)) * 17.3 + 1e-7
    table = LatencyTable(entries=entries, reps=5, machine_id="box-a")
    path = tmp_path / "latency.csv"
    table.save(path)
    loaded = LatencyTable.load(path)
    assert loaded.machine_id == "box-a"
    assert loaded.reps == 5
    assert set(loaded.entries) == set(entries)
    for key, ms in entries.items():
        assert loaded.entries[key] == ms  # exact, not approx


def test_build_table_takes_median_and_dedupes_keys():
    genome = uniform_genome((8, 8, 8), n_resnet=1, n_attention=0)
    calls = []

    def bench(kind, stage, width):
        calls.append((kind.value, stage, width))
        return [5.0, 1.0, 9.0, 3.0, 7.0][len(calls) % 5]

    table = build_latency_table(genome, bench=bench, reps=5)
    # 7 stages but all (resnet, stage, 8) keys are distinct by stage
    assert len(table.entries) == 7
    assert len(calls) == 35
    for ms in table.entries.values():
        assert ms == 5.0  # median of {1,3,5,7,9}
    with pytest.raises(ValueError):
        build_latency_table(genome, bench=bench, reps=0)


def test_default_bench_produces_positive_entries():
    genome = genome_from_counts([4, 4, 4, 4, 4, 4, 4], [1, 0, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0, 0])
    table = build_latency_table(genome, reps=1)
    assert set(table.entries) == {("resnet", 0, 4), ("cross_attention", 1, 4)}
    assert all(ms > 0 for ms in table.entries.values())
    assert table.machine_id != ""


def test_genome_latency_is_additive():
    genome = uniform_genome((8, 12, 16), n_resnet=1, n_attention=1)
    table = build_latency_table(
        genome, bench=lambda kind, stage, width: float(width) + (0.5 if kind is BlockKind.RESNET else 0.25)
    )
    expected = sum(
        table.entries[(spec.kind.value, spec.stage, spec.width)] for spec in genome.blocks()
    )
    assert genome_latency(genome, table) == pytest.approx(expected, rel=0, abs=0)

    stripped = LatencyTable(entries={("resnet", 0, 8): 1.0})
    with pytest.raises(KeyError):
        genome_latency(genome, stripped)


def test_total_denoising_latency_multiplies_steps():
    genome = genome_from_counts(
        [8] * 7, [2, 2, 1, 0, 1, 2, 2], [0] * 7
    )
    assert genome.total_blocks() == 10
    table = build_latency_table(genome, bench=lambda *a: 23.0, reps=3)
    assert genome_latency(genome, table) == 230.0
    assert total_denoising_latency(genome, table, steps=8) == 1840.0


# ---------------------------------------------------------------------------
# action scoring


def test_evaluate_action_remove_uses_mask_and_table():
    genome, table, quality = two_block_setup()
    model = build_model(genome, num_conditions=3, seed=0)
    before = model.checksum()
    score = evaluate_action(
        model,
        Action(ActionDirection.REMOVE, 0, BlockKind.RESNET, 0),
        valset=None,
        table=table,
        quality_fn=quality,
    )
    assert score.delta_quality == pytest.approx(-0.001, abs=1e-12)
    assert score.delta_latency == -100.0
    assert score.value == pytest.approx(1e-5, rel=1e-9)
    assert model.checksum() == before  # scoring must not edit the model


def test_evaluate_action_add_builds_a_copy():
    genome, table, _ = two_block_setup()
    model = build_model(genome, num_conditions=3, seed=0)

    def block_count_quality(m, mask):
        n = m.genome.total_blocks()
        if mask is not None:
            n -= sum(1 for keep in mask.values() if not keep)
        return float(n)

    score = evaluate_action(
        model,
        Action(ActionDirection.ADD, 1, BlockKind.RESNET, 0),
        valset=None,
        table=table,
        quality_fn=block_count_quality,
    )
    assert score.delta_quality == 1.0
    assert score.delta_latency == 10.0
    assert score.value == pytest.approx(0.1)
    assert model.genome.total_blocks() == 2  # input untouched


def test_shared_base_quality_is_respected():
    genome, table, quality = two_block_setup()
    model = build_model(genome, num_conditions=3, seed=0)
    score = evaluate_action(
        model,
        Action(ActionDirection.REMOVE, 1, BlockKind.RESNET, 0),
        valset=None,
        table=table,
        quality_fn=quality,
        base_quality=2.0,  # deliberately wrong on purpose: must be used as-is
    )
    assert score.delta_quality == pytest.approx(0.99 - 2.0)


# ---------------------------------------------------------------------------
# the search


def test_low_value_block_is_removed_first_despite_high_latency():
    # A saves 100 ms for 0.001 quality (value 1e-5); B saves 10 ms for 0.01
    # (value 1e-3).  Greedy must drop A first even though B is "cheaper".
    genome, table, quality = two_block_setup()
    model = build_model(genome, num_conditions=3, seed=0)
    config = EvolveConfig(rounds=1, group_size=1)
    evolved, history = evolve(
        model, None, table, latency_target=10.0, config=config, quality_fn=quality
    )
    assert len(history) == 1
    assert history[0]["direction"] == "remove"
    assert history[0]["actions"] == [(0, "resnet", 0, pytest.approx(1e-5))]
    assert history[0]["latency_before"] == 110.0
    assert history[0]["latency_after"] == 10.0
    assert evolved.genome.count(0, BlockKind.RESNET) == 0
    assert evolved.genome.count(1, BlockKind.RESNET) == 1


def test_unreachable_target_raises_up_front():
    genome, table, quality = two_block_setup()
    model = build_model(genome, num_conditions=3, seed=0)
    with pytest.raises(UnreachableTargetError):
        evolve(
            model,
            None,
            table,
            latency_target=9.0,  # below the cheapest single block
            config=EvolveConfig(rounds=1),
            quality_fn=quality,
        )


def synthetic_quality(model, mask):
    """Deterministic, signed per-block contributions; no RNG anywhere."""
    q = 0.0
    for spec in model.genome.blocks():
        if mask is not None and not mask.get(spec.key, True):
            continue
        kind_tag = 0.5 if spec.kind is BlockKind.RESNET else 1.1
        q += 0.01 * math.sin(1.0 + spec.stage * 2.3 + spec.index * 1.7 + kind_tag)
    return q


def test_removals_follow_ascending_value_order():
    genome = uniform_genome((8, 12, 16), n_resnet=1, n_attention=1)
    model = build_model(genome, num_conditions=3, seed=1)
    table = build_latency_table(
        genome,
        bench=lambda kind, stage, width: width * 0.25 + (0.5 if kind is BlockKind.RESNET else 1.0),
    )
    base = synthetic_quality(model, None)
    expected = []
    for spec in genome.blocks():
        dq = synthetic_quality(model, {spec.key: False}) - base
        dl = -table.entries[(spec.kind.value, spec.stage, spec.width)]
        expected.append((dq / dl, spec.stage, spec.index, spec.kind.value))
    expected.sort()

    config = EvolveConfig(rounds=1, group_size=2)
    target = genome_latency(genome, table) * 0.5
    _, history = evolve(
        model, None, table, latency_target=target, config=config, quality_fn=synthetic_quality
    )
    got = [(v, s, i, k) for (s, k, i, v) in history[0]["actions"]]
    want = [(v, s, i, k) for (v, s, i, k) in expected[:2]]
    assert sorted(got) == [pytest.approx(w) for w in sorted(want)]


def test_search_is_deterministic_and_latency_decreases():
    genome = uniform_genome((8, 12, 16), n_resnet=1, n_attention=1)
    table = build_latency_table(
        genome,
        bench=lambda kind, stage, width: width * 0.25 + (0.5 if kind is BlockKind.RESNET else 1.0),
    )
    target = genome_latency(genome, table) * 0.4

    def run():
        model = build_model(genome, num_conditions=3, seed=1)
        return evolve(
            model,
            None,
            table,
            latency_target=target,
            config=EvolveConfig(rounds=3, group_size=2),
            quality_fn=synthetic_quality,
        )

    model_a, hist_a = run()
    model_b, hist_b = run()
    assert hist_a == hist_b
    assert model_a.checksum() == model_b.checksum()
    for rec in hist_a:
        assert rec["direction"] == "remove"
        assert rec["latency_after"] < rec["latency_before"]
    assert genome_latency(model_a.genome, table) <= target
    # the edited model still runs
    out = model_a(torch.randn(4, 2), 0.5, torch.zeros(4, dtype=torch.long))
    assert out.value.shape == (4, 2)


def test_add_branch_duplicates_the_most_valuable_block():
    genome, table, quality = two_block_setup()
    model = build_model(genome, num_conditions=3, seed=0)
    _, history = evolve(
        model,
        None,
        table,
        latency_target=500.0,  # already satisfied, so the round adds
        config=EvolveConfig(rounds=1, group_size=1),
        quality_fn=quality,
    )
    assert history[0]["direction"] == "add"
    # B has the higher removal value, so B is the one worth duplicating
    assert history[0]["actions"][0][:3] == (1, "resnet", 0)
    assert history[0]["latency_after"] == 120.0


def test_search_with_sampling_evaluator_and_training():
    dataset = make_conditional_mixture(num_conditions=3, seed=0)
    probe = train_probe(dataset, n_train=512, steps=60, seed=0)
    schedule = make_schedule()
    genome = uniform_genome((8, 8, 8), n_resnet=1, n_attention=1)
    model = build_model(genome, num_conditions=3, seed=2)
    table = build_latency_table(genome, bench=lambda *a: 1.0)
    valset = ValSet(dataset=dataset, probe=probe, n_samples=32)
    evolved, history = evolve(
        model,
        valset,
        table,
        latency_target=12.0,
        config=EvolveConfig(
            rounds=1, group_size=2, train_steps_per_round=5, eval_steps=4, batch_size=32
        ),
        schedule=schedule,
        dataset=dataset,
    )
    assert evolved.genome.total_blocks() == 12
    assert len(history) == 1
    assert 0.0 <= history[0]["quality"] <= 1.0


def test_history_csv_is_deterministic(tmp_path):
    genome, table, quality = two_block_setup()
    model = build_model(genome, num_conditions=3, seed=0)
    _, history = evolve(
        model, None, table, latency_target=10.0,
        config=EvolveConfig(rounds=1, group_size=1), quality_fn=quality,
    )
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_history_csv(p1, history, seed=0, config_hash="abc")
    write_history_csv(p2, history, seed=0, config_hash="abc")
    assert p1.read_bytes() == p2.read_bytes()
    text = p1.read_text()
    assert text.startswith("# config_hash=abc\n")
    assert "remove" in text
