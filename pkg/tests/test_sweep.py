import csv
import hashlib
import io
from pathlib import Path

import numpy as np
import pytest

from disq.fusion import resolve_layer_set
from disq.model import predict, train
from disq.sweep import (
    CSV_COLUMNS,
    AUGMENTATIONS,
    ResultRow,
    SweepGrid,
    augmentation_report,
    average_rows,
    evaluate,
    gains_to_csv,
    prepare_items,
    rows_to_csv,
    rows_to_text,
    run_cell,
    run_sweep,
)

from conftest import tiny_train_config


def _dir_digest(root) -> dict:
    root = Path(root)
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_evaluate_memorized_train_split(tiny_dataset):
    _, layers = resolve_layer_set("0,1,2,3", 4)
    tr = prepare_items(tiny_dataset, "train", layers, None, cache=None)
    result = train(tr, tr, tiny_train_config(epochs=30, learning_rate=5e-3))
    row = evaluate(result.params, tr, layers, layer_set="all4", seed=0)
    assert row.macro_f1 == 1.0


def test_evaluate_single_utterance_alpha(tiny_dataset):
    _, layers = resolve_layer_set("0,1,2,3", 4)
    items = prepare_items(tiny_dataset, "dev", layers, None, cache=None)
    result = train(
        prepare_items(tiny_dataset, "train", layers, None, cache=None),
        items,
        tiny_train_config(epochs=2),
    )
    row = evaluate(result.params, items[:1], layers)
    _, alphas = predict(result.params, items[:1])
    assert [row.mean_alpha[l] for l in layers] == pytest.approx(alphas[0], rel=1e-12)


def test_evaluate_is_deterministic(tiny_dataset):
    _, layers = resolve_layer_set("0,1,2,3", 4)
    items = prepare_items(tiny_dataset, "test", layers, None, cache=None)
    result = train(
        prepare_items(tiny_dataset, "train", layers, None, cache=None),
        prepare_items(tiny_dataset, "dev", layers, None, cache=None),
        tiny_train_config(epochs=3),
    )
    a = evaluate(result.params, items, layers)
    b = evaluate(result.params, items, layers)
    assert a.macro_f1 == b.macro_f1
    assert np.array_equal(a.per_class_f1, b.per_class_f1)
    assert a.mean_alpha == b.mean_alpha


def test_run_cell_keeps_inputs_and_codebooks_frozen(tiny_dataset, tiny_cache):
    before_files = _dir_digest(tiny_dataset.root)
    rows, failures = run_cell(
        tiny_dataset, "0,1,2,3", 8, (0,), tiny_cache, tiny_train_config(epochs=2)
    )
    assert not failures
    cb = tiny_cache.layer_codebook(tiny_dataset, 3, 8, 0)
    centroids_before = cb.centroids.copy()
    run_cell(tiny_dataset, "3", 8, (0,), tiny_cache, tiny_train_config(epochs=2))
    assert np.array_equal(cb.centroids, centroids_before)
    assert _dir_digest(tiny_dataset.root) == before_files


def test_sweep_single_cell_rows(tiny_dataset):
    grid = SweepGrid(
        ks=(8,), layer_sets=("0,1,2,3",), seeds=(0,), train=tiny_train_config(epochs=2)
    )
    result = run_sweep(grid, tiny_dataset)
    assert len(result.rows) == 2
    seed_row, avg_row = result.rows
    assert seed_row.seed == 0 and avg_row.seed == "avg"
    assert avg_row.macro_f1 == seed_row.macro_f1
    assert np.array_equal(avg_row.per_class_f1, seed_row.per_class_f1)


def test_sweep_average_is_arithmetic_mean(tiny_dataset):
    grid = SweepGrid(
        ks=(8,), layer_sets=("2,3",), seeds=(0, 1, 2), train=tiny_train_config(epochs=2)
    )
    result = run_sweep(grid, tiny_dataset)
    seed_rows = [r for r in result.rows if r.seed != "avg"]
    avg_row = [r for r in result.rows if r.seed == "avg"][0]
    assert avg_row.macro_f1 == pytest.approx(
        np.mean([r.macro_f1 for r in seed_rows]), abs=1e-12
    )
    for layer in avg_row.mean_alpha:
        assert avg_row.mean_alpha[layer] == pytest.approx(
            np.mean([r.mean_alpha[layer] for r in seed_rows]), abs=1e-12
        )


def test_sweep_codebook_cache_hits(tiny_dataset):
    grid = SweepGrid(
        ks=(6,),
        layer_sets=("0,1,2,3", "3"),  # second cell reuses layer 3's codebook
        seeds=(0,),
        train=tiny_train_config(epochs=2),
    )
    result = run_sweep(grid, tiny_dataset)
    assert not result.failures
    assert result.cache.misses == 4  # one fit per layer, none for the second cell


def test_sweep_runs_identically_twice(tiny_dataset):
    grid = SweepGrid(
        ks=(8,),
        layer_sets=("1,3",),
        seeds=(0, 1),
        include_continuous=True,
        train=tiny_train_config(epochs=2),
    )
    a = rows_to_csv(run_sweep(grid, tiny_dataset).rows)
    b = rows_to_csv(run_sweep(grid, tiny_dataset).rows)
    assert a == b


def test_sweep_workers_match_serial(tiny_dataset):
    grid = SweepGrid(
        ks=(6, 8), layer_sets=("2,3",), seeds=(0,), train=tiny_train_config(epochs=2)
    )
    serial = rows_to_csv(run_sweep(grid, tiny_dataset, workers=1).rows)
    threaded = rows_to_csv(run_sweep(grid, tiny_dataset, workers=3).rows)
    assert serial == threaded


def test_sweep_isolates_failing_cells(tiny_dataset):
    grid = SweepGrid(
        ks=(8, 10**6),  # second K exceeds the train frame count and must fail
        layer_sets=("3",),
        seeds=(0,),
        train=tiny_train_config(epochs=2),
    )
    result = run_sweep(grid, tiny_dataset)
    assert len([r for r in result.rows if r.seed != "avg"]) == 1
    assert len(result.failures) == 1
    assert result.failures[0].k == 10**6


def test_continuous_rows_have_blank_k(tiny_dataset):
    grid = SweepGrid(
        ks=(8,),
        layer_sets=("3",),
        seeds=(0,),
        include_continuous=True,
        train=tiny_train_config(epochs=2),
    )
    result = run_sweep(grid, tiny_dataset)
    csv_text = rows_to_csv(result.rows)
    reader = list(csv.reader(io.StringIO(csv_text)))
    assert reader[0] == CSV_COLUMNS
    assert all(len(row) == len(CSV_COLUMNS) for row in reader[1:])
    ks = [row[1] for row in reader[1:]]
    assert "8" in ks and "" in ks


def test_csv_quoting_and_alpha_blanks(tiny_dataset):
    row = ResultRow(
        layer_set="1,3",
        k=8,
        seed=0,
        aug="none",
        macro_f1=0.5,
        per_class_f1=np.linspace(0, 1, 8),
        mean_alpha={1: 0.25, 3: 0.75},
    )
    text = rows_to_csv([row])
    parsed = list(csv.reader(io.StringIO(text)))
    assert parsed[1][0] == "1,3"
    alpha_cols = parsed[1][13:]
    assert alpha_cols[1] == "0.25" and alpha_cols[3] == "0.75"
    assert alpha_cols[0] == "" and alpha_cols[23] == ""
    assert rows_to_text([row]).count("\n") >= 3


def _avg_row(layer_set, k, aug, f1):
    return ResultRow(
        layer_set=layer_set,
        k=k,
        seed="avg",
        aug=aug,
        macro_f1=f1,
        per_class_f1=np.full(8, f1),
        mean_alpha={},
    )


def test_augmentation_report_gains():
    rows = [
        _avg_row("sparse", 8, "none", 0.30),
        _avg_row("sparse", 8, "prosody", 0.312),
        _avg_row("all", 8, "none", 0.40),
        _avg_row("all", 8, "prosody", 0.40),
    ]
    gains = augmentation_report(rows)
    by_set = {g.layer_set: g for g in gains}
    assert by_set["sparse"].gain_pct == pytest.approx(4.0, rel=1e-12)
    assert by_set["all"].gain_pct == 0.0
    # ordered sparse -> dense
    assert [g.layer_set for g in gains] == ["sparse", "all"]
    assert "gain_pct" in gains_to_csv(gains).splitlines()[0]


def test_augmentation_report_requires_baseline():
    with pytest.raises(ValueError):
        augmentation_report([_avg_row("sparse", 8, "prosody", 0.5)])


def test_grid_validation():
    with pytest.raises(ValueError):
        SweepGrid(ks=(), layer_sets=("all",), seeds=(0,))
    with pytest.raises(ValueError):
        SweepGrid(ks=(8,), layer_sets=("all",), seeds=(0,), augmentations=("bogus",))
    grid = SweepGrid.from_json(
        {"ks": [8], "layer_sets": ["all"], "seeds": [0, 1], "train": {"epochs": 2}}
    )
    assert grid.train.epochs == 2
    assert grid.augmentations == ("none",)
    assert set(AUGMENTATIONS) == {
        "prosody", "spectral", "mfcc", "voice_quality", "formants",
        "auditory_bands", "additional", "all",
    }


def test_prepare_items_aug_variants(tiny_dataset, tiny_cache):
    _, layers = resolve_layer_set("2,3", 4)
    items = prepare_items(tiny_dataset, "dev", layers, 8, tiny_cache, aug="prosody")
    assert items[0].osm.shape[1] == 6
    assert items[0].osm.shape[0] == items[0].streams.shape[1]
    items_all = prepare_items(tiny_dataset, "dev", layers, 8, tiny_cache, aug="all")
    assert items_all[0].osm.shape[1] == 74
    with pytest.raises(ValueError):
        prepare_items(tiny_dataset, "dev", layers, 8, tiny_cache, aug="bogus")


def test_average_rows_single():
    row = _avg_row("all", 8, "none", 0.4)
    row.seed = 3
    out = average_rows([row])
    assert out.seed == "avg"
    assert out.macro_f1 == row.macro_f1


def test_prepare_rvq_items_stage_streams(tiny_dataset):
    from disq.sweep import prepare_rvq_items

    items = prepare_rvq_items(tiny_dataset, "dev", layer=3, n_stages=4, k_per_stage=8)
    assert items[0].streams.shape[0] == 4
    assert items[0].streams.shape[1] == items[0].mask.shape[0]
    # later stages add detail: cumulative reconstruction error shrinks
    utt = tiny_dataset.utterances["dev"][0]
    x = utt.layers[3].frames.astype(np.float64)
    cumulative = np.zeros_like(x)
    errs = []
    for stage in items[0].streams:
        cumulative += stage
        errs.append(float(((x - cumulative) ** 2).sum()))
    assert errs == sorted(errs, reverse=True)
    # a stage subset keeps the requested order
    pair = prepare_rvq_items(tiny_dataset, "dev", layer=3, n_stages=4, k_per_stage=8, stages_used=(0, 2))
    assert pair[0].streams.shape[0] == 2
    assert np.array_equal(pair[0].streams[0], items[0].streams[0])
    with pytest.raises(ValueError):
        prepare_rvq_items(tiny_dataset, "dev", layer=3, n_stages=2, k_per_stage=8, stages_used=(5,))


def test_rvq_stage_streams_train_like_layers(tiny_dataset):
    from disq.sweep import prepare_rvq_items

    tr = prepare_rvq_items(tiny_dataset, "train", layer=3, n_stages=3, k_per_stage=8)
    dv = prepare_rvq_items(tiny_dataset, "dev", layer=3, n_stages=3, k_per_stage=8)
    result = train(tr, dv, tiny_train_config(epochs=3))
    assert len(result.history) == 3
