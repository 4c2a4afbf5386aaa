import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cortex.errors import ConfigurationError
from cortex.toy_scene import (
    CHANGE_KINDS,
    COLOR_RGB,
    ChangeOp,
    ObjectSpec,
    ScenePair,
    SceneSpec,
    apply_change,
    caption_vocabulary,
    dumps_dataset,
    generate_dataset,
    inverse_change,
    load_dataset,
    load_image,
    make_pair,
    perceive_scene,
    rasterize,
    render_gt_caption,
    render_pseudo_rte,
    save_dataset,
    split_dataset,
    uniform_mix,
)


def scene(*objs, grid=5):
    return SceneSpec(grid, tuple(objs), 0)


def test_dataset_is_deterministic():
    a = generate_dataset(8, seed=7, change_mix=uniform_mix())
    b = generate_dataset(8, seed=7, change_mix=uniform_mix())
    assert len(a) == 8
    assert a == b
    assert dumps_dataset(a) == dumps_dataset(b)


def test_no_change_only_mix():
    (pair,) = generate_dataset(1, seed=0, change_mix={"no_change": 1.0})
    assert pair.before == pair.after
    assert pair.gt_captions == ("there is no change",)


def test_change_mix_frequencies():
    pairs = generate_dataset(1000, seed=3, change_mix=uniform_mix())
    counts = Counter(p.change.kind for p in pairs)
    for kind in CHANGE_KINDS:
        assert abs(counts[kind] / 1000 - 0.2) <= 0.05


@pytest.mark.parametrize("mix", [{"add": 0.5, "remove": 0.4}, {"add": -0.1, "remove": 1.1}, {"teleport": 1.0}])
def test_bad_mix_rejected(mix):
    with pytest.raises(ConfigurationError):
        generate_dataset(4, seed=0, change_mix=mix)


def test_caption_templates():
    cube = ObjectSpec("red", "cube", "small", (0, 0))
    sphere = ObjectSpec("blue", "sphere", "large", (2, 2))
    s = scene(cube, sphere)
    assert render_gt_caption((s, ChangeOp("remove", 0))) == "the small red cube is missing"
    assert render_gt_caption((s, ChangeOp("no_change"))) == "there is no change"
    assert render_gt_caption((s, ChangeOp("recolor", 1, "green"))) == "the large blue sphere changed to green"
    added = ObjectSpec("gray", "cylinder", "large", (4, 4))
    assert render_gt_caption((s, ChangeOp("add", None, added))) == "the large gray cylinder has been added"
    assert render_gt_caption((s, ChangeOp("move", 0, (4, 4)))) == (
        "the small red cube moved from the top left to the bottom right"
    )


def test_caption_vocabulary_is_closed():
    vocab = set(caption_vocabulary())
    pairs = generate_dataset(300, seed=11)
    for p in pairs:
        assert set(p.gt_captions[0].split()) <= vocab
    assert len(vocab) <= 60


def test_pseudo_rte_single_object():
    sents = render_pseudo_rte(scene(ObjectSpec("red", "cube", "small", (1, 1))))
    assert sents == ["the small red cube is the only object"]


def test_pseudo_rte_relation_direction():
    s = scene(ObjectSpec("red", "cube", "small", (0, 0)), ObjectSpec("blue", "sphere", "large", (0, 2)))
    sents = render_pseudo_rte(s)
    assert "to the right of" in sents[1]
    assert "to the left of" in sents[0]
    assert sents[0].endswith("a larger object")


def test_pseudo_rte_nearest_neighbor_tie_break():
    # objects 1 and 2 are both at distance 2 from object 0; index 1 wins
    s = scene(
        ObjectSpec("red", "cube", "small", (2, 2)),
        ObjectSpec("blue", "cube", "large", (2, 0)),
        ObjectSpec("green", "cube", "small", (0, 2)),
    )
    assert render_pseudo_rte(s)[0] == "the small red cube is to the right of a larger object"


def test_pseudo_rte_fifteen_objects():
    cells = [(r, c) for r in range(5) for c in range(5)][:15]
    colors = ["red", "blue", "green", "yellow", "gray"]
    objs = [ObjectSpec(colors[i % 5], ["cube", "sphere", "cylinder"][i // 5], "small", cell)
            for i, cell in enumerate(cells)]
    assert len(render_pseudo_rte(scene(*objs))) == 15


def test_rasterize_empty_scene_is_background():
    img = rasterize(scene(), 40)
    assert img.shape == (40, 40, 3)
    assert np.all(img == img[0, 0])


def test_rasterize_deterministic_and_bounds():
    s = generate_dataset(1, seed=5)[0].before
    assert np.array_equal(rasterize(s, 40), rasterize(s, 40))
    with pytest.raises(ConfigurationError):
        rasterize(s, 39)


def test_recolor_changes_only_target_cell():
    s = scene(ObjectSpec("red", "cube", "large", (1, 3)), ObjectSpec("blue", "sphere", "small", (3, 0)))
    t = apply_change(s, ChangeOp("recolor", 0, "green"))
    diff = np.any(rasterize(s, 40) != rasterize(t, 40), axis=-1)
    rows, cols = np.nonzero(diff)
    assert diff.any()
    assert rows.min() >= 8 and rows.max() < 16
    assert cols.min() >= 24 and cols.max() < 32


def test_distinct_colors_distinct_rgb():
    assert len(set(COLOR_RGB.values())) == len(COLOR_RGB)


def test_perceive_inverts_rasterize():
    for p in generate_dataset(30, seed=2):
        got = perceive_scene(rasterize(p.before, 40))
        assert {(o.color, o.shape, o.size, o.cell) for o in got.objects} == {
            (o.color, o.shape, o.size, o.cell) for o in p.before.objects
        }


def test_pair_invariants_enforced():
    s = scene(ObjectSpec("red", "cube", "small", (0, 0)), ObjectSpec("blue", "cube", "small", (1, 1)))
    with pytest.raises(ValueError):
        ScenePair("x", s, s, ChangeOp("remove", 0), ("the small red cube is missing",))
    with pytest.raises(ValueError):
        ScenePair("x", s, s, ChangeOp("no_change"), ())
    with pytest.raises(ValueError):
        scene(ObjectSpec("red", "cube", "small", (0, 0)), ObjectSpec("blue", "cube", "small", (0, 0)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), idx=st.integers(0, 50))
def test_change_then_inverse_restores(seed, idx):
    pair = generate_dataset(idx + 1, seed=seed % 1000)[idx]
    inv = inverse_change(pair.before, pair.change)
    assert apply_change(pair.after, inv) == pair.before


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sentence_count_equals_object_count(seed):
    for p in generate_dataset(5, seed=seed):
        assert len(render_pseudo_rte(p.before)) == len(p.before.objects)
        assert len(render_pseudo_rte(p.after)) == len(p.after.objects)


def test_serialization_roundtrip(tmp_path):
    pairs = generate_dataset(12, seed=4)
    save_dataset(pairs, tmp_path / "d.jsonl", tmp_path / "img")
    assert load_dataset(tmp_path / "d.jsonl") == pairs
    first = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
    assert set(first) == {"pair_id", "before", "after", "change", "gt_captions"}
    img = load_image(tmp_path / "img" / f"{pairs[0].pair_id}_bef.png")
    assert np.array_equal(img, rasterize(pairs[0].before, 40))


def test_splits_are_reproducible():
    pairs = generate_dataset(200, seed=1)
    a, b = split_dataset(pairs), split_dataset(list(reversed(pairs)))
    assert {k: {p.pair_id for p in v} for k, v in a.items()} == {k: {p.pair_id for p in v} for k, v in b.items()}
    assert 0.7 < len(a["train"]) / 200 < 0.9


def test_make_pair_caption():
    s = scene(ObjectSpec("yellow", "sphere", "small", (4, 0)), ObjectSpec("red", "cube", "large", (0, 4)))
    p = make_pair("p", s, ChangeOp("remove", 1))
    assert p.gt_captions == ("the large red cube is missing",)
