import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_gaussians
from splatstream.core import Camera, LodView, lod_sizes
from splatstream.exceptions import ContractViolation, DataError, FormatError
from splatstream.scene import (
    LodTreeBuilder, SceneSpec, build_lod_tree, generate_synthetic_scene, level_order_layout, load_ply,
    load_tree, partition_subtrees, random_gaussians, save_ply, save_tree, tree_from_parents,
)


def perfect_binary(levels=4):
    n = 2**levels - 1
    parent = np.array([-1] + [(i - 1) // 2 for i in range(1, n)])
    return tree_from_parents(make_gaussians(np.zeros((n, 3))), parent)


def write_ascii_ply(path, names, rows):
    head = ["ply", "format ascii 1.0", f"element vertex {len(rows)}"]
    head += [f"property float {n}" for n in names] + ["end_header"]
    body = [" ".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(head + body) + "\n")


PLY_NAMES = ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2"]


class TestPly:
    def test_conventions(self, tmp_path):
        path = tmp_path / "one.ply"
        write_ascii_ply(path, PLY_NAMES, [[0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0.1, 0.2, 0.3]])
        gs = load_ply(path)
        assert gs.scales[0, 0] == 1.0
        assert gs.opacities[0] == 0.5

    def test_missing_rotation_component(self, tmp_path):
        path = tmp_path / "bad.ply"
        names = [n for n in PLY_NAMES if n != "rot_3"]
        write_ascii_ply(path, names, [[0] * len(names)])
        with pytest.raises(FormatError, match="rot_3"):
            load_ply(path)

    def test_non_finite_reports_record(self, tmp_path):
        path = tmp_path / "nan.ply"
        good = [0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0]
        bad = list(good)
        bad[1] = "nan"
        write_ascii_ply(path, PLY_NAMES, [good, good, bad])
        with pytest.raises(DataError) as err:
            load_ply(path)
        assert err.value.index == 2

    def test_binary_round_trip(self, tmp_path):
        gs = random_gaussians(50, seed=1, sh_degree=2)
        save_ply(tmp_path / "s.ply", gs)
        back = load_ply(tmp_path / "s.ply")
        assert np.allclose(back.positions, gs.positions, atol=1e-6)
        assert np.allclose(back.scales, gs.scales, rtol=1e-5)
        assert np.allclose(back.opacities, gs.opacities, atol=1e-6)
        assert np.allclose(back.sh, gs.sh, atol=1e-6)

    def test_not_a_ply(self, tmp_path):
        (tmp_path / "x.ply").write_bytes(b"hello\n")
        with pytest.raises(FormatError):
            load_ply(tmp_path / "x.ply")


class TestSynthetic:
    def test_deterministic(self):
        spec = SceneSpec(cells_x=3, cells_y=2, per_cell=20, seed=5)
        a, b = generate_synthetic_scene(spec), generate_synthetic_scene(spec)
        for name in ("positions", "scales", "rotations", "opacities", "sh"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_count(self):
        assert len(generate_synthetic_scene(SceneSpec(cells_x=10, cells_y=10, per_cell=50))) == 5000

    def test_seed_changes_positions(self):
        a = generate_synthetic_scene(SceneSpec(cells_x=2, cells_y=2, per_cell=10, seed=0))
        b = generate_synthetic_scene(SceneSpec(cells_x=2, cells_y=2, per_cell=10, seed=1))
        assert not np.array_equal(a.positions, b.positions)

    def test_bad_extent(self):
        with pytest.raises(ContractViolation):
            generate_synthetic_scene(SceneSpec(cells_x=0))


class TestTree:
    def test_single_gaussian(self):
        tree = build_lod_tree(make_gaussians([[1, 2, 3]]))
        assert len(tree) == 1 and tree.leaves().tolist() == [0]

    def test_symmetric_merge(self):
        tree = build_lod_tree(make_gaussians([[-1, 0, 0], [1, 0, 0]], scales=1.0, opacity=0.5))
        assert len(tree) == 3
        assert np.allclose(tree.gaussians.positions[0], 0.0, atol=1e-12)

    def test_level_order_invariants(self, city_tree):
        city_tree.validate()
        off = city_tree.level_offsets
        for i, lv in enumerate(city_tree.level):
            assert off[lv] <= i < off[lv + 1]
        assert np.all(city_tree.parent[1:] < np.arange(1, len(city_tree)))

    def test_leaves_are_the_input(self, city, city_tree):
        leaves = city_tree.leaves()
        assert len(leaves) == len(city)
        assert sorted(city_tree.source_ids[leaves].tolist()) == city.ids.tolist()

    def test_parent_never_smaller_than_child(self):
        gs = random_gaussians(100, seed=4, extent=3.0)
        tree = build_lod_tree(gs)
        rng = np.random.default_rng(0)
        kids = np.arange(1, len(tree))
        for _ in range(40):
            eye = rng.uniform(-8, 8, size=3)
            cam = Camera.look_at(eye, rng.uniform(-1, 1, size=3), focal=300.0, principal=(64.0, 64.0),
                                 width=128, height=128, near=0.05)
            size = lod_sizes(LodView(cam, 2.0, 64.0), tree.gaussians.positions, tree.radii)
            assert np.all(size[tree.parent[kids]] >= size[kids] * (1 - 1e-12))

    def test_layout_is_identity_on_ordered_tree(self, city_tree):
        again = level_order_layout(city_tree)
        assert np.array_equal(again.parent, city_tree.parent)
        assert np.array_equal(again.gaussians.positions, city_tree.gaussians.positions)

    def test_layout_of_shuffled_parents(self):
        rng = np.random.default_rng(2)
        n = 40
        parent = np.array([-1] + [int(rng.integers(0, i)) for i in range(1, n)])
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        shuffled = np.where(parent[perm] < 0, -1, inv[np.maximum(parent[perm], 0)])
        tree = tree_from_parents(make_gaussians(rng.normal(size=(n, 3))[perm]), shuffled)
        tree.validate()
        assert np.all(tree.parent[1:] < np.arange(1, n))

    def test_three_levels(self):
        tree = perfect_binary(3)
        assert len(tree.level_offsets) == 4 and tree.depth == 3

    def test_cycle_detected(self):
        with pytest.raises(DataError, match="cycle"):
            tree_from_parents(make_gaussians(np.zeros((3, 3))), [-1, 2, 1])

    def test_round_trip_file(self, tmp_path, city_tree):
        save_tree(tmp_path / "t.nlod", city_tree)
        back = load_tree(tmp_path / "t.nlod")
        for name in ("parent", "first_child", "child_count", "level", "source_ids"):
            assert np.array_equal(getattr(back, name), getattr(city_tree, name))
        for name in ("positions", "scales", "rotations", "opacities", "sh"):
            assert getattr(back.gaussians, name).tobytes() == getattr(city_tree.gaussians, name).tobytes()

    def test_truncated_file(self, tmp_path, city_tree):
        save_tree(tmp_path / "t.nlod", city_tree)
        data = (tmp_path / "t.nlod").read_bytes()
        (tmp_path / "cut.nlod").write_bytes(data[:-7])
        with pytest.raises(FormatError):
            load_tree(tmp_path / "cut.nlod")
        (tmp_path / "magic.nlod").write_bytes(b"XLOD" + data[4:])
        with pytest.raises(FormatError):
            load_tree(tmp_path / "magic.nlod")

    def test_estimator_face(self, city):
        est = LodTreeBuilder(branching=4, subtree_size=32).fit(city)
        assert est.transform() is est.tree_
        assert est.tree_.partition.target_size == 32
        assert est.get_params() == {"branching": 4, "subtree_size": 32}


class TestPartition:
    def test_whole_tree_fits(self):
        tree = perfect_binary(3)
        part = partition_subtrees(tree, 7)
        assert part.subtree_count == 1 and len(part.top_tree) == 0
        assert part.members[0].tolist() == list(range(7))

    def test_balance_bound(self):
        tree = perfect_binary(4)
        part = partition_subtrees(tree, 4)
        part.check(tree)
        assert np.all(part.sizes <= 8)
        flat = np.concatenate(list(part.members) + [part.top_tree])
        assert sorted(flat.tolist()) == list(range(15))

    def test_singletons(self):
        tree = perfect_binary(4)
        part = partition_subtrees(tree, 1)
        part.check(tree)
        assert sum(part.sizes) + len(part.top_tree) == 15

    @given(st.integers(1, 200), st.integers(0, 2**16))
    def test_random_trees(self, target, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 300))
        parent = np.array([-1] + [int(rng.integers(max(0, i - 8), i)) for i in range(1, n)])
        tree = tree_from_parents(make_gaussians(np.zeros((n, 3))), parent)
        part = partition_subtrees(tree, target)
        part.check(tree)
        assert np.all(part.sizes <= 2 * target)

    def test_city_partition(self, city_tree):
        city_tree.partition.check(city_tree)

    def test_bad_target(self):
        with pytest.raises(ContractViolation):
            partition_subtrees(perfect_binary(2), 0)


def test_subtree_ids_cover_nodes(city_tree):
    owner = city_tree.subtree_id
    for s, mem in enumerate(city_tree.partition.members):
        assert np.all(owner[mem] == s)
    assert set(itertools.chain.from_iterable(m.tolist() for m in city_tree.partition.members)).isdisjoint(
        city_tree.partition.top_tree.tolist())
