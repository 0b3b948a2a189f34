import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import markov, perturbed_model, small_config
from progstack.evaluation import eval_loss
from progstack.model import forward
from progstack.stacking import (StackPlan, adjacent_stack, apply_plan, cross_stack,
                                embed_only_stack, partial_stack, random_top_stack,
                                source_indices, verify_stack)


def model(depth, seed=0, dilations=(1, 2, 4, 8)):
    return perturbed_model(small_config(blocks=depth, dilations=dilations), seed)


def same_block(a, b):
    ta, tb = a.tensors(), b.tensors()
    return a.dilation == b.dilation and all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


class TestPatterns:
    def test_adjacent_two_blocks(self):
        src = model(2)
        dst = adjacent_stack(src)
        expect = [0, 0, 1, 1]
        assert all(same_block(dst.blocks[i], src.blocks[j]) for i, j in enumerate(expect))
        assert dst.config.num_blocks == 4

    def test_cross_two_blocks(self):
        src = model(2)
        dst = cross_stack(src)
        assert all(same_block(dst.blocks[i], src.blocks[j]) for i, j in enumerate([0, 1, 0, 1]))

    def test_single_block_modes_coincide(self):
        src = model(1)
        a, c = adjacent_stack(src), cross_stack(src)
        assert len(a.blocks) == 2
        assert all(same_block(x, y) for x, y in zip(a.blocks, c.blocks))

    def test_dilations_travel_with_blocks(self):
        src = model(4)
        assert cross_stack(src).dilations == [1, 2, 4, 8, 1, 2, 4, 8]
        assert adjacent_stack(src).dilations == [1, 1, 2, 2, 4, 4, 8, 8]

    def test_redilate_option(self):
        src = model(4)
        dst = adjacent_stack(src, redilate=True)
        assert dst.dilations == [1, 2, 4, 8, 1, 2, 4, 8]
        assert verify_stack(src, dst, StackPlan("adjacent", 4, redilate=True)).ok

    def test_copies_are_independent(self):
        src = model(2)
        dst = adjacent_stack(src)
        dst.blocks[0].conv1_w += 1
        dst.blocks[0].alpha += 1
        assert same_block(dst.blocks[1], src.blocks[0])
        assert not np.shares_memory(dst.embedding, src.embedding)

    def test_partial_cross(self):
        src = perturbed_model(small_config(k=4, blocks=32, dilations=(1, 2, 4, 8)), 0)
        dst = partial_stack(src, "cross", 16)
        assert len(dst.blocks) == 48
        for i in range(16):
            assert same_block(dst.blocks[32 + i], src.blocks[i])

    def test_partial_adjacent_single(self):
        src = model(4)
        dst = partial_stack(src, "adjacent", 1)
        assert all(same_block(dst.blocks[i], src.blocks[j]) for i, j in enumerate([0, 1, 2, 3, 3]))

    @pytest.mark.parametrize("mode, full", [("adjacent", adjacent_stack), ("cross", cross_stack)])
    def test_partial_full_equals_doubling(self, mode, full):
        src = model(3)
        a, b = partial_stack(src, mode, 3), full(src)
        assert all(same_block(x, y) for x, y in zip(a.blocks, b.blocks))

    def test_partial_too_many(self):
        with pytest.raises(ValueError):
            partial_stack(model(2), "cross", 3)

    def test_source_indices(self):
        assert source_indices(4, "adjacent", 2) == [0, 1, 2, 2, 3, 3]
        assert source_indices(4, "cross", 2) == [0, 1, 2, 3, 0, 1]


class TestBaselines:
    def test_random_top_preserves_function(self):
        src = model(2)
        dst = random_top_stack(src, 2, seed=5)
        ids = markov(seed=1).sequences[:8]
        assert forward(src, ids)[0].tobytes() == forward(dst, ids)[0].tobytes()
        data = markov(seed=2)
        assert eval_loss(src, data) == eval_loss(dst, data)

    def test_random_top_structure(self):
        src = model(3)
        dst = random_top_stack(src, 3, seed=0)
        assert [float(b.alpha) for b in dst.blocks[3:]] == [0.0] * 3
        assert all(same_block(dst.blocks[i], src.blocks[i]) for i in range(3))

    def test_random_top_seed_sensitivity(self):
        src = model(2)
        a, b = random_top_stack(src, 1, seed=1), random_top_stack(src, 1, seed=2)
        assert not np.array_equal(a.blocks[2].conv1_w, b.blocks[2].conv1_w)

    def test_embed_only(self):
        src = model(2)
        dst = embed_only_stack(src, 4, seed=3)
        assert dst.embedding.tobytes() == src.embedding.tobytes()
        src_bytes = {t.tobytes() for b in src.blocks for t in b.tensors().values()}
        for b in dst.blocks:
            assert b.conv1_w.tobytes() not in src_bytes and b.conv2_w.tobytes() not in src_bytes
        ids = markov(seed=1).sequences[:4]
        expected = src.embedding[ids] @ src.softmax_w + src.softmax_b
        assert forward(dst, ids)[0].tobytes() == expected.tobytes()


class TestVerify:
    def test_pass(self):
        src = model(3)
        assert verify_stack(src, adjacent_stack(src), StackPlan("adjacent", 3)).ok

    def test_perturbed_weight_named(self):
        src = model(2)
        dst = adjacent_stack(src)
        dst.blocks[3].conv1_w[0, 0, 0] += 1e-3
        rep = verify_stack(src, dst, StackPlan("adjacent", 2))
        assert not rep.ok
        assert rep.mismatches == ["block3.conv1.w"]
        assert "block3.conv1.w" in rep.format()

    def test_wrong_mode(self):
        src = model(2)
        assert not verify_stack(src, cross_stack(src), StackPlan("adjacent", 2)).ok
        assert not verify_stack(src, adjacent_stack(src), StackPlan("cross", 2)).ok

    def test_wrong_depth(self):
        src = model(2)
        assert not verify_stack(src, adjacent_stack(src), StackPlan("cross", 1)).ok

    def test_embedding_change_detected(self):
        src = model(2)
        dst = cross_stack(src)
        dst.softmax_b[0] += 1
        assert verify_stack(src, dst, StackPlan("cross", 2)).mismatches == ["softmax.b"]

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            StackPlan("sideways", 1)
        with pytest.raises(ValueError):
            StackPlan("cross", 0)
        assert StackPlan("random-top", 1).mode == "random_top"


@settings(max_examples=30, deadline=None)
@given(depth=st.integers(1, 8), frac=st.floats(0.01, 1.0),
       mode=st.sampled_from(["adjacent", "cross", "random_top", "embed_only"]),
       seed=st.integers(0, 10_000))
def test_stacking_properties(depth, frac, mode, seed):
    src = perturbed_model(small_config(k=4, blocks=depth), seed)
    m = max(1, round(frac * depth))
    plan = StackPlan(mode, m)
    dst = apply_plan(src, plan, seed)
    assert len(dst.blocks) == depth + m
    assert verify_stack(src, dst, plan).ok
    for name in ("embedding", "softmax_w", "softmax_b"):
        assert getattr(dst, name).tobytes() == getattr(src, name).tobytes()
