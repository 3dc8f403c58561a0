"""Tests for the classification, segmentation, aggregation, and recognition heads."""

import numpy as np
import pytest

from textspot import autodiff as ad
from textspot.glyphs import DEFAULT_CHARSET
from textspot.heads import (
    AGG_EPS,
    CLASS_BACKGROUND,
    CLASS_NO_TEXT,
    CLASS_TEXT,
    AggAttentionHead,
    AttentionMask,
    ClassificationHead,
    DirectionalFeatures,
    RecognitionHead,
    SegmentationHead,
    SequenceAssembler,
    agg_directional,
    assemble_instances,
)
from textspot.layers import ParamStore


def _rand_semantic(n=3, hq=4, wq=5, d=8, seed=0):
    return ad.Tensor(np.random.default_rng(seed).normal(size=(n, hq, wq, d)))


class TestClassificationHead:
    def test_shapes_and_normalization(self):
        head = ClassificationHead(ParamStore(seed=0), 8)
        out = head.classify(_rand_semantic())
        assert out.logits.shape == (3, 3)
        assert out.probs.shape == (3, 3)
        np.testing.assert_allclose(out.probs.data.sum(axis=-1), 1.0, rtol=1e-6)
        assert (out.probs.data > 0).all()

    def test_class_indices(self):
        assert (CLASS_TEXT, CLASS_BACKGROUND, CLASS_NO_TEXT) == (0, 1, 2)

    def test_query_permutation_equivariance(self):
        head = ClassificationHead(ParamStore(seed=1), 8)
        s = _rand_semantic(n=4)
        perm = np.array([2, 0, 3, 1])
        base = head.classify(s).logits.data
        permuted = head.classify(ad.Tensor(s.data[perm])).logits.data
        np.testing.assert_allclose(permuted, base[perm], rtol=1e-6)


class TestSegmentationHead:
    def test_shape(self):
        head = SegmentationHead(ParamStore(seed=0), 8)
        out = head.segment(_rand_semantic())
        assert out.logits.shape == (3, 4, 5)

    def test_query_permutation_equivariance(self):
        # conv weights are shared across queries: the query axis is a batch
        head = SegmentationHead(ParamStore(seed=1), 8)
        s = _rand_semantic(n=4)
        perm = np.array([3, 1, 0, 2])
        base = head.segment(s).logits.data
        permuted = head.segment(ad.Tensor(s.data[perm])).logits.data
        np.testing.assert_allclose(permuted, base[perm], rtol=1e-5, atol=1e-7)


class TestAggDirectional:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        s = ad.Tensor(rng.normal(size=(2, 3, 4, 5)))
        m = ad.Tensor(rng.uniform(0.1, 1.0, size=(2, 3, 4, 5)))
        out = agg_directional(s, AttentionMask(values=m))
        sm = s.data * m.data
        for i in range(2):
            for x in range(4):
                for c in range(5):
                    want = sm[i, :, x, c].sum() / (m.data[i, :, x, c].sum() + AGG_EPS)
                    np.testing.assert_allclose(out.horizontal.data[i, x, c], want, rtol=1e-12)
            for y in range(3):
                for c in range(5):
                    want = sm[i, y, :, c].sum() / (m.data[i, y, :, c].sum() + AGG_EPS)
                    np.testing.assert_allclose(out.vertical.data[i, y, c], want, rtol=1e-12)

    def test_two_pixel_column_example(self):
        # one query, one column of height 2, one channel:
        # S = [0.5, 1.5], M = [0.5, 1.5] -> weighted mean (0.25+2.25)/(0.5+1.5)
        s = ad.Tensor(np.array([0.5, 1.5]).reshape(1, 2, 1, 1))
        m = ad.Tensor(np.array([0.5, 1.5]).reshape(1, 2, 1, 1))
        out = agg_directional(s, AttentionMask(values=m))
        np.testing.assert_allclose(out.horizontal.data[0, 0, 0], 2.5 / (2.0 + AGG_EPS))

    def test_uniform_mask_equals_plain_mean(self):
        rng = np.random.default_rng(4)
        s = ad.Tensor(rng.normal(size=(2, 6, 7, 8)))
        m = ad.Tensor(np.full((2, 6, 7, 8), 0.37))
        out = agg_directional(s, AttentionMask(values=m))
        np.testing.assert_allclose(out.horizontal.data, s.data.mean(axis=1), atol=1e-5)
        np.testing.assert_allclose(out.vertical.data, s.data.mean(axis=2), atol=1e-5)

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(5)
        s = ad.Tensor(rng.normal(size=(1, 5, 5, 4)))
        m = rng.uniform(0.2, 1.0, size=(1, 5, 5, 4))
        base = agg_directional(s, AttentionMask(values=ad.Tensor(m)))
        for alpha in (0.1, 0.5, 1.0):
            scaled = agg_directional(s, AttentionMask(values=ad.Tensor(alpha * m)))
            np.testing.assert_allclose(
                scaled.horizontal.data, base.horizontal.data, rtol=1e-4
            )
            np.testing.assert_allclose(scaled.vertical.data, base.vertical.data, rtol=1e-4)

    def test_gradient_flows_through_weighting(self):
        rng = np.random.default_rng(6)
        s = ad.Tensor(rng.normal(size=(1, 3, 3, 2)), requires_grad=True)
        m = ad.Tensor(rng.uniform(0.2, 1.0, size=(1, 3, 3, 2)), requires_grad=True)
        out = agg_directional(s, AttentionMask(values=m))
        ad.backward(out.horizontal.sum() + out.vertical.sum())
        assert np.abs(s.grad).max() > 0
        assert np.abs(m.grad).max() > 0


class TestAggAttentionHead:
    def test_range_and_shape(self):
        head = AggAttentionHead(ParamStore(seed=0), 8)
        out = head.agg_attention(_rand_semantic())
        assert out.values.shape == (3, 4, 5, 8)
        assert (out.values.data > 0).all() and (out.values.data < 1).all()


class TestSequenceAssembler:
    def test_layout_horizontal_first(self):
        store = ParamStore(seed=0)
        asm = SequenceAssembler(store, 8)
        rng = np.random.default_rng(7)
        fh = ad.Tensor(rng.normal(size=(2, 5, 8)))  # width 5
        fv = ad.Tensor(rng.normal(size=(2, 3, 8)))  # height 3
        seq = asm.assemble_sequence(DirectionalFeatures(horizontal=fh, vertical=fv))
        assert seq.values.shape == (2, 8, 8)

        from textspot.positional import sine_table_1d

        e_h = sine_table_1d(5, 8)
        e_v = sine_table_1d(3, 8)
        e_d = store["seq.direction_embed"].data
        np.testing.assert_allclose(
            seq.values.data[:, :5], fh.data + e_h + e_d[0], rtol=1e-5, atol=1e-6
        )
        np.testing.assert_allclose(
            seq.values.data[:, 5:], fv.data + e_v + e_d[1], rtol=1e-5, atol=1e-6
        )

    def test_swapping_direction_rows_shifts_by_their_difference(self):
        store = ParamStore(seed=1)
        asm = SequenceAssembler(store, 8)
        rng = np.random.default_rng(8)
        direct = DirectionalFeatures(
            horizontal=ad.Tensor(rng.normal(size=(1, 4, 8))),
            vertical=ad.Tensor(rng.normal(size=(1, 2, 8))),
        )
        before = asm.assemble_sequence(direct).values.data.copy()
        e_d = store["seq.direction_embed"].data
        diff = (e_d[1] - e_d[0]).copy()
        store["seq.direction_embed"].data[:] = e_d[[1, 0]]
        after = asm.assemble_sequence(direct).values.data
        np.testing.assert_allclose(
            after[:, :4] - before[:, :4], np.broadcast_to(diff, (1, 4, 8)), rtol=1e-5, atol=1e-6
        )
        np.testing.assert_allclose(
            after[:, 4:] - before[:, 4:], np.broadcast_to(-diff, (1, 2, 8)), rtol=1e-5, atol=1e-6
        )


class TestRecognitionHead:
    def test_output_shape(self):
        store = ParamStore(seed=0)
        head = RecognitionHead(store, 8, heads=2, layers=2, num_char_queries=6, charset_size=12)
        rng = np.random.default_rng(9)
        seq_values = ad.Tensor(rng.normal(size=(3, 10, 8)))

        from textspot.heads import RecognitionSequence

        out = head.recognize(RecognitionSequence(values=seq_values))
        assert out.logits.shape == (3, 6, 12)

    def test_all_positions_decoded_in_parallel(self):
        # non-autoregressive: changing the memory changes every slot's logits,
        # and slots do not depend on a previous decode step
        store = ParamStore(seed=1)
        head = RecognitionHead(store, 8, heads=2, layers=1, num_char_queries=4, charset_size=12)
        rng = np.random.default_rng(10)

        from textspot.heads import RecognitionSequence

        a = head.recognize(RecognitionSequence(values=ad.Tensor(rng.normal(size=(1, 6, 8)))))
        b = head.recognize(RecognitionSequence(values=ad.Tensor(rng.normal(size=(1, 6, 8)))))
        assert not np.allclose(a.logits.data, b.logits.data)


class TestAssembleInstances:
    def _logits(self, masks):
        return np.where(np.asarray(masks), 8.0, -8.0)

    def _cls(self, text_probs):
        probs = np.zeros((len(text_probs), 3))
        probs[:, CLASS_TEXT] = text_probs
        probs[:, CLASS_NO_TEXT] = 1.0 - np.asarray(text_probs)
        return probs

    def _chars(self, texts, k=4):
        out = np.full((len(texts), k, DEFAULT_CHARSET.size), -5.0)
        for i, t in enumerate(texts):
            ids = DEFAULT_CHARSET.encode(t, length=k)
            out[i, np.arange(k), ids] = 5.0
        return out

    def test_basic_assembly(self):
        m = np.zeros((2, 4, 4), dtype=bool)
        m[0, :2, :2] = True
        m[1, 2:, 2:] = True
        res = assemble_instances(
            self._cls([0.9, 0.8]), self._logits(m), self._chars(["AB", "C"]),
            DEFAULT_CHARSET, (16, 16),
        )
        assert [r.transcription for r in res] == ["AB", "C"]
        assert [r.query_index for r in res] == [0, 1]
        np.testing.assert_allclose([r.score for r in res], [0.9, 0.8])
        for r, mq in zip(res, m):
            np.testing.assert_array_equal(r.mask, np.kron(mq, np.ones((4, 4), dtype=bool)))

    def test_score_threshold_drops_queries(self):
        m = np.zeros((2, 4, 4), dtype=bool)
        m[:, 1, 1] = True
        res = assemble_instances(
            self._cls([0.9, 0.3]), self._logits(m), self._chars(["A", "B"]),
            DEFAULT_CHARSET, (16, 16),
        )
        assert [r.query_index for r in res] == [0]
        res = assemble_instances(
            self._cls([0.2, 0.3]), self._logits(m), self._chars(["A", "B"]),
            DEFAULT_CHARSET, (16, 16),
        )
        assert res == []

    def test_overlap_resolved_by_higher_mask_probability(self):
        logits = np.full((2, 2, 2), -8.0)
        logits[0, 0, 0] = 2.0
        logits[1, 0, 0] = 3.0  # query 1 wins the contested pixel
        logits[0, 1, 1] = 4.0
        res = assemble_instances(
            self._cls([0.9, 0.9]), logits, self._chars(["A", "B"]),
            DEFAULT_CHARSET, (8, 8),
        )
        assert len(res) == 2
        masks = {r.query_index: r.mask for r in res}
        assert masks[1][0, 0] and not masks[0][0, 0]
        assert masks[0][4, 4]
        assert not (masks[0] & masks[1]).any()

    def test_low_confidence_pixels_unowned(self):
        logits = np.full((1, 2, 2), -8.0)
        logits[0, 0, 0] = -0.5  # sigmoid < 0.5: nobody owns it
        res = assemble_instances(
            self._cls([0.9]), logits, self._chars(["A"]), DEFAULT_CHARSET, (8, 8)
        )
        assert res == []

    def test_keeps_largest_connected_component(self):
        m = np.zeros((1, 6, 6), dtype=bool)
        m[0, 0, 0] = True           # 1-cell blob
        m[0, 3:6, 3:6] = True       # 9-cell blob, not 8-connected to the first
        res = assemble_instances(
            self._cls([0.9]), self._logits(m), self._chars(["A"]), DEFAULT_CHARSET, (24, 24)
        )
        assert len(res) == 1
        expect = np.zeros((6, 6), dtype=bool)
        expect[3:6, 3:6] = True
        np.testing.assert_array_equal(res[0].mask, np.kron(expect, np.ones((4, 4), dtype=bool)))

    def test_diagonal_counts_as_connected(self):
        m = np.zeros((1, 4, 4), dtype=bool)
        m[0, 0, 0] = True
        m[0, 1, 1] = True  # 8-connected to (0,0)
        res = assemble_instances(
            self._cls([0.9]), self._logits(m), self._chars(["A"]), DEFAULT_CHARSET, (16, 16)
        )
        assert res[0].mask.sum() == 2 * 16

    def test_transcription_truncates_at_pad(self):
        k = 4
        chars = np.full((1, k, DEFAULT_CHARSET.size), -5.0)
        pad = DEFAULT_CHARSET.pad_index
        for pos, idx in enumerate([0, pad, 1, 2]):  # A, [PAD], B, C
            chars[0, pos, idx] = 5.0
        m = np.zeros((1, 4, 4), dtype=bool)
        m[0, 1, 1] = True
        res = assemble_instances(
            self._cls([0.9]), self._logits(m), chars, DEFAULT_CHARSET, (16, 16)
        )
        assert res[0].transcription == "A"

    def test_masks_are_pairwise_disjoint(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(5, 8, 8)) * 3
        cls = self._cls(rng.uniform(0.4, 1.0, size=5))
        res = assemble_instances(
            cls, logits, self._chars(["A", "B", "C", "E", "H"]), DEFAULT_CHARSET, (32, 32)
        )
        for i, a in enumerate(res):
            for b in res[i + 1 :]:
                assert not (a.mask & b.mask).any()
