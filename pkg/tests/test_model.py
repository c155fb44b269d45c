import math

import numpy as np
import pytest

from radtex import tensor as T
from radtex import textpipe as tp
from radtex.model import (BackboneConfig, ClassifierModel, ModelConfig, CaptioningModel, TextualHeadConfig,
                          caption_loss, classify, decoder_forward, encode_image, load_backbone, load_checkpoint,
                          reverse_tokens, save_checkpoint)
from radtex.model.checkpoint import CheckpointFormatError, read_records, write_records
from radtex.tensor import DimensionError, Tensor

SMALL_BB = BackboneConfig(widths=(4, 8, 8, 8), blocks=(1, 1, 1, 1))


def small_model(vocab=20, seed=0, dropout=0.0):
    cfg = ModelConfig(SMALL_BB, TextualHeadConfig(width=16, layers=1, heads=2, ffn=32, dropout=dropout,
                                                  vocab_size=vocab, max_positions=12))
    return CaptioningModel(cfg, seed=seed).eval()


@pytest.fixture(scope="module")
def default_model():
    return CaptioningModel(ModelConfig(textual=TextualHeadConfig(vocab_size=50))).eval()


def images(rng, b=2, n=32):
    return rng.random((b, n, n)).astype(np.float32)


class TestEncode:
    def test_default_shape(self, default_model, rng):
        with T.no_grad():
            out = encode_image(default_model, images(rng, 2, 64))
        assert out.shape == (2, 4, 128)

    def test_distinct_images_distinct_features(self, default_model, rng):
        with T.no_grad():
            out = encode_image(default_model, images(rng, 2, 64)).data
        assert not np.allclose(out[0], out[1])

    def test_duplicate_rows_identical(self, default_model, rng):
        x = images(rng, 1, 64)
        with T.no_grad():
            out = encode_image(default_model, np.concatenate([x, x])).data
        assert np.array_equal(out[0], out[1])

    @pytest.mark.parametrize("shape", [(1, 1, 48, 64), (1, 3, 64, 64)])
    def test_bad_input(self, default_model, shape):
        with pytest.raises(DimensionError):
            encode_image(default_model, Tensor(np.zeros(shape, np.float32)))

    @pytest.mark.parametrize("widths,blocks,n", [((4, 8), (1, 1), 32), ((4, 4, 8), (2, 1, 1), 64),
                                                 ((4, 8, 8, 8), (1, 1, 1, 1), 96)])
    def test_shape_contract(self, widths, blocks, n, rng):
        bb = BackboneConfig(widths=widths, blocks=blocks)
        cfg = ModelConfig(bb, TextualHeadConfig(width=8, layers=1, heads=2, ffn=16, vocab_size=10))
        m = CaptioningModel(cfg).eval()
        size = n - n % bb.total_stride
        with T.no_grad():
            out = encode_image(m, images(rng, 1, size))
        assert out.shape == (1, (size // bb.total_stride) ** 2, 8)

    def test_resnet50_expressible(self):
        cfg = BackboneConfig.resnet50()
        assert cfg.blocks == (3, 4, 6, 3) and cfg.out_width == 2048 and cfg.total_stride == 32


class TestDecoder:
    def test_forward_causality(self, rng):
        m = small_model()
        vis = encode_image(m, images(rng))
        toks = rng.integers(5, 20, size=(2, 8))
        base = decoder_forward(m, toks, vis, "forward").data
        for t in range(7):
            pert = toks.copy()
            pert[:, t + 1:] = rng.integers(5, 20, size=(2, 7 - t))
            out = decoder_forward(m, pert, vis, "forward").data
            assert np.array_equal(out[:, :t + 1], base[:, :t + 1])

    def test_backward_causality_mirrored(self, rng):
        m = small_model()
        vis = encode_image(m, images(rng))
        toks = rng.integers(5, 20, size=(2, 8))
        base = decoder_forward(m, toks, vis, "backward").data
        for p in range(1, 8):
            pert = toks.copy()
            pert[:, :p] = rng.integers(5, 20, size=(2, p))
            out = decoder_forward(m, pert, vis, "backward").data
            # reversed position j reads natural positions >= 7 - j
            keep = 8 - p
            assert np.array_equal(out[:, :keep], base[:, :keep])

    def test_cross_attention_is_live(self, rng):
        m = small_model()
        vis = encode_image(m, images(rng))
        toks = rng.integers(5, 20, size=(2, 6))
        a = decoder_forward(m, toks, vis).data
        b = decoder_forward(m, toks, Tensor(np.zeros_like(vis.data))).data
        assert not np.allclose(a, b)

    def test_too_many_positions(self, rng):
        m = small_model()
        vis = encode_image(m, images(rng, 1))
        with pytest.raises(DimensionError):
            decoder_forward(m, np.full((1, 13), 5), vis)

    def test_reverse_tokens_keeps_padding(self):
        ids = np.array([[2, 7, 8, 3, 0], [2, 9, 3, 0, 0]])
        assert reverse_tokens(ids).tolist() == [[3, 8, 7, 2, 0], [3, 9, 2, 0, 0]]


def _ce_oracle(logits, targets):
    logits = logits.astype(np.float64)
    total = 0.0
    for row, t in zip(logits, targets):
        total += -(row[t] - math.log(np.exp(row - row.max()).sum()) - row.max())
    return total / len(targets)


class TestCaptionLoss:
    def test_three_token_oracle(self, rng):
        m = small_model()
        img = images(rng, 1)
        seq = np.array([[tp.SOS_ID, 9, tp.EOS_ID]])
        loss = caption_loss(m, img, seq).item()
        vis = encode_image(m, img)
        fwd = m.textual(seq[:, :2], vis, "forward").data[0]
        rev = seq[:, ::-1].copy()
        bwd = m.textual(rev[:, :2], vis, "backward").data[0]
        expected = _ce_oracle(fwd, seq[0, 1:]) + _ce_oracle(bwd, rev[0, 1:])
        assert loss == pytest.approx(expected, rel=1e-5)

    def test_extra_padding_is_ignored(self, rng):
        m = small_model()
        img = images(rng, 2)
        seqs = [[tp.SOS_ID, 6, 7, 8, tp.EOS_ID], [tp.SOS_ID, 9, tp.EOS_ID]]
        a = caption_loss(m, img, tp.pad_batch(seqs)).item()
        b = caption_loss(m, img, tp.pad_batch(seqs, length=9)).item()
        assert a == pytest.approx(b, rel=1e-6)

    def test_confident_logits_give_small_loss(self):
        eps, v, t = 1e-3, 6, 5
        targets = np.arange(t) % v
        logits = np.full((t, v), math.log(eps / (v - 1)))
        logits[np.arange(t), targets] = math.log(1 - eps)
        one_direction = T.softmax_cross_entropy(Tensor(logits), targets).item()
        assert 2 * one_direction < 2 * eps * t

    def test_empty_caption_rejected(self, rng):
        m = small_model()
        with pytest.raises(ValueError):
            caption_loss(m, images(rng, 1), np.array([[tp.SOS_ID, 0]]))

    def test_initial_loss_near_uniform(self, rng):
        m = small_model(vocab=40)
        seq = np.concatenate([[tp.SOS_ID], rng.integers(5, 40, 6), [tp.EOS_ID]])[None]
        loss = caption_loss(m, images(rng, 1), seq).item()
        assert abs(loss - 2 * math.log(40)) < 1.0

    def test_every_parameter_receives_gradient(self, rng):
        m = small_model(dropout=0.1).train()
        seq = tp.pad_batch([[tp.SOS_ID, 6, 7, tp.EOS_ID], [tp.SOS_ID, 8, tp.EOS_ID]])
        # 64 px gives several visual tokens; with one token cross-attention queries get no gradient
        T.backward(caption_loss(m, images(rng, 2, 64), seq, rng))
        missing = [n for n, p in m.named_parameters() if p.grad is None or not p.grad.any()]
        assert not missing


class TestClassifier:
    def test_zero_head(self, rng):
        c = ClassifierModel(SMALL_BB, 3, zero_head=True).eval()
        assert not classify(c, images(rng, 4)).data.any()

    def test_binary_shape(self, rng):
        c = ClassifierModel(SMALL_BB, 1).eval()
        assert classify(c, images(rng, 5)).shape == (5, 1)

    def test_frozen_leaves_backbone_gradients_absent(self, rng):
        c = ClassifierModel(SMALL_BB, 2)
        T.backward(T.sum_(classify(c, images(rng), frozen=True)))
        assert all(p.grad is None for p in c.backbone.parameters())
        assert c.head.weight.grad is not None


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        vocab = tp.Vocabulary(list(tp.SPECIAL_TOKENS) + [chr(97 + i) for i in range(15)])
        m = CaptioningModel(small_model().cfg, vocab, seed=3, max_caption_len=10)
        save_checkpoint(m, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.vocab == vocab and loaded.max_caption_len == 10
        for (n1, a), (n2, b) in zip(m.state_dict().items(), loaded.state_dict().items()):
            assert n1 == n2 and np.array_equal(a, b)

    def test_names_unique(self):
        names = [n for n, _ in small_model().named_parameters()]
        assert len(names) == len(set(names))

    def test_backbone_only_load(self, tmp_path):
        src = small_model(seed=1)
        save_checkpoint(src, tmp_path / "src.ckpt")
        fresh = ClassifierModel(SMALL_BB, 9, seed=4)
        head_before = fresh.head.weight.data.copy()
        load_backbone(tmp_path / "src.ckpt", fresh)
        for name, arr in fresh.backbone.state_dict().items():
            assert np.array_equal(arr, src.backbone.state_dict()[name])
        assert np.array_equal(fresh.head.weight.data, head_before)

    def test_truncated_file_leaves_model_untouched(self, tmp_path):
        save_checkpoint(small_model(seed=1), tmp_path / "src.ckpt")
        raw = (tmp_path / "src.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) // 2])
        target = ClassifierModel(SMALL_BB, 2, seed=5)
        before = {k: v.copy() for k, v in target.state_dict().items()}
        with pytest.raises(CheckpointFormatError):
            load_backbone(tmp_path / "cut.ckpt", target)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "cut.ckpt")
        assert all(np.array_equal(before[k], v) for k, v in target.state_dict().items())

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"RTXCKPT9" + b"\0" * 8)
        with pytest.raises(CheckpointFormatError):
            read_records(tmp_path / "x.ckpt")

    def test_missing_tensor(self, tmp_path):
        m = small_model()
        save_checkpoint(m, tmp_path / "a.ckpt")
        recs = read_records(tmp_path / "a.ckpt")
        recs.pop(next(k for k in recs if k.startswith("textual.")))
        write_records(tmp_path / "b.ckpt", recs)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "b.ckpt")

    def test_layout(self, tmp_path):
        write_records(tmp_path / "r.ckpt", {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        raw = (tmp_path / "r.ckpt").read_bytes()
        assert raw[:8] == b"RTXCKPT1"
        assert raw[8:12] == (1).to_bytes(4, "little")
        assert raw[12:14] == (1).to_bytes(2, "little") and raw[14:15] == b"w"
        assert raw[15:17] == bytes([0, 2])
        assert raw[17:25] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert np.array_equal(np.frombuffer(raw[25:], "<f4"), np.arange(6))
