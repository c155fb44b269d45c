import numpy as np
import pytest
from hypothesis import given, strategies as st

from radtex import synthdata as S
from radtex import textpipe as tp


@pytest.fixture(scope="module")
def cfg():
    return S.SynthConfig()


def test_empty_scene(cfg):
    scene = S.SynthScene(cfg.canvas, (False,) * 9, 0, seed=1)
    e = S.generate(cfg, 1, 0, scene=scene)
    assert all(v == 0 for v in e.labels.values())
    sentences = [s for s in tp.normalize(e.findings).split(" . ") if s]
    assert len(sentences) == 9 and all(s.startswith("no ") for s in sentences)
    assert e.severity == 0
    assert 0 <= e.image.min() and e.image.max() <= 1


def test_determinism(cfg):
    a, b = S.generate(cfg, 7, 3), S.generate(cfg, 7, 3)
    assert a.image.tobytes() == b.image.tobytes() and a.report == b.report
    assert S.generate(cfg, 7, 4).report != a.report or not np.array_equal(S.generate(cfg, 7, 4).image, a.image)


def test_severe_example(cfg):
    present = tuple(name == "edema" for name in S.FINDINGS)
    e = S.generate(cfg, 2, 0, scene=S.SynthScene(cfg.canvas, present, 3, seed=2))
    assert "severe" in e.findings
    assert tp.severity_label(tp.normalize(e.findings)) == 3


def test_scene_invariants():
    with pytest.raises(ValueError):
        S.SynthScene(64, (False,) * 9, 2, seed=0)
    with pytest.raises(ValueError):
        S.SynthScene(64, tuple(n == "edema" for n in S.FINDINGS), 0, seed=0)


def test_label_report_consistency(cfg):
    for e in S.generate_examples(cfg, 300, seed=9):
        assert S.label_findings(e.findings) == e.labels
        assert tp.severity_label(tp.normalize(e.findings)) == e.severity


def test_positive_rates(cfg):
    ds = S.generate_dataset(cfg, 1000, seed=4)
    rates = ds.labels.mean(axis=0)
    assert np.all(np.abs(rates - 0.3) <= 0.05), rates


def test_findings_change_the_image(cfg):
    rng_scene = [False] * 9
    empty = S.generate(cfg, 5, 0, scene=S.SynthScene(cfg.canvas, tuple(rng_scene), 0, seed=5))
    for j, name in enumerate(S.FINDINGS):
        present = tuple(k == j for k in range(9))
        sev = 2 if name == "edema" else 0
        e = S.generate(cfg, 5, 0, scene=S.SynthScene(cfg.canvas, present, sev, seed=5))
        assert np.abs(e.image - empty.image).max() > 0.05, name


def test_config_validation():
    with pytest.raises(ValueError):
        S.SynthConfig(canvas=16).validate()
    with pytest.raises(ValueError):
        S.SynthConfig(priors=(0.5,) * 3).validate()
    assert S.SynthConfig.from_dict({"priors": 0.2}).priors == (0.2,) * 9


class TestCorpus:
    def test_single_example(self, cfg, tmp_path):
        S.generate_corpus(cfg, 1, 3, tmp_path)
        assert len(list((tmp_path / "images").glob("*.pgm"))) == 1
        assert len((tmp_path / "reports.jsonl").read_text().splitlines()) == 1

    def test_regenerate_identical_bytes(self, cfg, tmp_path):
        S.generate_corpus(cfg, 5, 3, tmp_path / "a")
        S.generate_corpus(cfg, 5, 3, tmp_path / "b")
        for rel in ["reports.jsonl"] + [f"images/{i:06d}.pgm" for i in range(5)]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_load_round_trip(self, cfg, tmp_path):
        S.generate_corpus(cfg, 6, 3, tmp_path)
        loaded = S.load_dataset(tmp_path)
        direct = S.generate_dataset(cfg, 6, 3)
        assert np.array_equal(loaded.images, direct.images)
        assert loaded.findings == direct.findings
        assert np.array_equal(loaded.labels, direct.labels)
        assert np.array_equal(loaded.severity, direct.severity)

    def test_rows_without_findings_are_skipped(self, cfg, tmp_path):
        S.generate_corpus(cfg, 2, 3, tmp_path)
        lines = (tmp_path / "reports.jsonl").read_text().splitlines()
        lines[1] = '{"id": "000001", "report": "IMPRESSION: normal.", "labels": {}, "severity": null}'
        (tmp_path / "reports.jsonl").write_text("\n".join(lines) + "\n")
        assert len(S.load_dataset(tmp_path)) == 1

    def test_parallel_equals_serial(self, cfg):
        whole = S.generate_dataset(cfg, 6, 8)
        parts = [S.generate_dataset(cfg, 3, 8, start=0), S.generate_dataset(cfg, 3, 8, start=3)]
        assert np.array_equal(whole.images, np.concatenate([p.images for p in parts]))


class TestAugment:
    def test_zero_transform_is_identity(self, cfg, rng):
        img = S.generate(cfg, 1, 0).image
        assert np.array_equal(S.augment(img, S.AugmentParams(0, 0), rng), img)

    def test_integer_shift(self, rng):
        img = rng.random((16, 16)).astype(np.float32)
        out = S.affine(img, 0.0, (2, 3))
        assert np.allclose(out[2:, 3:], img[:-2, :-3], atol=1e-6)
        assert not out[:2].any() and not out[:, :3].any()

    def test_small_rotation_preserves_interior_mean(self, cfg):
        img = S.generate(cfg, 1, 0).image
        out = S.affine(img, np.radians(3), (0, 0))
        inner = slice(16, 48)
        assert abs(out[inner, inner].mean() - img[inner, inner].mean()) <= 0.02 * img[inner, inner].mean()

    def test_scale_is_fixed(self):
        assert S.AugmentParams().scale == 1.0
        with pytest.raises(TypeError):
            S.AugmentParams(scale=2.0)

    @given(st.integers(0, 10_000))
    def test_shape_and_range(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.random((32, 32)).astype(np.float32)
        out = S.augment(img, S.AugmentParams(30, 0.2), rng)
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
