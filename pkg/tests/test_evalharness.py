import json
import math

import numpy as np
import pytest

from conftest import make_toy_dataset
from test_imagecore import loop_psnr
from textrsir.datapipe import CachedCaptionProvider, ManifestRecord, load_manifest, prepare, split_records
from textrsir.errors import ArgumentError, PreparationError
from textrsir.estimators import TextRSIRRegressor
from textrsir.evalharness import (
    TGFA_ABLATION_PRESET,
    AblationSpec,
    RecordMetric,
    ablate,
    aggregate,
    bicubic_baseline,
    caption_source_compare,
    evaluate,
    format_ablation,
    load_prepared,
    plot_data_fraction,
    plot_loss_trace,
)
from textrsir.imagecore import psnr, read_image, ssim, upsample_bicubic, write_image

TINY = dict(channels=4, num_sr_units=1, sr_unit_kind="residual_conv", epochs=1, batch_size=2)


def _prepared(tmp_path, n=4, n_test=2, captions=None, name="prep", side=32):
    manifest = make_toy_dataset(tmp_path / "data", n=n, side=side, n_test=n_test, captions=captions)
    recs = load_manifest(manifest)
    prepare(recs, 4, 75, CachedCaptionProvider.from_records(recs), tmp_path / name)
    return recs, tmp_path / name


class HROracle:
    """Test double whose prediction is the ground truth, looked up by caption."""

    def __init__(self, records):
        self.by_caption = {r.caption: r.hr_path for r in records}

    def predict(self, X, captions=None):
        return [read_image(self.by_caption[c]) for c in captions]


def test_oracle_double_gives_perfect_scores(tmp_path):
    recs, prep = _prepared(tmp_path)
    test = split_records(recs, "test")
    report = evaluate(HROracle(recs), test, prep)
    assert report.infinite_psnr_count == len(test)
    assert report.average["psnr_db"] is None
    assert all(m.ssim == 1.0 for m in report.records)
    assert all(math.isinf(m.psnr_db) for m in report.records)
    assert json.loads(report.to_json())["records"][0]["psnr_db"] == "inf"


def test_empty_split_rejected(tmp_path):
    with pytest.raises(ArgumentError):
        evaluate(HROracle([]), [], tmp_path)


def test_identity_model_report_matches_hand_computation(tmp_path):
    recs, prep = _prepared(tmp_path, n=4, n_test=4)
    # a fresh network with global skip reproduces bicubic upsampling exactly
    est = TextRSIRRegressor(**TINY)
    est._init_model()
    report = evaluate(est, recs, prep)
    expected = {}
    for rec, (clr, _) in zip(recs, load_prepared(recs, prep)):
        up = upsample_bicubic(clr, 4)
        hr = read_image(rec.hr_path)
        expected.setdefault(rec.class_label, []).append((psnr(up, hr), ssim(up, hr)))
    assert sorted(report.per_class) == ["a", "b"]
    for label, rows in expected.items():
        stats = report.per_class[label]
        assert stats.count == len(rows)
        assert stats.psnr_db == pytest.approx(np.mean([r[0] for r in rows]), abs=1e-4)
        assert stats.ssim == pytest.approx(np.mean([r[1] for r in rows]), abs=1e-5)
    all_rows = [r for rows in expected.values() for r in rows]
    assert report.average["psnr_db"] == pytest.approx(np.mean([r[0] for r in all_rows]), abs=1e-4)


def test_aggregate_averages():
    metrics = [RecordMetric("1", "a", 20.0, 0.5), RecordMetric("2", "a", 30.0, 0.7),
               RecordMetric("3", "b", 40.0, 0.9), RecordMetric("4", "b", math.inf, 1.0)]
    rep = aggregate(metrics)
    assert rep.per_class["a"].psnr_db == 25.0
    assert rep.per_class["b"].psnr_db == 40.0 and rep.per_class["b"].infinite_psnr == 1
    assert rep.average["psnr_db"] == 30.0
    assert rep.class_average["psnr_db"] == 32.5
    assert rep.infinite_psnr_count == 1
    assert sum(s.count for s in rep.per_class.values()) == 4
    # per-image average is the finite-count weighted mean of class means
    weighted = sum(s.psnr_db * (s.count - s.infinite_psnr) for s in rep.per_class.values()) / 3
    assert abs(rep.average["psnr_db"] - weighted) < 1e-9
    weighted_ssim = sum(s.ssim * s.count for s in rep.per_class.values()) / 4
    assert abs(rep.average["ssim"] - weighted_ssim) < 1e-9


def test_bicubic_baseline_constant_is_exact(tmp_path):
    write_image(tmp_path / "flat.tif", np.full((32, 32, 3), 128 / 255))
    rec = ManifestRecord("flat", str(tmp_path / "flat.tif"), "test", "flat", "flat")
    prepare([rec], 4, 75, CachedCaptionProvider({"flat": "flat"}), tmp_path / "prep")
    rep = bicubic_baseline([rec], tmp_path / "prep")
    assert rep.infinite_psnr_count == 1


def test_bicubic_baseline_matches_loop_oracle(tmp_path):
    recs, prep = _prepared(tmp_path, n=2, n_test=2, side=32)
    rep = bicubic_baseline(recs, prep)
    for rec, m, (clr, _) in zip(recs, rep.records, load_prepared(recs, prep)):
        assert clr.shape == (8, 8, 3)
        assert abs(m.psnr_db - loop_psnr(upsample_bicubic(clr, 4), read_image(rec.hr_path))) < 1e-9
    assert all(math.isfinite(v) for v in rep.average.values())


def test_evaluate_idempotent_and_keys_match_baseline(tmp_path):
    recs, prep = _prepared(tmp_path)
    test = split_records(recs, "test")
    est = TextRSIRRegressor(**TINY)
    est._init_model()
    a, b = evaluate(est, test, prep), evaluate(est, test, prep)
    assert a.to_json() == b.to_json()
    assert a.per_class.keys() == bicubic_baseline(test, prep).per_class.keys()


def test_missing_prepared_files_listed(tmp_path):
    recs, prep = _prepared(tmp_path)
    (prep / "img01.jpg").unlink()
    (prep / "img03.txt").unlink()
    with pytest.raises(PreparationError) as err:
        load_prepared(recs, prep)
    assert err.value.ids == ["img01", "img03"]
    assert "img01" in str(err.value) and "img03" in str(err.value)


def test_report_outputs(tmp_path):
    rep = aggregate([RecordMetric("1", "forest", 25.0, 0.8)], "fp", "ck")
    rep.write(tmp_path, "r")
    assert json.loads((tmp_path / "r.json").read_text())["checkpoint_id"] == "ck"
    assert "forest" in (tmp_path / "r.txt").read_text()
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "id,class_label,psnr_db,ssim"


# ---------------------------------------------------------------- ablation


def test_preset_rows():
    names = [s.name for s in TGFA_ABLATION_PRESET]
    assert names == ["SGM", "TE", "SGM+TE", "SGM+TE+Hierarchy", "SGM+TE+Hierarchy+LAF"]


def test_caption_shuffle_does_not_change_text_free_ablation(tmp_path):
    caps = ["river bend", "parking lot", "golf course", "harbor"]
    recs, prep = _prepared(tmp_path / "x", captions=caps)
    shuffled, prep2 = _prepared(tmp_path / "y", captions=caps[::-1])
    spec = [AblationSpec(use_sgm=False, use_te=False, hierarchy=True, learnable_alpha=True)]
    (_, a), = ablate(recs, prep, TINY, spec)
    (_, b), = ablate(shuffled, prep2, TINY, spec)
    assert (prep / "img00.txt").read_text() != (prep2 / "img00.txt").read_text()
    assert a.to_json() == b.to_json()


def test_duplicate_specs_identical_and_table(tmp_path):
    recs, prep = _prepared(tmp_path)
    spec = TGFA_ABLATION_PRESET[2]
    (s1, r1), (s2, r2) = ablate(recs, prep, TextRSIRRegressor(**TINY), [spec, spec])
    assert r1.to_json() == r2.to_json()
    table = format_ablation([(s1, r1), (s2, r2)])
    assert len(table.splitlines()) == 3


# ---------------------------------------------------------------- caption source


def test_caption_compare(tmp_path):
    recs, prep = _prepared(tmp_path, captions=["dense residential area", "ocean", "desert", "forest"])
    _, other = _prepared(tmp_path, captions=["ocean", "forest", "airport", "storage tanks"], name="other")
    test = split_records(recs, "test")
    est = TextRSIRRegressor(**TINY)
    est._init_model()
    same = caption_source_compare(est, test, prep, prep)
    assert all(v == 0 for v in same.psnr_deltas.values())

    # make the network text-sensitive
    import torch

    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in est.model_.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.2)
    diff = caption_source_compare(est, test, prep, other)
    assert any(v != 0 for v in diff.psnr_deltas.values())
    json.loads(diff.to_json())

    (other / "img03.txt").unlink()
    with pytest.raises(PreparationError, match="img03"):
        caption_source_compare(est, test, prep, other)


def test_plots(tmp_path):
    plot_loss_trace([(0, 1e-4, 0.2), (1, 1e-4, 0.1)], tmp_path / "loss.png")
    plot_data_fraction([(0.1, 25.0), (0.5, 26.0), (1.0, 26.5)], tmp_path / "frac.png")
    for name in ("loss.png", "frac.png"):
        assert (tmp_path / name).read_bytes()[:4] == b"\x89PNG"
