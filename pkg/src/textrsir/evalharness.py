"""Evaluation reports, the bicubic baseline, ablations and caption-source comparison."""

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from sklearn.base import clone

from .datapipe import split_records
from .errors import ArgumentError, PreparationError
from .estimators import BicubicUpscaler, TextRSIRRegressor
from .imagecore import ByteBlob, jpeg_decode, psnr, read_image, ssim


@dataclass
class ClassStats:
    psnr_db: float
    ssim: float
    count: int
    infinite_psnr: int = 0


@dataclass
class RecordMetric:
    id: str
    class_label: str
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    """Per-class and overall PSNR/SSIM.

    ``average`` is the per-image mean (PSNR over finite values only);
    ``class_average`` is the unweighted mean of the per-class means.
    Records with infinite PSNR are counted in ``infinite_psnr_count``.
    """

    per_class: dict
    average: dict
    class_average: dict
    infinite_psnr_count: int
    records: list = field(default_factory=list)
    config_fingerprint: str = ""
    checkpoint_id: str = ""

    def to_dict(self):
        d = asdict(self)
        for r in d["records"]:
            if math.isinf(r["psnr_db"]):
                r["psnr_db"] = "inf"
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self):
        def fmt(v, spec):
            return "-" if v is None else format(v, spec)

        width = max([len("class (per-image mean)")] + [len(k) for k in self.per_class]) + 2
        lines = [f"{'class':<{width}}{'PSNR (dB)':>12}{'SSIM':>10}{'n':>6}{'inf':>6}"]
        for label, s in self.per_class.items():
            lines.append(
                f"{label:<{width}}{fmt(s.psnr_db, '.4f'):>12}{fmt(s.ssim, '.4f'):>10}"
                f"{s.count:>6}{s.infinite_psnr:>6}"
            )
        lines.append(
            f"{'average (per-image)':<{width}}{fmt(self.average['psnr_db'], '.4f'):>12}"
            f"{fmt(self.average['ssim'], '.4f'):>10}{len(self.records):>6}{self.infinite_psnr_count:>6}"
        )
        lines.append(
            f"{'average (per-class)':<{width}}{fmt(self.class_average['psnr_db'], '.4f'):>12}"
            f"{fmt(self.class_average['ssim'], '.4f'):>10}"
        )
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["id", "class_label", "psnr_db", "ssim"])
        for r in self.records:
            writer.writerow([r.id, r.class_label, repr(r.psnr_db), repr(r.ssim)])
        return buf.getvalue()

    def write(self, out_dir, stem="report", per_record_csv=True):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json() + "\n")
        (out_dir / f"{stem}.txt").write_text(self.to_table() + "\n")
        if per_record_csv:
            (out_dir / f"{stem}.csv").write_text(self.to_csv())


def _mean(values):
    return sum(values) / len(values) if values else None


def aggregate(metrics, config_fingerprint="", checkpoint_id=""):
    """Fold per-record metrics into a report, in record order."""
    groups = {}
    for m in metrics:
        groups.setdefault(m.class_label, []).append(m)
    per_class = {}
    for label in sorted(groups):
        rows = groups[label]
        finite = [r.psnr_db for r in rows if math.isfinite(r.psnr_db)]
        per_class[label] = ClassStats(
            psnr_db=_mean(finite),
            ssim=_mean([r.ssim for r in rows]),
            count=len(rows),
            infinite_psnr=len(rows) - len(finite),
        )
    finite_all = [m.psnr_db for m in metrics if math.isfinite(m.psnr_db)]
    average = {"psnr_db": _mean(finite_all), "ssim": _mean([m.ssim for m in metrics])}
    class_psnr = [s.psnr_db for s in per_class.values() if s.psnr_db is not None]
    class_average = {
        "psnr_db": _mean(class_psnr),
        "ssim": _mean([s.ssim for s in per_class.values()]),
    }
    return EvalReport(
        per_class=per_class,
        average=average,
        class_average=class_average,
        infinite_psnr_count=len(metrics) - len(finite_all),
        records=list(metrics),
        config_fingerprint=config_fingerprint,
        checkpoint_id=checkpoint_id,
    )


def load_prepared(records, prepared_dir):
    """Return ``(clr, caption)`` per record, failing with every missing id listed."""
    prepared_dir = Path(prepared_dir)
    missing = [
        r.id for r in records
        if not (prepared_dir / f"{r.id}.jpg").is_file() or not (prepared_dir / f"{r.id}.txt").is_file()
    ]
    if missing:
        raise PreparationError(f"prepared files missing in {prepared_dir}", missing)
    out = []
    for r in records:
        clr = jpeg_decode(ByteBlob((prepared_dir / f"{r.id}.jpg").read_bytes(), "JPEG"))
        text = (prepared_dir / f"{r.id}.txt").read_bytes().decode("utf-8")
        out.append((clr, text))
    return out


def fingerprint(obj):
    if hasattr(obj, "get_params"):
        obj = obj.get_params()
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate(model, records, prepared_dir, checkpoint_id="", config_fingerprint=None):
    """Score ``model.predict`` on every record against its HR image.

    ``model`` is anything with ``predict(X, captions=...)``. Records are
    evaluated one at a time in manifest order, so the report is independent
    of batching.
    """
    if not records:
        raise ArgumentError("evaluation needs at least one test record")
    inputs = load_prepared(records, prepared_dir)
    metrics = []
    for rec, (clr, text) in zip(records, inputs):
        pred = model.predict([clr], captions=[text])[0]
        hr = read_image(rec.hr_path)
        metrics.append(RecordMetric(rec.id, rec.class_label, psnr(pred, hr), ssim(pred, hr)))
    if config_fingerprint is None:
        config_fingerprint = fingerprint(model) if hasattr(model, "get_params") else ""
    return aggregate(metrics, config_fingerprint, checkpoint_id)


def bicubic_baseline(records, prepared_dir):
    return evaluate(BicubicUpscaler(), records, prepared_dir, checkpoint_id="bicubic")


# ---------------------------------------------------------------- ablations


@dataclass(frozen=True)
class AblationSpec:
    use_sgm: bool
    use_te: bool
    hierarchy: bool
    learnable_alpha: bool

    @property
    def name(self):
        parts = [n for n, on in (("SGM", self.use_sgm), ("TE", self.use_te),
                                 ("Hierarchy", self.hierarchy), ("LAF", self.learnable_alpha)) if on]
        return "+".join(parts) or "none"


# rows of the TGFA ablation, in order
TGFA_ABLATION_PRESET = (
    AblationSpec(use_sgm=True, use_te=False, hierarchy=False, learnable_alpha=False),
    AblationSpec(use_sgm=False, use_te=True, hierarchy=False, learnable_alpha=False),
    AblationSpec(use_sgm=True, use_te=True, hierarchy=False, learnable_alpha=False),
    AblationSpec(use_sgm=True, use_te=True, hierarchy=True, learnable_alpha=False),
    AblationSpec(use_sgm=True, use_te=True, hierarchy=True, learnable_alpha=True),
)


def fit_on_records(estimator, records, prepared_dir):
    train_recs = split_records(records, "train")
    if not train_recs:
        raise ArgumentError("no train records in manifest")
    inputs = load_prepared(train_recs, prepared_dir)
    hrs = [read_image(r.hr_path) for r in train_recs]
    return estimator.fit(
        [clr for clr, _ in inputs], hrs,
        captions=[t for _, t in inputs], ids=[r.id for r in train_recs],
    )


def ablate(records, prepared_dir, base=None, specs=TGFA_ABLATION_PRESET):
    """Train and evaluate one model per spec with identical seed and data.

    ``base`` is a :class:`TextRSIRRegressor` (or its params dict) supplying
    every setting not toggled by the specs.
    """
    if base is None:
        base = TextRSIRRegressor()
    elif isinstance(base, dict):
        base = TextRSIRRegressor(**base)
    test_recs = split_records(records, "test")
    results = []
    for spec in specs:
        est = clone(base).set_params(**asdict(spec))
        fit_on_records(est, records, prepared_dir)
        report = evaluate(est, test_recs, prepared_dir, checkpoint_id=spec.name)
        results.append((spec, report))
    return results


def format_ablation(results):
    lines = [f"{'SGMs':>5}{'TE':>4}{'Hier':>6}{'LAF':>5}{'PSNR (dB)':>12}{'SSIM':>9}"]
    for spec, rep in results:
        def mark(flag):
            return "x" if flag else "."
        p, s = rep.average["psnr_db"], rep.average["ssim"]
        lines.append(
            f"{mark(spec.use_sgm):>5}{mark(spec.use_te):>4}{mark(spec.hierarchy):>6}"
            f"{mark(spec.learnable_alpha):>5}{'-' if p is None else f'{p:.4f}':>12}{s:>9.4f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------- caption source


@dataclass
class PairedReport:
    hr_caption: EvalReport
    clr_caption: EvalReport
    psnr_deltas: dict

    def to_json(self):
        deltas = {k: ("inf" if math.isinf(v) else v) for k, v in self.psnr_deltas.items()}
        return json.dumps(
            {"hr_caption": self.hr_caption.to_dict(), "clr_caption": self.clr_caption.to_dict(),
             "psnr_deltas": deltas},
            sort_keys=True, indent=2,
        )


def _psnr_delta(a, b):
    if a == b:
        return 0.0
    return a - b


def caption_source_compare(model, records, hr_caption_dir, clr_caption_dir):
    """Evaluate one model on two prepared sets differing only in caption source.

    Deltas are PSNR(HR-caption run) - PSNR(CLR-caption run) per record.
    """
    for d in (hr_caption_dir, clr_caption_dir):
        load_prepared(records, d)
    hr_rep = evaluate(model, records, hr_caption_dir, checkpoint_id="hr-captions")
    clr_rep = evaluate(model, records, clr_caption_dir, checkpoint_id="clr-captions")
    deltas = {
        a.id: _psnr_delta(a.psnr_db, b.psnr_db) for a, b in zip(hr_rep.records, clr_rep.records)
    }
    return PairedReport(hr_rep, clr_rep, deltas)


# ---------------------------------------------------------------- plots


def plot_loss_trace(trace, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([t[0] for t in trace], [t[2] for t in trace], lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_data_fraction(points, path):
    """``points`` is a sequence of ``(fraction, psnr_db)``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = sorted(points)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
    ax.set_xlabel("training data fraction")
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
