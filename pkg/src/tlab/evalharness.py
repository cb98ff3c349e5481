"""Attack success rates, proxy-to-target transfer matrices and patch-size sweeps."""

import csv
import io
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from . import attacks as atk
from . import transforms as tf
from .errors import MetricError, ModelCompatibilityError, TlabError
from .nn import atomic_write, predict

MODES = ("clean_correct", "all")
CSV_COLUMNS = ("proxy", "target", "attack", "transform", "asr_pct", "clean_acc_pct", "n", "seed")


class ReportIOError(TlabError, OSError):
    pass


@dataclass
class TransferRow:
    proxy: str
    target: str
    attack: str
    transform: str
    asr_pct: float
    clean_acc_pct: float
    n: int
    seed: int
    mode: str = "clean_correct"

    def __post_init__(self):
        self.asr_pct = round(float(self.asr_pct), 2)
        self.clean_acc_pct = round(float(self.clean_acc_pct), 2)
        if not 0.0 <= self.asr_pct <= 100.0:
            raise MetricError(f"ASR out of range: {self.asr_pct}")
        if self.n <= 0:
            raise MetricError("a report row must cover at least one input")

    @property
    def attack_label(self):
        return f"{self.attack}@{self.mode}"


@dataclass
class TransferReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


@dataclass
class Evaluation:
    asr_all: float
    asr_clean_correct: float
    clean_acc: float
    n_all: int
    n_clean_correct: int

    def asr(self, mode):
        return self.asr_all if mode == "all" else self.asr_clean_correct

    def n(self, mode):
        return self.n_all if mode == "all" else self.n_clean_correct


def evaluate(target, batch):
    """Both ASR flavours plus the target's clean accuracy on the batch originals."""
    if len(batch) == 0:
        raise MetricError("cannot evaluate an empty batch")
    clean_pred, _ = predict(target, batch.originals)
    adv_pred, _ = predict(target, batch.adversarial)
    fooled = adv_pred != batch.labels
    correct = clean_pred == batch.labels
    n_cc = int(correct.sum())
    return Evaluation(
        asr_all=100.0 * float(fooled.mean()),
        asr_clean_correct=100.0 * float(fooled[correct].mean()) if n_cc else float("nan"),
        clean_acc=100.0 * float(correct.mean()),
        n_all=len(batch),
        n_clean_correct=n_cc,
    )


def asr(target, batch, mode="clean_correct"):
    """Percentage of adversarial inputs the target misclassifies.

    ``mode="clean_correct"`` restricts the count to inputs the target gets
    right when clean.
    """
    if mode not in MODES:
        raise MetricError(f"unknown ASR mode {mode!r}")
    ev = evaluate(target, batch)
    if ev.n(mode) == 0:
        raise MetricError(f"no inputs left to score in mode {mode!r}: the target misclassifies every clean input")
    return ev.asr(mode)


def check_compatible(models):
    shapes = {(tuple(m.input_shape), m.class_count) for m in models}
    if len(shapes) > 1:
        detail = ", ".join(f"{m.name}: input {tuple(m.input_shape)}, {m.class_count} classes" for m in models)
        raise ModelCompatibilityError(f"models disagree on input shape or class count ({detail})")


def _same_model(a, b):
    return a is b or (a.arch == b.arch and a.param_hash() == b.param_hash())


def _rows_for(proxy, target, spec, batch, modes):
    ev = evaluate(target, batch)
    rows = []
    for mode in modes:
        if ev.n(mode) == 0:
            raise MetricError(f"{target.name} misclassifies every clean input; ASR undefined in mode {mode}")
        rows.append(TransferRow(proxy.name, target.name, spec.name, str(spec.transform), ev.asr(mode),
                                ev.clean_acc, ev.n(mode), spec.seed, mode))
    return rows


def transfer_matrix(proxies, targets, attack_specs, data, modes=("clean_correct",), include_diagonal=False,
                    batch_size=100, threads=1, batches=None):
    """Craft every attack once per proxy and score it on every target.

    The proxy itself is skipped as a target unless ``include_diagonal``.
    Crafted batches are stored in ``batches`` (keyed by proxy and attack
    name) when a dict is passed.
    """
    if not proxies or not targets:
        raise MetricError("transfer_matrix needs at least one proxy and one target")
    check_compatible(list(proxies) + list(targets))
    for mode in modes:
        if mode not in MODES:
            raise MetricError(f"unknown ASR mode {mode!r}")
    ids = np.arange(len(data))
    report = TransferReport(metadata={
        "artifact_version": __version__,
        "attacks": [s.to_json() for s in attack_specs],
        "proxies": [p.name for p in proxies],
        "targets": [t.name for t in targets],
        "n_images": len(data),
        "data": data.source,
        "modes": list(modes),
    })
    for proxy in proxies:
        for spec in attack_specs:
            batch = atk.craft(spec, proxy, data.images, data.labels, ids, batch_size=batch_size, threads=threads)
            if batches is not None:
                batches[(proxy.name, spec.name)] = batch
            for target in targets:
                if _same_model(proxy, target) and not include_diagonal:
                    continue
                report.rows.extend(_rows_for(proxy, target, spec, batch, modes))
    return report


@dataclass
class SweepRow:
    s: int
    proxy: str
    target: str
    asr_pct: float
    asr_all_pct: float
    n: int


def sweep_spec(base, s):
    if s == 0:
        return replace(base, name="bim" if base.method == "bim" else base.name, transform=tf.identity(), N=None)
    transform = base.transform.with_params(s=int(s)) if base.transform.kind == "maskblock" else tf.maskblock(int(s))
    return replace(base, name=f"maskblock_s{s}", transform=transform)


def patch_sweep(proxy, targets, base, sizes, data, batch_size=100, threads=1):
    """ASR per (patch size, target); ``s = 0`` runs the unmasked baseline."""
    sizes = sorted(int(s) for s in sizes)
    if any(s < 0 for s in sizes):
        raise MetricError("patch sizes must be non-negative")
    check_compatible([proxy] + list(targets))
    ids = np.arange(len(data))
    rows = []
    for s in sizes:
        spec = sweep_spec(base, s)
        batch = atk.craft(spec, proxy, data.images, data.labels, ids, batch_size=batch_size, threads=threads)
        for target in targets:
            ev = evaluate(target, batch)
            rows.append(SweepRow(s, proxy.name, target.name, round(ev.asr_clean_correct, 2), round(ev.asr_all, 2),
                                 ev.n_clean_correct))
    return rows


# report files ----------------------------------------------------------------

def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def report_csv(report):
    return _csv_text(CSV_COLUMNS, [
        (r.proxy, r.target, r.attack_label, r.transform, f"{r.asr_pct:.2f}", f"{r.clean_acc_pct:.2f}", r.n, r.seed)
        for r in report.rows
    ])


def report_markdown(report):
    groups = {}
    for r in report.rows:
        groups.setdefault((r.attack, r.mode, r.transform), []).append(r)
    lines = ["# Transfer ASR (%)", ""]
    for (attack, mode, transform), rows in groups.items():
        proxies = list(dict.fromkeys(r.proxy for r in rows))
        targets = list(dict.fromkeys(r.target for r in rows))
        cells = {(r.proxy, r.target): r.asr_pct for r in rows}
        lines.append(f"## {attack} ({mode}) `{transform}`")
        lines.append("")
        lines.append("| proxy \\ target | " + " | ".join(targets) + " |")
        lines.append("|---|" + "---:|" * len(targets))
        for p in proxies:
            vals = [f"{cells[(p, t)]:.2f}" if (p, t) in cells else "-" for t in targets]
            lines.append(f"| {p} | " + " | ".join(vals) + " |")
        lines.append("")
    return "\n".join(lines)


def _write_text(path, text):
    try:
        atomic_write(path, text.encode("utf-8"))
    except OSError as exc:
        raise ReportIOError(f"cannot write report {path}: {exc}") from exc


def write_report(report, fmt, path):
    if fmt == "csv":
        _write_text(path, report_csv(report))
    elif fmt == "markdown":
        _write_text(path, report_markdown(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != CSV_COLUMNS:
                raise MetricError(f"{path}: unexpected CSV header {header}")
            rows = []
            for rec in reader:
                attack, _, mode = rec[2].rpartition("@")
                rows.append(TransferRow(rec[0], rec[1], attack, rec[3], float(rec[4]), float(rec[5]), int(rec[6]),
                                        int(rec[7]), mode))
    except OSError as exc:
        raise ReportIOError(f"cannot read report {path}: {exc}") from exc
    return TransferReport(rows)


SWEEP_COLUMNS = ("s", "proxy", "target", "asr_pct", "asr_all_pct", "n")
CURVE_COLUMNS = ("s", "masked_loss", "clean_loss")


def sweep_csv(rows):
    return _csv_text(SWEEP_COLUMNS, [(r.s, r.proxy, r.target, f"{r.asr_pct:.2f}", f"{r.asr_all_pct:.2f}", r.n)
                                     for r in rows])


def sweep_markdown(rows):
    targets = list(dict.fromkeys(r.target for r in rows))
    sizes = list(dict.fromkeys(r.s for r in rows))
    cells = {(r.s, r.target): r.asr_pct for r in rows}
    lines = ["# Patch-size sweep, ASR (%) on clean-correct inputs", "",
             "| s | " + " | ".join(targets) + " |", "|---:|" + "---:|" * len(targets)]
    lines += [f"| {s} | " + " | ".join(f"{cells[(s, t)]:.2f}" for t in targets) + " |" for s in sizes]
    return "\n".join(lines) + "\n"


def curve_csv(rows):
    return _csv_text(CURVE_COLUMNS, [(s, f"{m:.6f}", f"{c:.6f}") for s, m, c in rows])


def curve_markdown(rows):
    lines = ["# Mean NLL on masked images", "", "| s | masked loss | clean loss | ratio |", "|---:|---:|---:|---:|"]
    lines += [f"| {s} | {m:.4f} | {c:.4f} | {m / c:.3f} |" for s, m, c in rows]
    return "\n".join(lines) + "\n"


def write_table(path, text):
    _write_text(path, text)


def markdown_path(csv_path):
    root, _ = os.path.splitext(os.fspath(csv_path))
    return root + ".md"
