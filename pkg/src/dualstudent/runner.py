"""Executes a RunSpec and owns the layout of an output directory.

Every run directory holds:

    config.ini     fully resolved config echo (parse it to re-run)
    summary.json   task results and status
    metrics.csv    one row per evaluation point (extraction tasks)
    ledger.json    query totals per phase (extraction tasks)
    fooling.csv    transfer-attack table (attack task)
    checkpoints/   networks in the nets text format
    report.txt     rendered purely from the files above
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import traceback
from pathlib import Path

import numpy as np

from . import nets
from .attacks import transfer_eval
from .config import RunSpec, dump_config, load_config
from .data import Dataset, TargetAccuracyError, accuracy, make_dataset, train_classifier, train_target
from .evaluation import Evaluator, FdEstimator, MetricsRow, grad_fidelity, queries_to_accuracy
from .extraction import (Box, ConfigError, ExtractionConfig, RunResult, ensemble_predict, finetune_budget,
                         finetune_with_ds, select_proxy, train_dfme_fd, train_dual_students)
from .ndgrad import softmax_array
from .oracle import EXCLUDED, Oracle, argmax_rows, eval_agreement
from .seeding import subseed, substream

log = logging.getLogger(__name__)

FOOLING_HEADER = ["proxy", "attack", "epsilon", "n_evaluated", "n_success", "success_rate"]


# --- files ------------------------------------------------------------------

def write_metrics(path, rows: list[MetricsRow], n_classes: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRow.header(n_classes))
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [MetricsRow.from_record(rec) for rec in csv.DictReader(fh)]


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def ledger_doc(result: RunResult) -> dict:
    snap = result.ledger.snapshot()
    return {"total": snap["total_samples"], "by_phase": snap["by_phase"], "budget": snap["budget"],
            "truncated": result.truncated}


# --- shared steps -------------------------------------------------------------

def resolved_eval_loss(spec: RunSpec) -> str:
    if spec.evaluation.loss is not None:
        return spec.evaluation.loss
    return "l1" if spec.extraction.label_mode == "soft" else "ce"


def prepare_target(spec: RunSpec, out: Path, summary: dict):
    data = make_dataset(spec.dataset, spec.seed)
    if spec.target.checkpoint:
        target = nets.load(spec.target.checkpoint)
        acc = accuracy(target, data.test)
        if acc < spec.target.floor:
            raise TargetAccuracyError(acc, spec.target.floor)
    else:
        target, rep = train_target(data, spec.target.hidden, spec.target.epochs, spec.seed,
                                   floor=None)
        acc = rep.test_accuracy
        summary["target_train_accuracy"] = rep.train_accuracy
        summary["target_test_accuracy"] = acc
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        nets.save(target, ckpt / "target.json")
        if acc < spec.target.floor:
            raise TargetAccuracyError(acc, spec.target.floor)
    summary["target_test_accuracy"] = acc
    return data, target


def make_evaluator(spec: RunSpec, data: Dataset, target, oracle: Oracle) -> Evaluator:
    ev = spec.evaluation
    return Evaluator(target, oracle, data.test.x, resolved_eval_loss(spec), ev.n_generated, ev.n_grad,
                     ev.fd_step, ev.normalize, spec.seed)


def agreement_summary(result: RunResult, oracle: Oracle, xs: np.ndarray) -> dict:
    cm = result.class_map
    doc = {"agreement_s1": eval_agreement(oracle, result.students[0], xs, cm)}
    if len(result.students) > 1:
        doc["agreement_s2"] = eval_agreement(oracle, result.students[1], xs, cm)
        pred = argmax_rows(ensemble_predict(*result.students, xs))
        if cm is not None:
            pred = cm.to_raw(pred)
        doc["agreement_ensemble"] = float(np.mean(pred == oracle.query_labels(xs, EXCLUDED)))
    else:
        doc["agreement_ensemble"] = doc["agreement_s1"]
    return doc


def save_result(result: RunResult, out: Path, n_classes: int, summary: dict) -> None:
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for i, s in enumerate(result.students, start=1):
        nets.save(s, ckpt / f"s{i}.json")
    nets.save(result.generator, ckpt / "generator.json")
    write_metrics(out / "metrics.csv", result.metrics_history, n_classes)
    write_json(out / "ledger.json", ledger_doc(result))
    summary["epochs_run"] = result.epochs_run
    summary["truncated"] = result.truncated
    summary["bound_checks"] = result.bound_checks
    if result.class_map is not None:
        summary["classes_seen"] = list(result.class_map.seen)


def run_extraction(spec: RunSpec, data: Dataset, target, out: Path, summary: dict,
                   cfg: ExtractionConfig | None = None, pretrained=None) -> RunResult:
    cfg = spec.extraction if cfg is None else cfg
    oracle = Oracle.from_mlp(target, cfg.label_mode, cfg.query_budget)
    monitor = make_evaluator(spec, data, target, oracle)
    domain = Box.unit(data.dim)
    if pretrained is not None:
        result = finetune_with_ds(pretrained, cfg, oracle, domain, monitor=monitor)
    elif cfg.method == "dfme_fd":
        result = train_dfme_fd(cfg, oracle, domain, monitor=monitor)
    else:
        reference = None
        if cfg.check_bound:
            reference = lambda x: softmax_array(target.predict(x))  # noqa: E731
        result = train_dual_students(cfg, oracle, domain, monitor=monitor, reference=reference)
    save_result(result, out, target.out_dim, summary)
    summary.update(agreement_summary(result, oracle, data.test.x))
    return result


def sub_run(spec: RunSpec, out: Path, name: str, **extraction) -> Path:
    """Run an extract task in ``out/name`` with some extraction keys replaced."""
    sub = dataclasses.replace(spec, task="extract", output_dir=str(out / name))
    sub.extraction = dataclasses.replace(spec.extraction, **extraction)
    code = run(sub)
    if code != 0:
        raise RuntimeError(f"sub-run {name} failed, see {sub.output_dir}/report.txt")
    return Path(sub.output_dir)


# --- tasks ------------------------------------------------------------------

def task_train_target(spec: RunSpec, out: Path, summary: dict) -> None:
    prepare_target(spec, out, summary)


def task_extract(spec: RunSpec, out: Path, summary: dict) -> None:
    data, target = prepare_target(spec, out, summary)
    run_extraction(spec, data, target, out, summary)


def degrade(net, oracle: Oracle, xs: np.ndarray, min_drop: float, scale: float, rng,
            max_doublings: int = 16):
    """Add Gaussian weight noise, doubling its std until agreement drops by ``min_drop``."""
    base = eval_agreement(oracle, net, xs)
    for _ in range(max_doublings):
        cand = nets.perturbed(net, scale, rng)
        agree = eval_agreement(oracle, cand, xs)
        if base - agree >= min_drop:
            return cand, base, agree, scale
        scale *= 2
    raise RuntimeError(f"weight noise up to std {scale / 2:g} did not lower agreement by {min_drop}")


def task_finetune(spec: RunSpec, out: Path, summary: dict) -> None:
    data, target = prepare_target(spec, out, summary)
    ft = spec.finetune
    if ft.pretrained:
        pretrained = nets.load(ft.pretrained)
    else:
        base = sub_run(spec, out, "base", method="dual_students")
        pretrained = nets.load(base / "checkpoints" / "s1.json")
    cfg = spec.extraction
    probe = Oracle.from_mlp(target, cfg.label_mode)
    degraded, before, after, scale = degrade(pretrained, probe, data.test.x, ft.degrade_drop,
                                             ft.degrade_scale, substream(spec.seed, "degrade"))
    nets.save(degraded, out / "checkpoints" / "degraded.json")
    full = cfg.query_budget if cfg.query_budget is not None else cfg.resolved().expected_queries()
    cfg = dataclasses.replace(cfg, method="dual_students", unknown_classes=False, epochs=None,
                              query_budget=finetune_budget(full, ft.fraction))
    if ft.lr_student is not None:
        cfg = dataclasses.replace(cfg, lr_student=ft.lr_student)
    result = run_extraction(spec, data, target, out, summary, cfg=cfg, pretrained=degraded)
    final = eval_agreement(probe, result.s1, data.test.x)
    lost = before - after
    summary.update({
        "agreement_pretrained": before,
        "agreement_degraded": after,
        "agreement_finetuned": final,
        "degrade_scale": scale,
        "finetune_budget": cfg.query_budget,
        "finetune_lr_student": result.config.lr_student,
        "recovered_fraction": (final - after) / lost,
    })


def task_grad_fidelity(spec: RunSpec, out: Path, summary: dict) -> None:
    spec = dataclasses.replace(spec, extraction=dataclasses.replace(spec.extraction, method="dual_students"))
    data, target = prepare_target(spec, out, summary)
    result = run_extraction(spec, data, target, out, summary)
    rows = result.metrics_history
    half = next(r for r in rows if r.queries >= rows[-1].queries / 2)
    summary["mid_queries"] = half.queries
    summary["mid_grad_fidelity_ds"] = half.grad_fidelity_ds
    summary["mid_grad_fidelity_fd"] = half.grad_fidelity_fd
    # end-of-run check under both normalizations on fresh generated samples
    rng = substream(spec.seed, "eval")
    z = rng.uniform(0.0, 1.0, size=(spec.evaluation.n_grad, result.generator.in_dim))
    xs = result.generator.predict(z)
    loss = resolved_eval_loss(spec)
    live = result.live_students
    for norm in ("gradient", "loss"):
        ds = grad_fidelity(target, (live[0], live[1]), xs, loss, normalize=norm)
        fd = grad_fidelity(target, FdEstimator(live[0], spec.evaluation.fd_step, 1, rng), xs, loss,
                           normalize=norm)
        summary[f"final_grad_fidelity_ds_{norm}"] = ds.mean
        summary[f"final_grad_fidelity_fd_{norm}"] = fd.mean


def _students_from(run_dir: Path) -> list:
    ckpt = Path(run_dir) / "checkpoints"
    return [nets.load(p) for p in sorted(ckpt.glob("s[0-9].json"))]


def _check_reusable(spec: RunSpec, run_dir: Path) -> Path:
    """A reused extraction must have attacked the same target on the same data."""
    other = load_config(run_dir / "config.ini")
    for name in ("seed", "dataset", "target"):
        if getattr(other, name) != getattr(spec, name):
            raise ConfigError(f"{run_dir} was run with a different {name}; it cannot serve as a proxy here")
    return run_dir


def task_attack(spec: RunSpec, out: Path, summary: dict) -> None:
    data, target = prepare_target(spec, out, summary)
    suite = spec.attack
    for reused in (suite.ds_run, suite.fd_run):
        if reused:
            _check_reusable(spec, Path(reused))
    ds_dir = Path(suite.ds_run) if suite.ds_run else sub_run(spec, out, "extract_dual_students",
                                                             method="dual_students")
    fd_dir = Path(suite.fd_run) if suite.fd_run else sub_run(spec, out, "extract_dfme_fd", method="dfme_fd")
    oracle = Oracle.from_mlp(target, "hard")
    ds_students = _students_from(ds_dir)
    proxies = {}
    if "whitebox_target" in suite.sources:
        proxies["whitebox_target"] = ("whitebox_target", target)
    if "data_proxy" in suite.sources:
        proxy = train_classifier(data.train, data.n_classes, spec.extraction.student_hidden,
                                 suite.proxy_epochs, spec.seed, stream="proxy")
        nets.save(proxy, out / "checkpoints" / "data_proxy.json")
        summary["agreement_data_proxy"] = eval_agreement(oracle, proxy, data.test.x)
        proxies["data_proxy"] = ("data_proxy", proxy)
    if "extracted_student" in suite.sources:
        proxies["dual_students"] = ("extracted_student", select_proxy(*ds_students, oracle, data.test.x))
        proxies["dfme_fd"] = ("extracted_student", _students_from(fd_dir)[0])
    for name in ("dual_students", "dfme_fd"):
        if name in proxies:
            summary[f"agreement_{name}_proxy"] = eval_agreement(oracle, proxies[name][1], data.test.x)
    xs, ys = data.test.x[:suite.n_eval], data.test.y[:suite.n_eval]
    domain = Box.unit(data.dim)
    seed = subseed(spec.seed, "attacks")
    rows = []
    for attack in suite.configs():
        for name, (source, proxy) in proxies.items():
            rep = transfer_eval(oracle, proxy, attack, xs, ys, domain, source=source, seed=seed)
            rows.append([name, rep.attack, repr(rep.epsilon), rep.n_evaluated, rep.n_success,
                         repr(rep.success_rate)])
    with open(out / "fooling.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FOOLING_HEADER)
        w.writerows(rows)


TASK_FNS = {
    "train_target": task_train_target,
    "extract": task_extract,
    "finetune": task_finetune,
    "eval_grad_fidelity": task_grad_fidelity,
    "attack_eval": task_attack,
}


# --- report -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def render_report(out) -> str:
    """Human-readable report; a pure function of the files in ``out``."""
    out = Path(out)
    summary = read_json(out / "summary.json")
    spec = load_config(out / "config.ini")
    lines = [f"task: {summary.get('task')}", f"seed: {summary.get('seed')}",
             f"status: {summary.get('status')}"]
    if summary.get("error"):
        lines.append(f"error: {summary['error']}")
    lines.append("")
    lines.append("summary")
    for key in sorted(summary):
        if key not in ("task", "seed", "status", "error"):
            lines.append(f"  {key}: {_fmt(summary[key])}")
    if (out / "ledger.json").exists():
        led = read_json(out / "ledger.json")
        lines += ["", f"queries: {led['total']} of budget {led['budget']}"]
        for phase, n in sorted(led["by_phase"].items()):
            lines.append(f"  {phase}: {n}")
    if (out / "metrics.csv").exists():
        rows = read_metrics(out / "metrics.csv")
        if rows:
            lines += ["", "queries to agreement (ensemble)"]
            for th, q in queries_to_accuracy(rows, spec.evaluation.thresholds):
                lines.append(f"  {th:.2f}: {'not reached' if q is None else q}")
            last = rows[-1]
            lines += ["", f"final row: epoch {last.epoch}, queries {last.queries}, "
                          f"ensemble agreement {_fmt(last.agreement_ensemble)}, "
                          f"tv from uniform {_fmt(last.tv_from_uniform)}"]
    if (out / "fooling.csv").exists():
        with open(out / "fooling.csv", newline="") as fh:
            recs = list(csv.DictReader(fh))
        lines += ["", "fooling rates", f"  {'proxy':<16} {'attack':<16} {'epsilon':>8} {'rate':>8} {'n':>6}"]
        for r in recs:
            lines.append(f"  {r['proxy']:<16} {r['attack']:<16} {float(r['epsilon']):>8.4f} "
                         f"{float(r['success_rate']):>8.4f} {r['n_evaluated']:>6}")
    return "\n".join(lines) + "\n"


def write_report(out) -> None:
    Path(out, "report.txt").write_text(render_report(out))


# --- entry point ----------------------------------------------------------------

def resolve(spec: RunSpec) -> RunSpec:
    """Seeded, validated copy with derived extraction defaults filled in."""
    spec = spec.seeded()
    spec.validate()
    if spec.task not in ("report", "finetune", "attack_eval"):
        # finetune and attack derive sub-configs from the raw extraction keys
        spec.extraction = spec.extraction.resolved()
    if spec.evaluation.loss is None:
        spec.evaluation = dataclasses.replace(spec.evaluation, loss=resolved_eval_loss(spec))
    return spec


def run(spec: RunSpec) -> int:
    """Execute ``spec``; 0 on success. Failures still leave a report behind."""
    out = Path(spec.output_dir)
    if spec.task == "report":
        if not (out / "summary.json").exists():
            log.error("no run found in %s", out)
            return 1
        write_report(out)
        return 0
    spec = resolve(spec)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(spec))
    summary = {"task": spec.task, "seed": spec.seed, "status": "ok"}
    code = 0
    try:
        TASK_FNS[spec.task](spec, out, summary)
    except Exception as exc:  # recorded, not swallowed: nonzero exit and the report says why
        log.debug("run failed\n%s", traceback.format_exc())
        summary["status"] = "failed"
        summary["error"] = f"{type(exc).__name__}: {exc}"
        code = 1
    write_json(out / "summary.json", summary)
    write_report(out)
    return code
