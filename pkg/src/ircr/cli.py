"""Command-line pipeline: gen-data, fit-priors, train, eval, score,
match-debug and report.

Every subcommand funnels its randomness through one ``--seed`` flag and is
idempotent for fixed inputs; on failure, outputs created by the invocation
are removed and the exit code is nonzero. ``IRCR_LOG=debug|info`` controls
verbosity on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data, figures, matching, model, priors, trainer
from .tensorio import load_tensor

log = logging.getLogger("ircr")


class _Outputs:
    """Tracks paths created by a command so failures can clean them up."""

    def __init__(self) -> None:
        self.paths: list[Path] = []

    def claim(self, path: str | Path) -> Path:
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        return path

    def discard_all(self) -> None:
        for path in self.paths:
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()


def _fmt_float(x: float) -> str:
    return repr(float(x))


def cmd_gen_data(args: argparse.Namespace, outputs: _Outputs) -> None:
    cfg = data.SceneConfig(
        size=args.size, overlap_fraction=args.overlap, seed=args.seed,
        noise_sigma=args.noise_sigma,
    )
    scenes = data.generate_scenes(cfg, args.n_scenes)
    out = outputs.claim(args.out)
    data.save_dataset(out, scenes)
    log.info("wrote %d scenes to %s", len(scenes), out)


def cmd_fit_priors(args: argparse.Namespace, outputs: _Outputs) -> None:
    scenes = data.load_dataset(args.data)
    rows = [
        priors.extract_features(s.gt_labels, int(k), s.h_channel).as_array()
        for s in scenes
        for k in np.unique(s.gt_labels)[np.unique(s.gt_labels) > 0]
    ]
    bank = priors.fit_kde(np.array(rows), args.bandwidth)
    out = outputs.claim(args.out)
    priors.save_prior_bank(out, bank)
    log.info("fitted prior bank on %d instances -> %s", bank.sample_count, out)


def cmd_train(args: argparse.Namespace, outputs: _Outputs) -> None:
    config, _ = trainer.load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    scenes = data.load_dataset(args.data)
    bank = priors.load_prior_bank(args.priors) if args.priors else None
    out = outputs.claim(args.out)
    result = trainer.train(config, scenes, bank, run_dir=out)
    log.info("trained %d steps -> %s", len(result.log_rows), out)


def _write_metrics_csv(path: Path, ids: list, reports, mean) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "aji", "dice", "f1_obj", "tp", "fp", "fn"])
        for sid, r in zip(ids, reports):
            writer.writerow([sid, _fmt_float(r.aji), _fmt_float(r.dice), _fmt_float(r.f1_obj), r.tp, r.fp, r.fn])
        if mean is None:
            writer.writerow(["no scenes", "", "", "", "", "", ""])
        else:
            writer.writerow(
                ["mean", _fmt_float(mean.aji), _fmt_float(mean.dice), _fmt_float(mean.f1_obj), mean.tp, mean.fp, mean.fn]
            )


def cmd_eval(args: argparse.Namespace, outputs: _Outputs) -> None:
    student, _, _ = model.load_checkpoint(args.checkpoint)
    scenes = data.load_dataset(args.data)
    reports, mean = trainer.evaluate(student, scenes, iou_thresh=args.iou_thresh)
    out = outputs.claim(args.out)
    _write_metrics_csv(out, [s.scene_id for s in scenes], reports, mean)
    if mean is not None:
        log.info("mean AJI %.4f Dice %.4f F1 %.4f", mean.aji, mean.dice, mean.f1_obj)


def cmd_score(args: argparse.Namespace, outputs: _Outputs) -> None:
    bank = priors.load_prior_bank(args.priors)
    scenes = data.load_dataset(args.data)
    out = outputs.claim(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "z1", "z2", "z3", "z4", "z5", "p_z", "kept"])
        for scene in scenes:
            for k in np.unique(scene.gt_labels):
                if k <= 0:
                    continue
                z = priors.extract_features(scene.gt_labels, int(k), scene.h_channel).as_array()
                p = priors.score_instance(bank, z)
                writer.writerow(
                    [f"{scene.scene_id}:{int(k)}", *(_fmt_float(v) for v in z), _fmt_float(p),
                     str(p >= args.tau).lower()]
                )


def cmd_match_debug(args: argparse.Namespace, outputs: _Outputs) -> None:
    teacher = load_tensor(args.teacher)
    student = load_tensor(args.student)
    match = matching.match_instances(teacher, student, args.r_factor)
    out_csv = outputs.claim(args.out_csv)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["teacher_id", "student_id", "distance", "kept"])
        for t_id, s_id, dist in match.pairs:
            writer.writerow([t_id, s_id, _fmt_float(dist), "true"])
        for t_id in match.unmatched_teacher:
            writer.writerow([t_id, "", "", "false"])
        for s_id in match.unmatched_student:
            writer.writerow(["", s_id, "", "false"])
    if args.out_svg:
        out_svg = outputs.claim(args.out_svg)
        out_svg.write_text(figures.match_overlay(teacher, student, match))


def cmd_report(args: argparse.Namespace, outputs: _Outputs) -> None:
    if not args.runlog and not args.eval:
        raise ValueError("report needs --runlog and/or --eval inputs")
    out_dir = outputs.claim(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.runlog:
        with open(args.runlog, newline="") as fh:
            rows = list(csv.DictReader(fh))
        series = {
            name: [float(row[name]) for row in rows]
            for name in ("L_sup", "L_miac", "L_piac", "L_total")
        }
        (out_dir / "loss_curves.svg").write_text(figures.line_plot(series, "training loss"))
    if args.eval:
        labels, values = [], []
        for spec_item in args.eval:
            ratio, path = spec_item.split("=", 1)
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            mean_rows = [r for r in rows if r["image_id"] == "mean"]
            if not mean_rows:
                raise ValueError(f"{path}: no mean row")
            labels.append(ratio)
            values.append(float(mean_rows[0]["aji"]))
        (out_dir / "aji_by_ratio.svg").write_text(
            figures.bar_chart(labels, values, "mean AJI by labeled ratio")
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ircr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scenes", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--overlap", type=float, default=0.1)
    p.add_argument("--noise-sigma", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-priors", help="fit the KDE prior bank on dataset GT instances")
    p.add_argument("--data", required=True)
    p.add_argument("--bandwidth", default="auto", help='"auto" or a fixed float')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_priors)

    p = sub.add_parser("train", help="run the mean-teacher training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--priors", default=None)
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score dataset instances against a prior bank")
    p.add_argument("--priors", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float, default=0.35)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("match-debug", help="match two instance label maps and dump the result")
    p.add_argument("--teacher", required=True, help="IRCR-T int32 label map")
    p.add_argument("--student", required=True)
    p.add_argument("--r-factor", type=float, default=1.5)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-svg", default=None)
    p.set_defaults(func=cmd_match_debug)

    p = sub.add_parser("report", help="emit SVG figures from run/eval CSVs")
    p.add_argument("--runlog", default=None)
    p.add_argument("--eval", action="append", default=[], metavar="RATIO=CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("IRCR_LOG", "").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    outputs = _Outputs()
    try:
        args.func(args, outputs)
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        outputs.discard_all()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
