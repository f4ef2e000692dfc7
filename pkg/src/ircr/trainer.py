"""Mean-teacher training loop with matching-driven and prior-driven
instance-aware consistency.

Per optimizer step: one labeled batch feeds the supervised loss; one
unlabeled batch is weak-augmented for the teacher and strong-augmented for
the student, both predictions are unwarped into the original scene frame,
and the consistency losses are evaluated there against the instance masks,
matches and prior weight map cached from the previous visit of each scene
(the visit-k masks are constants at visit k+1; nothing differentiates
through WBIS, matching or the teacher). After the Adam update the teacher
tracks the student by EMA and the per-scene cache is refreshed.

All randomness derives from per-purpose seeds, so runs are bit-reproducible
and the labeled path never shares a random stream with the unlabeled path.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data, losses, matching, metrics, model, priors, raster, wbis
from .tensorio import save_tensor

_PURPOSE_LABELED = 0
_PURPOSE_UNLABELED = 1
_PURPOSE_WEAK = 2
_PURPOSE_STRONG = 3


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-4
    lr_decay: dict[int, float] | None = None  # epoch -> factor; None = 10% at the 2/3 mark
    labeled_ratio: float = 1.0
    ema: model.EmaConfig = field(default_factory=model.EmaConfig)
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    piac: priors.PiacConfig = field(default_factory=priors.PiacConfig)
    wbis: wbis.WbisParams = field(default_factory=wbis.WbisParams)
    r_factor: float = 1.5
    consistency_warmup_epochs: float | None = None  # None = 10% of epochs
    consistency: str = "ircr"  # ircr | mse | none
    mse_weight: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 < self.labeled_ratio <= 1.0:
            raise ValueError("labeled_ratio must be in (0, 1]")
        if self.consistency not in ("ircr", "mse", "none"):
            raise ValueError("consistency must be one of ircr, mse, none")

    def resolved_lr_decay(self) -> dict[int, float]:
        if self.lr_decay is not None:
            return dict(self.lr_decay)
        return {max(1, math.ceil(2 * self.epochs / 3)): 0.1}

    def resolved_warmup(self) -> float:
        if self.consistency_warmup_epochs is not None:
            return float(self.consistency_warmup_epochs)
        return 0.1 * self.epochs


@dataclass
class CacheEntry:
    """Per-scene constants produced at visit k, consumed at visit k+1."""

    step: int
    match: matching.MatchResult
    pair_masks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]
    u: np.ndarray
    n_teacher: int


@dataclass
class StepComputation:
    grads: dict
    row: dict
    unlabeled: list  # (scene, t_np, t_hv, s_np, s_hv) tuples for the cache refresh


@dataclass
class TrainResult:
    student: model.ModelParams
    teacher: model.ModelParams
    adam: model.AdamState
    log_rows: list[dict]


def _derive_seed(base: int, *key: int) -> int:
    return int(np.random.SeedSequence([base & 0x7FFFFFFF, *key]).generate_state(1)[0])


def _log_columns() -> list[str]:
    return [
        "step", "L_sup", "L_dice", "L_ce", "L_mse", "L_msge", "L_miac", "L_piac",
        "L_total", "matched_pairs", "rejected_instances", "lr",
    ]


class Trainer:
    def __init__(self, config: TrainConfig, scenes: list[data.Scene], prior_bank: priors.PriorBank | None):
        self.config = config
        self.bank = prior_bank
        self.labeled, self.unlabeled = data.split_labeled(scenes, config.labeled_ratio, config.seed)
        if not self.labeled:
            raise TrainingError("dataset has no labeled scenes")
        if config.consistency == "ircr" and self._consistency_active() and self.unlabeled and prior_bank is None:
            raise TrainingError("IRCR consistency requires a prior bank")
        in_channels = self.labeled[0].image.shape[0]
        self.student = model.init_model_params(config.seed, in_channels)
        self.teacher = model.copy_params(self.student)
        self.adam = model.AdamState()
        self.cache: dict[int, CacheEntry] = {}
        self.step_index = 0
        longest = max(len(self.labeled), len(self.unlabeled))
        self.steps_per_epoch = max(1, math.ceil(longest / config.batch_size))
        self._perms: dict[tuple[int, int], np.ndarray] = {}
        self._lr_decay = config.resolved_lr_decay()
        self._warmup = config.resolved_warmup()

    # -- scheduling ---------------------------------------------------------
    def _consistency_active(self) -> bool:
        cfg = self.config
        if cfg.consistency == "none" or not self.unlabeled:
            return False
        if cfg.consistency == "ircr":
            return cfg.weights.gamma1 > 0.0 or cfg.weights.gamma2 > 0.0
        return cfg.mse_weight > 0.0

    def _perm(self, purpose: int, pass_idx: int, n: int) -> np.ndarray:
        key = (purpose, pass_idx)
        if key not in self._perms:
            seed = _derive_seed(self.config.seed, purpose, pass_idx)
            self._perms[key] = np.random.default_rng(seed).permutation(n)
        return self._perms[key]

    def _batch(self, items: list, purpose: int, step: int) -> list:
        n = len(items)
        out = []
        for g in range(step * self.config.batch_size, (step + 1) * self.config.batch_size):
            pass_idx, offset = divmod(g, n)
            out.append(items[int(self._perm(purpose, pass_idx, n)[offset])])
        return out

    def _lr_at(self, epoch: int) -> float:
        lr = self.config.lr
        for e, factor in sorted(self._lr_decay.items()):
            if epoch >= e:
                lr *= factor
        return lr

    def _ramp(self, step: int) -> float:
        if self._warmup <= 0.0:
            return 1.0
        return min(1.0, (step / self.steps_per_epoch) / self._warmup)

    # -- one step -----------------------------------------------------------
    def _compute_step(self) -> StepComputation:
        cfg = self.config
        step = self.step_index
        bsz = cfg.batch_size
        row: dict = {"step": step}

        lab_batch = self._batch(self.labeled, _PURPOSE_LABELED, step)
        images = np.stack([s.image for s in lab_batch])
        out = model.forward_batch(self.student, images)
        grad_np = np.zeros_like(out.np_probs)
        grad_hv = np.zeros_like(out.hv)
        parts = {"dice": 0.0, "ce": 0.0, "mse": 0.0, "msge": 0.0}
        sup_total = 0.0
        for i, scene in enumerate(lab_batch):
            sup = losses.supervised_loss(out.np_probs[i], out.hv[i], scene.gt_labels, scene.gt_hv)
            grad_np[i] = sup.grad_np / bsz
            grad_hv[i] = sup.grad_hv / bsz
            sup_total += sup.value / bsz
            for name in parts:
                parts[name] += sup.parts[name] / bsz
        grads = model.backward_batch(self.student, out, grad_np, grad_hv)

        row.update(
            L_sup=sup_total, L_dice=parts["dice"], L_ce=parts["ce"],
            L_mse=parts["mse"], L_msge=parts["msge"],
            L_miac=0.0, L_piac=0.0, matched_pairs=0, rejected_instances=0,
        )
        total = sup_total
        unlabeled_maps: list = []

        if self._consistency_active():
            ramp = self._ramp(step)
            unl_batch = self._batch(self.unlabeled, _PURPOSE_UNLABELED, step)
            weak = [data.weak_augment(s, _derive_seed(cfg.seed, _PURPOSE_WEAK, step, s.scene_id)) for s in unl_batch]
            strong = [data.strong_augment(s, _derive_seed(cfg.seed, _PURPOSE_STRONG, step, s.scene_id)) for s in unl_batch]
            t_out = model.forward_batch(self.teacher, np.stack([s.image for s in weak]))
            s_out = model.forward_batch(self.student, np.stack([s.image for s in strong]))
            g_np = np.zeros_like(s_out.np_probs)
            g_hv = np.zeros_like(s_out.hv)
            miac_total = 0.0
            piac_total = 0.0
            cons_total = 0.0
            for i, scene in enumerate(unl_batch):
                t_np, t_hv = data.unwarp_outputs(t_out.np_probs[i], t_out.hv[i], weak[i].geom)
                s_np, s_hv = data.unwarp_outputs(s_out.np_probs[i], s_out.hv[i], strong[i].geom)
                f_t = np.concatenate([t_np, t_hv])
                f_s = np.concatenate([s_np, s_hv])
                gnp_orig = None
                if cfg.consistency == "mse":
                    m = losses.mse_loss(f_s, f_t)
                    scale = cfg.mse_weight * ramp / bsz
                    cons_total += cfg.mse_weight * ramp * m.value / bsz
                    gnp_orig = m.grad[0:2] * scale
                    ghv_orig = m.grad[2:4] * scale
                else:
                    entry = self.cache.get(scene.scene_id)
                    if entry is not None:
                        if entry.step >= step:
                            raise TrainingError("cache entry is not from an earlier step")
                        miac = losses.miac_loss(
                            f_s, f_t, f_s[losses.NP_FG_CHANNEL], f_t[losses.NP_FG_CHANNEL],
                            entry.match, entry.pair_masks, cfg.weights.beta,
                        )
                        piacv = losses.piac_loss(f_s, f_t, entry.u, entry.n_teacher)
                        cons = losses.consistency_loss(piacv, miac, cfg.weights)
                        scale = ramp / bsz
                        miac_total += miac.value / bsz
                        piac_total += piacv.value / bsz
                        cons_total += cons.value * scale
                        gf = cons.grad_f * scale
                        gnp_orig = gf[0:2]
                        gnp_orig[losses.NP_FG_CHANNEL] += cons.grad_b * scale
                        ghv_orig = gf[2:4]
                    unlabeled_maps.append((scene, t_np, t_hv, s_np, s_hv))
                if gnp_orig is not None:
                    # Adjoint of the original-frame unwarp is the forward warp.
                    gnp_s, ghv_s = data.warp_outputs(gnp_orig, ghv_orig, strong[i].geom)
                    g_np[i] += gnp_s
                    g_hv[i] += ghv_s
            if np.any(g_np) or np.any(g_hv):
                cons_grads = model.backward_batch(self.student, s_out, g_np, g_hv)
                for name in grads:
                    grads[name] = grads[name] + cons_grads[name]
            total += cons_total
            row["L_miac"] = miac_total
            row["L_piac"] = piac_total

        row["L_total"] = total
        row["lr"] = self._lr_at(step // self.steps_per_epoch)
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step}")
        return StepComputation(grads=grads, row=row, unlabeled=unlabeled_maps)

    def _refresh_cache(self, comp: StepComputation) -> None:
        cfg = self.config
        matched_pairs = 0
        rejected = 0
        for scene, t_np, t_hv, s_np, s_hv in comp.unlabeled:
            t_labels = wbis.segment_instances(t_np[losses.NP_FG_CHANNEL], t_hv, cfg.wbis)
            s_labels = wbis.segment_instances(s_np[losses.NP_FG_CHANNEL], s_hv, cfg.wbis)
            match = matching.match_instances(t_labels, s_labels, cfg.r_factor)
            pair_masks = []
            for t_id, s_id, _ in match.pairs:
                t_mask = t_labels == t_id
                s_mask = s_labels == s_id
                pair_masks.append(
                    (s_mask, t_mask, raster.instance_boundary(s_mask), raster.instance_boundary(t_mask))
                )
            n_teacher = int(t_labels.max())
            scores = np.array(
                [
                    priors.score_instance(self.bank, priors.extract_features(t_labels, k, scene.h_channel))
                    for k in range(1, n_teacher + 1)
                ]
            )
            u = priors.piac_mask(t_labels, scores, cfg.piac)
            matched_pairs += len(match.pairs)
            rejected += len(match.unmatched_teacher) + len(match.unmatched_student)
            rejected += int((scores < cfg.piac.tau).sum())
            self.cache[scene.scene_id] = CacheEntry(
                step=self.step_index, match=match, pair_masks=pair_masks, u=u, n_teacher=n_teacher
            )
        comp.row["matched_pairs"] = matched_pairs
        comp.row["rejected_instances"] = rejected

    def step(self) -> dict:
        comp = self._compute_step()
        lr = comp.row["lr"]
        self.student, self.adam = model.adam_step(self.student, comp.grads, lr, state=self.adam)
        self.teacher = model.ema_update(self.teacher, self.student, self.config.ema)
        self._refresh_cache(comp)
        self.step_index += 1
        return comp.row

    def run(self) -> list[dict]:
        rows = []
        total_steps = self.config.epochs * self.steps_per_epoch
        while self.step_index < total_steps:
            rows.append(self.step())
        return rows


def _dump_batch(run_dir: Path | None, trainer: Trainer) -> None:
    if run_dir is None:
        return
    dump = run_dir / f"diagnostic_step{trainer.step_index}"
    dump.mkdir(parents=True, exist_ok=True)
    batch = trainer._batch(trainer.labeled, _PURPOSE_LABELED, trainer.step_index)
    for scene in batch:
        save_tensor(dump / f"img_{scene.scene_id}", scene.image)
        save_tensor(dump / f"lbl_{scene.scene_id}", scene.gt_labels.astype(np.int32))


def train(
    config: TrainConfig,
    scenes: list[data.Scene],
    prior_bank: priors.PriorBank | None = None,
    run_dir: str | Path | None = None,
) -> TrainResult:
    """Full training run; optionally writes ``runlog.csv`` and ``checkpoint/``
    into ``run_dir``. Raises ``TrainingError`` (after dumping the offending
    batch) if the loss turns non-finite."""
    run_dir = Path(run_dir) if run_dir is not None else None
    trainer = Trainer(config, scenes, prior_bank)
    try:
        rows = trainer.run()
    except TrainingError:
        _dump_batch(run_dir, trainer)
        raise
    result = TrainResult(
        student=trainer.student, teacher=trainer.teacher, adam=trainer.adam, log_rows=rows
    )
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        write_run_log(run_dir / "runlog.csv", rows)
        model.save_checkpoint(run_dir / "checkpoint", result.student, result.teacher, result.adam)
    return result


def write_run_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_log_columns())
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in _log_columns()])


def evaluate(
    student: model.ModelParams,
    scenes: list[data.Scene],
    wbis_params: wbis.WbisParams | None = None,
    iou_thresh: float = 0.5,
) -> tuple[list[metrics.MetricReport], metrics.MetricReport | None]:
    """Student forward -> WBIS -> metrics, per scene, plus the mean report
    (None for an empty dataset)."""
    wbis_params = wbis_params or wbis.WbisParams()
    reports = []
    for start in range(0, len(scenes), 8):
        chunk = scenes[start : start + 8]
        out = model.forward_batch(student, np.stack([s.image for s in chunk]))
        for i, scene in enumerate(chunk):
            pred = wbis.segment_instances(out.np_probs[i, losses.NP_FG_CHANNEL], out.hv[i], wbis_params)
            reports.append(metrics.report(scene.gt_labels, pred, iou_thresh))
    if not reports:
        return [], None
    mean = metrics.MetricReport(
        aji=float(np.mean([r.aji for r in reports])),
        dice=float(np.mean([r.dice for r in reports])),
        f1_obj=float(np.mean([r.f1_obj for r in reports])),
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
    )
    return reports, mean


# ---------------------------------------------------------------------------
# INI config files

def load_config(path: str | Path) -> tuple[TrainConfig, data.SceneConfig]:
    """Parse the INI run configuration: sections [train], [wbis], [piac],
    [match] feed TrainConfig; [data] feeds SceneConfig."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    t = parser["train"] if parser.has_section("train") else {}
    w = parser["wbis"] if parser.has_section("wbis") else {}
    p = parser["piac"] if parser.has_section("piac") else {}
    m = parser["match"] if parser.has_section("match") else {}
    d = parser["data"] if parser.has_section("data") else {}

    lr_decay = None
    if "lr_decay" in t:
        lr_decay = {}
        for part in t["lr_decay"].split(","):
            epoch, factor = part.split(":")
            lr_decay[int(epoch)] = float(factor)
    warmup = float(t["warmup_epochs"]) if "warmup_epochs" in t else None
    config = TrainConfig(
        epochs=int(t.get("epochs", 10)),
        batch_size=int(t.get("batch_size", 4)),
        lr=float(t.get("lr", 1e-4)),
        lr_decay=lr_decay,
        labeled_ratio=float(t.get("labeled_ratio", 1.0)),
        ema=model.EmaConfig(alpha=float(t.get("ema_alpha", 0.95))),
        weights=losses.LossWeights(
            beta=float(t.get("beta", 0.5)),
            gamma1=float(t.get("gamma1", 0.1)),
            gamma2=float(t.get("gamma2", 100.0)),
        ),
        piac=priors.PiacConfig(tau=float(p.get("tau", 0.35)), w=float(p.get("w", 2.0))),
        wbis=wbis.WbisParams(
            fg_threshold=float(w.get("fg_threshold", 0.5)),
            marker_threshold=float(w.get("marker_threshold", 0.4)),
            min_instance_area=int(w.get("min_instance_area", 10)),
        ),
        r_factor=float(m.get("r_factor", 1.5)),
        consistency_warmup_epochs=warmup,
        consistency=t.get("consistency", "ircr"),
        mse_weight=float(t.get("mse_weight", 1.0)),
        seed=int(t.get("seed", 0)),
    )
    scene_cfg = data.SceneConfig(
        size=int(d.get("size", 64)),
        nuclei_count_range=(int(d.get("min_nuclei", 3)), int(d.get("max_nuclei", 6))),
        radius_range=(float(d.get("min_radius", 6.5)), float(d.get("max_radius", 10.0))),
        overlap_fraction=float(d.get("overlap", 0.1)),
        ellipse_eccentricity_range=(float(d.get("min_ecc", 0.0)), float(d.get("max_ecc", 0.5))),
        intensity_range=(float(d.get("min_intensity", 0.35)), float(d.get("max_intensity", 0.9))),
        noise_sigma=float(d.get("noise_sigma", 0.15)),
        seed=int(d.get("seed", 0)),
    )
    return config, scene_cfg
