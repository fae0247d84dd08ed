"""Training orchestration.

A TrainPlan is an ordered list of phases (loss kind, dataset split,
epochs, crop, learning rate, lambda list, freeze flags). train() runs
the phase chain once per lambda and returns one Checkpoint per lambda.
The analysis network is always frozen; the compression network can be
frozen per phase (head-only masking training). Quantization during
training is the additive-noise surrogate; every reported RD point
comes from real encoding and decoding.

Every epoch reseeds data order and noise from (seed, epoch), so a run
resumed from a checkpoint retraces the same trajectory.
"""

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import codec as codec_mod
from .analysis import param_checksum, require_stride16
from .checkpoint import load_model_file, save_model_file
from .datasets import crop_with_boxes, load_image, to_tensor
from .errors import NumericError
from .losses import LossConfig, LossKind, RateReport, total_loss
from .masking import FEATURE_STAGE, LsmHead, apply_mask, masked_encode
from .metrics import RDCurve, RDPoint, ms_ssim, psnr, weighted_ap
from .model import NcnModel, quantize
from .rate import laplace_bits

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_LR = 1e-4
LSM_FINETUNE_LR = 1e-5


@dataclass
class TrainPhase:
    loss: str
    epochs: int
    lambdas: list
    dataset: str = "train"
    batch_size: int = 4
    crop: int = 128
    lr: float = DEFAULT_LR
    freeze_ncn: bool = False
    train_lsm: bool = False

    def __post_init__(self):
        LossKind(self.loss)
        if self.crop % 64:
            raise ValueError(f"crop size must be divisible by 64, got {self.crop}")
        if not self.lambdas:
            raise ValueError("phase needs at least one lambda")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainPlan:
    phases: list
    seed: int = 0
    latent_channels: int = 192
    hyper_channels: int = 192

    def __post_init__(self):
        if not self.phases:
            raise ValueError("plan has no phases")
        lens = {len(p.lambdas) for p in self.phases}
        if len(lens) != 1:
            raise ValueError("all phases must list the same number of lambdas")

    @property
    def num_runs(self):
        return len(self.phases[0].lambdas)

    def config_hash(self):
        payload = json.dumps(
            {
                "phases": [asdict(p) for p in self.phases],
                "seed": self.seed,
                "latent_channels": self.latent_channels,
                "hyper_channels": self.hyper_channels,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_plan(path):
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    if any(p.get("freeze_analysis") is False for p in raw.get("phases", [])):
        raise ValueError("the analysis network is always frozen during codec training")
    model = raw.get("model", {})
    phases = [
        TrainPhase(**{k: v for k, v in p.items() if k != "freeze_analysis"})
        for p in raw.get("phases", [])
    ]
    return TrainPlan(
        phases=phases,
        seed=raw.get("seed", 0),
        latent_channels=model.get("latent_channels", 192),
        hyper_channels=model.get("hyper_channels", 192),
    )


@dataclass
class Checkpoint:
    model: NcnModel
    meta: dict = field(default_factory=dict)
    lsm_head: LsmHead = None
    lsm_backbone: object = None
    opt_arrays: dict = None

    def save(self, path, include_optimizer=False):
        extra = dict(self.opt_arrays or {}) if include_optimizer else None
        return save_model_file(
            path,
            self.model,
            self.meta,
            lsm_head=self.lsm_head,
            lsm_backbone=self.lsm_backbone,
            extra_arrays=extra,
        )

    @staticmethod
    def load(path):
        loaded = load_model_file(path)
        return Checkpoint(
            model=loaded.model,
            meta=loaded.meta,
            lsm_head=loaded.lsm_head,
            lsm_backbone=loaded.lsm_backbone,
            opt_arrays=loaded.extra_arrays or None,
        )


def _epoch_seed(seed, epoch):
    return (seed * 1000003 + epoch * 7919 + 17) % (2**31 - 1)


def _load_split(manifest, split):
    items = []
    for name in manifest.split_names(split):
        img = load_image(manifest.image_path(name))
        items.append((img, manifest.annotations.get(name, [])))
    if not items:
        raise ValueError(f"dataset split {split!r} is empty")
    return items


def _forward_batch(model, x, cfg, analysis, targets, lsm_head, lsm_backbone, lsm_stage):
    y = model.encode_latent(x)
    z_tilde, mean, scale = model.hyper_forward(y, mode="train")
    if lsm_head is not None:
        alpha = lsm_head(lsm_backbone.features(x, lsm_stage))
        y = apply_mask(y, mean, alpha)
    y_tilde = quantize(y, mean, mode="train")
    latent_bits = laplace_bits(y_tilde, mean, scale)
    mean2, scale2 = model.context_forward(z_tilde)
    hyper_bits = laplace_bits(z_tilde, mean2, scale2)
    x_hat = model.decode_latent_raw(y_tilde)
    rates = RateReport(latent_bits, hyper_bits, num_pixels=x.shape[0] * x.shape[2] * x.shape[3])
    return total_loss(x, x_hat, rates, cfg, analysis=analysis, ground_truth=targets)


def run_phase(
    model,
    phase,
    lam,
    data,
    analysis=None,
    lsm_head=None,
    lsm_backbone=None,
    lsm_stage=FEATURE_STAGE,
    seed=0,
    start_epoch=0,
    opt_arrays=None,
    log_rows=None,
):
    """Train `model` in place for one phase at one lambda.

    Returns (history, opt_arrays). On a non-finite loss the phase
    aborts and the model is restored to the last epoch that finished
    cleanly.
    """
    cfg = LossConfig(kind=phase.loss, lam=lam)
    for p in model.parameters():
        p.requires_grad_(not phase.freeze_ncn)
    trainable = [] if phase.freeze_ncn else list(model.parameters())
    if lsm_head is not None and phase.train_lsm:
        for p in lsm_head.parameters():
            p.requires_grad_(True)
        trainable = trainable + list(lsm_head.parameters())
    if not trainable:
        raise ValueError("phase leaves nothing trainable")
    if analysis is not None:
        analysis.freeze()
    opt = torch.optim.Adam(trainable, lr=phase.lr)
    named = _named_trainable(model, lsm_head, phase)
    if opt_arrays:
        _restore_optimizer(opt, named, opt_arrays)

    history = []
    good_state = copy.deepcopy(model.state_dict())
    good_head = copy.deepcopy(lsm_head.state_dict()) if lsm_head is not None else None
    needs_boxes = cfg.kind is LossKind.TASK
    for epoch in range(start_epoch, phase.epochs):
        es = _epoch_seed(seed, epoch)
        rng = np.random.default_rng(es)
        torch.manual_seed(es)
        order = rng.permutation(len(data))
        totals = []
        aborted = False
        for start in range(0, len(order), phase.batch_size):
            idx = order[start : start + phase.batch_size]
            patches, batch_targets = [], []
            for i in idx:
                img, boxes = data[i]
                patch, kept = crop_with_boxes(img, boxes, phase.crop, rng)
                patches.append(to_tensor(patch))
                batch_targets.append(kept)
            x = torch.cat(patches)
            try:
                report = _forward_batch(
                    model, x, cfg, analysis,
                    batch_targets if needs_boxes else None,
                    lsm_head if phase.train_lsm else None,
                    lsm_backbone, lsm_stage,
                )
            except NumericError:
                aborted = True
                break
            opt.zero_grad()
            report.total.backward()
            opt.step()
            totals.append(report.floats())
        if aborted or not totals:
            model.load_state_dict(good_state)
            if good_head is not None:
                lsm_head.load_state_dict(good_head)
            history.append({"epoch": epoch, "aborted": True})
            break
        row = {k: float(np.mean([t[k] for t in totals])) for k in totals[0]}
        row["epoch"] = epoch
        history.append(row)
        if log_rows is not None:
            log_rows.append(row)
        good_state = copy.deepcopy(model.state_dict())
        if lsm_head is not None:
            good_head = copy.deepcopy(lsm_head.state_dict())
    return history, _capture_optimizer(opt, named)


def _named_trainable(model, lsm_head, phase):
    named = []
    if not phase.freeze_ncn:
        named += [("model." + n, p) for n, p in model.named_parameters()]
    if lsm_head is not None and phase.train_lsm:
        named += [("lsm_head." + n, p) for n, p in lsm_head.named_parameters()]
    return named


def _capture_optimizer(opt, named):
    arrays = {}
    state = opt.state
    for name, p in named:
        s = state.get(p)
        if not s:
            continue
        arrays[f"opt.{name}.step"] = np.asarray([int(s["step"])], dtype=np.int64)
        arrays[f"opt.{name}.exp_avg"] = s["exp_avg"].detach().cpu().numpy()
        arrays[f"opt.{name}.exp_avg_sq"] = s["exp_avg_sq"].detach().cpu().numpy()
    return arrays


def _restore_optimizer(opt, named, arrays):
    for name, p in named:
        key = f"opt.{name}.step"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[key][0])),
            "exp_avg": torch.from_numpy(arrays[f"opt.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.exp_avg_sq"].copy()),
        }


def train(plan, manifest, analysis=None, init=None, log_dir=None):
    """Run the full phase chain once per lambda.

    Returns a list of Checkpoints, one per lambda index. `init` may be
    a Checkpoint to start every chain from (otherwise fresh weights
    seeded from the plan seed).
    """
    results = []
    cfg_hash = plan.config_hash()
    for run in range(plan.num_runs):
        torch.manual_seed(plan.seed)
        if init is not None:
            model = copy.deepcopy(init.model)
            lsm_head = copy.deepcopy(init.lsm_head)
            lsm_backbone = copy.deepcopy(init.lsm_backbone)
        else:
            model = NcnModel(plan.latent_channels, plan.hyper_channels)
            lsm_head, lsm_backbone = None, None
        log_rows = []
        lam = None
        for phase in plan.phases:
            lam = phase.lambdas[run]
            if phase.train_lsm and lsm_head is None:
                raise ValueError("phase trains the masking head but none is attached")
            data = _load_split(manifest, phase.dataset)
            run_phase(
                model, phase, lam, data,
                analysis=analysis,
                lsm_head=lsm_head,
                lsm_backbone=lsm_backbone,
                seed=plan.seed + 31 * run,
                log_rows=log_rows,
            )
        meta = {
            "loss_kind": plan.phases[-1].loss,
            "lambda": lam,
            "lambda_list": list(plan.phases[-1].lambdas),
            "training": {"dataset": str(manifest.root), "seed": plan.seed, "epoch": plan.phases[-1].epochs},
            "config_hash": cfg_hash,
        }
        ckpt = Checkpoint(model=model, meta=meta, lsm_head=lsm_head, lsm_backbone=lsm_backbone)
        results.append(ckpt)
        if log_dir is not None:
            _write_log_csv(Path(log_dir) / f"train_run{run}.csv", log_rows, cfg_hash)
    return results


def _write_log_csv(path, rows, cfg_hash):
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["epoch", "total", "distortion", "rate_latent_bits", "rate_hyper_bits"]
    with open(path, "w") as f:
        f.write(f"# config_hash={cfg_hash}\n")
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(c, "")) for c in cols) + "\n")


def attach_lsmnet(ckpt, backbone_source, stage=FEATURE_STAGE, init_bias=-4.0):
    """Add a masking branch to a trained checkpoint.

    The projection starts at zero weights with a strongly negative
    bias, so masking begins nearly off. Base model weights are copied
    untouched. A second attach is rejected.
    """
    if ckpt.lsm_head is not None:
        raise ValueError("checkpoint already has a masking branch attached")
    backbone = getattr(backbone_source, "backbone", backbone_source)
    require_stride16(backbone)
    backbone = copy.deepcopy(backbone)
    for p in backbone.parameters():
        p.requires_grad_(False)
    backbone.eval()
    head = LsmHead(backbone.feature_channels(stage), ckpt.model.latent_channels, init_bias=init_bias)
    meta = copy.deepcopy(ckpt.meta)
    meta["lsm"] = {"stage": stage}
    return Checkpoint(
        model=copy.deepcopy(ckpt.model),
        meta=meta,
        lsm_head=head,
        lsm_backbone=backbone,
    )


def detach_lsmnet(ckpt):
    """Drop the masking branch; the remaining checkpoint equals the pre-attach one."""
    if ckpt.lsm_head is None:
        raise ValueError("checkpoint has no masking branch")
    meta = copy.deepcopy(ckpt.meta)
    meta.pop("lsm", None)
    return Checkpoint(model=copy.deepcopy(ckpt.model), meta=meta)


@torch.no_grad()
def evaluate_rd(
    ckpt,
    manifest,
    split="val",
    metric="psnr",
    analysis=None,
    masked=False,
    score_thresh=0.25,
):
    """Real-bitstream RD evaluation of one checkpoint on one split.

    Returns (RDPoint, details dict). Rates come from the actual packed
    streams; masked=True uses the masking branch at encode time and
    always the plain decoder.
    """
    if masked and ckpt.lsm_head is None:
        raise ValueError("masked evaluation requested but no masking branch attached")
    names = manifest.split_names(split)
    bpps = []
    qualities = []
    preds, gts = [], []
    for name in names:
        img = load_image(manifest.image_path(name))
        x = to_tensor(img)
        if masked:
            data, info = masked_encode(
                ckpt.model, x, ckpt.lsm_backbone, ckpt.lsm_head,
                stage=ckpt.meta.get("lsm", {}).get("stage", FEATURE_STAGE),
            )
        else:
            data, info = codec_mod.encode_image(ckpt.model, x)
        x_hat = codec_mod.decode_image(ckpt.model, data)
        bpps.append(info.bpp)
        if metric == "psnr":
            qualities.append(psnr(x, x_hat))
        elif metric == "msssim":
            qualities.append(ms_ssim(x, x_hat))
        elif metric == "wap":
            preds.append(analysis(x_hat, score_thresh=score_thresh)[0])
            gts.append(manifest.annotations[name])
        else:
            raise ValueError(f"unknown metric {metric!r}")
    if metric == "wap":
        if analysis is None:
            raise ValueError("wap evaluation needs an analysis adapter")
        quality = weighted_ap(preds, gts)
    else:
        quality = float(np.mean(qualities))
    point = RDPoint(bpp=float(np.mean(bpps)), quality=quality, quality_kind=metric)
    return point, {"bpp_per_image": bpps, "n_images": len(names)}


def sweep(plan, manifest, analysis=None, metric="psnr", init=None, log_dir=None):
    """Train per lambda and evaluate; one RD curve per final loss kind."""
    if plan.num_runs < 2:
        raise ValueError("a sweep needs at least two lambda values")
    ckpts = train(plan, manifest, analysis=analysis, init=init, log_dir=log_dir)
    points = []
    for ckpt in ckpts:
        point, _ = evaluate_rd(ckpt, manifest, metric=metric, analysis=analysis)
        points.append(point)
    label = f"ncn-{plan.phases[-1].loss}"
    return ckpts, RDCurve(label, tuple(points))


def calibrate_lambda(train_and_eval, lam0, target_bpp, tol=0.10, max_rounds=5):
    """Adjust lambda until mean bpp lands within tol of target.

    train_and_eval(lam) -> (checkpoint, bpp). Assumes bpp decreases as
    lambda grows; walks lambda along the observed log-log slope.
    """
    lam = float(lam0)
    best = None
    for _ in range(max_rounds):
        ckpt, bpp = train_and_eval(lam)
        err = abs(np.log(bpp / target_bpp))
        if best is None or err < best[3]:
            best = (ckpt, bpp, lam, err)
        if (1 - tol) * target_bpp <= bpp <= (1 + tol) * target_bpp:
            return ckpt, bpp, lam
        lam = float(lam * (bpp / target_bpp) ** 1.3)
    return best[0], best[1], best[2]


def model_checksum(ckpt):
    return param_checksum(ckpt.model)
