"""Analysis-network adapters and the bundled toy detector.

The codec treats the analysis side as a pluggable adapter exposing

    forward(x)            -> per-image detection lists
    loss(x, targets)      -> differentiable scalar (its own training loss)
    features(x, stage)    -> feature map at a declared stage
    stages                -> {stage name: stride}

The bundled model is a small single-scale detector over a 4-stage
backbone with a top-down feature pyramid. Bottom-up stages are named
s4/s8/s16/s32 by stride; pyramid outputs p4/p8/p16/p32. Stage s16
feeds latent masking (same grid as the codec latent); p4 is the
default target of the feature-based loss.

Adapters are immutable once trained: codec training freezes their
parameters and verifies that by checksum.
"""

import hashlib
import importlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CapabilityError

BACKBONE_CHANNELS = (32, 64, 128, 256)
PYRAMID_CHANNELS = 64
HEAD_STRIDE = 8
BOX_BASE = 4.0  # box sizes are regressed as log(size / (BOX_BASE * stride))


class ToyBackbone(nn.Module):
    """4-stage strided CNN with a top-down pyramid."""

    stages = {"s4": 4, "s8": 8, "s16": 16, "s32": 32, "p4": 4, "p8": 8, "p16": 16, "p32": 32}

    def __init__(self, channels=BACKBONE_CHANNELS, pyramid_channels=PYRAMID_CHANNELS):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.pyramid_channels = pyramid_channels
        self.down1 = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c1, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.down2 = nn.Sequential(nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.down3 = nn.Sequential(nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.down4 = nn.Sequential(nn.Conv2d(c3, c4, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.lateral = nn.ModuleDict(
            {name: nn.Conv2d(ch, pyramid_channels, 1) for name, ch in zip(("s4", "s8", "s16", "s32"), channels)}
        )

    def feature_channels(self, stage):
        if stage.startswith("p"):
            return self.pyramid_channels
        return dict(zip(("s4", "s8", "s16", "s32"), self.channels))[stage]

    def forward_stages(self, x):
        s4 = self.down1(x)
        s8 = self.down2(s4)
        s16 = self.down3(s8)
        s32 = self.down4(s16)
        bottom_up = {"s4": s4, "s8": s8, "s16": s16, "s32": s32}
        top = self.lateral["s32"](s32)
        pyramid = {"p32": top}
        for name in ("s16", "s8", "s4"):
            lat = self.lateral[name](bottom_up[name])
            top = F.interpolate(top, size=lat.shape[2:], mode="nearest") + lat
            pyramid["p" + name[1:]] = top
        bottom_up.update(pyramid)
        return bottom_up

    def features(self, x, stage):
        if stage not in self.stages:
            raise CapabilityError(f"unknown feature stage {stage!r}")
        return self.forward_stages(x)[stage]


class ToyDetector(nn.Module):
    """Single-scale dense detector: per-cell class logits + box regression."""

    def __init__(self, num_classes, backbone=None):
        super().__init__()
        self.num_classes = num_classes
        self.backbone = backbone or ToyBackbone()
        p = self.backbone.pyramid_channels
        self.head = nn.Sequential(
            nn.Conv2d(p, p, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(p, p, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        # per cell: num_classes + 1 logits (last = background) and 4 box params
        self.predict = nn.Conv2d(p, num_classes + 1 + 4, 1)

    def head_outputs(self, x):
        feats = self.head(self.backbone.features(x, "p8"))
        out = self.predict(feats)
        logits = out[:, : self.num_classes + 1]
        boxreg = out[:, self.num_classes + 1 :]
        return logits, boxreg

    def _targets(self, shapes, targets, device, dtype):
        b, gh, gw = shapes
        cls_t = torch.full((b, gh, gw), self.num_classes, dtype=torch.long, device=device)
        box_t = torch.zeros((b, 4, gh, gw), dtype=dtype, device=device)
        box_mask = torch.zeros((b, gh, gw), dtype=torch.bool, device=device)
        s = HEAD_STRIDE
        for bi, objs in enumerate(targets):
            for class_id, (x1, y1, x2, y2) in objs:
                cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
                j = min(max(int(cx / s), 0), gw - 1)
                i = min(max(int(cy / s), 0), gh - 1)
                cls_t[bi, i, j] = class_id
                box_t[bi, 0, i, j] = (cx - (j + 0.5) * s) / s
                box_t[bi, 1, i, j] = (cy - (i + 0.5) * s) / s
                box_t[bi, 2, i, j] = np.log(max(x2 - x1, 1e-3) / (BOX_BASE * s))
                box_t[bi, 3, i, j] = np.log(max(y2 - y1, 1e-3) / (BOX_BASE * s))
                box_mask[bi, i, j] = True
        return cls_t, box_t, box_mask

    def loss(self, x, targets):
        """Classification + box-regression loss against per-image box lists."""
        logits, boxreg = self.head_outputs(x)
        b, _, gh, gw = logits.shape
        cls_t, box_t, box_mask = self._targets((b, gh, gw), targets, x.device, x.dtype)
        # background cells dominate the grid; down-weight them so sparse
        # objects are not drowned out
        weights = torch.ones(self.num_classes + 1, dtype=x.dtype, device=x.device)
        weights[self.num_classes] = 0.2
        loss_cls = F.cross_entropy(logits, cls_t, weight=weights)
        if box_mask.any():
            mask = box_mask.unsqueeze(1).expand_as(boxreg)
            loss_box = F.smooth_l1_loss(boxreg[mask], box_t[mask])
        else:
            loss_box = boxreg.sum() * 0.0
        return loss_cls + loss_box

    @torch.no_grad()
    def detect(self, x, score_thresh=0.5, iou_thresh=0.5):
        """Decode per-image detections (class_id, score, box)."""
        logits, boxreg = self.head_outputs(x)
        probs = logits.softmax(dim=1)
        b, _, gh, gw = logits.shape
        s = HEAD_STRIDE
        results = []
        for bi in range(b):
            dets = []
            p = probs[bi]
            reg = boxreg[bi]
            fg_score, fg_class = p[: self.num_classes].max(dim=0)
            for i in range(gh):
                for j in range(gw):
                    score = float(fg_score[i, j])
                    if score < score_thresh:
                        continue
                    cx = (j + 0.5) * s + float(reg[0, i, j]) * s
                    cy = (i + 0.5) * s + float(reg[1, i, j]) * s
                    w = float(np.exp(np.clip(float(reg[2, i, j]), -6, 6))) * BOX_BASE * s
                    h = float(np.exp(np.clip(float(reg[3, i, j]), -6, 6))) * BOX_BASE * s
                    dets.append(
                        (int(fg_class[i, j]), score, (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
                    )
            results.append(_nms(dets, iou_thresh))
        return results


def _box_iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(ix2 - ix1, 0.0), max(iy2 - iy1, 0.0)
    inter = iw * ih
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _nms(dets, iou_thresh):
    dets = sorted(dets, key=lambda d: -d[1])
    kept = []
    for d in dets:
        if all(not (d[0] == k[0] and _box_iou(d[2], k[2]) > iou_thresh) for k in kept):
            kept.append(d)
    return kept


class ToyAnalysis(nn.Module):
    """Adapter view of the toy detector."""

    def __init__(self, num_classes, class_names=None, backbone=None):
        super().__init__()
        self.detector = ToyDetector(num_classes, backbone=backbone)
        self.class_names = list(class_names) if class_names else [str(i) for i in range(num_classes)]

    @property
    def num_classes(self):
        return self.detector.num_classes

    @property
    def stages(self):
        return self.detector.backbone.stages

    @property
    def backbone(self):
        return self.detector.backbone

    def features(self, x, stage):
        return self.detector.backbone.features(x, stage)

    def loss(self, x, targets):
        return self.detector.loss(x, targets)

    def forward(self, x, score_thresh=0.25):
        return self.detector.detect(x, score_thresh=score_thresh)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


@torch.no_grad()
def evaluate_detector(adapter, manifest, split="val", score_thresh=0.25, images=None):
    """Frequency-weighted AP of the adapter on clean images of a split."""
    from .datasets import load_image, to_tensor
    from .metrics import weighted_ap

    preds, gts = [], []
    for name in manifest.split_names(split):
        img = images[name] if images else load_image(manifest.image_path(name))
        preds.append(adapter(to_tensor(img), score_thresh=score_thresh)[0])
        gts.append(manifest.annotations[name])
    return weighted_ap(preds, gts)


def train_toy_analysis(manifest, steps=700, batch_size=8, lr=2e-3, seed=0, min_score=0.9):
    """Fit the toy detector on a synthetic-shapes dataset and freeze it.

    Raises NumericError reporting the final score if validation quality
    ends below min_score.
    """
    from .datasets import load_image, to_tensor
    from .errors import NumericError

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    adapter = ToyAnalysis(len(manifest.class_names), manifest.class_names)
    opt = torch.optim.Adam(adapter.parameters(), lr=lr)
    train_names = manifest.split_names("train")
    images = {n: load_image(manifest.image_path(n)) for n in train_names}
    adapter.train()
    for _ in range(steps):
        batch = [train_names[i] for i in rng.integers(0, len(train_names), size=batch_size)]
        x = torch.cat([to_tensor(images[n]) for n in batch])
        targets = [manifest.annotations[n] for n in batch]
        loss = adapter.loss(x, targets)
        opt.zero_grad()
        loss.backward()
        opt.step()
    adapter.eval()
    score = evaluate_detector(adapter, manifest)
    if score < min_score:
        raise NumericError(
            f"toy analysis training did not converge: validation wAP {score:.3f} < {min_score}"
        )
    adapter.freeze()
    return adapter, score


def param_checksum(module):
    """SHA-256 over all parameter bytes, the freeze-contract witness."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


_REGISTRY = {}


def register_analysis(name):
    def deco(factory):
        _REGISTRY[name] = factory
        return factory

    return deco


def external_adapter(spec, **kwargs):
    """Resolve an analysis adapter from a registry name or 'module:attr'.

    The returned object must provide forward() and loss(); features()
    and a stride-16 stage are needed only for masking and the feature
    loss, and their absence surfaces as CapabilityError at use time.
    """
    if spec in _REGISTRY:
        adapter = _REGISTRY[spec](**kwargs)
    elif ":" in spec:
        mod_name, attr = spec.split(":", 1)
        factory = getattr(importlib.import_module(mod_name), attr)
        adapter = factory(**kwargs)
    else:
        raise ValueError(f"unknown analysis adapter {spec!r}")
    for required in ("forward",):
        if not callable(getattr(adapter, required, None)):
            raise ValueError(f"adapter {spec!r} lacks required method {required!r}")
    return adapter


def has_stride16_features(adapter):
    stages = getattr(adapter, "stages", None)
    feats = getattr(adapter, "features", None)
    return callable(feats) and isinstance(stages, dict) and 16 in stages.values()


def require_stride16(adapter):
    if not has_stride16_features(adapter):
        raise CapabilityError(
            "analysis adapter exposes no stride-16 feature stage; latent masking is unavailable"
        )


register_analysis("toy")(ToyAnalysis)
