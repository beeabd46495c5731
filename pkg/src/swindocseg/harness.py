"""Training loop, checkpointing, evaluation drivers, prediction, gradcheck."""

import json
import math
import os
import time

import numpy as np
import torch
from scipy import ndimage
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .boxes import mask_to_box, rle_encode
from .config import RunConfig, config_from_dict, config_to_dict
from .evalap import evaluate_predictions
from .matchloss import (DomainShiftSchedule, SetCriterion, TrainingError,
                        hybrid_weight)
from .model import SwinDocSegmenter
from .segbranch import filter_instances
from .synthdoc import SynthConfig, generate_dataset, read_dataset

OVERLAY_COLORS = [
    (220, 60, 60), (60, 140, 220), (70, 170, 90), (220, 160, 40),
    (150, 80, 200), (40, 190, 190), (200, 100, 160), (120, 120, 60),
]


def set_determinism(seed, threads=0):
    torch.manual_seed(seed)
    np.random.seed(seed)
    if threads > 0:
        torch.set_num_threads(threads)


def save_checkpoint(path, model, config: RunConfig, step, optimizer=None):
    """Flat parameter-name -> tensor map plus a shape manifest and config."""
    state = model.state_dict()
    payload = {
        "params": {k: v.cpu() for k, v in state.items()},
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "config": config_to_dict(config),
        "step": step,
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path, override_config=None):
    payload = torch.load(path, weights_only=False)
    cfg = override_config or config_from_dict(payload["config"])
    model = SwinDocSegmenter(cfg.model_config())
    state = model.state_dict()
    for name, value in payload["params"].items():
        if name not in state:
            raise ValueError(f"checkpoint parameter {name!r} unknown to this model")
        if list(state[name].shape) != payload["shapes"][name]:
            raise ValueError(
                f"shape mismatch for parameter {name!r}: "
                f"checkpoint {payload['shapes'][name]} vs model {list(state[name].shape)}")
    model.load_state_dict(payload["params"])
    return model, cfg, payload


def build_dataset(cfg: RunConfig):
    if cfg.data.synth_n > 0:
        scfg = SynthConfig(image_size=cfg.data.image_size,
                           num_classes=cfg.data.num_classes,
                           max_instances=cfg.data.max_instances)
        return generate_dataset(cfg.data.synth_n, scfg, seed0=cfg.data.synth_seed)
    if not cfg.data.path:
        raise ValueError("no dataset: set data.path or data.synth_n")
    return read_dataset(cfg.data.path)


def samples_to_tensors(samples, dtype=torch.float32):
    images = torch.stack([torch.as_tensor(s.image, dtype=dtype) for s in samples])
    targets = []
    for s in samples:
        targets.append({
            "labels": torch.tensor([i.class_id for i in s.instances], dtype=torch.long),
            "boxes": torch.tensor(np.array([i.box for i in s.instances]), dtype=dtype).reshape(-1, 4),
            "masks": torch.tensor(np.array([i.mask for i in s.instances]), dtype=dtype)
                     if s.instances else torch.zeros(0, *s.image.shape[1:], dtype=dtype),
        })
    return images, targets


class Trainer:
    def __init__(self, cfg: RunConfig, model=None, start_step=0, domain_shift=False):
        self.cfg = cfg
        set_determinism(cfg.optimizer.seed, cfg.threads)
        self.dtype = torch.float64 if cfg.precision == "float64" else torch.float32
        self.samples = build_dataset(cfg)
        self.model = model if model is not None else SwinDocSegmenter(cfg.model_config())
        if self.dtype == torch.float64:
            self.model.double()
        self.criterion = SetCriterion(cfg.data.num_classes, cfg.cost_weights,
                                      cfg.loss_weights)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.optimizer.lr)
        self.start_step = start_step
        self.schedule = None
        if domain_shift:
            self.schedule = DomainShiftSchedule(
                w_start=cfg.schedule.start_mult * cfg.cost_weights.w_mask,
                w_end=cfg.cost_weights.w_mask,
                total_steps=max(int(cfg.optimizer.steps * cfg.schedule.fraction), 1),
                shape=cfg.schedule.shape)
        self.rng = np.random.default_rng(cfg.optimizer.seed)
        self.log_records = []

    def mask_weight_at(self, step):
        if self.schedule is None:
            return self.cfg.cost_weights.w_mask
        return hybrid_weight(min(step, self.schedule.total_steps), self.schedule)

    def batch_at(self, step):
        idx = self.rng.choice(len(self.samples),
                              size=min(self.cfg.optimizer.batch, len(self.samples)),
                              replace=False)
        batch = [self.samples[i] for i in idx]
        return samples_to_tensors(batch, self.dtype)

    def lr_at(self, step):
        opt = self.cfg.optimizer
        if opt.lr_schedule == "constant":
            return opt.lr
        t = min(step, opt.steps) / max(opt.steps, 1)
        lo = opt.lr * opt.lr_min_mult
        return lo + (opt.lr - lo) * 0.5 * (1.0 + math.cos(math.pi * t))

    def step_once(self, step):
        for group in self.optimizer.param_groups:
            group["lr"] = self.lr_at(step)
        images, targets = self.batch_at(step)
        outputs = self.model(images, targets=targets, mode="train", rng=self.rng)
        w_eff = self.mask_weight_at(step)
        total, breakdown = self.criterion.total_loss(outputs, targets, w_mask_eff=w_eff)
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        breakdown["total"] = float(total.detach())
        breakdown["step"] = step
        return breakdown

    def run(self, log_path=None, ckpt_dir=None):
        log_f = open(log_path, "a") if log_path else None
        last_good = None
        t0 = time.time()
        try:
            for step in range(self.start_step, self.cfg.optimizer.steps):
                try:
                    record = self.step_once(step)
                except TrainingError as e:
                    raise TrainingError(
                        f"{e}; last good checkpoint: {last_good or '<none>'}") from e
                if not np.isfinite(record["total"]):
                    raise TrainingError(
                        f"NaN loss at step {step}; last good checkpoint: {last_good or '<none>'}")
                if step % self.cfg.log_every == 0 or step == self.cfg.optimizer.steps - 1:
                    record["elapsed"] = round(time.time() - t0, 2)
                    self.log_records.append(record)
                    if log_f:
                        log_f.write(json.dumps(record) + "\n")
                        log_f.flush()
                if ckpt_dir and (step + 1) % self.cfg.checkpoint_every == 0:
                    last_good = save_checkpoint(
                        os.path.join(ckpt_dir, f"step{step + 1:06d}.pt"),
                        self.model, self.cfg, step + 1, self.optimizer)
            final = None
            if ckpt_dir:
                final = save_checkpoint(os.path.join(ckpt_dir, "final.pt"),
                                        self.model, self.cfg,
                                        self.cfg.optimizer.steps, self.optimizer)
            return final
        finally:
            if log_f:
                log_f.close()


# ---------------------------------------------------------------------------
# prediction / evaluation drivers


def predict_samples(model, images, score_threshold=0.5, mask_threshold=0.5,
                    drop_background=True, box_from_mask=True):
    """Per-image instance lists at full image resolution.

    By default the reported box is the tight box of the predicted mask
    (document regions are box-shaped); the decoder's box is kept when the
    mask is empty or box_from_mask is off.
    """
    model.eval()
    H, W = images.shape[-2:]
    with torch.no_grad():
        outputs = model(images, mode="infer")
    final = outputs["layers"][-1]
    results = []
    for pred in final:
        kept = filter_instances(
            type(pred)(pred.class_logits.unsqueeze(0), pred.boxes.unsqueeze(0),
                       pred.mask_logits.unsqueeze(0)),
            score_threshold, drop_background=drop_background)[0]
        for inst in kept:
            logits = inst.pop("mask_logits")
            up = F.interpolate(logits.view(1, 1, *logits.shape), size=(H, W),
                               mode="bilinear", align_corners=False)[0, 0]
            inst["mask"] = (up.sigmoid() >= mask_threshold).cpu().numpy().astype(np.uint8)
            if box_from_mask and inst["mask"].any():
                # Tight box of the largest connected component, so stray
                # pixels elsewhere in the mask cannot inflate the box.
                labels, n = ndimage.label(inst["mask"])
                if n > 1:
                    sizes = ndimage.sum_labels(inst["mask"], labels, range(1, n + 1))
                    main = (labels == (1 + int(np.argmax(sizes)))).astype(np.uint8)
                else:
                    main = inst["mask"]
                inst["box"] = mask_to_box(main)
        results.append(kept)
    return results


def evaluate_model(model, samples, score_threshold=0.0, drop_background=False):
    """EvalReport of a model over a sample list.

    By default every query is kept and ranked by its foreground score; AP's
    score ranking handles the cutoff, as usual for set-prediction heads.
    """
    dtype = next(model.parameters()).dtype
    preds_by_image = {}
    gts_by_image = {}
    for s in samples:
        images = torch.as_tensor(s.image, dtype=dtype).unsqueeze(0)
        preds = predict_samples(model, images, score_threshold=score_threshold,
                                drop_background=drop_background)[0]
        preds_by_image[s.sample_id] = preds
        gts_by_image[s.sample_id] = [
            {"class_id": i.class_id, "box": i.box, "mask": i.mask} for i in s.instances
        ]
    num_classes = model.cfg.num_classes
    return evaluate_predictions(preds_by_image, gts_by_image, num_classes)


def render_overlay(image, instances, out_path):
    """PNG with per-class colored mask overlays and box outlines."""
    img = (np.transpose(np.asarray(image), (1, 2, 0)) * 255).astype(np.uint8).copy()
    H, W = img.shape[:2]
    for inst in instances:
        color = np.array(OVERLAY_COLORS[inst["class_id"] % len(OVERLAY_COLORS)])
        m = inst["mask"].astype(bool)
        img[m] = (0.5 * img[m] + 0.5 * color).astype(np.uint8)
    pil = Image.fromarray(img)
    draw = ImageDraw.Draw(pil)
    for inst in instances:
        cx, cy, w, h = inst["box"]
        draw.rectangle([(cx - w / 2) * W, (cy - h / 2) * H, (cx + w / 2) * W, (cy + h / 2) * H],
                       outline=tuple(OVERLAY_COLORS[inst["class_id"] % len(OVERLAY_COLORS)]),
                       width=2)
    pil.save(out_path)


def instances_to_json(instances, class_names=None, padding=None):
    records = []
    for inst in instances:
        rec = {
            "class_id": int(inst["class_id"]),
            "score": float(inst["score"]),
            "box": [float(v) for v in inst["box"]],
            "mask_rle": rle_encode(inst["mask"]),
        }
        if class_names:
            rec["class_name"] = class_names[inst["class_id"]]
        records.append(rec)
    doc = {"instances": records}
    if padding:
        doc["padding"] = padding
    return doc


def predict_image_file(model, image_path, out_dir, score_threshold=0.5):
    """Predict on one image file; auto-pads dims to multiples of 32."""
    try:
        pil = Image.open(image_path).convert("RGB")
    except OSError as e:
        raise IOError(f"unreadable image {image_path}: {e}") from e
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    H, W = arr.shape[:2]
    ph, pw = (-H) % 32, (-W) % 32
    padding = None
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), constant_values=1.0)
        padding = {"bottom": int(ph), "right": int(pw)}
    image = np.transpose(arr, (2, 0, 1))
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(image, dtype=dtype).unsqueeze(0)
    instances = predict_samples(model, images, score_threshold=score_threshold)[0]

    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(image_path))[0]
    doc = instances_to_json(instances, padding=padding)
    json_path = os.path.join(out_dir, f"{stem}.json")
    with open(json_path, "w") as f:
        json.dump(doc, f, indent=1)
    overlay_path = os.path.join(out_dir, f"{stem}_overlay.png")
    render_overlay(image, instances, overlay_path)
    return json_path, overlay_path


# ---------------------------------------------------------------------------
# gradient check


def gradcheck_model(cfg: RunConfig, num_params=10, eps=1e-5, seed=0,
                    span_prefixes=None):
    """Central finite differences on randomly chosen parameters against
    analytic gradients of the total training loss, at float64.

    span_prefixes optionally lists parameter-name prefixes; one random
    parameter is checked from each prefix before the fully random draws.
    Returns a report dict with the worst relative error.
    """
    set_determinism(seed, cfg.threads)
    model = SwinDocSegmenter(cfg.model_config()).double()
    criterion = SetCriterion(cfg.data.num_classes, cfg.cost_weights, cfg.loss_weights)
    samples = build_dataset(cfg)[:1]
    images, targets = samples_to_tensors(samples, torch.float64)

    def loss_value():
        rng = np.random.default_rng(seed)  # identical CDN draws every call
        outputs = model(images, targets=targets, mode="train", rng=rng,
                        update_prototypes=False)
        total, _ = criterion.total_loss(outputs, targets)
        return total

    total = loss_value()
    model.zero_grad()
    total.backward()

    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    picks = []
    for prefix in span_prefixes or []:
        group = [(n, p) for n, p in params if n.startswith(prefix)]
        if not group:
            raise ValueError(f"no parameters match prefix {prefix!r}")
        picks.append(group[rng.integers(len(group))])
    while len(picks) < max(num_params, len(picks)):
        picks.append(params[rng.integers(len(params))])
    report = {"checks": [], "max_rel_err": 0.0, "loss": float(total.detach())}
    for name, p in picks:
        flat = p.detach().view(-1)
        idx = int(rng.integers(flat.numel()))
        analytic = float(p.grad.view(-1)[idx]) if p.grad is not None else 0.0
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + eps
        lp = float(loss_value().detach())
        with torch.no_grad():
            flat[idx] = orig - eps
        lm = float(loss_value().detach())
        with torch.no_grad():
            flat[idx] = orig
        numeric = (lp - lm) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        rel = abs(analytic - numeric) / denom
        report["checks"].append({"param": name, "index": idx,
                                 "analytic": analytic, "numeric": numeric,
                                 "rel_err": rel})
        report["max_rel_err"] = max(report["max_rel_err"], rel)
    return report
